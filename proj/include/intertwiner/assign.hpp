#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "intertwiner/errors.hpp"

namespace intertwiner::assign {

struct Proposal {
  double width = 0.0;   // input-image pixels
  double height = 0.0;
  std::optional<int> class_id;
};

enum class SplitStrategy { kDefault, kByRoiSize, kMoreOnHigher };
enum class LogBase { kTwo, kNatural };

SplitStrategy strategy_from_name(const std::string& name);
const char* strategy_name(SplitStrategy s);

struct AssignmentConfig {
  int canonical_level = 4;  // a0
  double base = 224.0;      // canonical pretraining size
  int min_level = 2;
  int max_level = 5;
  int roi_out = 14;
  int image_size = 512;
  std::vector<int> strides = {4, 8, 16, 32};  // per level, min..max
  SplitStrategy strategy = SplitStrategy::kDefault;
  LogBase log_base = LogBase::kTwo;
  double more_on_higher_base = 40.0;

  void validate() const;
  int stride_for(int level) const;
};

// level = clamp(floor(a0 + log2(sqrt(w*h)/base)), min, max).
// The more_on_higher strategy substitutes its smaller base; by_roi_size does
// not alter level assignment (it changes the small/large split).
int assign_level(const Proposal& p, const AssignmentConfig& cfg);

// (roi_out / (image_size / stride))^2 — the RoI-output to feature-map area
// ratio below which a proposal's features are up-sampled during RoI.
double roi_threshold(int level, const AssignmentConfig& cfg);

struct LevelSets {
  int level = 0;
  std::vector<std::size_t> small;  // indices into the input span
  std::vector<std::size_t> large;
};

// Default split: small(l) = proposals assigned to l, large(l) = union of
// proposals assigned above l. by_roi_size splits level-l proposals by the
// normalized-area threshold instead.
std::vector<LevelSets> split_sets(std::span<const Proposal> proposals,
                                  const AssignmentConfig& cfg);

struct LevelBreakdown {
  struct Row {
    int level = 0;
    int count = 0;
    double threshold = 0.0;
    int below = 0;
    int above = 0;
    int small_count = 0;
    int large_count = 0;
  };
  std::vector<Row> rows;
  int total = 0;
};

LevelBreakdown breakdown_report(std::span<const Proposal> proposals,
                                const AssignmentConfig& cfg);

std::string render_text(const LevelBreakdown& b);
nlohmann::json render_json(const LevelBreakdown& b);

// CSV rows: width,height[,class_id]. Empty file means no proposals.
std::vector<Proposal> proposals_from_csv_text(const std::string& text);
std::vector<Proposal> read_proposals_csv(const std::filesystem::path& path);

}  // namespace intertwiner::assign
