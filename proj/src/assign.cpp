#include "intertwiner/assign.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "intertwiner/io.hpp"

namespace intertwiner::assign {

SplitStrategy strategy_from_name(const std::string& name) {
  if (name == "default") return SplitStrategy::kDefault;
  if (name == "by_roi_size") return SplitStrategy::kByRoiSize;
  if (name == "more_on_higher") return SplitStrategy::kMoreOnHigher;
  throw SchemaError("unknown assignment strategy '" + name +
                    "' (expected default|by_roi_size|more_on_higher)");
}

const char* strategy_name(SplitStrategy s) {
  switch (s) {
    case SplitStrategy::kDefault: return "default";
    case SplitStrategy::kByRoiSize: return "by_roi_size";
    case SplitStrategy::kMoreOnHigher: return "more_on_higher";
  }
  return "default";
}

void AssignmentConfig::validate() const {
  if (min_level > max_level)
    throw InvalidInputError("assignment: min_level must be <= max_level");
  if (!(base > 0.0) || !(more_on_higher_base > 0.0))
    throw InvalidInputError("assignment: base values must be > 0");
  if (roi_out < 1) throw InvalidInputError("assignment: roi_out must be >= 1");
  if (image_size < 1) throw InvalidInputError("assignment: image_size must be >= 1");
  if (static_cast<int>(strides.size()) != max_level - min_level + 1)
    throw InvalidInputError("assignment: need one stride per level");
  for (std::size_t i = 1; i < strides.size(); ++i)
    if (strides[i] <= strides[i - 1])
      throw InvalidInputError("assignment: strides must be strictly increasing");
}

int AssignmentConfig::stride_for(int level) const {
  if (level < min_level || level > max_level)
    throw InvalidInputError("assignment: level " + std::to_string(level) +
                            " outside [" + std::to_string(min_level) + ", " +
                            std::to_string(max_level) + "]");
  return strides[static_cast<std::size_t>(level - min_level)];
}

int assign_level(const Proposal& p, const AssignmentConfig& cfg) {
  if (!(p.width > 0.0) || !(p.height > 0.0))
    throw InvalidInputError("assign_level: proposal sides must be > 0");
  const double base = cfg.strategy == SplitStrategy::kMoreOnHigher
                          ? cfg.more_on_higher_base
                          : cfg.base;
  const double side = std::sqrt(p.width * p.height);
  const double shift = cfg.log_base == LogBase::kTwo ? std::log2(side / base)
                                                     : std::log(side / base);
  const int level =
      static_cast<int>(std::floor(static_cast<double>(cfg.canonical_level) + shift));
  return std::clamp(level, cfg.min_level, cfg.max_level);
}

double roi_threshold(int level, const AssignmentConfig& cfg) {
  const double cells =
      static_cast<double>(cfg.image_size) / static_cast<double>(cfg.stride_for(level));
  const double ratio = static_cast<double>(cfg.roi_out) / cells;
  return ratio * ratio;
}

std::vector<LevelSets> split_sets(std::span<const Proposal> proposals,
                                  const AssignmentConfig& cfg) {
  cfg.validate();
  const int n_levels = cfg.max_level - cfg.min_level + 1;
  std::vector<LevelSets> out(static_cast<std::size_t>(n_levels));
  for (int l = 0; l < n_levels; ++l) out[static_cast<std::size_t>(l)].level = cfg.min_level + l;

  std::vector<int> assigned(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i)
    assigned[i] = assign_level(proposals[i], cfg);

  const double image_area =
      static_cast<double>(cfg.image_size) * static_cast<double>(cfg.image_size);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const int li = assigned[i] - cfg.min_level;
    if (cfg.strategy == SplitStrategy::kByRoiSize) {
      const double norm_area = proposals[i].width * proposals[i].height / image_area;
      if (norm_area < roi_threshold(assigned[i], cfg)) {
        out[static_cast<std::size_t>(li)].small.push_back(i);
      } else {
        out[static_cast<std::size_t>(li)].large.push_back(i);
      }
    } else {
      out[static_cast<std::size_t>(li)].small.push_back(i);
      for (int m = 0; m < li; ++m) out[static_cast<std::size_t>(m)].large.push_back(i);
    }
  }
  return out;
}

LevelBreakdown breakdown_report(std::span<const Proposal> proposals,
                                const AssignmentConfig& cfg) {
  cfg.validate();
  const auto sets = split_sets(proposals, cfg);
  const double image_area =
      static_cast<double>(cfg.image_size) * static_cast<double>(cfg.image_size);
  LevelBreakdown b;
  b.total = static_cast<int>(proposals.size());
  for (const auto& s : sets) {
    LevelBreakdown::Row row;
    row.level = s.level;
    row.threshold = roi_threshold(s.level, cfg);
    row.small_count = static_cast<int>(s.small.size());
    row.large_count = static_cast<int>(s.large.size());
    // count = proposals assigned to the level regardless of split strategy
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (assign_level(proposals[i], cfg) != s.level) continue;
      ++row.count;
      const double norm_area = proposals[i].width * proposals[i].height / image_area;
      if (norm_area < row.threshold) {
        ++row.below;
      } else {
        ++row.above;
      }
    }
    b.rows.push_back(row);
  }
  return b;
}

std::string render_text(const LevelBreakdown& b) {
  std::ostringstream out;
  out << "level  proposals  threshold  below  above  small  large\n";
  char line[128];
  for (const auto& r : b.rows) {
    std::snprintf(line, sizeof(line), "%5d  %9d  %9.6g  %5d  %5d  %5d  %5d\n",
                  r.level, r.count, r.threshold, r.below, r.above, r.small_count,
                  r.large_count);
    out << line;
  }
  out << "total  " << b.total << "\n";
  return out.str();
}

nlohmann::json render_json(const LevelBreakdown& b) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& r : b.rows) {
    levels.push_back({{"level", r.level},
                      {"count", r.count},
                      {"threshold", r.threshold},
                      {"below", r.below},
                      {"above", r.above},
                      {"small", r.small_count},
                      {"large", r.large_count}});
  }
  return nlohmann::json{{"levels", std::move(levels)}, {"total", b.total}};
}

std::vector<Proposal> proposals_from_csv_text(const std::string& text) {
  std::vector<Proposal> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      fields.push_back(line.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 2 && fields.size() != 3)
      throw SchemaError("proposal CSV line " + std::to_string(line_no) +
                        ": expected width,height[,class_id]");
    Proposal p;
    const auto parse_double = [&](const std::string& f) {
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size())
        throw SchemaError("proposal CSV line " + std::to_string(line_no) +
                          ": bad numeric field '" + f + "'");
      return v;
    };
    p.width = parse_double(fields[0]);
    p.height = parse_double(fields[1]);
    if (fields.size() == 3) {
      int cls = 0;
      auto [ptr, ec] =
          std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(), cls);
      if (ec != std::errc() || ptr != fields[2].data() + fields[2].size())
        throw SchemaError("proposal CSV line " + std::to_string(line_no) +
                          ": bad class id '" + fields[2] + "'");
      p.class_id = cls;
    }
    if (!(p.width > 0.0) || !(p.height > 0.0))
      throw SchemaError("proposal CSV line " + std::to_string(line_no) +
                        ": sides must be positive");
    out.push_back(p);
  }
  return out;
}

std::vector<Proposal> read_proposals_csv(const std::filesystem::path& path) {
  return proposals_from_csv_text(read_text_file(path));
}

}  // namespace intertwiner::assign
