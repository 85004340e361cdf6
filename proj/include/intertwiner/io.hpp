#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace intertwiner {

// Machine outputs carry 17 significant digits (lossless double round-trip);
// human-facing tables use 6.
std::string format_double(double value, int significant_digits = 17);

std::string matrix_to_csv(const Eigen::MatrixXd& m, int significant_digits = 17);
Eigen::MatrixXd matrix_from_csv_text(const std::string& text);

Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);

std::string read_text_file(const std::filesystem::path& path);

// All file outputs go through write-to-temp + atomic rename so a failure
// never leaves a partially written file behind.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace intertwiner
