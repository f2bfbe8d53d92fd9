#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldpet/metrics.hpp"

namespace ldpet::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kDiverged = 4,
};

/// Runs one `ldpet` command line; never throws, returns the exit code.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// Flat `key = value` file. '#' starts a comment; keys may use '-' or '_'.
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

/// Git blob id ("blob <size>\0" + content, SHA-1) of a file.
std::string git_blob_hash(const std::filesystem::path& path);

/// One line of the comparison table.
struct TableRow {
  std::string label;
  std::string structure;
  std::string loss;
  std::string method;
  double psnr = 0;
  double nrmse = 0;
  double rfsim = 0;
  double vif = 0;
  bool diverged = false;

  nlohmann::json to_json() const;
};

/// Mean of several reports' headline metrics.
TableRow summarize(std::string label, const std::vector<MetricReport>& reports);

/// Aligned text table with the columns Structure, Loss Function, Training
/// Method, PSNR, NRMSE (%), RFSIM, VIF.
std::string format_table(const std::vector<TableRow>& rows);

/// Row labels produced by `ldpet ablate`, in order.
const std::vector<std::string>& ablation_labels();

}  // namespace ldpet::cli
