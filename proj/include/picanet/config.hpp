#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "picanet/network.hpp"
#include "picanet/train.hpp"

namespace picanet {

enum class Command { train, infer, eval, gradcheck, attnviz };

struct RunConfig {
  Command command = Command::train;
  std::string dataset;         // directory or synthetic:<seed>:<n>
  std::string checkpoint_in;
  std::string checkpoint_out;  // defaults to <output_dir>/final.ckpt
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  NetworkSpec network = NetworkSpec::toy();
  TrainConfig train;
  // eval
  std::string pred_dir, gt_dir;
  // attnviz
  std::string image;
  std::vector<std::pair<int, int>> pixels;

  void validate_for(Command cmd) const;
};

// Strict parse: unknown keys or wrong types anywhere fail before any work
// starts. Every field is optional and falls back to the defaults above.
RunConfig parse_run_config(const std::string& json_text);

RunConfig load_run_config(const std::string& path);

// CLI overrides, applied after the file (empty/absent values leave the
// config untouched).
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> placement;
  std::optional<int> steps;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
  std::optional<std::string> checkpoint_in;
  std::optional<std::string> checkpoint_out;
};

void apply_overrides(RunConfig& cfg, const CliOverrides& ov);

std::string to_string(Command c);

}  // namespace picanet
