#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "picanet/commands.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates multi-megabyte activations every step; keep them on
  // the heap free lists instead of round-tripping through mmap/munmap.
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
  CLI::App app{"pixel-wise contextual attention saliency detector"};
  app.require_subcommand(1);

  std::string config_path;
  picanet::CliOverrides ov;
  std::string image_val, pixels_val;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { ov.seed = v; }, "seed override");
    cmd->add_option_function<std::string>(
        "--placement", [&](const std::string& v) { ov.placement = v; },
        "placement codes, one per decoding module");
    cmd->add_option_function<int>(
        "--steps", [&](const int& v) { ov.steps = v; }, "max training steps override");
    cmd->add_option_function<std::string>(
        "--out", [&](const std::string& v) { ov.out = v; }, "output directory");
    cmd->add_option_function<std::string>(
        "--dataset", [&](const std::string& v) { ov.dataset = v; },
        "directory or synthetic:<seed>:<n>");
    cmd->add_option_function<std::string>(
        "--checkpoint", [&](const std::string& v) { ov.checkpoint_in = v; },
        "checkpoint to load");
    cmd->add_option_function<std::string>(
        "--checkpoint-out", [&](const std::string& v) { ov.checkpoint_out = v; },
        "checkpoint to write");
  };

  CLI::App* train = app.add_subcommand("train", "train a model");
  CLI::App* infer = app.add_subcommand("infer", "write saliency maps for a dataset");
  CLI::App* evalc = app.add_subcommand("eval", "score predictions against ground truth");
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  CLI::App* attnviz = app.add_subcommand("attnviz", "export per-pixel attention maps");
  for (CLI::App* c : {train, infer, evalc, gradcheck, attnviz}) add_common(c);

  std::string pred_dir, gt_dir;
  evalc->add_option("--pred", pred_dir, "prediction directory");
  evalc->add_option("--gt", gt_dir, "ground-truth directory");
  attnviz->add_option("--image", image_val, "input image");
  attnviz->add_option("--pixels", pixels_val, "semicolon-separated x,y pairs, e.g. 10,12;40,3");

  CLI11_PARSE(app, argc, argv);

  try {
    picanet::RunConfig cfg =
        config_path.empty() ? picanet::RunConfig{} : picanet::load_run_config(config_path);
    picanet::apply_overrides(cfg, ov);
    if (!pred_dir.empty()) cfg.pred_dir = pred_dir;
    if (!gt_dir.empty()) cfg.gt_dir = gt_dir;
    if (!image_val.empty()) cfg.image = image_val;
    if (!pixels_val.empty()) {
      cfg.pixels.clear();
      std::string rest = pixels_val;
      while (!rest.empty()) {
        const auto semi = rest.find(';');
        const std::string tok = rest.substr(0, semi);
        rest = semi == std::string::npos ? "" : rest.substr(semi + 1);
        const auto comma = tok.find(',');
        if (comma == std::string::npos)
          throw std::invalid_argument("--pixels entries must be x,y pairs");
        cfg.pixels.emplace_back(std::stoi(tok.substr(0, comma)), std::stoi(tok.substr(comma + 1)));
      }
    }

    if (train->parsed()) cfg.command = picanet::Command::train;
    if (infer->parsed()) cfg.command = picanet::Command::infer;
    if (evalc->parsed()) cfg.command = picanet::Command::eval;
    if (gradcheck->parsed()) cfg.command = picanet::Command::gradcheck;
    if (attnviz->parsed()) cfg.command = picanet::Command::attnviz;
    return picanet::run_command(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
