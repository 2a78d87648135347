#include "picanet/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>

#include <json.hpp>

#include "picanet/checkpoint.hpp"
#include "picanet/gradcheck.hpp"
#include "picanet/image_io.hpp"
#include "picanet/metrics.hpp"

namespace picanet {
namespace {

namespace fs = std::filesystem;

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string final_ckpt_path(const RunConfig& cfg) {
  return cfg.checkpoint_out.empty() ? (fs::path(cfg.output_dir) / "final.ckpt").string()
                                    : cfg.checkpoint_out;
}

// *.png entries that are not *_mask.png, sorted
std::vector<std::string> png_stems(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string fn = e.path().filename().string();
    if (fn.size() < 4 || fn.substr(fn.size() - 4) != ".png") continue;
    const std::string stem = fn.substr(0, fn.size() - 4);
    if (stem.size() >= 5 && stem.substr(stem.size() - 5) == "_mask") continue;
    names.push_back(stem);
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

void run_train(const RunConfig& cfg) {
  cfg.validate_for(Command::train);
  fs::create_directories(cfg.output_dir);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  auto data = load_dataset<float>(parse_dataset_spec(cfg.dataset), cfg.network.input_size);
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, cfg.network, cfg.seed);

  std::ofstream log((fs::path(cfg.output_dir) / "train_log.jsonl").string(), std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write the training log");

  TrainHooks hooks;
  hooks.on_step = [&](int step, double lr, double loss) {
    log << "{\"step\":" << step << ",\"lr\":" << g17(lr) << ",\"loss\":" << g17(loss) << "}\n";
    if ((step + 1) % tc.decay_steps == 0 && step + 1 < tc.max_steps)
      save_checkpoint((fs::path(cfg.output_dir) / ("ckpt_step" + std::to_string(step + 1) + ".ckpt"))
                          .string(),
                      reg);
  };
  hooks.on_epoch = [&](int epoch, int step, const MetricReport& r) {
    log << "{\"epoch\":" << epoch << ",\"step\":" << step << ",\"mae\":" << g17(r.mae)
        << ",\"f_beta_max\":" << g17(r.f_beta_max)
        << ",\"f_beta_adaptive\":" << g17(r.f_beta_adaptive)
        << ",\"f_beta_weighted\":" << g17(r.f_beta_weighted) << "}\n";
  };

  const TrainOutcome out = train_model(cfg.network, reg, params, data, tc, hooks);
  log.flush();
  save_checkpoint(final_ckpt_path(cfg), reg);
  std::cout << "trained " << out.steps << " steps, final loss " << g17(out.final_loss)
            << ", checkpoint " << final_ckpt_path(cfg) << "\n";
}

void run_infer(const RunConfig& cfg) {
  cfg.validate_for(Command::infer);
  fs::create_directories(cfg.output_dir);
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, cfg.network, cfg.seed);
  load_checkpoint(cfg.checkpoint_in, reg);

  struct Input {
    std::string name;
    Tensor<float> image;  // 3 x S x S
    int orig_h, orig_w;
  };
  std::vector<Input> inputs;
  const int S = cfg.network.input_size;
  const DatasetSpec dspec = parse_dataset_spec(cfg.dataset);
  if (dspec.synthetic) {
    for (auto& s : synth_dataset<float>(dspec.seed, dspec.n, S))
      inputs.push_back({s.name, s.image, S, S});
  } else {
    for (const auto& stem : png_stems(dspec.dir)) {
      Tensor<float> img = read_png_rgb<float>((fs::path(dspec.dir) / (stem + ".png")).string());
      inputs.push_back({stem, bilinear_resize(img, S, S), img.dim(1), img.dim(2)});
    }
    if (inputs.empty()) throw std::invalid_argument("no PNG inputs in " + dspec.dir);
  }

  const int batch = std::max(1, cfg.train.batch);
  for (std::size_t at = 0; at < inputs.size(); at += static_cast<std::size_t>(batch)) {
    const std::size_t hi = std::min(inputs.size(), at + static_cast<std::size_t>(batch));
    Tensor<float> images = Tensor<float>::zeros({static_cast<int>(hi - at), 3, S, S});
    for (std::size_t i = at; i < hi; ++i)
      std::copy(inputs[i].image.data(), inputs[i].image.data() + inputs[i].image.numel(),
                images.data() + (i - at) * inputs[i].image.numel());
    auto out = network_forward<float>(nullptr, images, cfg.network, params, BNMode::eval);
    const auto& fin = out.final_map;
    const std::size_t plane = static_cast<std::size_t>(fin.dim(2)) * fin.dim(3);
    for (std::size_t i = at; i < hi; ++i) {
      Tensor<float> p = Tensor<float>::zeros({1, fin.dim(2), fin.dim(3)});
      std::copy(fin.data() + (i - at) * plane, fin.data() + (i - at + 1) * plane, p.data());
      if (p.dim(1) != inputs[i].orig_h || p.dim(2) != inputs[i].orig_w)
        p = bilinear_resize(p, inputs[i].orig_h, inputs[i].orig_w);
      write_png_gray((fs::path(cfg.output_dir) / (inputs[i].name + ".png")).string(), p);
    }
  }
  std::cout << "wrote " << inputs.size() << " saliency maps to " << cfg.output_dir << "\n";
}

void run_eval(const RunConfig& cfg) {
  cfg.validate_for(Command::eval);
  fs::create_directories(cfg.output_dir);
  auto preds = png_stems(cfg.pred_dir);
  auto gts = png_stems(cfg.gt_dir);
  std::vector<std::string> only_pred, only_gt;
  std::set_difference(preds.begin(), preds.end(), gts.begin(), gts.end(),
                      std::back_inserter(only_pred));
  std::set_difference(gts.begin(), gts.end(), preds.begin(), preds.end(),
                      std::back_inserter(only_gt));
  if (!only_pred.empty() || !only_gt.empty()) {
    std::string msg = "unmatched files between the directories;";
    for (const auto& n : only_pred) msg += " prediction-only: " + n;
    for (const auto& n : only_gt) msg += " ground-truth-only: " + n;
    throw std::invalid_argument(msg);
  }
  if (preds.empty()) throw std::invalid_argument("no predictions in " + cfg.pred_dir);

  std::vector<Tensor<float>> ps, gs;
  for (const auto& n : preds) {
    Tensor<float> p = read_png_gray<float>((fs::path(cfg.pred_dir) / (n + ".png")).string());
    Tensor<float> g = read_png_gray<float>((fs::path(cfg.gt_dir) / (n + ".png")).string());
    if (p.dim(1) != g.dim(1) || p.dim(2) != g.dim(2))
      throw std::invalid_argument("size mismatch for " + n);
    for (auto& v : g.vals()) v = v * 255.0f >= 127.5f ? 1.0f : 0.0f;
    ps.push_back(std::move(p));
    gs.push_back(std::move(g));
  }
  const MetricReport rep = compute_report(ps, gs);

  {
    std::ofstream f((fs::path(cfg.output_dir) / "report.json").string(), std::ios::trunc);
    f << "{\"f_beta_max\":" << g17(rep.f_beta_max)
      << ",\"f_beta_adaptive\":" << g17(rep.f_beta_adaptive)
      << ",\"f_beta_weighted\":" << g17(rep.f_beta_weighted) << ",\"mae\":" << g17(rep.mae)
      << "}\n";
  }
  {
    std::ofstream f((fs::path(cfg.output_dir) / "pr.csv").string(), std::ios::trunc);
    f << "threshold,precision,recall\n";
    for (int k = 0; k < 256; ++k)
      f << g17(k / 255.0) << "," << g17(rep.precision[static_cast<std::size_t>(k)]) << ","
        << g17(rep.recall[static_cast<std::size_t>(k)]) << "\n";
  }
  std::cout << "f_beta_max " << g17(rep.f_beta_max) << ", f_beta_adaptive "
            << g17(rep.f_beta_adaptive) << ", f_beta_weighted " << g17(rep.f_beta_weighted)
            << ", mae " << g17(rep.mae) << "\n";
}

void run_gradcheck(const RunConfig& cfg) {
  const GradCheckReport rep = run_gradcheck_suite(cfg.seed);
  std::string first_fail;
  for (const auto& r : rep.rows) {
    std::printf("%-24s %-10.3e %s\n", r.op.c_str(), r.max_rel_err, r.pass ? "pass" : "FAIL");
    if (!r.pass && first_fail.empty()) first_fail = r.op;
  }
  std::printf("threshold %.1e, %zu rows\n", rep.threshold, rep.rows.size());
  if (!rep.all_pass) throw NumericError("gradient check failed for " + first_fail);
}

void run_attnviz(const RunConfig& cfg) {
  cfg.validate_for(Command::attnviz);
  fs::create_directories(cfg.output_dir);
  ParamRegistry<float> reg;
  NetworkSpec spec = cfg.network;
  ModelParams<float> params = register_model(reg, spec, cfg.seed);
  load_checkpoint(cfg.checkpoint_in, reg);

  Tensor<float> orig = read_png_rgb<float>(cfg.image);
  const int oh = orig.dim(1), ow = orig.dim(2);
  for (const auto& [x, y] : cfg.pixels)
    if (x < 0 || y < 0 || x >= ow || y >= oh)
      throw std::invalid_argument("pixel (" + std::to_string(x) + "," + std::to_string(y) +
                                  ") is outside the image");
  const int S = spec.input_size;
  Tensor<float> img = bilinear_resize(orig, S, S);
  Tensor<float> batch = Tensor<float>::zeros({1, 3, S, S});
  std::copy(img.data(), img.data() + img.numel(), batch.data());
  auto out = network_forward<float>(nullptr, batch, spec, params, BNMode::eval);

  int written = 0;
  for (std::size_t k = 0; k < spec.decoders.size(); ++k) {
    if (!out.attention[k]) continue;
    const auto& field = *out.attention[k];
    const auto& wts = field.weights;  // 1 x D x hm x wm
    const int hm = wts.dim(2), wm = wts.dim(3);
    const int aw = field.grid_w, ah = field.grid_h, d = field.dilation;
    for (const auto& [x, y] : cfg.pixels) {
      const int xm = std::min(wm - 1, x * wm / ow);
      const int ym = std::min(hm - 1, y * hm / oh);
      std::vector<double> weights(static_cast<std::size_t>(aw) * ah);
      double wmax = 0, wsum = 0;
      for (int i = 0; i < aw * ah; ++i) {
        const float v = wts.data()[(static_cast<std::size_t>(i) * hm + ym) * wm + xm];
        weights[static_cast<std::size_t>(i)] = v;
        wmax = std::max(wmax, static_cast<double>(v));
        wsum += v;
      }
      // nearest-upsampled grid over the context footprint
      const int fw = (aw - 1) * d + 1, fh = (ah - 1) * d + 1;
      Tensor<float> png = Tensor<float>::zeros({1, fh, fw});
      for (int r = 0; r < fh; ++r)
        for (int c = 0; c < fw; ++c) {
          const int gi = std::min(ah - 1, static_cast<int>(std::lround(r / static_cast<double>(d))));
          const int gj = std::min(aw - 1, static_cast<int>(std::lround(c / static_cast<double>(d))));
          png.data()[static_cast<std::size_t>(r) * fw + c] = static_cast<float>(
              wmax > 0 ? weights[static_cast<std::size_t>(gi * aw + gj)] / wmax : 0.0);
        }
      const std::string base = "attn_mod" + std::to_string(spec.decoders[k].index) + "_x" +
                               std::to_string(x) + "_y" + std::to_string(y);
      write_png_gray((fs::path(cfg.output_dir) / (base + ".png")).string(), png);
      nlohmann::json j;
      j["module"] = spec.decoders[k].index;
      j["placement"] = std::string(1, spec.decoders[k].placement);
      j["pixel"] = {x, y};
      j["map_pixel"] = {xm, ym};
      j["grid"] = {aw, ah};
      j["dilation"] = d;
      j["weight_sum"] = wsum;
      j["weights"] = weights;
      std::ofstream jf((fs::path(cfg.output_dir) / (base + ".json")).string(), std::ios::trunc);
      jf << j.dump(2) << "\n";
      ++written;
    }
  }
  if (written == 0)
    throw std::invalid_argument("no decoding module carries attention under placement " +
                                spec.placement());
  std::cout << "wrote " << written << " attention exports to " << cfg.output_dir << "\n";
}

int run_command(const RunConfig& cfg) {
  try {
    switch (cfg.command) {
      case Command::train: run_train(cfg); break;
      case Command::infer: run_infer(cfg); break;
      case Command::eval: run_eval(cfg); break;
      case Command::gradcheck: run_gradcheck(cfg); break;
      case Command::attnviz: run_attnviz(cfg); break;
    }
    return 0;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace picanet
