#include "picanet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace picanet {
namespace {

using nlohmann::json;

void expect_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename V>
void get_to(const json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: bad value for \"" + std::string(key) + "\" in " + where +
                                ": " + e.what());
  }
}

void parse_grid(const json& obj, const char* key, int& gw, int& gh, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& a = obj.at(key);
  if (!a.is_array() || a.size() != 2)
    throw std::invalid_argument("config: \"" + std::string(key) + "\" in " + where +
                                " must be [w, h]");
  try {
    gw = a.at(0).get<int>();
    gh = a.at(1).get<int>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: bad grid in " + where + ": " + e.what());
  }
}

void parse_network(const json& j, NetworkSpec& net) {
  expect_keys(j, "network",
              {"input_size", "encoder", "global", "local", "loss_weights", "placement"});
  get_to(j, "input_size", net.input_size, "network");
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    expect_keys(e, "network.encoder", {"in_channels", "channels", "pool", "dilation"});
    EncoderSpec enc = net.encoder;
    get_to(e, "in_channels", enc.in_channels, "network.encoder");
    get_to(e, "channels", enc.channels, "network.encoder");
    get_to(e, "pool", enc.pool, "network.encoder");
    get_to(e, "dilation", enc.dilation, "network.encoder");
    enc.validate();
    // rebuild the decoder chain to pair with the (possibly changed) encoder
    net.encoder = enc;
    net.decoders.clear();
    const double toy_w[] = {0.5, 0.5, 0.8, 0.8, 1.0};
    for (int i = enc.blocks(); i >= 1; --i) {
      DecoderModuleSpec d;
      d.index = i;
      d.channels = enc.channels[static_cast<std::size_t>(i - 1)];
      d.loss_weight = enc.blocks() == 5 ? toy_w[enc.blocks() - i] : 1.0;
      net.decoders.push_back(d);
    }
  }
  GlobalPiCANetConfig g;
  LocalPiCANetConfig l;
  if (!net.decoders.empty()) {
    g = net.decoders.front().global;
    l = net.decoders.front().local;
  }
  if (j.contains("global")) {
    const auto& jg = j.at("global");
    expect_keys(jg, "network.global",
                {"renet_hidden", "attn_grid", "dilation", "bn_before_softmax"});
    get_to(jg, "renet_hidden", g.renet_hidden, "network.global");
    parse_grid(jg, "attn_grid", g.attn_grid_w, g.attn_grid_h, "network.global");
    get_to(jg, "dilation", g.dilation, "network.global");
    get_to(jg, "bn_before_softmax", g.use_bn_before_softmax, "network.global");
  }
  if (j.contains("local")) {
    const auto& jl = j.at("local");
    expect_keys(jl, "network.local",
                {"context_kernel", "context_dilation", "context_channels", "attn_grid",
                 "attend_dilation"});
    get_to(jl, "context_kernel", l.context_kernel, "network.local");
    get_to(jl, "context_dilation", l.context_dilation, "network.local");
    get_to(jl, "context_channels", l.context_channels, "network.local");
    parse_grid(jl, "attn_grid", l.attn_grid_w, l.attn_grid_h, "network.local");
    get_to(jl, "attend_dilation", l.attend_dilation, "network.local");
  }
  for (auto& d : net.decoders) {
    d.global = g;
    d.local = l;
  }
  if (j.contains("loss_weights")) {
    std::vector<double> w;
    get_to(j, "loss_weights", w, "network");
    if (w.size() != net.decoders.size())
      throw std::invalid_argument("config: loss_weights needs one entry per decoding module");
    for (std::size_t i = 0; i < w.size(); ++i) net.decoders[i].loss_weight = w[i];
  }
  if (j.contains("placement")) {
    std::string p;
    get_to(j, "placement", p, "network");
    net.set_placement(p);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  expect_keys(j, "config root",
              {"dataset", "checkpoint_in", "checkpoint_out", "output_dir", "seed", "network",
               "train", "eval", "attnviz", "placement"});
  get_to(j, "dataset", cfg.dataset, "config root");
  get_to(j, "checkpoint_in", cfg.checkpoint_in, "config root");
  get_to(j, "checkpoint_out", cfg.checkpoint_out, "config root");
  get_to(j, "output_dir", cfg.output_dir, "config root");
  get_to(j, "seed", cfg.seed, "config root");
  if (j.contains("network")) parse_network(j.at("network"), cfg.network);
  if (j.contains("placement")) {  // top-level shorthand
    std::string p;
    get_to(j, "placement", p, "config root");
    cfg.network.set_placement(p);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t, "train",
                {"base_lr", "encoder_lr_multiplier", "momentum", "weight_decay", "batch",
                 "max_steps", "decay_factor", "decay_steps"});
    get_to(t, "base_lr", cfg.train.base_lr, "train");
    get_to(t, "encoder_lr_multiplier", cfg.train.encoder_lr_multiplier, "train");
    get_to(t, "momentum", cfg.train.momentum, "train");
    get_to(t, "weight_decay", cfg.train.weight_decay, "train");
    get_to(t, "batch", cfg.train.batch, "train");
    get_to(t, "max_steps", cfg.train.max_steps, "train");
    get_to(t, "decay_factor", cfg.train.decay_factor, "train");
    get_to(t, "decay_steps", cfg.train.decay_steps, "train");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    expect_keys(e, "eval", {"pred_dir", "gt_dir"});
    get_to(e, "pred_dir", cfg.pred_dir, "eval");
    get_to(e, "gt_dir", cfg.gt_dir, "eval");
  }
  if (j.contains("attnviz")) {
    const auto& a = j.at("attnviz");
    expect_keys(a, "attnviz", {"image", "pixels"});
    get_to(a, "image", cfg.image, "attnviz");
    if (a.contains("pixels")) {
      const auto& px = a.at("pixels");
      if (!px.is_array()) throw std::invalid_argument("config: attnviz.pixels must be an array");
      for (const auto& p : px) {
        if (!p.is_array() || p.size() != 2)
          throw std::invalid_argument("config: each pixel must be [x, y]");
        try {
          cfg.pixels.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
        } catch (const json::exception& e2) {
          throw std::invalid_argument(std::string("config: bad pixel: ") + e2.what());
        }
      }
    }
  }
  cfg.network.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

void apply_overrides(RunConfig& cfg, const CliOverrides& ov) {
  if (ov.seed) {
    cfg.seed = *ov.seed;
    cfg.train.seed = *ov.seed;
  }
  if (ov.placement) cfg.network.set_placement(*ov.placement);
  if (ov.steps) {
    if (*ov.steps < 0) throw std::invalid_argument("--steps must be >= 0");
    cfg.train.max_steps = *ov.steps;
    if (cfg.train.decay_steps > cfg.train.max_steps && cfg.train.max_steps > 0)
      cfg.train.decay_steps = cfg.train.max_steps;
  }
  if (ov.out) cfg.output_dir = *ov.out;
  if (ov.dataset) cfg.dataset = *ov.dataset;
  if (ov.checkpoint_in) cfg.checkpoint_in = *ov.checkpoint_in;
  if (ov.checkpoint_out) cfg.checkpoint_out = *ov.checkpoint_out;
}

void RunConfig::validate_for(Command cmd) const {
  network.validate();
  switch (cmd) {
    case Command::train:
      train.validate();
      if (dataset.empty()) throw std::invalid_argument("train needs a dataset");
      break;
    case Command::infer:
      if (checkpoint_in.empty()) throw std::invalid_argument("infer needs --checkpoint");
      if (dataset.empty()) throw std::invalid_argument("infer needs a dataset");
      break;
    case Command::eval:
      if (pred_dir.empty() || gt_dir.empty())
        throw std::invalid_argument("eval needs prediction and ground-truth directories");
      break;
    case Command::gradcheck:
      break;
    case Command::attnviz:
      if (checkpoint_in.empty()) throw std::invalid_argument("attnviz needs --checkpoint");
      if (image.empty()) throw std::invalid_argument("attnviz needs an image");
      if (pixels.empty()) throw std::invalid_argument("attnviz needs at least one pixel");
      break;
  }
}

std::string to_string(Command c) {
  switch (c) {
    case Command::train: return "train";
    case Command::infer: return "infer";
    case Command::eval: return "eval";
    case Command::gradcheck: return "gradcheck";
    case Command::attnviz: return "attnviz";
  }
  return "?";
}

}  // namespace picanet
