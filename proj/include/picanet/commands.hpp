#pragma once

#include "picanet/config.hpp"

namespace picanet {

// Training/inference/attnviz run in single precision; gradcheck always runs
// in double. Each command writes only under cfg.output_dir (plus
// cfg.checkpoint_out) and is deterministic for a fixed config and seed.
void run_train(const RunConfig& cfg);
void run_infer(const RunConfig& cfg);
void run_eval(const RunConfig& cfg);
void run_gradcheck(const RunConfig& cfg);
void run_attnviz(const RunConfig& cfg);

// Dispatch on cfg.command; maps exceptions to the CLI exit convention:
// 0 success, 1 validation/config/data error, 2 numeric failure.
int run_command(const RunConfig& cfg);

}  // namespace picanet
