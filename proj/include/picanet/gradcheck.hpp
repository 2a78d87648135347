#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "picanet/tape.hpp"
#include "picanet/tensor.hpp"

namespace picanet {

// Compares analytic gradients against central finite differences for a
// scalar-valued function of the target tensors. Error metric per coordinate:
// |ga - gf| / max(1e-8, |ga| + |gf|); the maximum over coordinates is
// returned. sample_coords > 0 checks only that many randomly chosen
// coordinates (for expensive functions); 0 checks all of them. corrupt_op
// feeds the tape's corruption hook (negative control).
double fd_max_rel_err(std::vector<Tensor<double>> targets,
                      const std::function<Tensor<double>(Tape<double>*)>& fn, double eps = 1e-4,
                      const std::string& corrupt_op = "", int sample_coords = 0,
                      std::uint64_t sample_seed = 0);

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double threshold = 1e-4;
  bool all_pass = false;
};

// The full differentiability certification: every attention / recurrent /
// normalization operator plus a sampled whole-network check on a micro
// configuration, all in double precision.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, const std::string& corrupt_op = "");

}  // namespace picanet
