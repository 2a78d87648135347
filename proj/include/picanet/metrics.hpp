#pragma once

#include <array>
#include <vector>

#include "picanet/data.hpp"
#include "picanet/network.hpp"
#include "picanet/tensor.hpp"

namespace picanet {

struct MetricReport {
  std::array<double, 256> precision{};  // per-threshold means, t = k/255
  std::array<double, 256> recall{};
  double f_beta_max = 0;       // max_k F_beta(precision[k], recall[k]), beta^2 = 0.3
  double f_beta_adaptive = 0;  // per-image threshold min(1, 2*mean(pred)), averaged
  double f_beta_weighted = 0;  // per-image weighted F, averaged
  double mae = 0;
};

// 256 thresholds t = k/255; prediction binarized as pred >= t. Precision of
// an empty prediction is 1. gt must be strictly binary with at least one
// positive pixel.
template <typename T>
void pr_curve(const Tensor<T>& pred, const Tensor<T>& gt, std::array<double, 256>& precision,
              std::array<double, 256>& recall);

// (1+b2) P R / (b2 P + R); 0 when the denominator vanishes.
double f_measure(double precision, double recall, double beta2 = 0.3);

// Weighted F-measure: dependency-corrected errors (nearest-foreground error
// substitution on the background, then a 7x7 Gaussian with sigma 5) and
// distance-decayed background importance 2 - exp(ln(0.5)/5 * dist), combined
// at beta = 1. Nearest foreground pixels are found exactly; squared-distance
// ties go to the smallest row-major index.
template <typename T>
double weighted_f_measure(const Tensor<T>& pred, const Tensor<T>& gt);

template <typename T>
double mae(const Tensor<T>& pred, const Tensor<T>& gt);

// Per-image metrics averaged over the set; the PR curve is averaged per
// threshold and f_beta_max is taken on that averaged curve. Parallel over
// images when PICANET_THREADS > 1; the reduction is index-ordered so the
// result does not depend on the thread count.
template <typename T>
MetricReport compute_report(const std::vector<Tensor<T>>& preds,
                            const std::vector<Tensor<T>>& gts);

// Runs eval-mode inference over the dataset in batches and scores the final
// saliency maps against the masks.
template <typename T>
MetricReport evaluate_model(const NetworkSpec& spec, ModelParams<T>& params,
                            const std::vector<Sample<T>>& data, int batch = 8);

int eval_thread_count();  // PICANET_THREADS, default 1

}  // namespace picanet
