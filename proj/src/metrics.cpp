#include "picanet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace picanet {
namespace {

constexpr double kEps = 2.2204460492503131e-16;

template <typename T>
void check_pair(const Tensor<T>& pred, const Tensor<T>& gt, bool& has_pos) {
  if (pred.numel() != gt.numel() || pred.numel() == 0)
    throw std::invalid_argument("prediction and ground truth sizes differ");
  has_pos = false;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const T v = gt.data()[i];
    if (v != T(0) && v != T(1))
      throw std::invalid_argument("ground truth must be strictly binary");
    if (v == T(1)) has_pos = true;
  }
}

// Exact nearest-foreground map by direct search over foreground pixels;
// squared-distance ties resolved toward the smallest row-major index.
void nearest_foreground(const std::vector<char>& fg, int h, int w, std::vector<double>& dist,
                        std::vector<int>& idx) {
  std::vector<int> fgi;
  for (int i = 0; i < h * w; ++i)
    if (fg[static_cast<std::size_t>(i)]) fgi.push_back(i);
  dist.assign(static_cast<std::size_t>(h) * w, 0.0);
  idx.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      if (fg[static_cast<std::size_t>(p)]) {
        idx[static_cast<std::size_t>(p)] = p;
        continue;
      }
      long long best = std::numeric_limits<long long>::max();
      int bi = 0;
      for (int q : fgi) {
        const long long dy = y - q / w, dx = x - q % w;
        const long long d2 = dy * dy + dx * dx;
        if (d2 < best) {
          best = d2;
          bi = q;
        }
      }
      dist[static_cast<std::size_t>(p)] = std::sqrt(static_cast<double>(best));
      idx[static_cast<std::size_t>(p)] = bi;
    }
}

}  // namespace

template <typename T>
void pr_curve(const Tensor<T>& pred, const Tensor<T>& gt, std::array<double, 256>& precision,
              std::array<double, 256>& recall) {
  bool has_pos = false;
  check_pair(pred, gt, has_pos);
  if (!has_pos) throw std::invalid_argument("ground truth has no positive pixel");
  const std::size_t n = pred.numel();
  const T* pv = pred.data();
  const T* gv = gt.data();
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n; ++i) npos += gv[i] == T(1);
  for (int k = 0; k < 256; ++k) {
    const T t = static_cast<T>(k / 255.0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (pv[i] >= t) (gv[i] == T(1) ? tp : fp)++;
    precision[static_cast<std::size_t>(k)] =
        (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    recall[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(npos);
  }
}

double f_measure(double precision, double recall, double beta2) {
  const double den = beta2 * precision + recall;
  if (den <= 0) return 0.0;
  return (1.0 + beta2) * precision * recall / den;
}

template <typename T>
double weighted_f_measure(const Tensor<T>& pred, const Tensor<T>& gt) {
  bool has_pos = false;
  check_pair(pred, gt, has_pos);
  if (!has_pos) throw std::invalid_argument("ground truth has no positive pixel");
  int h, w;
  if (gt.rank() == 2) {
    h = gt.dim(0), w = gt.dim(1);
  } else if (gt.rank() == 3 && gt.dim(0) == 1) {
    h = gt.dim(1), w = gt.dim(2);
  } else if (gt.rank() == 4 && gt.dim(0) == 1 && gt.dim(1) == 1) {
    h = gt.dim(2), w = gt.dim(3);
  } else {
    throw std::invalid_argument("weighted_f_measure expects one single-channel map");
  }
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const T* pv = pred.data();
  const T* gv = gt.data();

  std::vector<char> fg(n);
  std::vector<double> err(n);
  for (std::size_t i = 0; i < n; ++i) {
    fg[i] = gv[i] == T(1);
    err[i] = std::abs(static_cast<double>(pv[i]) - static_cast<double>(gv[i]));
  }

  std::vector<double> dist;
  std::vector<int> nearest;
  nearest_foreground(fg, h, w, dist, nearest);

  // substitute background errors with the error at the nearest foreground
  std::vector<double> et(err);
  for (std::size_t i = 0; i < n; ++i)
    if (!fg[i]) et[i] = err[static_cast<std::size_t>(nearest[i])];

  // 7x7 Gaussian, sigma 5, normalized; correlation with zero padding
  double kern[7][7];
  double ksum = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      const double dy = i - 3, dx = j - 3;
      kern[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 25.0));
      ksum += kern[i][j];
    }
  for (auto& row : kern)
    for (double& v : row) v /= ksum;

  std::vector<double> ea(n, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = 0; i < 7; ++i) {
        const int yy = y + i - 3;
        if (yy < 0 || yy >= h) continue;
        for (int j = 0; j < 7; ++j) {
          const int xx = x + j - 3;
          if (xx < 0 || xx >= w) continue;
          acc += kern[i][j] * et[static_cast<std::size_t>(yy) * w + xx];
        }
      }
      ea[static_cast<std::size_t>(y) * w + x] = acc;
    }

  const double decay = std::log(0.5) / 5.0;
  double sum_gt = 0, sum_ew_fg = 0, sum_ew_bg = 0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = err[i];
    double b = 1.0;
    if (fg[i]) {
      if (ea[i] < e) e = ea[i];
      ++npos;
      sum_gt += 1.0;
      sum_ew_fg += e * b;
    } else {
      b = 2.0 - std::exp(decay * dist[i]);
      sum_ew_bg += e * b;
    }
  }
  const double tpw = sum_gt - sum_ew_fg;
  const double r = 1.0 - sum_ew_fg / static_cast<double>(npos);
  const double p = tpw / (kEps + tpw + sum_ew_bg);
  return 2.0 * r * p / (kEps + r + p);
}

template <typename T>
double mae(const Tensor<T>& pred, const Tensor<T>& gt) {
  if (pred.numel() != gt.numel() || pred.numel() == 0)
    throw std::invalid_argument("prediction and ground truth sizes differ");
  double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i)
    s += std::abs(static_cast<double>(pred.data()[i]) - static_cast<double>(gt.data()[i]));
  return s / static_cast<double>(pred.numel());
}

int eval_thread_count() {
  const char* env = std::getenv("PICANET_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v > 0 ? v : 1;
}

namespace {

struct PerImage {
  std::array<double, 256> precision{}, recall{};
  double f_adaptive = 0, f_weighted = 0, mae = 0;
};

template <typename T>
PerImage score_one(const Tensor<T>& pred, const Tensor<T>& gt) {
  PerImage r;
  pr_curve(pred, gt, r.precision, r.recall);
  r.f_weighted = weighted_f_measure(pred, gt);
  r.mae = mae(pred, gt);
  double mean_pred = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) mean_pred += static_cast<double>(pred.data()[i]);
  mean_pred /= static_cast<double>(pred.numel());
  const T t = static_cast<T>(std::min(1.0, 2.0 * mean_pred));
  std::size_t tp = 0, fp = 0, npos = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool pos = gt.data()[i] == T(1);
    npos += pos;
    if (pred.data()[i] >= t) (pos ? tp : fp)++;
  }
  const double prec = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double rec = static_cast<double>(tp) / static_cast<double>(npos);
  r.f_adaptive = f_measure(prec, rec);
  return r;
}

}  // namespace

template <typename T>
MetricReport compute_report(const std::vector<Tensor<T>>& preds,
                            const std::vector<Tensor<T>>& gts) {
  if (preds.empty() || preds.size() != gts.size())
    throw std::invalid_argument("need one prediction per ground truth");
  const int m = static_cast<int>(preds.size());
  std::vector<PerImage> rows(static_cast<std::size_t>(m));
  const int threads = std::min(eval_thread_count(), m);
  if (threads <= 1) {
    for (int i = 0; i < m; ++i)
      rows[static_cast<std::size_t>(i)] = score_one(preds[static_cast<std::size_t>(i)],
                                                    gts[static_cast<std::size_t>(i)]);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr first_err;
    std::mutex err_mu;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t]() {
        for (int i = t; i < m; i += threads) {
          try {
            rows[static_cast<std::size_t>(i)] = score_one(preds[static_cast<std::size_t>(i)],
                                                          gts[static_cast<std::size_t>(i)]);
          } catch (...) {
            std::lock_guard<std::mutex> lk(err_mu);
            if (!first_err) first_err = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
    if (first_err) std::rethrow_exception(first_err);
  }

  MetricReport rep;
  for (const auto& r : rows) {  // fixed index order: thread-count independent
    for (int k = 0; k < 256; ++k) {
      rep.precision[static_cast<std::size_t>(k)] += r.precision[static_cast<std::size_t>(k)];
      rep.recall[static_cast<std::size_t>(k)] += r.recall[static_cast<std::size_t>(k)];
    }
    rep.f_beta_adaptive += r.f_adaptive;
    rep.f_beta_weighted += r.f_weighted;
    rep.mae += r.mae;
  }
  const double inv = 1.0 / m;
  for (auto& v : rep.precision) v *= inv;
  for (auto& v : rep.recall) v *= inv;
  rep.f_beta_adaptive *= inv;
  rep.f_beta_weighted *= inv;
  rep.mae *= inv;
  rep.f_beta_max = 0;
  for (int k = 0; k < 256; ++k)
    rep.f_beta_max = std::max(rep.f_beta_max, f_measure(rep.precision[static_cast<std::size_t>(k)],
                                                        rep.recall[static_cast<std::size_t>(k)]));
  return rep;
}

template <typename T>
MetricReport evaluate_model(const NetworkSpec& spec, ModelParams<T>& params,
                            const std::vector<Sample<T>>& data, int batch) {
  if (data.empty()) throw std::invalid_argument("evaluate_model: empty dataset");
  if (batch < 1) throw std::invalid_argument("evaluate_model: batch must be >= 1");
  std::vector<Tensor<T>> preds, gts;
  const int m = static_cast<int>(data.size());
  for (int at = 0; at < m; at += batch) {
    std::vector<int> idx;
    for (int i = at; i < std::min(m, at + batch); ++i) idx.push_back(i);
    auto [images, masks] = make_batch(data, idx);
    auto out = network_forward<T>(nullptr, images, spec, params, BNMode::eval);
    const auto& fin = out.final_map;
    const int s2 = fin.dim(2), s3 = fin.dim(3);
    const std::size_t plane = static_cast<std::size_t>(s2) * s3;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor<T> p = Tensor<T>::zeros({1, s2, s3});
      std::copy(fin.data() + k * plane, fin.data() + (k + 1) * plane, p.data());
      preds.push_back(p);
      gts.push_back(data[static_cast<std::size_t>(idx[k])].mask);
    }
  }
  return compute_report(preds, gts);
}

template void pr_curve(const Tensor<float>&, const Tensor<float>&, std::array<double, 256>&,
                       std::array<double, 256>&);
template void pr_curve(const Tensor<double>&, const Tensor<double>&, std::array<double, 256>&,
                       std::array<double, 256>&);
template double weighted_f_measure(const Tensor<float>&, const Tensor<float>&);
template double weighted_f_measure(const Tensor<double>&, const Tensor<double>&);
template double mae(const Tensor<float>&, const Tensor<float>&);
template double mae(const Tensor<double>&, const Tensor<double>&);
template MetricReport compute_report(const std::vector<Tensor<float>>&,
                                     const std::vector<Tensor<float>>&);
template MetricReport compute_report(const std::vector<Tensor<double>>&,
                                     const std::vector<Tensor<double>>&);
template MetricReport evaluate_model(const NetworkSpec&, ModelParams<float>&,
                                     const std::vector<Sample<float>>&, int);
template MetricReport evaluate_model(const NetworkSpec&, ModelParams<double>&,
                                     const std::vector<Sample<double>>&, int);

}  // namespace picanet
