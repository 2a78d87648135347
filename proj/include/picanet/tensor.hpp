#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace picanet {

// Dense N-d array of floats with optional gradient storage. Copying a Tensor
// copies the handle, not the buffer; ops always allocate fresh outputs.
// Canonical feature-map layout is N x C x H x W.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = std::move(shape);
    t.st_->val.assign(numel_of(t.st_->shape), T(0));
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.st_->val) v = value;
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (data.size() != numel_of(shape))
      throw std::invalid_argument("Tensor: data length does not match shape");
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = std::move(shape);
    t.st_->val = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(st_); }
  const std::vector<int>& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  int dim(int i) const { return st_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return st_->val.size(); }

  T* data() { return st_->val.data(); }
  const T* data() const { return st_->val.data(); }
  std::vector<T>& vals() { return st_->val; }
  const std::vector<T>& vals() const { return st_->val; }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool rg) { st_->requires_grad = rg; }

  // Allocates (zeroed) on first touch so leaves that never receive gradient
  // cost nothing. const: a Tensor is a handle, and gradient storage is
  // interior state shared by all copies.
  T* grad_data() const {
    if (st_->grad.size() != st_->val.size()) st_->grad.assign(st_->val.size(), T(0));
    return st_->grad.data();
  }
  bool has_grad() const { return st_ && st_->grad.size() == st_->val.size(); }
  const std::vector<T>& grad() const { return st_->grad; }
  void zero_grad() const {
    if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  Tensor clone() const {
    Tensor t = from_data(st_->shape, st_->val, st_->requires_grad);
    return t;
  }

  // Stable identity for registries / graph bookkeeping.
  const void* id() const { return static_cast<const void*>(st_.get()); }

  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.st_ == b.st_; }

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<T> val;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;

  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative extent");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }
};

inline int spatial_out(int in, int pad, int dilation, int k, int stride) {
  return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

}  // namespace picanet
