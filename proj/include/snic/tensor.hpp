#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace snic {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// Dense n-d tensor, row major. Copying a Tensor copies a handle; the storage
// (value and gradient buffers) is shared. grad is allocated on first access
// and accumulates until zero_grad().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    for (int64_t d : shape) check(d > 0, "tensor extents must be positive, got " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data.assign(static_cast<size_t>(numel_of(s_->shape)), fill);
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    for (int64_t d : shape) check(d > 0, "tensor extents must be positive, got " + shape_str(shape));
    check(numel_of(shape) == static_cast<int64_t>(values.size()),
          "data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int64_t numel() const { return static_cast<int64_t>(s_->data.size()); }
  int64_t dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }

  std::vector<T>& data() { return s_->data; }
  const std::vector<T>& data() const { return s_->data; }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  std::vector<T>& grad() {
    if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  bool has_grad() const { return s_->grad.size() == s_->data.size(); }
  void zero_grad() {
    if (has_grad()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  T item() const {
    check(numel() == 1, "item() requires a scalar tensor, shape is " + shape_str(shape()));
    return s_->data[0];
  }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(s_->data[i]);
    return Tensor<U>::from(s_->shape, std::move(out));
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

// Tape of executed operations. Each op that participates in differentiation
// appends one backward closure; backward() replays them in reverse execution
// order, which visits every recorded op exactly once.
template <typename T>
class Graph {
 public:
  void record(std::function<void()> back) { tape_.push_back(std::move(back)); }

  void backward(Tensor<T> loss) {
    check(loss.defined() && loss.numel() == 1,
          "backward() requires a scalar loss, shape is " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    loss.grad()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  size_t size() const { return tape_.size(); }
  void clear() { tape_.clear(); }

 private:
  std::vector<std::function<void()>> tape_;
};

template <typename T>
inline bool wants_grad(const Graph<T>* g, const Tensor<T>& a) {
  return g != nullptr && a.requires_grad();
}

template <typename T>
inline bool wants_grad(const Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b) {
  return g != nullptr && (a.requires_grad() || b.requires_grad());
}

template <typename T>
inline bool wants_grad(const Graph<T>* g, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  return g != nullptr && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

}  // namespace snic
