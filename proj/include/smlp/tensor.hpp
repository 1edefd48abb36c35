#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "smlp/error.hpp"
#include "smlp/rng.hpp"

namespace smlp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tape;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  bool tracked = false;  // reachable from some requires_grad leaf
  const Tape* tape = nullptr;
  std::uint64_t tape_gen = 0;
};
}  // namespace detail

// Dense row-major f64 tensor. Copying a Tensor copies the handle, not the
// storage; ops build fresh tensors. Gradients live next to the values and
// accumulate additively until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return make(std::move(shape), v, requires_grad);
  }

  static Tensor scalar(double v) {
    Tensor t = make({}, 0.0, false);
    t.node_->value[0] = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randu(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor t = make(std::move(shape), 0.0, requires_grad);
    for (double& v : t.node_->value) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double mean, double stddev,
                      bool requires_grad = false) {
    Tensor t = make(std::move(shape), 0.0, requires_grad);
    for (double& v : t.node_->value) v = rng.normal(mean, stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::size_t rows() const {
    require_rank2("rows()");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols()");
    return node_->shape[1];
  }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    require_rank2("at(r,c)");
    return node_->value[r * node_->shape[1] + c];
  }
  void set(std::size_t i, double v) { node_->value[i] = v; }
  void set(std::size_t r, std::size_t c, double v) {
    require_rank2("set(r,c)");
    node_->value[r * node_->shape[1] + c] = v;
  }

  bool requires_grad() const { return node_->requires_grad; }

  // True when gradients must flow through this tensor: it is a parameter or
  // was produced from one while a tape was active.
  bool tracks_grad() const { return node_->requires_grad || node_->tracked; }

  bool has_grad() const { return !node_->grad.empty(); }
  double* grad_data() const { return ensure_grad().data(); }
  const std::vector<double>& grad() const { return node_->grad; }
  // Grad accessors are const: a Tensor is a shared handle, and backward
  // closures hold (const) copies of their input handles.
  std::vector<double>& ensure_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() const {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  }

  void mark_on_tape(const Tape& t);
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const detail::Node* node() const { return node_.get(); }

 private:
  static Tensor make(Shape shape, double fill, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    std::size_t n = shape_numel(shape);
    t.node_->shape = std::move(shape);
    t.node_->value.assign(n, fill);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  void require_rank2(const char* what) const {
    if (rank() != 2)
      throw ShapeError(std::string(what) + " requires rank-2 tensor, got " + shape_str(shape()));
  }

  std::shared_ptr<detail::Node> node_;
  friend class Tape;
};

// Reverse-mode tape. Operations append backward closures in execution order,
// which is a valid topological order by construction; backward() replays them
// once, in reverse. One tape per thread at a time (installed via TapeScope).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_slot(); }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw TrainError("backward: loss must be a scalar tensor");
    const detail::Node* n = loss.node();
    if (n->tape != this || n->tape_gen != generation_)
      throw TrainError("backward: loss was not produced on the active tape (stale tape)");
    if (backward_done_)
      throw TrainError("backward: tape already replayed; clear() before reusing it");
    backward_done_ = true;
    const_cast<Tensor&>(loss).ensure_grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  // Drops the recorded graph and permits a fresh forward/backward round.
  void clear() {
    entries_.clear();
    ++generation_;
    backward_done_ = false;
  }

 private:
  static Tape*& current_slot() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<std::function<void()>> entries_;
  std::uint64_t generation_ = 1;
  bool backward_done_ = false;
  friend class TapeScope;
};

inline void Tensor::mark_on_tape(const Tape& t) {
  node_->tracked = true;
  node_->tape = &t;
  node_->tape_gen = t.generation();
}

// Installs a tape as the thread's recorder for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::current_slot()) { Tape::current_slot() = &t; }
  ~TapeScope() { Tape::current_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Records `backward_fn` if a tape is active and any input carries gradient.
inline void record_op(const std::vector<Tensor>& inputs, Tensor& out,
                      std::function<void()> backward_fn) {
  Tape* t = Tape::current();
  if (!t) return;
  bool any = false;
  for (const Tensor& in : inputs)
    if (in.defined() && in.tracks_grad()) {
      any = true;
      break;
    }
  if (!any) return;
  out.mark_on_tape(*t);
  t->record(std::move(backward_fn));
}

inline void record_op(std::initializer_list<Tensor> inputs, Tensor& out,
                      std::function<void()> backward_fn) {
  record_op(std::vector<Tensor>(inputs), out, std::move(backward_fn));
}

// Runs backward from `loss` on the thread's active tape.
inline void backward(const Tensor& loss) {
  Tape* t = Tape::current();
  if (!t) throw TrainError("backward: no active tape on this thread");
  t->backward(loss);
}

}  // namespace smlp
