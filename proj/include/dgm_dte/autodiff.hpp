#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive applied to values that (transitively)
// depend on a trainable leaf. Backward walks the recorded nodes in exact
// reverse construction order. Results are accumulated into Parameter::grad
// for leaves created with Tape::param().

#include <cstddef>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "dgm_dte/params.hpp"
#include "dgm_dte/tensor.hpp"

namespace dgm {

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Trainable leaf whose gradient is read back with grad().
  Var variable(Tensor value);
  /// Trainable leaf bound to a model parameter. Frozen parameters
  /// (trainable = false) enter as constants.
  Var param(Parameter& p);

  /// With gradients disabled every leaf is a constant and nothing is recorded.
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Sign record of every input to a nonsmooth primitive (relu, leaky_relu,
  /// abs). Two evaluations with equal signatures lie on the same smooth piece.
  void set_kink_tracking(bool on) noexcept { track_kinks_ = on; }
  bool kink_tracking() const noexcept { return track_kinks_; }
  void note_kinks(const Tensor& input);
  const std::vector<signed char>& kink_signature() const noexcept { return kinks_; }

  const Tensor& value(const Var& v) const { return entries_[v.id()].value; }
  const Tensor& value(std::size_t id) const { return entries_[id].value; }
  /// Gradient of the last backward pass; zeros if the value was not reached.
  Tensor grad(const Var& v) const;
  bool requires_grad(const Var& v) const { return entries_[v.id()].requires_grad; }
  bool requires_grad(std::size_t id) const { return entries_[id].requires_grad; }

  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  std::string_view node_op(std::size_t i) const { return nodes_[i].op; }

  /// Records a primitive. The node is kept only if some input needs a gradient.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward fn);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, Backward fn);

  /// Gradient buffer for `id`, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Parameter leaves accumulate
  /// into Parameter::grad, allocating it when empty.
  void backward(const Var& loss);

 private:
  struct Entry {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };
  struct Node {
    std::string_view op;
    std::size_t output;
    Backward fn;
  };

  Var push(Tensor value, bool requires_grad, Parameter* param);

  std::vector<Entry> entries_;
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool track_kinks_ = false;
  std::vector<signed char> kinks_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

/// Compressed sparse rows: row i owns targets[offsets[i] .. offsets[i+1]).
struct SparsePattern {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> targets;
  std::size_t num_cols = 0;

  std::size_t num_rows() const noexcept { return offsets.size() - 1; }
  std::size_t num_entries() const noexcept { return targets.size(); }
};

enum class Activation { identity, relu, leaky_relu, sigmoid };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

namespace ops {

Var matmul(const Var& a, const Var& b);
/// Same-shape addition, or a [1 x c] row vector broadcast over every row.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var activate(const Var& a, Activation act, double leaky_slope = 0.2);
Var abs(const Var& a);
Var sqrt(const Var& a);
Var log(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
/// Sum of all entries, shape [1].
Var sum(const Var& a);
/// Mean of all entries, shape [1].
Var mean(const Var& a);
/// [r x c] -> [r x 1].
Var row_sum(const Var& a);
Var gather_rows(const Var& a, std::vector<std::size_t> rows);
/// out(i, j) = a(i, j) * w(i); w holds one value per row.
Var scale_rows(const Var& a, const Var& w);
/// Softmax over each row segment of a column of logits [E x 1].
Var segment_softmax(const Var& logits, std::shared_ptr<const SparsePattern> pattern);
/// out(i) = sum over entries e of row i of weights(e) * h(targets[e]).
Var edge_aggregate(const Var& weights, const Var& h, std::shared_ptr<const SparsePattern> pattern);
/// Divides every column by its L2 norm; columns with norm < eps become zero.
Var normalize_columns(const Var& a, double eps = 1e-12);

}  // namespace ops

/// Number of worker threads for matmul kernels (DGM_DTE_THREADS, default 1).
std::size_t kernel_threads();
void set_kernel_threads(std::size_t n);

/// C (m x n) += op(A) * op(B), row-major, op = optional transpose.
void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n, bool trans_a, bool trans_b);

}  // namespace dgm
