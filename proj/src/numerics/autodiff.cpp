#include "dgm_dte/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

#include <Eigen/Core>

namespace dgm {

namespace {

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a) {
  throw std::invalid_argument(std::string(op) + ": invalid shape " + shape_str(a));
}

std::size_t threads_from_env() {
  if (const char* env = std::getenv("DGM_DTE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

std::atomic<std::size_t> g_threads{threads_from_env()};

Tensor like(const Tensor& t, double fill = 0.0) { return Tensor(t.shape(), fill); }

}  // namespace

std::size_t kernel_threads() { return g_threads.load(); }
void set_kernel_threads(std::size_t n) { g_threads.store(std::max<std::size_t>(1, n)); }

void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n, bool trans_a, bool trans_b) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  if (m == 0 || n == 0 || k == 0) return;
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  const auto en = static_cast<Eigen::Index>(n);
  Eigen::Map<RowMat> cm(c, em, en);

  // Fixed chunking keeps results independent of the worker count.
  constexpr Eigen::Index kChunk = 128;
  auto run_chunk = [&](Eigen::Index r0) {
    const Eigen::Index len = std::min(kChunk, em - r0);
    auto cb = cm.middleRows(r0, len);
    if (!trans_a && !trans_b) {
      cb.noalias() += ConstMap(a, em, ek).middleRows(r0, len) * ConstMap(b, ek, en);
    } else if (!trans_a && trans_b) {
      cb.noalias() += ConstMap(a, em, ek).middleRows(r0, len) * ConstMap(b, en, ek).transpose();
    } else if (trans_a && !trans_b) {
      cb.noalias() += ConstMap(a, ek, em).transpose().middleRows(r0, len) * ConstMap(b, ek, en);
    } else {
      cb.noalias() += ConstMap(a, ek, em).transpose().middleRows(r0, len) *
                      ConstMap(b, en, ek).transpose();
    }
  };

  const Eigen::Index chunks = (em + kChunk - 1) / kChunk;
  const std::size_t workers = std::min<std::size_t>(kernel_threads(), static_cast<std::size_t>(chunks));
  if (workers <= 1) {
    for (Eigen::Index ch = 0; ch < chunks; ++ch) run_chunk(ch * kChunk);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (auto ch = static_cast<Eigen::Index>(w); ch < chunks; ch += static_cast<Eigen::Index>(workers))
        run_chunk(ch * kChunk);
    });
  }
  for (auto& t : pool) t.join();
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "leaky_relu") return Activation::leaky_relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Tensor value, bool requires_grad, Parameter* param) {
  entries_.push_back(Entry{std::move(value), Tensor{}, requires_grad, param});
  return Var(this, entries_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }
Var Tape::variable(Tensor value) { return push(std::move(value), grad_enabled_, nullptr); }

Var Tape::param(Parameter& p) {
  if (!p.trainable || !grad_enabled_) return constant(p.value);
  return push(p.value, true, &p);
}

void Tape::note_kinks(const Tensor& input) {
  for (double x : input.data()) kinks_.push_back(static_cast<signed char>(x > 0.0 ? 1 : (x < 0.0 ? -1 : 0)));
}

Tensor Tape::grad(const Var& v) const {
  const auto& e = entries_[v.id()];
  return e.grad.empty() ? like(e.value) : e.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& e = entries_[id];
  if (e.grad.empty()) e.grad = like(e.value);
  return e.grad;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward fn) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || requires_grad(in);
  Var out = push(std::move(value), needs, nullptr);
  if (needs) nodes_.push_back(Node{op, out.id(), std::move(fn)});
  return out;
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs, Backward fn) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || requires_grad(in);
  Var out = push(std::move(value), needs, nullptr);
  if (needs) nodes_.push_back(Node{op, out.id(), std::move(fn)});
  return out;
}

void Tape::backward(const Var& loss) {
  const auto& lv = value(loss);
  if (lv.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar-shaped, got " + shape_str(lv.shape()));
  }
  if (!requires_grad(loss)) return;
  for (auto& e : entries_) e.grad = Tensor{};
  grad_buffer(loss.id()).fill(1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& g = entries_[it->output].grad;
    if (g.empty()) continue;
    it->fn(*this, g);
  }
  for (auto& e : entries_) {
    if (!e.param || e.grad.empty()) continue;
    if (e.param->grad.empty()) e.param->grad = like(e.param->value);
    auto pg = e.param->grad.data();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += e.grad[i];
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

namespace {

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) shape_error(op, t.shape());
}

bool is_row_vector_of(const Tensor& b, const Tensor& a) {
  return b.size() == a.cols() && b.rows() == 1 && a.rows() != 1;
}

template <class F, class G>
Var unary(std::string_view op, const Var& a, F&& f, G&& dfdx) {
  const Tensor& x = a.value();
  Tensor y = like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t aid = a.id();
  return a.tape().record(op, std::move(y), {a}, [aid, dfdx](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    const Tensor& xv = t.value(aid);
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() > 2 || bv.rank() != 2 || av.cols() != bv.rows()) shape_error("matmul", av.shape(), bv.shape());
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out = Tensor::matrix(m, n);
  gemm_accumulate(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false, false);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [aid, bid, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) {
      gemm_accumulate(g.data().data(), t.value(bid).data().data(), t.grad_buffer(aid).data().data(), m, n, k,
                      false, true);
    }
    if (t.requires_grad(bid)) {
      gemm_accumulate(t.value(aid).data().data(), g.data().data(), t.grad_buffer(bid).data().data(), k, m, n,
                      true, false);
    }
  });
}

namespace {

Var add_impl(std::string_view op, const Var& a, const Var& b, double sign) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool bcast = !same && is_row_vector_of(bv, av);
  if (!same && !bcast) shape_error(op, av.shape(), bv.shape());
  Tensor out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bv[bcast ? i % c : i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(op, std::move(out), {a, b}, [aid, bid, bcast, c, sign](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) {
      Tensor& ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[bcast ? i % c : i] += sign * g[i];
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return add_impl("add", a, b, 1.0); }
Var sub(const Var& a, const Var& b) { return add_impl("sub", a, b, -1.0); }

Var mul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("mul", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) {
      Tensor& ga = t.grad_buffer(aid);
      const Tensor& bv = t.value(bid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      const Tensor& av = t.value(aid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var relu(const Var& a) {
  if (a.tape().kink_tracking()) a.tape().note_kinks(a.value());
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  if (a.tape().kink_tracking()) a.tape().note_kinks(a.value());
  return unary("leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
  auto s = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary("sigmoid", a, s, [s](double x) {
    const double v = s(x);
    return v * (1.0 - v);
  });
}

Var activate(const Var& a, Activation act, double leaky_slope) {
  switch (act) {
    case Activation::identity: return a;
    case Activation::relu: return relu(a);
    case Activation::leaky_relu: return leaky_relu(a, leaky_slope);
    case Activation::sigmoid: return sigmoid(a);
  }
  return a;
}

Var abs(const Var& a) {
  if (a.tape().kink_tracking()) a.tape().note_kinks(a.value());
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sqrt(const Var& a) {
  for (double x : a.value().data()) {
    if (x < 0.0) throw std::domain_error("sqrt: negative input");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Var log(const Var& a) {
  for (double x : a.value().data()) {
    if (x <= 0.0) throw std::domain_error("log: nonpositive input");
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var softmax_rows(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y = like(x);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (y[i * c + j] = std::exp(x[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= s;
  }
  const std::size_t aid = a.id();
  const Tensor soft = y;
  return a.tape().record("softmax_rows", std::move(y), {a}, [aid, r, c, soft](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * soft[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += soft[i * c + j] * (g[i * c + j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor y = like(x);
  Tensor soft = like(x);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      y[i * c + j] = x[i * c + j] - lse;
      soft[i * c + j] = std::exp(y[i * c + j]);
    }
  }
  const std::size_t aid = a.id();
  return a.tape().record("log_softmax_rows", std::move(y), {a},
                         [aid, r, c, soft = std::move(soft)](Tape& t, const Tensor& g) {
                           if (!t.requires_grad(aid)) return;
                           Tensor& ga = t.grad_buffer(aid);
                           for (std::size_t i = 0; i < r; ++i) {
                             double gs = 0.0;
                             for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               ga[i * c + j] += g[i * c + j] - soft[i * c + j] * gs;
                           }
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) shape_error("concat_cols", parts.front().shape(), p.shape());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::matrix(r, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data().data() + i * widths[k], widths[k], out.data().data() + i * total + off);
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record("concat_cols", std::move(out), parts,
                                     [ids, widths, r, total](Tape& t, const Tensor& g) {
                                       std::size_t off = 0;
                                       for (std::size_t k = 0; k < ids.size(); ++k) {
                                         if (t.requires_grad(ids[k])) {
                                           Tensor& gk = t.grad_buffer(ids[k]);
                                           for (std::size_t i = 0; i < r; ++i)
                                             for (std::size_t j = 0; j < widths[k]; ++j)
                                               gk[i * widths[k] + j] += g[i * total + off + j];
                                         }
                                         off += widths[k];
                                       }
                                     });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) shape_error("concat_rows", parts.front().shape(), p.shape());
    sizes.push_back(p.value().size());
    rows += p.rows();
  }
  Tensor out = Tensor::matrix(rows, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.value().size();
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().record("concat_rows", std::move(out), parts, [ids, sizes](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gk = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
      }
      off += sizes[k];
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_matrix("slice_cols", x);
  if (begin > end || end > x.cols()) shape_error("slice_cols", x.shape());
  const std::size_t r = x.rows(), c = x.cols(), w = end - begin;
  Tensor out = Tensor::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  const std::size_t aid = a.id();
  return a.tape().record("slice_cols", std::move(out), {a}, [aid, r, c, w, begin](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require_matrix("slice_rows", x);
  if (begin > end || end > x.rows()) shape_error("slice_rows", x.shape());
  const std::size_t c = x.cols();
  Tensor out({end - begin, c},
             std::vector<double>(x.data().begin() + begin * c, x.data().begin() + end * c));
  const std::size_t aid = a.id();
  return a.tape().record("slice_rows", std::move(out), {a}, [aid, begin, c](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const std::size_t aid = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [aid](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const std::size_t aid = a.id();
  return a.tape().record("mean", Tensor::scalar(s / static_cast<double>(n)), {a}, [aid, n](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    const double v = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += v;
  });
}

Var row_sum(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
    out[i] = s;
  }
  const std::size_t aid = a.id();
  return a.tape().record("row_sum", std::move(out), {a}, [aid, r, c](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
}

Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
  const Tensor& x = a.value();
  require_matrix("gather_rows", x);
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(x.data().data() + rows[i] * c, c, out.data().data() + i * c);
  }
  const std::size_t aid = a.id();
  return a.tape().record("gather_rows", std::move(out), {a}, [aid, c, rows = std::move(rows)](Tape& t, const Tensor& g) {
    if (!t.requires_grad(aid)) return;
    Tensor& ga = t.grad_buffer(aid);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[rows[i] * c + j] += g[i * c + j];
  });
}

Var scale_rows(const Var& a, const Var& w) {
  const Tensor& x = a.value();
  const Tensor& wv = w.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (wv.size() != r) shape_error("scale_rows", x.shape(), wv.shape());
  Tensor out = x;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= wv[i];
  const std::size_t aid = a.id(), wid = w.id();
  return a.tape().record("scale_rows", std::move(out), {a, w}, [aid, wid, r, c](Tape& t, const Tensor& g) {
    if (t.requires_grad(aid)) {
      const Tensor& wv = t.value(wid);
      Tensor& ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * wv[i];
    }
    if (t.requires_grad(wid)) {
      const Tensor& xv = t.value(aid);
      Tensor& gw = t.grad_buffer(wid);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * xv[i * c + j];
        gw[i] += s;
      }
    }
  });
}

Var segment_softmax(const Var& logits, std::shared_ptr<const SparsePattern> pattern) {
  const Tensor& x = logits.value();
  if (x.size() != pattern->num_entries()) {
    shape_error("segment_softmax", x.shape(), Shape{pattern->num_entries(), 1});
  }
  Tensor y = like(x);
  const auto& off = pattern->offsets;
  for (std::size_t i = 0; i + 1 < off.size(); ++i) {
    if (off[i] == off[i + 1]) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) mx = std::max(mx, x[e]);
    double s = 0.0;
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) s += (y[e] = std::exp(x[e] - mx));
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) y[e] /= s;
  }
  const std::size_t lid = logits.id();
  Tape& tape = logits.tape();
  const Tensor soft = y;
  return tape.record("segment_softmax", std::move(y), {logits},
                     [lid, pattern, soft](Tape& t, const Tensor& g) {
                       if (!t.requires_grad(lid)) return;
                       Tensor& gl = t.grad_buffer(lid);
                       const auto& off = pattern->offsets;
                       for (std::size_t i = 0; i + 1 < off.size(); ++i) {
                         double dot = 0.0;
                         for (std::size_t e = off[i]; e < off[i + 1]; ++e) dot += g[e] * soft[e];
                         for (std::size_t e = off[i]; e < off[i + 1]; ++e) gl[e] += soft[e] * (g[e] - dot);
                       }
                     });
}

Var edge_aggregate(const Var& weights, const Var& h, std::shared_ptr<const SparsePattern> pattern) {
  const Tensor& wv = weights.value();
  const Tensor& hv = h.value();
  require_matrix("edge_aggregate", hv);
  if (wv.size() != pattern->num_entries() || hv.rows() != pattern->num_cols) {
    shape_error("edge_aggregate", wv.shape(), hv.shape());
  }
  const std::size_t d = hv.cols();
  const std::size_t n = pattern->num_rows();
  Tensor out = Tensor::matrix(n, d);
  const auto& off = pattern->offsets;
  const auto& tgt = pattern->targets;
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.data().data() + i * d;
    for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
      const double w = wv[e];
      const double* hrow = hv.data().data() + tgt[e] * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] += w * hrow[j];
    }
  }
  const std::size_t wid = weights.id(), hid = h.id();
  return h.tape().record("edge_aggregate", std::move(out), {weights, h}, [wid, hid, d, pattern](Tape& t, const Tensor& g) {
    const auto& off = pattern->offsets;
    const auto& tgt = pattern->targets;
    const std::size_t n = pattern->num_rows();
    if (t.requires_grad(hid)) {
      const Tensor& wv = t.value(wid);
      Tensor& gh = t.grad_buffer(hid);
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g.data().data() + i * d;
        for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
          double* hrow = gh.data().data() + tgt[e] * d;
          const double w = wv[e];
          for (std::size_t j = 0; j < d; ++j) hrow[j] += w * grow[j];
        }
      }
    }
    if (t.requires_grad(wid)) {
      const Tensor& hv = t.value(hid);
      Tensor& gw = t.grad_buffer(wid);
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g.data().data() + i * d;
        for (std::size_t e = off[i]; e < off[i + 1]; ++e) {
          const double* hrow = hv.data().data() + tgt[e] * d;
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += grow[j] * hrow[j];
          gw[e] += s;
        }
      }
    }
  });
}

Var normalize_columns(const Var& a, double eps) {
  const Tensor& x = a.value();
  require_matrix("normalize_columns", x);
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> norms(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) norms[j] += x[i * c + j] * x[i * c + j];
  for (auto& v : norms) v = std::sqrt(v);
  Tensor y = like(x);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = norms[j] < eps ? 0.0 : x[i * c + j] / norms[j];
  const std::size_t aid = a.id();
  const Tensor yv = y;
  return a.tape().record("normalize_columns", std::move(y), {a},
                         [aid, r, c, eps, norms = std::move(norms), yv](Tape& t, const Tensor& g) {
                           if (!t.requires_grad(aid)) return;
                           Tensor& ga = t.grad_buffer(aid);
                           for (std::size_t j = 0; j < c; ++j) {
                             if (norms[j] < eps) continue;
                             double dot = 0.0;
                             for (std::size_t i = 0; i < r; ++i) dot += yv[i * c + j] * g[i * c + j];
                             for (std::size_t i = 0; i < r; ++i)
                               ga[i * c + j] += (g[i * c + j] - yv[i * c + j] * dot) / norms[j];
                           }
                         });
}

}  // namespace ops
}  // namespace dgm
