#include "mmoe/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <string>
#include <thread>
#include <type_traits>

namespace mmoe {

namespace {

std::atomic<int> g_threads{0};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
// One head's columns inside a [rows x d] row-major block.
template <typename T>
using HeadMap = Eigen::Map<std::conditional_t<std::is_const_v<T>, const RowMat<std::remove_const_t<T>>, RowMat<T>>, 0,
                           Eigen::OuterStride<>>;

template <typename T>
void require_rank2(const Var<T>& v, const char* op) {
  if (v.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(v.shape()));
  }
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

int num_threads() {
  int n = g_threads.load();
  if (n > 0) return n;
  n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("MMOE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  set_num_threads(n);
  return n;
}

void set_num_threads(int n) {
  n = std::max(1, n);
  g_threads.store(n);
  Eigen::setNbThreads(n);
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  num_threads();
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  TensorT<T> out({m, n});
  MutMap<T>(out.data().data(), m, n).noalias() =
      ConstMap<T>(a.value().data().data(), m, k) * ConstMap<T>(b.value().data().data(), k, n);
  return a.tape()->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::span<const T> g) {
    ConstMap<T> G(g.data(), m, n);
    if (t.requires_grad(a)) {
      MutMap<T>(t.grad(a).data(), m, k).noalias() += G * ConstMap<T>(b.value().data().data(), k, n).transpose();
    }
    if (t.requires_grad(b)) {
      MutMap<T>(t.grad(b).data(), k, n).noalias() += ConstMap<T>(a.value().data().data(), m, k).transpose() * G;
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "add");
  TensorT<T> out = a.value();
  out.drop_grad();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape()->record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    if (t.requires_grad(a)) accumulate(t.grad(a), g);
    if (t.requires_grad(b)) accumulate(t.grad(b), g);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  TensorT<T> out(a.shape());
  const auto av = a.value().data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, std::span<const T> g) {
    const auto av = a.value().data();
    const auto bv = b.value().data();
    if (t.requires_grad(a)) {
      auto ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  TensorT<T> out(a.shape());
  const auto av = a.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * factor;
  return a.tape()->record("scale", std::move(out), {a}, [a, factor](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  return a.tape()->record("sum", TensorT<T>::scalar(static_cast<T>(acc)), {a}, [a](Tape<T>& t, std::span<const T> g) {
    for (auto& x : t.grad(a)) x += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(n)));
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const std::size_t n = a.value().numel();
  Eigen::Map<const Arr> x(a.value().data().data(), static_cast<Eigen::Index>(n));
  auto th = std::make_shared<Arr>((kC * (x + kA * x.cube())).tanh());
  TensorT<T> out(a.shape());
  Eigen::Map<Arr>(out.data().data(), static_cast<Eigen::Index>(n)) = T(0.5) * x * (T(1) + *th);
  return a.tape()->record("gelu", std::move(out), {a}, [a, th](Tape<T>& t, std::span<const T> g) {
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::Map<const Arr> x(a.value().data().data(), n), G(g.data(), n);
    Eigen::Map<Arr> ga(t.grad(a).data(), n);
    const Arr& h = *th;
    ga += G * (T(0.5) * (T(1) + h) + T(0.5) * x * (T(1) - h * h) * kC * (T(1) + T(3) * kA * x * x));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  TensorT<T> out(a.shape());
  const auto av = a.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(av[i]))));
  auto y = std::make_shared<Buffer<T>>(out.vec());
  return a.tape()->record("sigmoid", std::move(out), {a}, [a, y](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*y)[i] * (T{1} - (*y)[i]);
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  TensorT<T> out(a.shape());
  const auto av = a.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double x = av[i];
    out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
  }
  return a.tape()->record("silu", std::move(out), {a}, [a](Tape<T>& t, std::span<const T> g) {
    const auto av = a.value().data();
    auto ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      ga[i] += static_cast<T>(g[i] * (s + x * s * (1.0 - s)));
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  const Shape& shape = a.shape();
  if (axis >= shape.size()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  TensorT<T> out(shape);
  const auto x = a.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x[base + j * inner]));
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(x[base + j * inner]) - mx);
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] = static_cast<T>(std::exp(static_cast<double>(x[base + j * inner]) - mx) / z);
      }
    }
  }
  auto y = std::make_shared<Buffer<T>>(out.vec());
  return a.tape()->record("softmax", std::move(out), {a}, [a, y, outer, inner, n](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad(a);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[base + j * inner]) * (*y)[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          ga[i] += static_cast<T>((*y)[i] * (g[i] - dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
  require_rank2(logits, "cross_entropy");
  const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (rows == 0) throw ShapeError("cross_entropy: empty batch");
  const auto x = logits.value().data();
  auto probs = std::make_shared<Buffer<T>>(rows * vocab);
  auto tg = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " + std::to_string(vocab) +
                       ")");
    }
    const T* row = x.data() + r * vocab;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] = static_cast<T>(std::exp(row[j] - lse));
    total += lse - static_cast<double>(row[target]);
  }
  const double loss = total / static_cast<double>(rows);
  return logits.tape()->record(
      "cross_entropy", TensorT<T>::scalar(static_cast<T>(loss)), {logits},
      [logits, probs, tg, rows, vocab](Tape<T>& t, std::span<const T> g) {
        auto gl = t.grad(logits);
        const double s = static_cast<double>(g[0]) / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < vocab; ++j) {
            const double onehot = static_cast<std::int32_t>(j) == (*tg)[r] ? 1.0 : 0.0;
            gl[r * vocab + j] += static_cast<T>(s * ((*probs)[r * vocab + j] - onehot));
          }
        }
      });
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps) {
  const std::size_t cols = x.value().cols(), rows = x.value().rows();
  if (gain.value().numel() != cols) {
    throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match input " + shape_str(x.shape()));
  }
  TensorT<T> out(x.shape());
  auto inv = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.value().data();
  const auto gv = gain.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ms += static_cast<double>(xv[r * cols + c]) * xv[r * cols + c];
    (*inv)[r] = 1.0 / std::sqrt(ms / static_cast<double>(cols) + static_cast<double>(eps));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<T>(xv[r * cols + c] * (*inv)[r] * gv[c]);
  }
  return x.tape()->record("rms_norm", std::move(out), {x, gain}, [x, gain, inv, rows, cols](Tape<T>& t, std::span<const T> g) {
    const auto xv = x.value().data();
    const auto gv = gain.value().data();
    const bool need_x = t.requires_grad(x), need_g = t.requires_grad(gain);
    std::span<T> gx = need_x ? t.grad(x) : std::span<T>{};
    std::span<T> gg = need_g ? t.grad(gain) : std::span<T>{};
    for (std::size_t r = 0; r < rows; ++r) {
      const double iv = (*inv)[r];
      const T* xr = xv.data() + r * cols;
      const T* grow = g.data() + r * cols;
      if (need_g) {
        for (std::size_t c = 0; c < cols; ++c) gg[c] += static_cast<T>(grow[c] * xr[c] * iv);
      }
      if (need_x) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(grow[c]) * gv[c] * xr[c];
        const double coef = dot * iv * iv * iv / static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += static_cast<T>(iv * grow[c] * gv[c] - xr[c] * coef);
        }
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::uint32_t> idx) {
  const std::size_t cols = x.value().cols(), rows = x.value().rows();
  TensorT<T> out({idx.size(), cols});
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) {
      throw IndexError("gather_rows: row " + std::to_string(idx[r]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(xv.data() + idx[r] * cols, cols, out.data().data() + r * cols);
  }
  auto ids = std::make_shared<std::vector<std::uint32_t>>(idx.begin(), idx.end());
  return x.tape()->record("gather_rows", std::move(out), {x}, [x, ids, cols](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad(x);
    for (std::size_t r = 0; r < ids->size(); ++r) {
      T* dst = gx.data() + (*ids)[r] * cols;
      const T* src = g.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  std::vector<std::uint32_t> idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.value().rows()) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table " + shape_str(table.shape()));
    }
    idx[i] = static_cast<std::uint32_t>(ids[i]);
  }
  return gather_rows(table, std::span<const std::uint32_t>(idx));
}

template <typename T>
Var<T> gather(const Var<T>& v, std::span<const std::uint32_t> idx) {
  const auto vv = v.value().data();
  TensorT<T> out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= vv.size()) throw IndexError("gather: index " + std::to_string(idx[i]) + " outside " + shape_str(v.shape()));
    out[i] = vv[idx[i]];
  }
  auto ids = std::make_shared<std::vector<std::uint32_t>>(idx.begin(), idx.end());
  return v.tape()->record("gather", std::move(out), {v}, [v, ids](Tape<T>& t, std::span<const T> g) {
    auto gv = t.grad(v);
    for (std::size_t i = 0; i < ids->size(); ++i) gv[(*ids)[i]] += g[i];
  });
}

template <typename T>
Var<T> scale_rows(const Var<T>& x, const Var<T>& w) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (w.value().numel() != rows) {
    throw ShapeError("scale_rows: weights " + shape_str(w.shape()) + " do not match rows of " + shape_str(x.shape()));
  }
  TensorT<T> out(x.shape());
  const auto xv = x.value().data();
  const auto wv = w.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * wv[r];
  }
  return x.tape()->record("scale_rows", std::move(out), {x, w}, [x, w, rows, cols](Tape<T>& t, std::span<const T> g) {
    const auto xv = x.value().data();
    const auto wv = w.value().data();
    if (t.requires_grad(x)) {
      auto gx = t.grad(x);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * wv[r];
      }
    }
    if (t.requires_grad(w)) {
      auto gw = t.grad(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(g[r * cols + c]) * xv[r * cols + c];
        gw[r] += static_cast<T>(acc);
      }
    }
  });
}

template <typename T>
Var<T> scatter_add_rows(Tape<T>& tape, std::size_t rows, std::size_t cols,
                        const std::vector<std::pair<Var<T>, std::vector<std::uint32_t>>>& parts) {
  TensorT<T> out({rows, cols});
  std::vector<Var<T>> parents;
  parents.reserve(parts.size());
  for (const auto& [part, idx] : parts) {
    const auto& pv = part.value();
    if (pv.cols() != cols || pv.rows() != idx.size()) {
      throw ShapeError("scatter_add_rows: part " + shape_str(pv.shape()) + " with " + std::to_string(idx.size()) +
                       " indices into [" + std::to_string(rows) + "x" + std::to_string(cols) + "]");
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= rows) throw IndexError("scatter_add_rows: row " + std::to_string(idx[r]) + " out of range");
      T* dst = out.data().data() + idx[r] * cols;
      const T* src = pv.data().data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
    parents.push_back(part);
  }
  auto plan = std::make_shared<std::vector<std::pair<Var<T>, std::vector<std::uint32_t>>>>(parts);
  return tape.record("scatter_add_rows", std::move(out), std::span<const Var<T>>(parents),
                     [plan, cols](Tape<T>& t, std::span<const T> g) {
                       for (const auto& [part, idx] : *plan) {
                         if (!t.requires_grad(part)) continue;
                         auto gp = t.grad(part);
                         for (std::size_t r = 0; r < idx.size(); ++r) {
                           const T* src = g.data() + idx[r] * cols;
                           T* dst = gp.data() + r * cols;
                           for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                         }
                       }
                     });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t num_heads, std::size_t seq_len) {
  require_rank2(q, "causal_attention");
  require_same(q, k, "causal_attention");
  require_same(q, v, "causal_attention");
  const std::size_t total = q.shape()[0], d = q.shape()[1];
  if (num_heads == 0 || d % num_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible into " + std::to_string(num_heads) +
                     " heads");
  }
  if (seq_len == 0 || total % seq_len != 0) {
    throw ShapeError("causal_attention: " + std::to_string(total) + " rows not divisible by sequence length " +
                     std::to_string(seq_len));
  }
  const std::size_t batch = total / seq_len, dh = d / num_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  // Row-major probabilities per (batch, head), zero above the diagonal.
  auto probs = std::make_shared<Buffer<T>>(batch * num_heads * seq_len * seq_len);
  TensorT<T> out({total, d});
  const T* qv = q.value().data().data();
  const T* kv = k.value().data().data();
  const T* vv = v.value().data().data();
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  const auto S = static_cast<Eigen::Index>(seq_len), H = static_cast<Eigen::Index>(dh);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t off = b * seq_len * d + h * dh;
      HeadMap<const T> Q(qv + off, S, H, stride), K(kv + off, S, H, stride), V(vv + off, S, H, stride);
      MutMap<T> P(probs->data() + (b * num_heads + h) * seq_len * seq_len, S, S);
      P.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < S; ++i) {
        auto r = P.row(i).head(i + 1).array();
        r = (r - r.maxCoeff()).exp();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) z += r(j);
        r /= static_cast<T>(z);
        P.row(i).tail(S - i - 1).setZero();
      }
      HeadMap<T> O(out.data().data() + off, S, H, stride);
      O.noalias() = P * V;
    }
  }
  return q.tape()->record(
      "causal_attention", std::move(out), {q, k, v},
      [q, k, v, probs, batch, num_heads, seq_len, d, dh, inv_sqrt](Tape<T>& t, std::span<const T> g) {
        const T* qv = q.value().data().data();
        const T* kv = k.value().data().data();
        const T* vv = v.value().data().data();
        const bool nq = t.requires_grad(q), nk = t.requires_grad(k), nv = t.requires_grad(v);
        T* gq = nq ? t.grad(q).data() : nullptr;
        T* gk = nk ? t.grad(k).data() : nullptr;
        T* gv = nv ? t.grad(v).data() : nullptr;
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        const auto S = static_cast<Eigen::Index>(seq_len), H = static_cast<Eigen::Index>(dh);
        RowMat<T> dS(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t off = b * seq_len * d + h * dh;
            HeadMap<const T> Q(qv + off, S, H, stride), K(kv + off, S, H, stride), V(vv + off, S, H, stride);
            HeadMap<const T> G(g.data() + off, S, H, stride);
            ConstMap<T> P(probs->data() + (b * num_heads + h) * seq_len * seq_len, S, S);
            if (nv) HeadMap<T>(gv + off, S, H, stride).noalias() += P.transpose() * G;
            if (!nq && !nk) continue;
            dS.noalias() = G * V.transpose();
            for (Eigen::Index i = 0; i < S; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) dot += static_cast<double>(dS(i, j)) * P(i, j);
              dS.row(i).array() = P.row(i).array() * (dS.row(i).array() - static_cast<T>(dot)) * inv_sqrt;
            }
            if (nq) HeadMap<T>(gq + off, S, H, stride).noalias() += dS * K;
            if (nk) HeadMap<T>(gk + off, S, H, stride).noalias() += dS.transpose() * Q;
          }
        }
      });
}

#define MMOE_INSTANTIATE_OPS(T)                                                                                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                              \
  template Var<T> scale(const Var<T>&, T);                                                                        \
  template Var<T> sum(const Var<T>&);                                                                             \
  template Var<T> mean(const Var<T>&);                                                                            \
  template Var<T> gelu(const Var<T>&);                                                                            \
  template Var<T> silu(const Var<T>&);                                                                            \
  template Var<T> sigmoid(const Var<T>&);                                                                         \
  template Var<T> softmax(const Var<T>&, std::size_t);                                                            \
  template Var<T> cross_entropy(const Var<T>&, std::span<const std::int32_t>);                                    \
  template Var<T> rms_norm(const Var<T>&, const Var<T>&, T);                                                      \
  template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>);                                        \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::uint32_t>);                                     \
  template Var<T> gather(const Var<T>&, std::span<const std::uint32_t>);                                          \
  template Var<T> scale_rows(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> scatter_add_rows(Tape<T>&, std::size_t, std::size_t,                                            \
                                   const std::vector<std::pair<Var<T>, std::vector<std::uint32_t>>>&);            \
  template Var<T> causal_attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);

MMOE_INSTANTIATE_OPS(float)
MMOE_INSTANTIATE_OPS(double)

}  // namespace mmoe
