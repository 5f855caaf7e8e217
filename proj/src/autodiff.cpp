#include "sbd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace sbd::ad {

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, 0});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::parameter(const ParamStore<T>& store, std::string_view name) {
  const std::size_t slot = store.index(name);
  nodes_.push_back(Node{{}, {}, {}, &store, slot});
  return Var{nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  if (!owns(v)) throw UsageError("value requested for a Var that is not on this tape");
  const Node& n = nodes_[v.id];
  return n.store ? n.store->slot(n.slot).value : n.value;
}

template <typename T>
Tensor<T>& Tape<T>::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
  return n.grad;
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), {}, record_ ? std::move(backward) : BackwardFn{}, nullptr, 0});
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (!record_) throw UsageError("backward on a non-recording tape");
  if (!owns(loss)) throw UsageError("loss is not recorded on this tape");
  if (value(loss).size() != 1) throw UsageError("backward expects a scalar loss");
  grad(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

template <typename T>
void Tape<T>::flush_param_grads(ParamStore<T>& store) const {
  for (const Node& n : nodes_) {
    if (n.store != &store || n.grad.empty()) continue;
    Tensor<T>& g = store.slot(n.slot).grad;
    for (std::size_t e = 0; e < g.size(); ++e) g[e] += n.grad[e];
  }
}

template <typename T>
void backward(Tape<T>& tape, Var loss, ParamStore<T>& store) {
  store.zero_grad();
  tape.backward(loss);
  tape.flush_param_grads(store);
}

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = sbd::matmul(tape.value(a), tape.value(b));
  return tape.push(std::move(out), [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& av = tp.value(a);
    const Tensor<T>& bv = tp.value(b);
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    {
      const Tensor<T> bt = transpose(bv);
      matmul_accumulate(g.data(), bt.data(), tp.grad(a).data(), m, n, k);
    }
    {
      const Tensor<T> at = transpose(av);
      matmul_accumulate(at.data(), g.data(), tp.grad(b).data(), k, m, n);
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.push(std::move(out), [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    Tensor<T>& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Var add_row(Tape<T>& tape, Var x, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& bv = tape.value(bias);
  require_matrix(xv, "add_row");
  if (bv.size() != xv.cols()) throw DimensionError("add_row: bias length does not match columns");
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return tape.push(std::move(out), [x, bias](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    Tensor<T>& gb = tp.grad(bias);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, double s) {
  Tensor<T> out = tape.value(x);
  const T f = static_cast<T>(s);
  for (auto& e : out.values()) e *= f;
  return tape.push(std::move(out), [x, f](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) throw DimensionError("mul: shape mismatch");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.push(std::move(out), [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& av2 = tp.value(a);
    const Tensor<T>& bv2 = tp.value(b);
    Tensor<T>& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    Tensor<T>& gb = tp.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T total = 0;
  for (T e : tape.value(x).values()) total += e;
  return tape.push(Tensor<T>::scalar(total), [x](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(Var{self})[0];
    for (auto& e : tp.grad(x).values()) e += g;
  });
}

template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Tensor<T> out = tape.value(x);
  for (auto& e : out.values()) {
    const T v = e;
    e = static_cast<T>(0.5) * v * (T(1) + std::tanh(static_cast<T>(c) * (v + static_cast<T>(k) * v * v * v)));
  }
  return tape.push(std::move(out), [x](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& xv = tp.value(x);
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(static_cast<T>(c) * (v + static_cast<T>(k) * v * v * v));
      const T d = static_cast<T>(0.5) * (T(1) + th) +
                  static_cast<T>(0.5) * v * (T(1) - th * th) * static_cast<T>(c) *
                      (T(1) + static_cast<T>(3 * k) * v * v);
      gx[i] += g[i] * d;
    }
  });
}

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, double eps) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& gv = tape.value(gain);
  const Tensor<T>& bv = tape.value(bias);
  require_matrix(xv, "layer_norm");
  const std::size_t rows = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) throw DimensionError("layer_norm: parameter length mismatch");
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(rows);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xv(r, c);
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const T d = xv(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * rstd[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  if (!tape.recording()) return tape.push(std::move(out), {});
  return tape.push(std::move(out), [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](
                                       Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& gv2 = tp.value(gain);
    Tensor<T>& gg = tp.grad(gain);
    Tensor<T>& gb = tp.grad(bias);
    Tensor<T>& gx = tp.grad(x);
    const std::size_t rows2 = g.rows(), n2 = g.cols();
    std::vector<T> dxhat(n2);
    for (std::size_t r = 0; r < rows2; ++r) {
      T mean_d = 0, mean_dx = 0;
      for (std::size_t c = 0; c < n2; ++c) {
        gg[c] += g(r, c) * xhat(r, c);
        gb[c] += g(r, c);
        dxhat[c] = g(r, c) * gv2[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xhat(r, c);
      }
      mean_d /= static_cast<T>(n2);
      mean_dx /= static_cast<T>(n2);
      for (std::size_t c = 0; c < n2; ++c) {
        gx(r, c) += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
      }
    }
  });
}

template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids) {
  const Tensor<T>& tv = tape.value(table);
  require_matrix(tv, "embedding");
  const std::size_t d = tv.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(tv.rows()) + ")");
    }
    std::copy_n(tv.row(ids[r]).begin(), d, out.row(r).begin());
  }
  return tape.push(std::move(out), [table, idv = std::vector<int>(ids.begin(), ids.end())](
                                       Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gt = tp.grad(table);
    for (std::size_t r = 0; r < idv.size(); ++r) {
      auto dst = gt.row(idv[r]);
      auto src = g.row(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var slice_rows(Tape<T>& tape, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = tape.value(x);
  require_matrix(xv, "slice_rows");
  if (begin > end || end > xv.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t d = xv.cols();
  Tensor<T> out(Shape{end - begin, d},
                std::vector<T>(xv.data() + begin * d, xv.data() + end * d));
  return tape.push(std::move(out), [x, begin](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad(x);
    const std::size_t off = begin * g.cols();
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

template <typename T>
Var slice_cols(Tape<T>& tape, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = tape.value(x);
  require_matrix(xv, "slice_cols");
  if (begin > end || end > xv.cols()) throw DimensionError("slice_cols: range out of bounds");
  Tensor<T> out = Tensor<T>::matrix(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
  return tape.push(std::move(out), [x, begin](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c + begin) += g(r, c);
  });
}

template <typename T>
Var concat_rows(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_matrix(av, "concat_rows");
  require_matrix(bv, "concat_rows");
  if (av.cols() != bv.cols()) throw DimensionError("concat_rows: column mismatch");
  std::vector<T> data(av.values().begin(), av.values().end());
  data.insert(data.end(), bv.values().begin(), bv.values().end());
  const std::size_t na = av.size();
  Tensor<T> out(Shape{av.rows() + bv.rows(), av.cols()}, std::move(data));
  return tape.push(std::move(out), [a, b, na](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& ga = tp.grad(a);
    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    Tensor<T>& gb = tp.grad(b);
    for (std::size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  Tensor<T> out = sbd::softmax(tape.value(x), -1);
  return tape.push(std::move(out), [x](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& y = tp.value(Var{self});
    Tensor<T>& gx = tp.grad(x);
    const std::size_t rows = y.rows(), n = y.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

template <typename T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads, const BoolMatrix& allow) {
  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(k);
  const Tensor<T>& vv = tape.value(v);
  require_matrix(qv, "attention");
  const std::size_t m = qv.rows(), n = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != n) {
    throw DimensionError("attention: q/k/v shapes disagree");
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: heads must divide width");
  if (allow.rows != m || allow.cols != n) {
    throw DimensionError("attention: mask is " + std::to_string(allow.rows) + "x" +
                         std::to_string(allow.cols) + ", expected " + std::to_string(m) + "x" +
                         std::to_string(n));
  }
  const std::size_t dh = d / n_heads;
  const T scale_f = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Allowed keys per query, ascending.
  std::vector<std::size_t> row_ptr(m + 1, 0);
  std::vector<std::uint32_t> keys;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      if (allow(i, j)) keys.push_back(static_cast<std::uint32_t>(j));
    row_ptr[i + 1] = keys.size();
    if (row_ptr[i + 1] == row_ptr[i]) {
      throw DimensionError("attention: query row " + std::to_string(i) + " has no visible key");
    }
  }

  // probs[h * nnz + e] for the e-th allowed (i, j) pair.
  const std::size_t nnz = keys.size();
  std::vector<T> probs(n_heads * nnz);
  Tensor<T> out = Tensor<T>::matrix(m, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    T* p = probs.data() + h * nnz;
    for (std::size_t i = 0; i < m; ++i) {
      const T* qi = qv.data() + i * d + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
        const T* kj = kv.data() + keys[e] * d + off;
        T s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
        s *= scale_f;
        p[e] = s;
        mx = std::max(mx, s);
      }
      T z = 0;
      for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
        p[e] = std::exp(p[e] - mx);
        z += p[e];
      }
      T* oi = out.data() + i * d + off;
      for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
        p[e] /= z;
        const T* vj = vv.data() + keys[e] * d + off;
        for (std::size_t t = 0; t < dh; ++t) oi[t] += p[e] * vj[t];
      }
    }
  }
  if (!tape.recording()) return tape.push(std::move(out), {});
  return tape.push(std::move(out), [q, k, v, n_heads, dh, scale_f, row_ptr = std::move(row_ptr),
                                    keys = std::move(keys), probs = std::move(probs)](
                                       Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& qv2 = tp.value(q);
    const Tensor<T>& kv2 = tp.value(k);
    const Tensor<T>& vv2 = tp.value(v);
    Tensor<T>& gq = tp.grad(q);
    Tensor<T>& gk = tp.grad(k);
    Tensor<T>& gv = tp.grad(v);
    const std::size_t m2 = qv2.rows(), d2 = qv2.cols(), nnz2 = keys.size();
    std::vector<T> dp;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      const T* p = probs.data() + h * nnz2;
      for (std::size_t i = 0; i < m2; ++i) {
        const T* gi = g.data() + i * d2 + off;
        const std::size_t b = row_ptr[i], e_end = row_ptr[i + 1];
        dp.assign(e_end - b, T(0));
        T dot = 0;
        for (std::size_t e = b; e < e_end; ++e) {
          const std::size_t j = keys[e];
          const T* vj = vv2.data() + j * d2 + off;
          T* gvj = gv.data() + j * d2 + off;
          T acc = 0;
          for (std::size_t t = 0; t < dh; ++t) {
            acc += gi[t] * vj[t];
            gvj[t] += p[e] * gi[t];
          }
          dp[e - b] = acc;
          dot += p[e] * acc;
        }
        const T* qi = qv2.data() + i * d2 + off;
        T* gqi = gq.data() + i * d2 + off;
        for (std::size_t e = b; e < e_end; ++e) {
          const std::size_t j = keys[e];
          const T ds = p[e] * (dp[e - b] - dot) * scale_f;
          const T* kj = kv2.data() + j * d2 + off;
          T* gkj = gk.data() + j * d2 + off;
          for (std::size_t t = 0; t < dh; ++t) {
            gqi[t] += ds * kj[t];
            gkj[t] += ds * qi[t];
          }
        }
      }
    }
  });
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets,
                  std::span<const double> weights) {
  const Tensor<T>& lv = tape.value(logits);
  require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.rows(), c = lv.cols();
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("cross_entropy: expected " + std::to_string(n) +
                         " targets and weights");
  }
  std::vector<T> lse(n);
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    T mx = lv(r, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv(r, j));
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv(r, j) - mx);
    lse[r] = mx + std::log(z);
    if (weights[r] != 0.0) total += static_cast<T>(weights[r]) * (lse[r] - lv(r, targets[r]));
  }
  return tape.push(
      Tensor<T>::scalar(total),
      [logits, lse = std::move(lse), tg = std::vector<int>(targets.begin(), targets.end()),
       w = std::vector<double>(weights.begin(), weights.end())](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(Var{self})[0];
        const Tensor<T>& lv2 = tp.value(logits);
        Tensor<T>& gl = tp.grad(logits);
        for (std::size_t r = 0; r < lv2.rows(); ++r) {
          if (w[r] == 0.0) continue;
          const T coef = g * static_cast<T>(w[r]);
          for (std::size_t j = 0; j < lv2.cols(); ++j) {
            gl(r, j) += coef * std::exp(lv2(r, j) - lse[r]);
          }
          gl(r, tg[r]) -= coef;
        }
      });
}

#define SBD_INSTANTIATE(T)                                                                      \
  template class Tape<T>;                                                                       \
  template void backward<T>(Tape<T>&, Var, ParamStore<T>&);                                     \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                   \
  template Var add<T>(Tape<T>&, Var, Var);                                                      \
  template Var add_row<T>(Tape<T>&, Var, Var);                                                  \
  template Var scale<T>(Tape<T>&, Var, double);                                                 \
  template Var mul<T>(Tape<T>&, Var, Var);                                                      \
  template Var sum<T>(Tape<T>&, Var);                                                           \
  template Var gelu<T>(Tape<T>&, Var);                                                          \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, double);                                  \
  template Var embedding<T>(Tape<T>&, Var, std::span<const int>);                               \
  template Var slice_rows<T>(Tape<T>&, Var, std::size_t, std::size_t);                          \
  template Var slice_cols<T>(Tape<T>&, Var, std::size_t, std::size_t);                          \
  template Var concat_rows<T>(Tape<T>&, Var, Var);                                              \
  template Var softmax_rows<T>(Tape<T>&, Var);                                                  \
  template Var attention<T>(Tape<T>&, Var, Var, Var, std::size_t, const BoolMatrix&);           \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const int>, std::span<const double>);

SBD_INSTANTIATE(float)
SBD_INSTANTIATE(double)
#undef SBD_INSTANTIATE

}  // namespace sbd::ad
