#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hiermusic/nn/tape.hpp"

// Differentiable operations over Tape variables. All matrix ops treat their
// operands as rank-2 (rank-1 tensors are a single row).
namespace hiermusic::nn {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline Tensor as_matrix(const Tensor& t) {
  return Tensor::matrix(t.rows(), t.cols(), t.data());
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  Tensor out;
  gemm(a.value(), false, b.value(), false, out, false);
  const int ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), {a, b}, [&t, ia, ib](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) gemm(g, false, t.value(ib), true, *gin[0], true);
    if (gin[1]) gemm(t.value(ia), true, g, false, *gin[1], true);
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = a.tape();
  Tensor out;
  gemm(a.value(), false, b.value(), true, out, false);
  const int ia = a.id(), ib = b.id();
  return t.record("matmul_nt", std::move(out), {a, b}, [&t, ia, ib](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) gemm(g, false, t.value(ib), false, *gin[0], true);
    if (gin[1]) gemm(g, true, t.value(ia), false, *gin[1], true);
  });
}

inline Var add(Var a, Var b) {
  detail::require(a.value().size() == b.value().size(), "add: shape mismatch " + shape_str(a.value().shape()) +
                                                            " vs " + shape_str(b.value().shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record("add", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gin) {
    for (Tensor* d : gin)
      if (d)
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

inline Var sub(Var a, Var b) {
  detail::require(a.value().size() == b.value().size(), "sub: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record("sub", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
  });
}

inline Var mul(Var a, Var b) {
  detail::require(a.value().size() == b.value().size(), "mul: shape mismatch");
  Tape& t = a.tape();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return t.record("mul", std::move(out), {a, b}, [&t, ia, ib](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * bv[i];
      if (gin[1]) (*gin[1])[i] += g[i] * av[i];
    }
  });
}

/// x + b with b broadcast over rows (b has x.cols() entries).
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  detail::require(b.value().size() == xv.cols(), "add_bias: bias length " + std::to_string(b.value().size()) +
                                                     " != cols " + std::to_string(xv.cols()));
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % n];
  return x.tape().record("add_bias", std::move(out), {x, b}, [n](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i];
      if (gin[1]) (*gin[1])[i % n] += g[i];
    }
  });
}

/// x * r with r broadcast over rows (r has x.cols() entries).
inline Var mul_row(Var x, Var r) {
  Tape& t = x.tape();
  const Tensor& xv = x.value();
  detail::require(r.value().size() == xv.cols(), "mul_row: length mismatch");
  const std::size_t n = xv.cols();
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= r.value()[i % n];
  const int ix = x.id(), ir = r.id();
  return t.record("mul_row", std::move(out), {x, r}, [&t, ix, ir, n](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& xv = t.value(ix);
    const Tensor& rv = t.value(ir);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * rv[i % n];
      if (gin[1]) (*gin[1])[i % n] += g[i] * xv[i];
    }
  });
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= c;
  return x.tape().record("scale", std::move(out), {x}, [c](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += c * g[i];
  });
}

inline Var add_scalar(Var x, double c) {
  Tensor out = x.value();
  for (double& v : out.data()) v += c;
  return x.tape().record("add_scalar", std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  });
}

/// x * s for a 1-element variable s.
inline Var mul_scalar(Var x, Var s) {
  Tape& t = x.tape();
  detail::require(s.value().size() == 1, "mul_scalar: s must have one element");
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (double& v : out.data()) v *= sv;
  const int ix = x.id();
  return t.record("mul_scalar", std::move(out), {x, s}, [&t, ix, sv](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& xv = t.value(ix);
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += sv * g[i];
      acc += g[i] * xv[i];
    }
    if (gin[1]) (*gin[1])[0] += acc;
  });
}

inline Var relu(Var x) {
  Tape& t = x.tape();
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const int ix = x.id();
  return t.record("relu", std::move(out), {x}, [&t, ix](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*gin[0])[i] += g[i];
  });
}

inline Var exp(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::exp(v);
  Tape& t = x.tape();
  Tensor saved = out;
  return t.record("exp", std::move(out), {x}, [saved = std::move(saved)](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * saved[i];
  });
}

inline Var log(Var x) {
  Tape& t = x.tape();
  Tensor out = x.value();
  for (double& v : out.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
    v = std::log(v);
  }
  const int ix = x.id();
  return t.record("log", std::move(out), {x}, [&t, ix](const Tensor& g, std::span<Tensor* const> gin) {
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / xv[i];
  });
}

inline Var sum(Var x) {
  return x.tape().record("sum", Tensor::scalar(x.value().sum()), {x},
                         [](const Tensor& g, std::span<Tensor* const> gin) {
                           for (double& d : gin[0]->data()) d += g[0];
                         });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return x.tape().record("mean", Tensor::scalar(x.value().sum() / n), {x},
                         [n](const Tensor& g, std::span<Tensor* const> gin) {
                           for (double& d : gin[0]->data()) d += g[0] / n;
                         });
}

inline Var transpose(Var x) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = xv(i, j);
  return x.tape().record("transpose", std::move(out), {x}, [r, c](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += g(j, i);
  });
}

/// Row-wise layer normalization with learned gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = x.tape();
  const Tensor& xv = x.value();
  const std::size_t L = xv.rows(), D = xv.cols();
  detail::require(D >= 1, "layer_norm: D must be >= 1");
  detail::require(gain.value().size() == D && bias.value().size() == D, "layer_norm: gain/bias length != D");
  Tensor xhat = Tensor::matrix(L, D);
  std::vector<double> inv_sigma(L);
  Tensor out = Tensor::matrix(L, D);
  for (std::size_t i = 0; i < L; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < D; ++j) mu += xv(i, j);
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(D);
    inv_sigma[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      xhat(i, j) = (xv(i, j) - mu) * inv_sigma[i];
      out(i, j) = gain.value()[j] * xhat(i, j) + bias.value()[j];
    }
  }
  const int ig = gain.id();
  return t.record("layer_norm", std::move(out), {x, gain, bias},
                  [&t, ig, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), L, D](
                      const Tensor& g, std::span<Tensor* const> gin) {
                    const Tensor& gv = t.value(ig);
                    std::vector<double> dxhat(D);
                    for (std::size_t i = 0; i < L; ++i) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < D; ++j) {
                        dxhat[j] = g(i, j) * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat(i, j);
                        if (gin[1]) (*gin[1])[j] += g(i, j) * xhat(i, j);
                        if (gin[2]) (*gin[2])[j] += g(i, j);
                      }
                      m1 /= static_cast<double>(D);
                      m2 /= static_cast<double>(D);
                      if (gin[0])
                        for (std::size_t j = 0; j < D; ++j)
                          (*gin[0])(i, j) += inv_sigma[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
                    }
                  });
}

/// Per-column standardization over rows: (x - mean_col) / std_col, with the
/// population std floored at eps.
inline Var standardize_cols(Var x, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t L = xv.rows(), D = xv.cols();
  detail::require(L >= 1, "standardize_cols: need at least one row");
  Tensor xhat = Tensor::matrix(L, D);
  std::vector<double> inv_sigma(D);
  std::vector<bool> floored(D);
  for (std::size_t j = 0; j < D; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < L; ++i) mu += xv(i, j);
    mu /= static_cast<double>(L);
    double var = 0.0;
    for (std::size_t i = 0; i < L; ++i) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(L);
    const double sigma = std::sqrt(var);
    floored[j] = sigma < eps;
    inv_sigma[j] = 1.0 / (floored[j] ? eps : sigma);
    for (std::size_t i = 0; i < L; ++i) xhat(i, j) = (xv(i, j) - mu) * inv_sigma[j];
  }
  Tensor out = xhat;
  return x.tape().record("standardize_cols", std::move(out), {x},
                         [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), floored = std::move(floored), L,
                          D](const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t j = 0; j < D; ++j) {
                             double m1 = 0.0, m2 = 0.0;
                             for (std::size_t i = 0; i < L; ++i) {
                               m1 += g(i, j);
                               m2 += g(i, j) * xhat(i, j);
                             }
                             m1 /= static_cast<double>(L);
                             m2 /= static_cast<double>(L);
                             for (std::size_t i = 0; i < L; ++i) {
                               const double corr = floored[j] ? 0.0 : xhat(i, j) * m2;
                               (*gin[0])(i, j) += inv_sigma[j] * (g(i, j) - m1 - corr);
                             }
                           }
                         });
}

/// Row softmax. When `mask` is given (row-major, same shape), entries with
/// mask == 0 get probability exactly 0; fully masked rows are all zero.
inline Tensor softmax_rows_value(const Tensor& x, const std::vector<char>* mask = nullptr) {
  const std::size_t L = x.rows(), C = x.cols();
  Tensor out = Tensor::matrix(L, C);
  for (std::size_t i = 0; i < L; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j)
      if (!mask || (*mask)[i * C + j]) mx = std::max(mx, x(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      if (mask && !(*mask)[i * C + j]) continue;
      out(i, j) = std::exp(x(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < C; ++j) out(i, j) /= z;
  }
  return out;
}

inline Var softmax_rows(Var x, std::optional<std::vector<char>> mask = std::nullopt) {
  const Tensor& xv = x.value();
  if (mask) detail::require(mask->size() == xv.size(), "softmax_rows: mask shape mismatch");
  Tensor out = softmax_rows_value(xv, mask ? &*mask : nullptr);
  Tensor p = out;
  return x.tape().record("softmax_rows", std::move(out), {x}, [p = std::move(p)](const Tensor& g, std::span<Tensor* const> gin) {
    const std::size_t L = p.rows(), C = p.cols();
    for (std::size_t i = 0; i < L; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < C; ++j) dot += g(i, j) * p(i, j);
      for (std::size_t j = 0; j < C; ++j) (*gin[0])(i, j) += p(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t L = xv.rows(), C = xv.cols();
  Tensor out = Tensor::matrix(L, C);
  for (std::size_t i = 0; i < L; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, xv(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(xv(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < C; ++j) out(i, j) = xv(i, j) - lse;
  }
  Tensor saved = out;
  return x.tape().record("log_softmax_rows", std::move(out), {x},
                         [saved = std::move(saved)](const Tensor& g, std::span<Tensor* const> gin) {
                           const std::size_t L = saved.rows(), C = saved.cols();
                           for (std::size_t i = 0; i < L; ++i) {
                             double gs = 0.0;
                             for (std::size_t j = 0; j < C; ++j) gs += g(i, j);
                             for (std::size_t j = 0; j < C; ++j)
                               (*gin[0])(i, j) += g(i, j) - std::exp(saved(i, j)) * gs;
                           }
                         });
}

/// Mean negative log-likelihood of targets[i] under softmax(logits row i).
/// Rows with a negative target are skipped. Optional per-row weights.
inline Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<double>* weights = nullptr) {
  const Tensor& xv = logits.value();
  const std::size_t L = xv.rows(), C = xv.cols();
  detail::require(targets.size() == L, "cross_entropy: need one target per row");
  Tensor probs = Tensor::matrix(L, C);
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    if (targets[i] < 0) continue;
    detail::require(static_cast<std::size_t>(targets[i]) < C, "cross_entropy: target out of range");
    const double w = weights ? (*weights)[i] : 1.0;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, xv(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      probs(i, j) = std::exp(xv(i, j) - mx);
      z += probs(i, j);
    }
    for (std::size_t j = 0; j < C; ++j) probs(i, j) /= z;
    total += w * (mx + std::log(z) - xv(i, static_cast<std::size_t>(targets[i])));
    wsum += w;
  }
  detail::require(wsum > 0.0, "cross_entropy: no target rows");
  std::vector<double> w(L, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    if (targets[i] >= 0) w[i] = (weights ? (*weights)[i] : 1.0) / wsum;
  return logits.tape().record(
      "cross_entropy", Tensor::scalar(total / wsum), {logits},
      [probs = std::move(probs), targets, w = std::move(w)](const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t L = probs.rows(), C = probs.cols();
        for (std::size_t i = 0; i < L; ++i) {
          if (targets[i] < 0) continue;
          for (std::size_t j = 0; j < C; ++j) {
            const double y = static_cast<int>(j) == targets[i] ? 1.0 : 0.0;
            (*gin[0])(i, j) += g[0] * w[i] * (probs(i, j) - y);
          }
        }
      });
}

/// Embedding lookup: rows of `table` selected by ids.
inline Var gather_rows(Var table, const std::vector<int>& ids) {
  const Tensor& tv = table.value();
  const std::size_t D = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), D);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < tv.rows(),
                    "gather_rows: id " + std::to_string(ids[i]) + " out of range");
    for (std::size_t j = 0; j < D; ++j) out(i, j) = tv(static_cast<std::size_t>(ids[i]), j);
  }
  return table.tape().record("gather_rows", std::move(out), {table}, [ids, D](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < D; ++j) (*gin[0])[static_cast<std::size_t>(ids[i]) * D + j] += g(i, j);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t L = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require(p.value().rows() == L, "concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out = Tensor::matrix(L, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, off + j) = v(i, j);
    off += widths[k];
  }
  return parts[0].tape().record("concat_cols", std::move(out), parts, [widths, L, total](const Tensor& g, std::span<Tensor* const> gin) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (gin[k])
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gin[k])[i * widths[k] + j] += g[i * total + off + j];
      off += widths[k];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t D = parts[0].value().cols();
  std::vector<std::size_t> counts;
  std::vector<double> data;
  for (const Var& p : parts) {
    detail::require(p.value().cols() == D, "concat_rows: column count mismatch");
    counts.push_back(p.value().rows());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t L = data.size() / std::max<std::size_t>(D, 1);
  return parts[0].tape().record("concat_rows", Tensor::matrix(L, D, std::move(data)), parts,
                                [counts, D](const Tensor& g, std::span<Tensor* const> gin) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < counts.size(); ++k) {
                                    const std::size_t n = counts[k] * D;
                                    if (gin[k])
                                      for (std::size_t i = 0; i < n; ++i) (*gin[k])[i] += g[off + i];
                                    off += n;
                                  }
                                });
}

inline Var slice_cols(Var x, std::size_t start, std::size_t width) {
  const Tensor& xv = x.value();
  detail::require(start + width <= xv.cols(), "slice_cols: out of range");
  const std::size_t L = xv.rows(), C = xv.cols();
  Tensor out = Tensor::matrix(L, width);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = xv(i, start + j);
  return x.tape().record("slice_cols", std::move(out), {x}, [L, C, start, width](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < width; ++j) (*gin[0])[i * C + start + j] += g[i * width + j];
  });
}

inline Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  detail::require(start + count <= xv.rows(), "slice_rows: out of range");
  const std::size_t D = xv.cols();
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(start * D),
                           xv.data().begin() + static_cast<std::ptrdiff_t>((start + count) * D));
  return x.tape().record("slice_rows", Tensor::matrix(count, D, std::move(data)), {x},
                         [start, D](const Tensor& g, std::span<Tensor* const> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[start * D + i] += g[i];
                         });
}

/// Column means over rows: [L x D] -> [1 x D].
inline Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t L = xv.rows(), D = xv.cols();
  detail::require(L >= 1, "mean_rows: empty input");
  Tensor out = Tensor::matrix(1, D);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < D; ++j) out[j] += xv(i, j) / static_cast<double>(L);
  return x.tape().record("mean_rows", std::move(out), {x}, [L, D](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < D; ++j) (*gin[0])(i, j) += g[j] / static_cast<double>(L);
  });
}

/// Mean of the rows listed in each group: [L x D] -> [G x D].
inline Var group_mean_rows(Var x, const std::vector<std::vector<int>>& groups) {
  const Tensor& xv = x.value();
  const std::size_t D = xv.cols();
  Tensor out = Tensor::matrix(groups.size(), D);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    detail::require(!groups[k].empty(), "group_mean_rows: empty group");
    for (int r : groups[k])
      for (std::size_t j = 0; j < D; ++j)
        out(k, j) += xv(static_cast<std::size_t>(r), j) / static_cast<double>(groups[k].size());
  }
  return x.tape().record("group_mean_rows", std::move(out), {x}, [groups, D](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t k = 0; k < groups.size(); ++k) {
      const double inv = 1.0 / static_cast<double>(groups[k].size());
      for (int r : groups[k])
        for (std::size_t j = 0; j < D; ++j) (*gin[0])[static_cast<std::size_t>(r) * D + j] += g(k, j) * inv;
    }
  });
}

/// Inverted dropout; identity unless tape.training and p > 0.
inline Var dropout(Var x, double p) {
  Tape& t = x.tape();
  if (!t.training || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask = x.value().zeros_like();
  for (double& m : mask.data()) m = keep(t.rng) ? 1.0 / (1.0 - p) : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return t.record("dropout", std::move(out), {x}, [mask = std::move(mask)](const Tensor& g, std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * mask[i];
  });
}

}  // namespace hiermusic::nn
