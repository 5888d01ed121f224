#include <cmath>
#include <cstring>

#include "pgseg/autograd.hpp"
#include "pgseg/kernels.hpp"

namespace pgseg::ops {

namespace {

template <class F>
void par_for(i64 n, F f) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) f(i);
}

void require_same_shape(const Var& a, const Var& b, const char* what) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(what) + ": " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor y(a->value.shape());
  const double *pa = a->value.data(), *pb = b->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = pa[i] + pb[i]; });
  return t.make(std::move(y), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) accumulate_grad(*a, self.grad.data());
    if (b->requires_grad) accumulate_grad(*b, self.grad.data());
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor y(a->value.shape());
  const double *pa = a->value.data(), *pb = b->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = pa[i] - pb[i]; });
  return t.make(std::move(y), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) accumulate_grad(*a, self.grad.data());
    if (b->requires_grad) {
      Tensor& g = b->ensure_grad();
      double* pg = g.data();
      const double* ps = self.grad.data();
      par_for(g.numel(), [&](i64 i) { pg[i] -= ps[i]; });
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y(a->value.shape());
  const double *pa = a->value.data(), *pb = b->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = pa[i] * pb[i]; });
  return t.make(std::move(y), {a, b}, [a, b](Node& self) {
    const double* ps = self.grad.data();
    if (a->requires_grad) {
      double* g = a->ensure_grad().data();
      const double* pb = b->value.data();
      par_for(a->value.numel(), [&](i64 i) { g[i] += ps[i] * pb[i]; });
    }
    if (b->requires_grad) {
      double* g = b->ensure_grad().data();
      const double* pa = a->value.data();
      par_for(b->value.numel(), [&](i64 i) { g[i] += ps[i] * pa[i]; });
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = s * pa[i]; });
  return t.make(std::move(y), {a}, [a, s](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double* ps = self.grad.data();
    par_for(a->value.numel(), [&](i64 i) { g[i] += s * ps[i]; });
  });
}

Var add_scaled(Tape& t, Var m, Var delta, Var lambda) {
  require_same_shape(m, delta, "add_scaled");
  if (lambda->value.numel() != 1) throw ShapeError("add_scaled: lambda must be scalar");
  const double lam = lambda->value.item();
  if (!std::isfinite(lam)) throw StateError("add_scaled: non-finite step size");
  Tensor y(m->value.shape());
  const double *pm = m->value.data(), *pd = delta->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = pm[i] + lam * pd[i]; });
  return t.make(std::move(y), {m, delta, lambda}, [m, delta, lambda, lam](Node& self) {
    const double* ps = self.grad.data();
    if (m->requires_grad) accumulate_grad(*m, ps);
    if (delta->requires_grad) {
      double* g = delta->ensure_grad().data();
      par_for(delta->value.numel(), [&](i64 i) { g[i] += lam * ps[i]; });
    }
    if (lambda->requires_grad) {
      const double* pd = delta->value.data();
      double acc = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : acc)
      for (i64 i = 0; i < delta->value.numel(); ++i) acc += ps[i] * pd[i];
      lambda->ensure_grad().data()[0] += acc;
    }
  });
}

Var sum(Tape& t, Var a) {
  double acc = 0.0;
  const double* pa = a->value.data();
#pragma omp parallel for schedule(static) reduction(+ : acc)
  for (i64 i = 0; i < a->value.numel(); ++i) acc += pa[i];
  return t.make(Tensor::scalar(acc), {a}, [a](Node& self) {
    if (!a->requires_grad) return;
    const double g = self.grad.item();
    double* pg = a->ensure_grad().data();
    par_for(a->value.numel(), [&](i64 i) { pg[i] += g; });
  });
}

Var mean(Tape& t, Var a) { return scale(t, sum(t, a), 1.0 / static_cast<double>(a->value.numel())); }

Var weighted_sum(Tape& t, Var a, Tensor w) {
  if (!a->value.same_shape(w)) throw ShapeError("weighted_sum: shape mismatch");
  double acc = 0.0;
  const double *pa = a->value.data(), *pw = w.data();
#pragma omp parallel for schedule(static) reduction(+ : acc)
  for (i64 i = 0; i < a->value.numel(); ++i) acc += pa[i] * pw[i];
  return t.make(Tensor::scalar(acc), {a}, [a, w](Node& self) {
    if (!a->requires_grad) return;
    const double g = self.grad.item();
    double* pg = a->ensure_grad().data();
    const double* pw = w.data();
    par_for(a->value.numel(), [&](i64 i) { pg[i] += g * pw[i]; });
  });
}

Var sigmoid(Tape& t, Var a) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = 1.0 / (1.0 + std::exp(-pa[i])); });
  Tensor saved = y;
  return t.make(std::move(y), {a}, [a, saved](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double *ps = self.grad.data(), *py = saved.data();
    par_for(a->value.numel(), [&](i64 i) { g[i] += ps[i] * py[i] * (1.0 - py[i]); });
  });
}

Var gelu(Tape& t, Var a) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  par_for(y.numel(), [&](i64 i) { py[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * kInvSqrt2)); });
  return t.make(std::move(y), {a}, [a](Node& self) {
    if (!a->requires_grad) return;
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    double* g = a->ensure_grad().data();
    const double *ps = self.grad.data(), *pa = a->value.data();
    par_for(a->value.numel(), [&](i64 i) {
      const double x = pa[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += ps[i] * (cdf + x * pdf);
    });
  });
}

Var log_eps(Tape& t, Var a, double eps) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = std::log(pa[i] + eps); });
  return t.make(std::move(y), {a}, [a, eps](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double *ps = self.grad.data(), *pa = a->value.data();
    par_for(a->value.numel(), [&](i64 i) { g[i] += ps[i] / (pa[i] + eps); });
  });
}

Var clip01(Tape& t, Var a) {
  Tensor y(a->value.shape());
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(y.numel(), [&](i64 i) { py[i] = pa[i] < 0.0 ? 0.0 : (pa[i] > 1.0 ? 1.0 : pa[i]); });
  return t.make(std::move(y), {a}, [a](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double *ps = self.grad.data(), *pa = a->value.data();
    par_for(a->value.numel(), [&](i64 i) {
      if (pa[i] > 0.0 && pa[i] < 1.0) g[i] += ps[i];
    });
  });
}

Var reshape(Tape& t, Var a, std::vector<i64> shape) {
  Tensor y = a->value.reshape(std::move(shape));
  return t.make(std::move(y), {a}, [a](Node& self) {
    if (a->requires_grad) accumulate_grad(*a, self.grad.data());
  });
}

Var transpose_12(Tape& t, Var a) {
  if (a->value.ndim() != 3) throw ShapeError("transpose_12: expects rank 3");
  const i64 B = a->value.size(0), X = a->value.size(1), Y = a->value.size(2);
  Tensor y({B, Y, X});
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(B * Y, [&](i64 by) {
    const i64 b = by / Y, yy = by % Y;
    double* dst = py + (b * Y + yy) * X;
    const double* src = pa + b * X * Y + yy;
    for (i64 x = 0; x < X; ++x) dst[x] = src[x * Y];
  });
  return t.make(std::move(y), {a}, [a, B, X, Y](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double* ps = self.grad.data();
    par_for(B * X, [&](i64 bx) {
      const i64 b = bx / X, x = bx % X;
      double* dst = g + (b * X + x) * Y;
      const double* src = ps + b * Y * X + x;
      for (i64 yy = 0; yy < Y; ++yy) dst[yy] += src[yy * X];
    });
  });
}

Var permute_0213(Tape& t, Var a) {
  if (a->value.ndim() != 4) throw ShapeError("permute_0213: expects rank 4");
  const i64 A = a->value.size(0), B = a->value.size(1), C = a->value.size(2), D = a->value.size(3);
  Tensor y({A, C, B, D});
  const double* pa = a->value.data();
  double* py = y.data();
  par_for(A * C * B, [&](i64 idx) {
    const i64 i = idx / (C * B);
    const i64 c = (idx / B) % C;
    const i64 b = idx % B;
    std::memcpy(py + ((i * C + c) * B + b) * D, pa + ((i * B + b) * C + c) * D,
                static_cast<size_t>(D) * sizeof(double));
  });
  return t.make(std::move(y), {a}, [a, A, B, C, D](Node& self) {
    if (!a->requires_grad) return;
    double* g = a->ensure_grad().data();
    const double* ps = self.grad.data();
    par_for(A * B * C, [&](i64 idx) {
      const i64 i = idx / (B * C);
      const i64 b = (idx / C) % B;
      const i64 c = idx % C;
      double* dst = g + ((i * B + b) * C + c) * D;
      const double* src = ps + ((i * C + c) * B + b) * D;
      for (i64 d = 0; d < D; ++d) dst[d] += src[d];
    });
  });
}

Var concat_channels(Tape& t, Var a, Var b) {
  if (a->value.ndim() != 4 || b->value.ndim() != 4)
    throw ShapeError("concat_channels: expects rank 4");
  const i64 B = a->value.size(0), C1 = a->value.size(1), H = a->value.size(2),
            W = a->value.size(3);
  const i64 C2 = b->value.size(1);
  if (b->value.size(0) != B || b->value.size(2) != H || b->value.size(3) != W)
    throw ShapeError("concat_channels: incompatible shapes");
  Tensor y({B, C1 + C2, H, W});
  const i64 hw = H * W;
  const double *pa = a->value.data(), *pb = b->value.data();
  double* py = y.data();
  par_for(B, [&](i64 bi) {
    std::memcpy(py + bi * (C1 + C2) * hw, pa + bi * C1 * hw,
                static_cast<size_t>(C1 * hw) * sizeof(double));
    std::memcpy(py + (bi * (C1 + C2) + C1) * hw, pb + bi * C2 * hw,
                static_cast<size_t>(C2 * hw) * sizeof(double));
  });
  return t.make(std::move(y), {a, b}, [a, b, B, C1, C2, hw](Node& self) {
    const double* ps = self.grad.data();
    if (a->requires_grad) {
      double* g = a->ensure_grad().data();
      par_for(B * C1 * hw, [&](i64 i) {
        const i64 bi = i / (C1 * hw), r = i % (C1 * hw);
        g[i] += ps[bi * (C1 + C2) * hw + r];
      });
    }
    if (b->requires_grad) {
      double* g = b->ensure_grad().data();
      par_for(B * C2 * hw, [&](i64 i) {
        const i64 bi = i / (C2 * hw), r = i % (C2 * hw);
        g[i] += ps[(bi * (C1 + C2) + C1) * hw + r];
      });
    }
  });
}

// y = x * W^T + b with x (..., in), W (out, in)
Var linear(Tape& t, Var x, Var W, Var b) {
  const i64 in = x->value.size(-1);
  const i64 out = W->value.size(0);
  if (W->value.size(1) != in)
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " +
                     shape_str(W->value.shape()));
  const i64 rows = x->value.numel() / in;
  // transpose W once so the product runs down contiguous rows
  Tensor wt({in, out});
  {
    const double* pw = W->value.data();
    double* pt = wt.data();
    par_for(in, [&](i64 i) {
      for (i64 o = 0; o < out; ++o) pt[i * out + o] = pw[o * in + i];
    });
  }
  std::vector<i64> yshape = x->value.shape();
  yshape.back() = out;
  Tensor y(yshape);
  kern::matmul(x->value.data(), wt.data(), y.data(), rows, in, out);
  if (b) {
    if (b->value.numel() != out) throw ShapeError("linear: bias size mismatch");
    const double* pb = b->value.data();
    double* py = y.data();
    par_for(rows, [&](i64 r) {
      for (i64 o = 0; o < out; ++o) py[r * out + o] += pb[o];
    });
  }
  return t.make(std::move(y), {x, W, b}, [x, W, b, rows, in, out](Node& self) {
    const double* gy = self.grad.data();
    if (x->requires_grad)
      kern::matmul(gy, W->value.data(), x->ensure_grad().data(), rows, out, in, true);
    if (W->requires_grad)
      kern::matmul_tn(gy, x->value.data(), W->ensure_grad().data(), out, rows, in, true);
    if (b && b->requires_grad) {
      double* gb = b->ensure_grad().data();
#pragma omp parallel for schedule(static)
      for (i64 o = 0; o < out; ++o) {
        double acc = 0.0;
        for (i64 r = 0; r < rows; ++r) acc += gy[r * out + o];
        gb[o] += acc;
      }
    }
  });
}

Var matmul(Tape& t, Var a, Var b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2) throw ShapeError("matmul: expects rank 2");
  const i64 m = a->value.size(0), k = a->value.size(1), n = b->value.size(1);
  if (b->value.size(0) != k) throw ShapeError("matmul: inner dims disagree");
  Tensor y({m, n});
  kern::matmul(a->value.data(), b->value.data(), y.data(), m, k, n);
  return t.make(std::move(y), {a, b}, [a, b, m, k, n](Node& self) {
    const double* gy = self.grad.data();
    if (a->requires_grad)
      kern::matmul_nt(gy, b->value.data(), a->ensure_grad().data(), m, n, k, true);
    if (b->requires_grad)
      kern::matmul_tn(a->value.data(), gy, b->ensure_grad().data(), k, m, n, true);
  });
}

Var bmm(Tape& t, Var a, Var b) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3) throw ShapeError("bmm: expects rank 3");
  const i64 B = a->value.size(0), m = a->value.size(1), k = a->value.size(2), n = b->value.size(2);
  if (b->value.size(0) != B || b->value.size(1) != k) throw ShapeError("bmm: shape mismatch");
  Tensor y({B, m, n});
  for (i64 i = 0; i < B; ++i)
    kern::matmul(a->value.data() + i * m * k, b->value.data() + i * k * n, y.data() + i * m * n, m,
                 k, n);
  return t.make(std::move(y), {a, b}, [a, b, B, m, k, n](Node& self) {
    const double* gy = self.grad.data();
    if (a->requires_grad) {
      double* ga = a->ensure_grad().data();
      for (i64 i = 0; i < B; ++i)
        kern::matmul_nt(gy + i * m * n, b->value.data() + i * k * n, ga + i * m * k, m, n, k, true);
    }
    if (b->requires_grad) {
      double* gb = b->ensure_grad().data();
      for (i64 i = 0; i < B; ++i)
        kern::matmul_tn(a->value.data() + i * m * k, gy + i * m * n, gb + i * k * n, k, m, n, true);
    }
  });
}

Var bmm_nt(Tape& t, Var a, Var b) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3) throw ShapeError("bmm_nt: expects rank 3");
  const i64 B = a->value.size(0), m = a->value.size(1), k = a->value.size(2), n = b->value.size(1);
  if (b->value.size(0) != B || b->value.size(2) != k) throw ShapeError("bmm_nt: shape mismatch");
  Tensor y({B, m, n});
  for (i64 i = 0; i < B; ++i)
    kern::matmul_nt(a->value.data() + i * m * k, b->value.data() + i * n * k, y.data() + i * m * n,
                    m, k, n);
  return t.make(std::move(y), {a, b}, [a, b, B, m, k, n](Node& self) {
    const double* gy = self.grad.data();
    if (a->requires_grad) {
      double* ga = a->ensure_grad().data();
      for (i64 i = 0; i < B; ++i)
        kern::matmul(gy + i * m * n, b->value.data() + i * n * k, ga + i * m * k, m, n, k, true);
    }
    if (b->requires_grad) {
      double* gb = b->ensure_grad().data();
      for (i64 i = 0; i < B; ++i)
        kern::matmul_tn(gy + i * m * n, a->value.data() + i * m * k, gb + i * n * k, n, m, k, true);
    }
  });
}

Var layernorm(Tape& t, Var x, double eps, Var gamma, Var beta) {
  const i64 D = x->value.size(-1);
  const i64 rows = x->value.numel() / D;
  if (gamma && gamma->value.numel() != D) throw ShapeError("layernorm: gamma size mismatch");
  if ((gamma == nullptr) != (beta == nullptr))
    throw ArgumentError("layernorm: gamma and beta must come together");
  Tensor y(x->value.shape());
  Tensor mu({rows}), rstd({rows});
  kern::layernorm_fwd(x->value.data(), rows, D, eps, gamma ? gamma->value.data() : nullptr,
                      beta ? beta->value.data() : nullptr, y.data(), mu.data(), rstd.data());
  return t.make(std::move(y), {x, gamma, beta}, [x, gamma, beta, rows, D, mu, rstd](Node& self) {
    double* ggamma = (gamma && gamma->requires_grad) ? gamma->ensure_grad().data() : nullptr;
    double* gbeta = (beta && beta->requires_grad) ? beta->ensure_grad().data() : nullptr;
    if (x->requires_grad || ggamma) {
      kern::layernorm_bwd(x->value.data(), mu.data(), rstd.data(),
                          gamma ? gamma->value.data() : nullptr, self.grad.data(), rows, D,
                          x->requires_grad ? x->ensure_grad().data() : nullptr, ggamma, gbeta);
    }
  });
}

Var softmax_last(Tape& t, Var x) {
  const i64 D = x->value.size(-1);
  const i64 rows = x->value.numel() / D;
  Tensor y(x->value.shape());
  kern::softmax_fwd(x->value.data(), rows, D, y.data());
  Tensor saved = y;
  return t.make(std::move(y), {x}, [x, rows, D, saved](Node& self) {
    if (!x->requires_grad) return;
    kern::softmax_bwd(saved.data(), self.grad.data(), rows, D, x->ensure_grad().data());
  });
}

Var add_rows(Tape& t, Var x, Var rows) {
  if (x->value.ndim() != 3 || rows->value.ndim() != 2) throw ShapeError("add_rows: bad ranks");
  const i64 B = x->value.size(0), L = x->value.size(1), D = x->value.size(2);
  if (rows->value.size(0) != L || rows->value.size(1) != D)
    throw ShapeError("add_rows: row table mismatch");
  Tensor y(x->value.shape());
  const double *px = x->value.data(), *pr = rows->value.data();
  double* py = y.data();
  par_for(B * L, [&](i64 bl) {
    const i64 l = bl % L;
    for (i64 d = 0; d < D; ++d) py[bl * D + d] = px[bl * D + d] + pr[l * D + d];
  });
  return t.make(std::move(y), {x, rows}, [x, rows, B, L, D](Node& self) {
    const double* ps = self.grad.data();
    if (x->requires_grad) accumulate_grad(*x, ps);
    if (rows->requires_grad) {
      double* g = rows->ensure_grad().data();
#pragma omp parallel for schedule(static)
      for (i64 l = 0; l < L; ++l)
        for (i64 b = 0; b < B; ++b)
          for (i64 d = 0; d < D; ++d) g[l * D + d] += ps[(b * L + l) * D + d];
    }
  });
}

Var gap_hw(Tape& t, Var x) {
  if (x->value.ndim() != 4) throw ShapeError("gap_hw: expects NCHW");
  const i64 B = x->value.size(0), C = x->value.size(1), hw = x->value.size(2) * x->value.size(3);
  Tensor y({B, C});
  const double* px = x->value.data();
  double* py = y.data();
  par_for(B * C, [&](i64 bc) {
    double acc = 0.0;
    for (i64 p = 0; p < hw; ++p) acc += px[bc * hw + p];
    py[bc] = acc / static_cast<double>(hw);
  });
  return t.make(std::move(y), {x}, [x, B, C, hw](Node& self) {
    if (!x->requires_grad) return;
    double* g = x->ensure_grad().data();
    const double* ps = self.grad.data();
    const double inv = 1.0 / static_cast<double>(hw);
    par_for(B * C, [&](i64 bc) {
      const double gv = ps[bc] * inv;
      for (i64 p = 0; p < hw; ++p) g[bc * hw + p] += gv;
    });
  });
}

Var cosine_rows(Tape& t, Var a, Var b) {
  require_same_shape(a, b, "cosine_rows");
  if (a->value.ndim() != 2) throw ShapeError("cosine_rows: expects rank 2");
  const i64 B = a->value.size(0), d = a->value.size(1);
  Tensor y({B}), na({B}), nb({B});
  const double *pa = a->value.data(), *pb = b->value.data();
  for (i64 r = 0; r < B; ++r) {
    double sa = 0, sb = 0, dot = 0;
    for (i64 j = 0; j < d; ++j) {
      sa += pa[r * d + j] * pa[r * d + j];
      sb += pb[r * d + j] * pb[r * d + j];
      dot += pa[r * d + j] * pb[r * d + j];
    }
    if (sa == 0.0 || sb == 0.0)
      throw NumericError("cosine_rows: zero-norm row " + std::to_string(r));
    na.data()[r] = std::sqrt(sa);
    nb.data()[r] = std::sqrt(sb);
    y.data()[r] = dot / (na.data()[r] * nb.data()[r]);
  }
  Tensor cosv = y;
  return t.make(std::move(y), {a, b}, [a, b, B, d, na, nb, cosv](Node& self) {
    const double* ps = self.grad.data();
    const double *pa = a->value.data(), *pb = b->value.data();
    for (i64 r = 0; r < B; ++r) {
      const double g = ps[r], c = cosv.data()[r];
      const double ia = 1.0 / na.data()[r], ib = 1.0 / nb.data()[r];
      if (a->requires_grad) {
        double* ga = a->ensure_grad().data();
        for (i64 j = 0; j < d; ++j)
          ga[r * d + j] += g * (pb[r * d + j] * ia * ib - c * pa[r * d + j] * ia * ia);
      }
      if (b->requires_grad) {
        double* gb = b->ensure_grad().data();
        for (i64 j = 0; j < d; ++j)
          gb[r * d + j] += g * (pa[r * d + j] * ia * ib - c * pb[r * d + j] * ib * ib);
      }
    }
  });
}

Var affine_broadcast(Tape& t, Var c, Var w, Var bias) {
  if (c->value.ndim() != 1) throw ShapeError("affine_broadcast: c must be rank 1");
  const i64 B = c->value.size(0), L = w->value.numel();
  if (bias->value.numel() != L) throw ShapeError("affine_broadcast: w/bias mismatch");
  Tensor y({B, L});
  const double *pc = c->value.data(), *pw = w->value.data(), *pb = bias->value.data();
  double* py = y.data();
  par_for(B, [&](i64 r) {
    for (i64 l = 0; l < L; ++l) py[r * L + l] = pw[l] * pc[r] + pb[l];
  });
  return t.make(std::move(y), {c, w, bias}, [c, w, bias, B, L](Node& self) {
    const double* ps = self.grad.data();
    if (c->requires_grad) {
      double* g = c->ensure_grad().data();
      const double* pw = w->value.data();
      for (i64 r = 0; r < B; ++r) {
        double acc = 0.0;
        for (i64 l = 0; l < L; ++l) acc += ps[r * L + l] * pw[l];
        g[r] += acc;
      }
    }
    if (w->requires_grad) {
      double* g = w->ensure_grad().data();
      const double* pc = c->value.data();
#pragma omp parallel for schedule(static)
      for (i64 l = 0; l < L; ++l) {
        double acc = 0.0;
        for (i64 r = 0; r < B; ++r) acc += ps[r * L + l] * pc[r];
        g[l] += acc;
      }
    }
    if (bias->requires_grad) {
      double* g = bias->ensure_grad().data();
#pragma omp parallel for schedule(static)
      for (i64 l = 0; l < L; ++l) {
        double acc = 0.0;
        for (i64 r = 0; r < B; ++r) acc += ps[r * L + l];
        g[l] += acc;
      }
    }
  });
}

Var row_gate(Tape& t, Var x, Var g) {
  if (x->value.ndim() != 3 || g->value.ndim() != 2) throw ShapeError("row_gate: bad ranks");
  const i64 B = x->value.size(0), L = x->value.size(1), C = x->value.size(2);
  if (g->value.size(0) != B || g->value.size(1) != L) throw ShapeError("row_gate: gate mismatch");
  Tensor y(x->value.shape());
  const double *px = x->value.data(), *pg = g->value.data();
  double* py = y.data();
  par_for(B * L, [&](i64 bl) {
    const double gv = pg[bl];
    for (i64 c = 0; c < C; ++c) py[bl * C + c] = px[bl * C + c] * gv;
  });
  return t.make(std::move(y), {x, g}, [x, g, B, L, C](Node& self) {
    const double* ps = self.grad.data();
    if (x->requires_grad) {
      double* gx = x->ensure_grad().data();
      const double* pg = g->value.data();
      par_for(B * L, [&](i64 bl) {
        const double gv = pg[bl];
        for (i64 c = 0; c < C; ++c) gx[bl * C + c] += ps[bl * C + c] * gv;
      });
    }
    if (g->requires_grad) {
      double* gg = g->ensure_grad().data();
      const double* px = x->value.data();
      par_for(B * L, [&](i64 bl) {
        double acc = 0.0;
        for (i64 c = 0; c < C; ++c) acc += ps[bl * C + c] * px[bl * C + c];
        gg[bl] += acc;
      });
    }
  });
}

Var add_bias_rows(Tape& t, Var x, Var bias) {
  if (x->value.ndim() != 3 || bias->value.ndim() != 2) throw ShapeError("add_bias_rows: bad ranks");
  const i64 B = x->value.size(0), N = x->value.size(1), L = x->value.size(2);
  if (bias->value.size(0) != B || bias->value.size(1) != N)
    throw ShapeError("add_bias_rows: bias mismatch");
  Tensor y(x->value.shape());
  const double *px = x->value.data(), *pb = bias->value.data();
  double* py = y.data();
  par_for(B * N, [&](i64 bn) {
    const double bv = pb[bn];
    for (i64 l = 0; l < L; ++l) py[bn * L + l] = px[bn * L + l] + bv;
  });
  return t.make(std::move(y), {x, bias}, [x, bias, B, N, L](Node& self) {
    const double* ps = self.grad.data();
    if (x->requires_grad) accumulate_grad(*x, ps);
    if (bias->requires_grad) {
      double* g = bias->ensure_grad().data();
      par_for(B * N, [&](i64 bn) {
        double acc = 0.0;
        for (i64 l = 0; l < L; ++l) acc += ps[bn * L + l];
        g[bn] += acc;
      });
    }
  });
}

Var kernel_from_gate(Tape& t, Var gate, Var base) {
  if (gate->value.ndim() != 2 || base->value.ndim() != 4)
    throw ShapeError("kernel_from_gate: bad ranks");
  const i64 N = gate->value.size(0), Cin = gate->value.size(1);
  const i64 Co = base->value.size(1), K = base->value.size(2);
  if (base->value.size(0) != Cin || base->value.size(3) != K)
    throw ShapeError("kernel_from_gate: base " + shape_str(base->value.shape()) +
                     " vs gate width " + std::to_string(Cin));
  const i64 kk = K * K;
  Tensor y({N * Co, Cin, K, K});
  const double *pg = gate->value.data(), *pb = base->value.data();
  double* py = y.data();
  par_for(N * Co * Cin, [&](i64 idx) {
    const i64 i = idx / (Co * Cin);
    const i64 o = (idx / Cin) % Co;
    const i64 c = idx % Cin;
    const double gv = pg[i * Cin + c];
    const double* src = pb + (c * Co + o) * kk;
    double* dst = py + ((i * Co + o) * Cin + c) * kk;
    for (i64 q = 0; q < kk; ++q) dst[q] = gv * src[q];
  });
  return t.make(std::move(y), {gate, base}, [gate, base, N, Co, Cin, kk](Node& self) {
    const double* ps = self.grad.data();
    const double *pg = gate->value.data(), *pb = base->value.data();
    if (gate->requires_grad) {
      double* g = gate->ensure_grad().data();
      par_for(N * Cin, [&](i64 ic) {
        const i64 i = ic / Cin, c = ic % Cin;
        double acc = 0.0;
        for (i64 o = 0; o < Co; ++o) {
          const double* gs = ps + ((i * Co + o) * Cin + c) * kk;
          const double* bs = pb + (c * Co + o) * kk;
          for (i64 q = 0; q < kk; ++q) acc += gs[q] * bs[q];
        }
        g[ic] += acc;
      });
    }
    if (base->requires_grad) {
      double* g = base->ensure_grad().data();
      par_for(Cin * Co, [&](i64 co) {
        const i64 c = co / Co, o = co % Co;
        double* dst = g + (c * Co + o) * kk;
        for (i64 i = 0; i < N; ++i) {
          const double gv = pg[i * Cin + c];
          const double* gs = ps + ((i * Co + o) * Cin + c) * kk;
          for (i64 q = 0; q < kk; ++q) dst[q] += gv * gs[q];
        }
      });
    }
  });
}

}  // namespace pgseg::ops
