#include <cmath>

#include "pgseg/autograd.hpp"
#include "pgseg/kernels.hpp"

namespace pgseg::ops {

namespace {

template <class F>
void par_for(i64 n, F f) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) f(i);
}

void check_target(const std::vector<int>& target, i64 expect, i64 n_cls, const char* what) {
  if (static_cast<i64>(target.size()) != expect)
    throw ShapeError(std::string(what) + ": target has " + std::to_string(target.size()) +
                     " entries, expected " + std::to_string(expect));
  for (int v : target)
    if (v < 0 || v >= n_cls)
      throw ValidationError(std::string(what) + ": class id " + std::to_string(v) +
                            " out of range [0," + std::to_string(n_cls) + ")");
}

}  // namespace

Var softmax_channels(Tape& t, Var x);

Var ce_loss(Tape& t, Var logits, const std::vector<int>& target) {
  if (logits->value.ndim() != 4) throw ShapeError("ce_loss: expects (B,N,H,W) logits");
  const i64 B = logits->value.size(0), N = logits->value.size(1);
  const i64 hw = logits->value.size(2) * logits->value.size(3);
  const i64 npix = B * hw;
  check_target(target, npix, N, "ce_loss");
  if (!logits->value.all_finite()) throw NumericError("ce_loss: non-finite logits");

  Tensor probs(logits->value.shape());
  const double* px = logits->value.data();
  double* pp = probs.data();
  double loss = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : loss)
  for (i64 pix = 0; pix < npix; ++pix) {
    const i64 b = pix / hw, p = pix % hw;
    const double* row = px + b * N * hw + p;
    double mx = row[0];
    for (i64 c = 1; c < N; ++c) mx = std::max(mx, row[c * hw]);
    double z = 0.0;
    for (i64 c = 0; c < N; ++c) z += std::exp(row[c * hw] - mx);
    const double lse = mx + std::log(z);
    for (i64 c = 0; c < N; ++c) pp[b * N * hw + c * hw + p] = std::exp(row[c * hw] - lse);
    loss += lse - row[static_cast<i64>(target[pix]) * hw];
  }
  loss /= static_cast<double>(npix);
  auto tgt = std::make_shared<std::vector<int>>(target);
  return t.make(Tensor::scalar(loss), {logits}, [logits, probs, tgt, B, N, hw, npix](Node& self) {
    if (!logits->requires_grad) return;
    const double g = self.grad.item() / static_cast<double>(npix);
    double* gx = logits->ensure_grad().data();
    const double* pp = probs.data();
    par_for(npix, [&](i64 pix) {
      const i64 b = pix / hw, p = pix % hw;
      const int y = (*tgt)[pix];
      for (i64 c = 0; c < N; ++c) {
        const i64 at = b * N * hw + c * hw + p;
        gx[at] += g * (pp[at] - (c == y ? 1.0 : 0.0));
      }
    });
  });
}

Var dice_loss(Tape& t, Var probs, const std::vector<int>& target, double eps) {
  if (probs->value.ndim() != 4) throw ShapeError("dice_loss: expects (B,N,H,W) probs");
  const i64 B = probs->value.size(0), N = probs->value.size(1);
  const i64 hw = probs->value.size(2) * probs->value.size(3);
  const i64 npix = B * hw;
  check_target(target, npix, N, "dice_loss");

  std::vector<double> inter(N, 0.0), psum(N, 0.0), ysum(N, 0.0);
  const double* pp = probs->value.data();
#pragma omp parallel for schedule(static)
  for (i64 c = 0; c < N; ++c) {
    double in = 0, ps = 0, ys = 0;
    for (i64 b = 0; b < B; ++b) {
      const double* plane = pp + (b * N + c) * hw;
      const int* trow = target.data() + b * hw;
      for (i64 p = 0; p < hw; ++p) {
        const double y = (trow[p] == c) ? 1.0 : 0.0;
        in += plane[p] * y;
        ps += plane[p];
        ys += y;
      }
    }
    inter[c] = in;
    psum[c] = ps;
    ysum[c] = ys;
  }
  double mean_dice = 0.0;
  std::vector<double> denom(N), numer(N);
  for (i64 c = 0; c < N; ++c) {
    numer[c] = 2.0 * inter[c] + eps;
    denom[c] = psum[c] + ysum[c] + eps;
    mean_dice += numer[c] / denom[c];
  }
  mean_dice /= static_cast<double>(N);
  auto tgt = std::make_shared<std::vector<int>>(target);
  return t.make(Tensor::scalar(1.0 - mean_dice), {probs},
                [probs, tgt, numer, denom, B, N, hw](Node& self) {
                  if (!probs->requires_grad) return;
                  const double g = self.grad.item() / static_cast<double>(N);
                  double* gp = probs->ensure_grad().data();
                  par_for(B * N, [&](i64 bc) {
                    const i64 b = bc / N, c = bc % N;
                    const int* trow = tgt->data() + b * hw;
                    const double d = denom[c], nm = numer[c];
                    double* grow = gp + bc * hw;
                    for (i64 p = 0; p < hw; ++p) {
                      const double y = (trow[p] == c) ? 1.0 : 0.0;
                      grow[p] -= g * (2.0 * y * d - nm) / (d * d);
                    }
                  });
                });
}

// Softmax over the channel axis of an NCHW tensor (per-pixel distribution).
Var softmax_channels(Tape& t, Var x) {
  if (x->value.ndim() != 4) throw ShapeError("softmax_channels: expects NCHW");
  const i64 B = x->value.size(0), N = x->value.size(1);
  const i64 hw = x->value.size(2) * x->value.size(3);
  Tensor y(x->value.shape());
  const double* px = x->value.data();
  double* py = y.data();
  par_for(B * hw, [&](i64 pix) {
    const i64 b = pix / hw, p = pix % hw;
    const double* row = px + b * N * hw + p;
    double* orow = py + b * N * hw + p;
    double mx = row[0];
    for (i64 c = 1; c < N; ++c) mx = std::max(mx, row[c * hw]);
    double z = 0.0;
    for (i64 c = 0; c < N; ++c) z += std::exp(row[c * hw] - mx);
    const double inv = 1.0 / z;
    for (i64 c = 0; c < N; ++c) orow[c * hw] = std::exp(row[c * hw] - mx) * inv;
  });
  Tensor saved = y;
  return t.make(std::move(y), {x}, [x, saved, B, N, hw](Node& self) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double *gy = self.grad.data(), *py = saved.data();
    par_for(B * hw, [&](i64 pix) {
      const i64 b = pix / hw, p = pix % hw;
      double dot = 0.0;
      for (i64 c = 0; c < N; ++c) {
        const i64 at = b * N * hw + c * hw + p;
        dot += py[at] * gy[at];
      }
      for (i64 c = 0; c < N; ++c) {
        const i64 at = b * N * hw + c * hw + p;
        gx[at] += py[at] * (gy[at] - dot);
      }
    });
  });
}

}  // namespace pgseg::ops
