#include "pgseg/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

namespace pgseg {

void set_num_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int num_threads() { return omp_get_max_threads(); }

}  // namespace pgseg

namespace pgseg::kern {

// ---------------------------------------------------------------------------
// matmul family. Accumulation over the contraction axis runs in a fixed order
// per output element, so outputs are bit-stable across thread counts.
// ---------------------------------------------------------------------------

void matmul(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    double* crow = C + i * n;
    if (!accumulate) std::memset(crow, 0, static_cast<size_t>(n) * sizeof(double));
    const double* arow = A + i * k;
    for (i64 l = 0; l < k; ++l) {
      const double a = arow[l];
      if (a == 0.0) continue;
      const double* brow = B + l * n;
#pragma omp simd
      for (i64 j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (i64 j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (i64 l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void matmul_tn(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    double* crow = C + i * n;
    if (!accumulate) std::memset(crow, 0, static_cast<size_t>(n) * sizeof(double));
    for (i64 r = 0; r < k; ++r) {
      const double a = A[r * m + i];
      if (a == 0.0) continue;
      const double* brow = B + r * n;
#pragma omp simd
      for (i64 j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

void im2col(const double* x, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* col) {
  const i64 OH = conv_out(H, K, stride, pad);
  const i64 OW = conv_out(W, K, stride, pad);
  const i64 L = OH * OW;
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 c = 0; c < C; ++c) {
    for (i64 t = 0; t < K * K; ++t) {
      const i64 kh = t / K, kw = t % K;
      double* dst = col + (c * K * K + t) * L;
      const double* src = x + c * H * W;
      for (i64 oh = 0; oh < OH; ++oh) {
        const i64 ih = oh * stride - pad + kh;
        if (ih < 0 || ih >= H) {
          std::memset(dst + oh * OW, 0, static_cast<size_t>(OW) * sizeof(double));
          continue;
        }
        for (i64 ow = 0; ow < OW; ++ow) {
          const i64 iw = ow * stride - pad + kw;
          dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[ih * W + iw] : 0.0;
        }
      }
    }
  }
}

void col2im(const double* col, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* x) {
  const i64 OH = conv_out(H, K, stride, pad);
  const i64 OW = conv_out(W, K, stride, pad);
  const i64 L = OH * OW;
  // Gather form: each input pixel sums every (tap, output) pair that read it.
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 c = 0; c < C; ++c) {
    for (i64 ih = 0; ih < H; ++ih) {
      double* dst = x + (c * H + ih) * W;
      for (i64 iw = 0; iw < W; ++iw) {
        double acc = 0.0;
        for (i64 kh = 0; kh < K; ++kh) {
          const i64 num = ih + pad - kh;
          if (num % stride != 0) continue;
          const i64 oh = num / stride;
          if (oh < 0 || oh >= OH) continue;
          for (i64 kw = 0; kw < K; ++kw) {
            const i64 numw = iw + pad - kw;
            if (numw % stride != 0) continue;
            const i64 ow = numw / stride;
            if (ow < 0 || ow >= OW) continue;
            acc += col[(c * K * K + kh * K + kw) * L + oh * OW + ow];
          }
        }
        dst[iw] = acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// bilinear resize (align_corners = false)
// ---------------------------------------------------------------------------

static inline void bilinear_coeffs(i64 o, i64 in, i64 out, i64& i0, i64& i1, double& w1) {
  const double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / out - 0.5;
  double f = std::floor(src);
  w1 = src - f;
  i0 = static_cast<i64>(f);
  i1 = i0 + 1;
  i0 = std::clamp<i64>(i0, 0, in - 1);
  i1 = std::clamp<i64>(i1, 0, in - 1);
}

void bilinear_fwd(const double* x, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* y) {
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 bc = 0; bc < B * C; ++bc) {
    for (i64 oh = 0; oh < OH; ++oh) {
      const double* plane = x + bc * H * W;
      double* dst = y + (bc * OH + oh) * OW;
      i64 h0, h1;
      double wh;
      bilinear_coeffs(oh, H, OH, h0, h1, wh);
      for (i64 ow = 0; ow < OW; ++ow) {
        i64 w0, w1;
        double ww;
        bilinear_coeffs(ow, W, OW, w0, w1, ww);
        const double top = plane[h0 * W + w0] * (1.0 - ww) + plane[h0 * W + w1] * ww;
        const double bot = plane[h1 * W + w0] * (1.0 - ww) + plane[h1 * W + w1] * ww;
        dst[ow] = top * (1.0 - wh) + bot * wh;
      }
    }
  }
}

void bilinear_bwd(const double* gy, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* gx) {
  // Scatter per (b,c) plane; planes are independent so the loop stays gather-form
  // at plane granularity.
#pragma omp parallel for schedule(static)
  for (i64 bc = 0; bc < B * C; ++bc) {
    double* dst = gx + bc * H * W;
    const double* src = gy + bc * OH * OW;
    for (i64 oh = 0; oh < OH; ++oh) {
      i64 h0, h1;
      double wh;
      bilinear_coeffs(oh, H, OH, h0, h1, wh);
      for (i64 ow = 0; ow < OW; ++ow) {
        i64 w0, w1;
        double ww;
        bilinear_coeffs(ow, W, OW, w0, w1, ww);
        const double g = src[oh * OW + ow];
        dst[h0 * W + w0] += g * (1.0 - wh) * (1.0 - ww);
        dst[h0 * W + w1] += g * (1.0 - wh) * ww;
        dst[h1 * W + w0] += g * wh * (1.0 - ww);
        dst[h1 * W + w1] += g * wh * ww;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// layer norm / softmax rows
// ---------------------------------------------------------------------------

void layernorm_fwd(const double* x, i64 rows, i64 D, double eps, const double* gamma,
                   const double* beta, double* y, double* mean, double* rstd) {
#pragma omp parallel for schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * D;
    double* yr = y + r * D;
    double mu = 0.0;
    for (i64 j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (i64 j = 0; j < D; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    if (gamma) {
      for (i64 j = 0; j < D; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
    } else {
      for (i64 j = 0; j < D; ++j) yr[j] = (xr[j] - mu) * rs;
    }
  }
}

void layernorm_bwd(const double* x, const double* mean, const double* rstd, const double* gamma,
                   const double* gy, i64 rows, i64 D, double* gx, double* ggamma, double* gbeta) {
#pragma omp parallel for schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * D;
    const double* gr = gy + r * D;
    double* gxr = gx + r * D;
    const double mu = mean[r], rs = rstd[r];
    double sum_g = 0.0, sum_gx = 0.0;
    for (i64 j = 0; j < D; ++j) {
      const double gh = gamma ? gr[j] * gamma[j] : gr[j];
      const double xh = (xr[j] - mu) * rs;
      sum_g += gh;
      sum_gx += gh * xh;
    }
    const double inv_d = 1.0 / static_cast<double>(D);
    for (i64 j = 0; j < D; ++j) {
      const double gh = gamma ? gr[j] * gamma[j] : gr[j];
      const double xh = (xr[j] - mu) * rs;
      gxr[j] += rs * (gh - inv_d * sum_g - xh * inv_d * sum_gx);
    }
  }
  if (gamma && ggamma) {
    // Parameter grads: gather over rows per feature.
#pragma omp parallel for schedule(static)
    for (i64 j = 0; j < D; ++j) {
      double gg = 0.0, gb = 0.0;
      for (i64 r = 0; r < rows; ++r) {
        const double xh = (x[r * D + j] - mean[r]) * rstd[r];
        gg += gy[r * D + j] * xh;
        gb += gy[r * D + j];
      }
      ggamma[j] += gg;
      gbeta[j] += gb;
    }
  }
}

void softmax_fwd(const double* x, i64 rows, i64 D, double* y) {
#pragma omp parallel for schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const double* xr = x + r * D;
    double* yr = y + r * D;
    double mx = xr[0];
    for (i64 j = 1; j < D; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (i64 j = 0; j < D; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    const double inv = 1.0 / z;
    for (i64 j = 0; j < D; ++j) yr[j] *= inv;
  }
}

void softmax_bwd(const double* y, const double* gy, i64 rows, i64 D, double* gx) {
#pragma omp parallel for schedule(static)
  for (i64 r = 0; r < rows; ++r) {
    const double* yr = y + r * D;
    const double* gr = gy + r * D;
    double* gxr = gx + r * D;
    double dot = 0.0;
    for (i64 j = 0; j < D; ++j) dot += yr[j] * gr[j];
    for (i64 j = 0; j < D; ++j) gxr[j] += yr[j] * (gr[j] - dot);
  }
}

// ---------------------------------------------------------------------------
// deformable 3x3 sampling
// ---------------------------------------------------------------------------

void deform_im2col(const double* x, const double* off, i64 C, i64 H, i64 W, double max_off,
                   double* col) {
  const i64 L = H * W;
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 t = 0; t < 9; ++t) {
    for (i64 h = 0; h < H; ++h) {
      const i64 kh = t / 3, kw = t % 3;
      for (i64 w = 0; w < W; ++w) {
        const i64 p = h * W + w;
        const double dy = std::clamp(off[(2 * t) * L + p], -max_off, max_off);
        const double dx = std::clamp(off[(2 * t + 1) * L + p], -max_off, max_off);
        const double py = static_cast<double>(h + kh - 1) + dy;
        const double px = static_cast<double>(w + kw - 1) + dx;
        const i64 y0 = static_cast<i64>(std::floor(py));
        const i64 x0 = static_cast<i64>(std::floor(px));
        const double fy = py - static_cast<double>(y0);
        const double fx = px - static_cast<double>(x0);
        const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
        const double w10 = fy * (1 - fx), w11 = fy * fx;
        const bool in00 = y0 >= 0 && y0 < H && x0 >= 0 && x0 < W;
        const bool in01 = y0 >= 0 && y0 < H && x0 + 1 >= 0 && x0 + 1 < W;
        const bool in10 = y0 + 1 >= 0 && y0 + 1 < H && x0 >= 0 && x0 < W;
        const bool in11 = y0 + 1 >= 0 && y0 + 1 < H && x0 + 1 >= 0 && x0 + 1 < W;
        for (i64 c = 0; c < C; ++c) {
          const double* plane = x + c * L;
          double v = 0.0;
          if (in00) v += w00 * plane[y0 * W + x0];
          if (in01) v += w01 * plane[y0 * W + x0 + 1];
          if (in10) v += w10 * plane[(y0 + 1) * W + x0];
          if (in11) v += w11 * plane[(y0 + 1) * W + x0 + 1];
          col[(c * 9 + t) * L + p] = v;
        }
      }
    }
  }
}

void deform_col_bwd(const double* x, const double* off, const double* gcol, i64 C, i64 H, i64 W,
                    double max_off, double* gx, double* goff) {
  const i64 L = H * W;
  // goff is gather-form over taps/positions; gx is scatter within a tap but taps
  // write disjoint offset-grad slots, so parallelize over taps for goff and run
  // the gx scatter serialized per tap block below.
#pragma omp parallel for schedule(static)
  for (i64 t = 0; t < 9; ++t) {
    const i64 kh = t / 3, kw = t % 3;
    for (i64 p = 0; p < L; ++p) {
      const i64 h = p / W, w = p % W;
      const double rdy = off[(2 * t) * L + p];
      const double rdx = off[(2 * t + 1) * L + p];
      const double dy = std::clamp(rdy, -max_off, max_off);
      const double dx = std::clamp(rdx, -max_off, max_off);
      const double py = static_cast<double>(h + kh - 1) + dy;
      const double px = static_cast<double>(w + kw - 1) + dx;
      const i64 y0 = static_cast<i64>(std::floor(py));
      const i64 x0 = static_cast<i64>(std::floor(px));
      const double fy = py - static_cast<double>(y0);
      const double fx = px - static_cast<double>(x0);
      double gdy = 0.0, gdx = 0.0;
      for (i64 c = 0; c < C; ++c) {
        const double g = gcol[(c * 9 + t) * L + p];
        if (g == 0.0) continue;
        const double* plane = x + c * L;
        double v00 = 0, v01 = 0, v10 = 0, v11 = 0;
        if (y0 >= 0 && y0 < H) {
          if (x0 >= 0 && x0 < W) v00 = plane[y0 * W + x0];
          if (x0 + 1 >= 0 && x0 + 1 < W) v01 = plane[y0 * W + x0 + 1];
        }
        if (y0 + 1 >= 0 && y0 + 1 < H) {
          if (x0 >= 0 && x0 < W) v10 = plane[(y0 + 1) * W + x0];
          if (x0 + 1 >= 0 && x0 + 1 < W) v11 = plane[(y0 + 1) * W + x0 + 1];
        }
        gdy += g * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
        gdx += g * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
      }
      // clamp subgradient: zero outside the active range
      goff[(2 * t) * L + p] += (rdy > -max_off && rdy < max_off) ? gdy : 0.0;
      goff[(2 * t + 1) * L + p] += (rdx > -max_off && rdx < max_off) ? gdx : 0.0;
    }
  }
  // gx: scatter over channel planes; each plane is owned by one iteration.
#pragma omp parallel for schedule(static)
  for (i64 c = 0; c < C; ++c) {
    double* gplane = gx + c * L;
    for (i64 t = 0; t < 9; ++t) {
      const i64 kh = t / 3, kw = t % 3;
      const double* gc = gcol + (c * 9 + t) * L;
      for (i64 p = 0; p < L; ++p) {
        const double g = gc[p];
        if (g == 0.0) continue;
        const i64 h = p / W, w = p % W;
        const double dy = std::clamp(off[(2 * t) * L + p], -max_off, max_off);
        const double dx = std::clamp(off[(2 * t + 1) * L + p], -max_off, max_off);
        const double py = static_cast<double>(h + kh - 1) + dy;
        const double px = static_cast<double>(w + kw - 1) + dx;
        const i64 y0 = static_cast<i64>(std::floor(py));
        const i64 x0 = static_cast<i64>(std::floor(px));
        const double fy = py - static_cast<double>(y0);
        const double fx = px - static_cast<double>(x0);
        if (y0 >= 0 && y0 < H) {
          if (x0 >= 0 && x0 < W) gplane[y0 * W + x0] += g * (1 - fy) * (1 - fx);
          if (x0 + 1 >= 0 && x0 + 1 < W) gplane[y0 * W + x0 + 1] += g * (1 - fy) * fx;
        }
        if (y0 + 1 >= 0 && y0 + 1 < H) {
          if (x0 >= 0 && x0 < W) gplane[(y0 + 1) * W + x0] += g * fy * (1 - fx);
          if (x0 + 1 >= 0 && x0 + 1 < W) gplane[(y0 + 1) * W + x0 + 1] += g * fy * fx;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// exact squared EDT (Felzenszwalb-Huttenlocher, two 1-D passes)
// ---------------------------------------------------------------------------

static void edt_1d(const double* f, i64 n, double* d, i64* v, double* z) {
  const double INF = std::numeric_limits<double>::infinity();
  // Envelope over finite parabolas only; infinite sources never win.
  i64 q = -1;
  for (i64 i = 0; i < n; ++i) {
    if (!std::isfinite(f[i])) continue;
    if (q < 0) {
      q = 0;
      v[0] = i;
      z[0] = -INF;
      z[1] = INF;
      continue;
    }
    double s = ((f[i] + static_cast<double>(i * i)) -
                (f[v[q]] + static_cast<double>(v[q] * v[q]))) /
               (2.0 * static_cast<double>(i - v[q]));
    while (s <= z[q]) {
      --q;
      s = ((f[i] + static_cast<double>(i * i)) -
           (f[v[q]] + static_cast<double>(v[q] * v[q]))) /
          (2.0 * static_cast<double>(i - v[q]));
    }
    ++q;
    v[q] = i;
    z[q] = s;
    z[q + 1] = INF;
  }
  if (q < 0) {
    for (i64 i = 0; i < n; ++i) d[i] = INF;
    return;
  }
  q = 0;
  for (i64 i = 0; i < n; ++i) {
    while (z[q + 1] < static_cast<double>(i)) ++q;
    const double dx = static_cast<double>(i - v[q]);
    d[i] = dx * dx + f[v[q]];
  }
}

void edt_sq(const std::uint8_t* grid, i64 H, i64 W, double* d2) {
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> tmp(static_cast<size_t>(H * W));
  // columns first
#pragma omp parallel
  {
    std::vector<double> f(static_cast<size_t>(std::max(H, W)));
    std::vector<double> d(static_cast<size_t>(std::max(H, W)));
    std::vector<i64> v(static_cast<size_t>(std::max(H, W)));
    std::vector<double> z(static_cast<size_t>(std::max(H, W)) + 1);
#pragma omp for schedule(static)
    for (i64 x = 0; x < W; ++x) {
      for (i64 y = 0; y < H; ++y) f[y] = grid[y * W + x] ? 0.0 : INF;
      edt_1d(f.data(), H, d.data(), v.data(), z.data());
      for (i64 y = 0; y < H; ++y) tmp[y * W + x] = d[y];
    }
#pragma omp for schedule(static)
    for (i64 y = 0; y < H; ++y) {
      for (i64 x = 0; x < W; ++x) f[x] = tmp[y * W + x];
      edt_1d(f.data(), W, d.data(), v.data(), z.data());
      for (i64 x = 0; x < W; ++x) d2[y * W + x] = d[x];
    }
  }
}

}  // namespace pgseg::kern
