// Plain single-threaded reference kernels. These are the correctness baseline
// the OpenMP versions are tested and benchmarked against; keep them naive.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "pgseg/kernels.hpp"

namespace pgseg::kern::serial {

void matmul(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      double acc = accumulate ? C[i * n + j] : 0.0;
      for (i64 l = 0; l < k; ++l) acc += A[i * k + l] * B[l * n + j];
      C[i * n + j] = acc;
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      double acc = accumulate ? C[i * n + j] : 0.0;
      for (i64 l = 0; l < k; ++l) acc += A[i * k + l] * B[j * k + l];
      C[i * n + j] = acc;
    }
  }
}

void matmul_tn(const double* A, const double* B, double* C, i64 m, i64 k, i64 n, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      double acc = accumulate ? C[i * n + j] : 0.0;
      for (i64 l = 0; l < k; ++l) acc += A[l * m + i] * B[l * n + j];
      C[i * n + j] = acc;
    }
  }
}

void im2col(const double* x, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* col) {
  const i64 OH = conv_out(H, K, stride, pad);
  const i64 OW = conv_out(W, K, stride, pad);
  const i64 L = OH * OW;
  for (i64 c = 0; c < C; ++c)
    for (i64 kh = 0; kh < K; ++kh)
      for (i64 kw = 0; kw < K; ++kw)
        for (i64 oh = 0; oh < OH; ++oh)
          for (i64 ow = 0; ow < OW; ++ow) {
            const i64 ih = oh * stride - pad + kh;
            const i64 iw = ow * stride - pad + kw;
            const double v =
                (ih >= 0 && ih < H && iw >= 0 && iw < W) ? x[(c * H + ih) * W + iw] : 0.0;
            col[(c * K * K + kh * K + kw) * L + oh * OW + ow] = v;
          }
}

void col2im(const double* col, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* x) {
  const i64 OH = conv_out(H, K, stride, pad);
  const i64 OW = conv_out(W, K, stride, pad);
  const i64 L = OH * OW;
  std::memset(x, 0, static_cast<size_t>(C * H * W) * sizeof(double));
  for (i64 c = 0; c < C; ++c)
    for (i64 kh = 0; kh < K; ++kh)
      for (i64 kw = 0; kw < K; ++kw)
        for (i64 oh = 0; oh < OH; ++oh)
          for (i64 ow = 0; ow < OW; ++ow) {
            const i64 ih = oh * stride - pad + kh;
            const i64 iw = ow * stride - pad + kw;
            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
            x[(c * H + ih) * W + iw] += col[(c * K * K + kh * K + kw) * L + oh * OW + ow];
          }
}

static void coeffs(i64 o, i64 in, i64 out, i64& i0, i64& i1, double& w1) {
  const double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / out - 0.5;
  const double f = std::floor(src);
  w1 = src - f;
  i0 = std::clamp<i64>(static_cast<i64>(f), 0, in - 1);
  i1 = std::clamp<i64>(static_cast<i64>(f) + 1, 0, in - 1);
}

void bilinear_fwd(const double* x, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* y) {
  for (i64 bc = 0; bc < B * C; ++bc)
    for (i64 oh = 0; oh < OH; ++oh)
      for (i64 ow = 0; ow < OW; ++ow) {
        i64 h0, h1, w0, w1;
        double wh, ww;
        coeffs(oh, H, OH, h0, h1, wh);
        coeffs(ow, W, OW, w0, w1, ww);
        const double* p = x + bc * H * W;
        const double top = p[h0 * W + w0] * (1 - ww) + p[h0 * W + w1] * ww;
        const double bot = p[h1 * W + w0] * (1 - ww) + p[h1 * W + w1] * ww;
        y[(bc * OH + oh) * OW + ow] = top * (1 - wh) + bot * wh;
      }
}

void bilinear_bwd(const double* gy, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* gx) {
  for (i64 bc = 0; bc < B * C; ++bc)
    for (i64 oh = 0; oh < OH; ++oh)
      for (i64 ow = 0; ow < OW; ++ow) {
        i64 h0, h1, w0, w1;
        double wh, ww;
        coeffs(oh, H, OH, h0, h1, wh);
        coeffs(ow, W, OW, w0, w1, ww);
        const double g = gy[(bc * OH + oh) * OW + ow];
        double* p = gx + bc * H * W;
        p[h0 * W + w0] += g * (1 - wh) * (1 - ww);
        p[h0 * W + w1] += g * (1 - wh) * ww;
        p[h1 * W + w0] += g * wh * (1 - ww);
        p[h1 * W + w1] += g * wh * ww;
      }
}

void layernorm_fwd(const double* x, i64 rows, i64 D, double eps, const double* gamma,
                   const double* beta, double* y, double* mean, double* rstd) {
  for (i64 r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (i64 j = 0; j < D; ++j) mu += x[r * D + j];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (i64 j = 0; j < D; ++j) var += (x[r * D + j] - mu) * (x[r * D + j] - mu);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (i64 j = 0; j < D; ++j) {
      double v = (x[r * D + j] - mu) * rs;
      if (gamma) v = v * gamma[j] + beta[j];
      y[r * D + j] = v;
    }
  }
}

void softmax_fwd(const double* x, i64 rows, i64 D, double* y) {
  for (i64 r = 0; r < rows; ++r) {
    double mx = x[r * D];
    for (i64 j = 1; j < D; ++j) mx = std::max(mx, x[r * D + j]);
    double z = 0.0;
    for (i64 j = 0; j < D; ++j) {
      y[r * D + j] = std::exp(x[r * D + j] - mx);
      z += y[r * D + j];
    }
    for (i64 j = 0; j < D; ++j) y[r * D + j] /= z;
  }
}

void deform_im2col(const double* x, const double* off, i64 C, i64 H, i64 W, double max_off,
                   double* col) {
  const i64 L = H * W;
  for (i64 c = 0; c < C; ++c)
    for (i64 t = 0; t < 9; ++t)
      for (i64 p = 0; p < L; ++p) {
        const i64 h = p / W, w = p % W;
        const i64 kh = t / 3, kw = t % 3;
        const double dy = std::clamp(off[(2 * t) * L + p], -max_off, max_off);
        const double dx = std::clamp(off[(2 * t + 1) * L + p], -max_off, max_off);
        const double py = static_cast<double>(h + kh - 1) + dy;
        const double px = static_cast<double>(w + kw - 1) + dx;
        const i64 y0 = static_cast<i64>(std::floor(py));
        const i64 x0 = static_cast<i64>(std::floor(px));
        const double fy = py - static_cast<double>(y0);
        const double fx = px - static_cast<double>(x0);
        double v = 0.0;
        auto sample = [&](i64 yy, i64 xx) -> double {
          return (yy >= 0 && yy < H && xx >= 0 && xx < W) ? x[(c * H + yy) * W + xx] : 0.0;
        };
        v += (1 - fy) * (1 - fx) * sample(y0, x0);
        v += (1 - fy) * fx * sample(y0, x0 + 1);
        v += fy * (1 - fx) * sample(y0 + 1, x0);
        v += fy * fx * sample(y0 + 1, x0 + 1);
        col[(c * 9 + t) * L + p] = v;
      }
}

void edt_sq(const std::uint8_t* grid, i64 H, i64 W, double* d2) {
  // Brute force all-pairs nearest site.
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<i64> sy, sx;
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x)
      if (grid[y * W + x]) {
        sy.push_back(y);
        sx.push_back(x);
      }
  for (i64 y = 0; y < H; ++y)
    for (i64 x = 0; x < W; ++x) {
      double best = INF;
      for (size_t s = 0; s < sy.size(); ++s) {
        const double dy = static_cast<double>(y - sy[s]);
        const double dx = static_cast<double>(x - sx[s]);
        best = std::min(best, dy * dy + dx * dx);
      }
      d2[y * W + x] = best;
    }
}

}  // namespace pgseg::kern::serial
