#pragma once

#include <cstdint>

#include "pgseg/common.hpp"

// Data-parallel compute kernels. The primary versions are OpenMP-parallel;
// kern::serial holds plain single-threaded references used by tests and the
// benchmark. Parallel loops are gather-form (each output element is owned by
// one iteration), so results do not depend on the thread count.
namespace pgseg::kern {

// Row-major matmul: C(m,n) = A(m,k) * B(k,n). accumulate adds into C.
void matmul(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
            bool accumulate = false);
// C(m,n) = A(m,k) * B(n,k)^T
void matmul_nt(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
               bool accumulate = false);
// C(m,n) = A(k,m)^T * B(k,n)
void matmul_tn(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
               bool accumulate = false);

// Output size of a KxK / stride / pad convolution.
inline i64 conv_out(i64 in, i64 k, i64 stride, i64 pad) { return (in + 2 * pad - k) / stride + 1; }

// x (C,H,W) -> col (C*K*K, OH*OW), zero padding.
void im2col(const double* x, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* col);
// Adjoint of im2col: col (C*K*K, OH*OW) -> x (C,H,W). Overwrites x.
void col2im(const double* col, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* x);

// NCHW bilinear resize, align_corners = false, edge clamped.
void bilinear_fwd(const double* x, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* y);
void bilinear_bwd(const double* gy, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* gx);

// Row-wise layer normalization over the last axis. gamma/beta may be null.
// mean/rstd are per-row saves for the backward pass.
void layernorm_fwd(const double* x, i64 rows, i64 D, double eps, const double* gamma,
                   const double* beta, double* y, double* mean, double* rstd);
void layernorm_bwd(const double* x, const double* mean, const double* rstd, const double* gamma,
                   const double* gy, i64 rows, i64 D, double* gx, double* ggamma, double* gbeta);

// Row-wise softmax over the last axis.
void softmax_fwd(const double* x, i64 rows, i64 D, double* y);
void softmax_bwd(const double* y, const double* gy, i64 rows, i64 D, double* gx);

// Deformable 3x3 sampling (pad 1, dilation 1). offsets (18,H,W): channels
// (2k, 2k+1) hold the (dy,dx) shift of tap k, clamped to [-max_off, max_off].
// Produces col (C*9, H*W) of bilinearly sampled values; out-of-image reads are 0.
void deform_im2col(const double* x, const double* off, i64 C, i64 H, i64 W, double max_off,
                   double* col);
// Backward of the sampling: accumulates into gx (C,H,W) and goff (18,H,W).
void deform_col_bwd(const double* x, const double* off, const double* gcol, i64 C, i64 H, i64 W,
                    double max_off, double* gx, double* goff);

// Exact squared Euclidean distance transform of a site grid (nonzero = site).
// d2[p] = min over sites s of |p - s|^2; a grid with no sites yields +inf.
void edt_sq(const std::uint8_t* grid, i64 H, i64 W, double* d2);

namespace serial {
void matmul(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
            bool accumulate = false);
void matmul_nt(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
               bool accumulate = false);
void matmul_tn(const double* A, const double* B, double* C, i64 m, i64 k, i64 n,
               bool accumulate = false);
void im2col(const double* x, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* col);
void col2im(const double* col, i64 C, i64 H, i64 W, i64 K, i64 stride, i64 pad, double* x);
void bilinear_fwd(const double* x, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* y);
void bilinear_bwd(const double* gy, i64 B, i64 C, i64 H, i64 W, i64 OH, i64 OW, double* gx);
void layernorm_fwd(const double* x, i64 rows, i64 D, double eps, const double* gamma,
                   const double* beta, double* y, double* mean, double* rstd);
void softmax_fwd(const double* x, i64 rows, i64 D, double* y);
void deform_im2col(const double* x, const double* off, i64 C, i64 H, i64 W, double max_off,
                   double* col);
void edt_sq(const std::uint8_t* grid, i64 H, i64 W, double* d2);
}  // namespace serial

}  // namespace pgseg::kern
