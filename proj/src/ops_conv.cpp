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

// (B,C,H,W) -> (B*H*W, C)
void nchw_to_mat(const double* x, i64 B, i64 C, i64 hw, double* mat) {
  par_for(B * hw, [&](i64 row) {
    const i64 b = row / hw, p = row % hw;
    for (i64 c = 0; c < C; ++c) mat[row * C + c] = x[(b * C + c) * hw + p];
  });
}

// (B*H*W, C) -> accumulate into (B,C,H,W)
void mat_to_nchw_add(const double* mat, i64 B, i64 C, i64 hw, double* x) {
  par_for(B * C, [&](i64 bc) {
    const i64 b = bc / C, c = bc % C;
    for (i64 p = 0; p < hw; ++p) x[bc * hw + p] += mat[(b * hw + p) * C + c];
  });
}

}  // namespace

Var conv2d(Tape& t, Var x, Var w, Var b, i64 stride, i64 pad) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4) throw ShapeError("conv2d: bad ranks");
  const i64 B = x->value.size(0), Cin = x->value.size(1), H = x->value.size(2),
            W = x->value.size(3);
  const i64 Cout = w->value.size(0), K = w->value.size(2);
  if (w->value.size(1) != Cin || w->value.size(3) != K)
    throw ShapeError("conv2d: weight " + shape_str(w->value.shape()) + " does not fit input " +
                     shape_str(x->value.shape()));
  const i64 OH = kern::conv_out(H, K, stride, pad), OW = kern::conv_out(W, K, stride, pad);
  const i64 L = OH * OW, CK = Cin * K * K;
  Tensor y({B, Cout, OH, OW});
  {
    Tensor col({CK, L});
    for (i64 bi = 0; bi < B; ++bi) {
      kern::im2col(x->value.data() + bi * Cin * H * W, Cin, H, W, K, stride, pad, col.data());
      kern::matmul(w->value.data(), col.data(), y.data() + bi * Cout * L, Cout, CK, L);
    }
  }
  if (b) {
    if (b->value.numel() != Cout) throw ShapeError("conv2d: bias size mismatch");
    const double* pb = b->value.data();
    double* py = y.data();
    par_for(B * Cout, [&](i64 bc) {
      const double bv = pb[bc % Cout];
      for (i64 p = 0; p < L; ++p) py[bc * L + p] += bv;
    });
  }
  return t.make(std::move(y), {x, w, b},
                [x, w, b, B, Cin, H, W, Cout, K, stride, pad, OH, OW, L, CK](Node& self) {
                  const double* gy = self.grad.data();
                  Tensor col({CK, L}), gcol({CK, L}), scratch({Cin, H, W});
                  for (i64 bi = 0; bi < B; ++bi) {
                    const double* gyb = gy + bi * Cout * L;
                    if (w->requires_grad) {
                      kern::im2col(x->value.data() + bi * Cin * H * W, Cin, H, W, K, stride, pad,
                                   col.data());
                      kern::matmul_nt(gyb, col.data(), w->ensure_grad().data(), Cout, L, CK, true);
                    }
                    if (x->requires_grad) {
                      kern::matmul_tn(w->value.data(), gyb, gcol.data(), CK, Cout, L);
                      kern::col2im(gcol.data(), Cin, H, W, K, stride, pad, scratch.data());
                      double* gx = x->ensure_grad().data() + bi * Cin * H * W;
                      const double* ps = scratch.data();
                      par_for(Cin * H * W, [&](i64 i) { gx[i] += ps[i]; });
                    }
                  }
                  if (b && b->requires_grad) {
                    double* gb = b->ensure_grad().data();
#pragma omp parallel for schedule(static)
                    for (i64 c = 0; c < Cout; ++c) {
                      double acc = 0.0;
                      for (i64 bi = 0; bi < B; ++bi)
                        for (i64 p = 0; p < L; ++p) acc += gy[(bi * Cout + c) * L + p];
                      gb[c] += acc;
                    }
                  }
                });
}

Var deconv2x2(Tape& t, Var x, Var w, Var b) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4) throw ShapeError("deconv2x2: bad ranks");
  const i64 B = x->value.size(0), Cin = x->value.size(1), h = x->value.size(2), wd = x->value.size(3);
  const i64 Cout = w->value.size(1);
  if (w->value.size(0) != Cin || w->value.size(2) != 2 || w->value.size(3) != 2)
    throw ShapeError("deconv2x2: weight must be (Cin,Cout,2,2)");
  const i64 hw = h * wd, OH = 2 * h, OW = 2 * wd;
  Tensor y({B, Cout, OH, OW});
  {
    Tensor xmat({B * hw, Cin}), slice({Cin, Cout}), s({B * hw, Cout});
    nchw_to_mat(x->value.data(), B, Cin, hw, xmat.data());
    for (i64 di = 0; di < 2; ++di)
      for (i64 dj = 0; dj < 2; ++dj) {
        const double* pw = w->value.data();
        double* psl = slice.data();
        par_for(Cin, [&](i64 ci) {
          for (i64 co = 0; co < Cout; ++co)
            psl[ci * Cout + co] = pw[((ci * Cout + co) * 2 + di) * 2 + dj];
        });
        kern::matmul(xmat.data(), slice.data(), s.data(), B * hw, Cin, Cout);
        const double* ps = s.data();
        const double* pb = b ? b->value.data() : nullptr;
        double* py = y.data();
        par_for(B * hw, [&](i64 row) {
          const i64 bi = row / hw, p = row % hw;
          const i64 oh = 2 * (p / wd) + di, ow = 2 * (p % wd) + dj;
          for (i64 co = 0; co < Cout; ++co)
            py[((bi * Cout + co) * OH + oh) * OW + ow] =
                ps[row * Cout + co] + (pb ? pb[co] : 0.0);
        });
      }
  }
  return t.make(std::move(y), {x, w, b}, [x, w, b, B, Cin, h, wd, Cout, hw, OH, OW](Node& self) {
    const double* gy = self.grad.data();
    Tensor gs({B * hw, Cout});
    Tensor xmat({B * hw, Cin});
    Tensor gxmat;
    if (x->requires_grad) gxmat = Tensor::zeros({B * hw, Cin});
    if (w->requires_grad) nchw_to_mat(x->value.data(), B, Cin, hw, xmat.data());
    Tensor sliceT({Cout, Cin}), gslice({Cin, Cout});
    for (i64 di = 0; di < 2; ++di)
      for (i64 dj = 0; dj < 2; ++dj) {
        double* pgs = gs.data();
        par_for(B * hw, [&](i64 row) {
          const i64 bi = row / hw, p = row % hw;
          const i64 oh = 2 * (p / wd) + di, ow = 2 * (p % wd) + dj;
          for (i64 co = 0; co < Cout; ++co)
            pgs[row * Cout + co] = gy[((bi * Cout + co) * OH + oh) * OW + ow];
        });
        if (x->requires_grad) {
          const double* pw = w->value.data();
          double* pt = sliceT.data();
          par_for(Cout, [&](i64 co) {
            for (i64 ci = 0; ci < Cin; ++ci)
              pt[co * Cin + ci] = pw[((ci * Cout + co) * 2 + di) * 2 + dj];
          });
          kern::matmul(gs.data(), sliceT.data(), gxmat.data(), B * hw, Cout, Cin, true);
        }
        if (w->requires_grad) {
          kern::matmul_tn(xmat.data(), gs.data(), gslice.data(), Cin, B * hw, Cout);
          double* gw = w->ensure_grad().data();
          const double* pg = gslice.data();
          par_for(Cin, [&](i64 ci) {
            for (i64 co = 0; co < Cout; ++co)
              gw[((ci * Cout + co) * 2 + di) * 2 + dj] += pg[ci * Cout + co];
          });
        }
      }
    if (x->requires_grad) mat_to_nchw_add(gxmat.data(), B, Cin, hw, x->ensure_grad().data());
    if (b && b->requires_grad) {
      double* gb = b->ensure_grad().data();
#pragma omp parallel for schedule(static)
      for (i64 co = 0; co < Cout; ++co) {
        double acc = 0.0;
        for (i64 bi = 0; bi < B; ++bi)
          for (i64 p = 0; p < OH * OW; ++p) acc += gy[(bi * Cout + co) * OH * OW + p];
        gb[co] += acc;
      }
    }
  });
}

Var bilinear(Tape& t, Var x, i64 OH, i64 OW) {
  if (x->value.ndim() != 4) throw ShapeError("bilinear: expects NCHW");
  const i64 B = x->value.size(0), C = x->value.size(1), H = x->value.size(2), W = x->value.size(3);
  Tensor y({B, C, OH, OW});
  kern::bilinear_fwd(x->value.data(), B, C, H, W, OH, OW, y.data());
  return t.make(std::move(y), {x}, [x, B, C, H, W, OH, OW](Node& self) {
    if (!x->requires_grad) return;
    kern::bilinear_bwd(self.grad.data(), B, C, H, W, OH, OW, x->ensure_grad().data());
  });
}

Var deform_conv3x3(Tape& t, Var x, Var off, Var w, Var b, double max_off) {
  if (x->value.ndim() != 4 || off->value.ndim() != 4 || w->value.ndim() != 4)
    throw ShapeError("deform_conv3x3: bad ranks");
  const i64 B = x->value.size(0), C = x->value.size(1), H = x->value.size(2), W = x->value.size(3);
  const i64 Cout = w->value.size(0);
  if (off->value.size(0) != B || off->value.size(1) != 18 || off->value.size(2) != H ||
      off->value.size(3) != W)
    throw ShapeError("deform_conv3x3: offsets must be (B,18,H,W)");
  if (w->value.size(1) != C || w->value.size(2) != 3 || w->value.size(3) != 3)
    throw ShapeError("deform_conv3x3: weight must be (Cout,Cin,3,3)");
  const i64 L = H * W, CK = C * 9;
  Tensor y({B, Cout, H, W});
  {
    Tensor col({CK, L});
    for (i64 bi = 0; bi < B; ++bi) {
      kern::deform_im2col(x->value.data() + bi * C * L, off->value.data() + bi * 18 * L, C, H, W,
                          max_off, col.data());
      kern::matmul(w->value.data(), col.data(), y.data() + bi * Cout * L, Cout, CK, L);
    }
  }
  if (b) {
    const double* pb = b->value.data();
    double* py = y.data();
    par_for(B * Cout, [&](i64 bc) {
      const double bv = pb[bc % Cout];
      for (i64 p = 0; p < L; ++p) py[bc * L + p] += bv;
    });
  }
  return t.make(std::move(y), {x, off, w, b},
                [x, off, w, b, B, C, H, W, Cout, L, CK, max_off](Node& self) {
                  const double* gy = self.grad.data();
                  Tensor col({CK, L}), gcol({CK, L});
                  const bool need_xoff = x->requires_grad || off->requires_grad;
                  for (i64 bi = 0; bi < B; ++bi) {
                    const double* gyb = gy + bi * Cout * L;
                    if (w->requires_grad) {
                      kern::deform_im2col(x->value.data() + bi * C * L,
                                          off->value.data() + bi * 18 * L, C, H, W, max_off,
                                          col.data());
                      kern::matmul_nt(gyb, col.data(), w->ensure_grad().data(), Cout, L, CK, true);
                    }
                    if (need_xoff) {
                      kern::matmul_tn(w->value.data(), gyb, gcol.data(), CK, Cout, L);
                      double* gx = x->requires_grad ? x->ensure_grad().data() + bi * C * L : nullptr;
                      double* go =
                          off->requires_grad ? off->ensure_grad().data() + bi * 18 * L : nullptr;
                      Tensor gx_scratch, go_scratch;
                      if (!gx) {
                        gx_scratch = Tensor::zeros({C, H, W});
                        gx = gx_scratch.data();
                      }
                      if (!go) {
                        go_scratch = Tensor::zeros({18, H, W});
                        go = go_scratch.data();
                      }
                      kern::deform_col_bwd(x->value.data() + bi * C * L,
                                           off->value.data() + bi * 18 * L, gcol.data(), C, H, W,
                                           max_off, gx, go);
                    }
                  }
                  if (b && b->requires_grad) {
                    double* gb = b->ensure_grad().data();
#pragma omp parallel for schedule(static)
                    for (i64 c = 0; c < Cout; ++c) {
                      double acc = 0.0;
                      for (i64 bi = 0; bi < B; ++bi)
                        for (i64 p = 0; p < L; ++p) acc += gy[(bi * Cout + c) * L + p];
                      gb[c] += acc;
                    }
                  }
                });
}

Var channel_affine(Tape& t, Var x, Var s, Var shift) {
  if (x->value.ndim() != 4) throw ShapeError("channel_affine: expects NCHW");
  const i64 B = x->value.size(0), C = x->value.size(1), hw = x->value.size(2) * x->value.size(3);
  if (s->value.numel() != C || shift->value.numel() != C)
    throw ShapeError("channel_affine: scale/shift must have C entries");
  Tensor y(x->value.shape());
  const double *px = x->value.data(), *ps = s->value.data(), *pt = shift->value.data();
  double* py = y.data();
  par_for(B * C, [&](i64 bc) {
    const i64 c = bc % C;
    for (i64 p = 0; p < hw; ++p) py[bc * hw + p] = ps[c] * px[bc * hw + p] + pt[c];
  });
  return t.make(std::move(y), {x, s, shift}, [x, s, shift, B, C, hw](Node& self) {
    const double* gy = self.grad.data();
    if (x->requires_grad) {
      double* gx = x->ensure_grad().data();
      const double* ps = s->value.data();
      par_for(B * C, [&](i64 bc) {
        const double sv = ps[bc % C];
        for (i64 p = 0; p < hw; ++p) gx[bc * hw + p] += gy[bc * hw + p] * sv;
      });
    }
    if (s->requires_grad) {
      double* gsd = s->ensure_grad().data();
      const double* px = x->value.data();
#pragma omp parallel for schedule(static)
      for (i64 c = 0; c < C; ++c) {
        double acc = 0.0;
        for (i64 bi = 0; bi < B; ++bi)
          for (i64 p = 0; p < hw; ++p) acc += gy[(bi * C + c) * hw + p] * px[(bi * C + c) * hw + p];
        gsd[c] += acc;
      }
    }
    if (shift->requires_grad) {
      double* gt = shift->ensure_grad().data();
#pragma omp parallel for schedule(static)
      for (i64 c = 0; c < C; ++c) {
        double acc = 0.0;
        for (i64 bi = 0; bi < B; ++bi)
          for (i64 p = 0; p < hw; ++p) acc += gy[(bi * C + c) * hw + p];
        gt[c] += acc;
      }
    }
  });
}

}  // namespace pgseg::ops
