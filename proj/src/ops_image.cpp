#include <cmath>

#include "sapiens/tape.hpp"

namespace sapiens {

namespace {
int conv_out(int size, int k, int stride, int pad) {
    const int o = (size + 2 * pad - k) / stride + 1;
    check(o > 0 && (size + 2 * pad - k) % stride == 0, "conv: size does not tile");
    return o;
}
}  // namespace

Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
    check(x.ndim() == 3, "im2col: [C,H,W] required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int oh = conv_out(h, kh, stride, pad);
    const int ow = conv_out(w, kw, stride, pad);
    Tensor cols({c * kh * kw, oh * ow});
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const int row = (ci * kh + ky) * kw + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        double v = 0.0;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = x.at3(ci, iy, ix);
                        cols.at2(row, oy * ow + ox) = v;
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, int channels, int out_h, int out_w, int kh, int kw,
              int stride, int pad) {
    const int oh = conv_out(out_h, kh, stride, pad);
    const int ow = conv_out(out_w, kw, stride, pad);
    check(cols.ndim() == 2 && cols.rows() == channels * kh * kw && cols.cols() == oh * ow,
          "col2im: column shape mismatch");
    Tensor img({channels, out_h, out_w}, 0.0);
    for (int ci = 0; ci < channels; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const int row = (ci * kh + ky) * kw + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= out_h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= out_w) continue;
                        img.at3(ci, iy, ix) += cols.at2(row, oy * ow + ox);
                    }
                }
            }
        }
    }
    return img;
}

Var patchify(Tape& t, Var img, int p) {
    const Tensor& x = t.val(img);
    check(x.ndim() == 3, "patchify: [C,H,W] required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    check(p > 0 && h % p == 0 && w % p == 0, "patchify: patch size must divide H and W");
    const int gh = h / p, gw = w / p;
    Tensor out({gh * gw, c * p * p});
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int row = gy * gw + gx;
            for (int ci = 0; ci < c; ++ci) {
                for (int py = 0; py < p; ++py) {
                    for (int px = 0; px < p; ++px) {
                        out.at2(row, (ci * p + py) * p + px) =
                            x.at3(ci, gy * p + py, gx * p + px);
                    }
                }
            }
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, img, p, c, gh, gw, o]() mutable {
        Tensor& gx_t = t.grad(img);
        const Tensor& go = t.grad(o);
        for (int gy = 0; gy < gh; ++gy) {
            for (int gx = 0; gx < gw; ++gx) {
                const int row = gy * gw + gx;
                for (int ci = 0; ci < c; ++ci) {
                    for (int py = 0; py < p; ++py) {
                        for (int px = 0; px < p; ++px) {
                            gx_t.at3(ci, gy * p + py, gx * p + px) +=
                                go.at2(row, (ci * p + py) * p + px);
                        }
                    }
                }
            }
        }
    });
    return o;
}

Var conv2d(Tape& t, Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    check(xv.ndim() == 3, "conv2d: [C,H,W] required");
    const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    check(wv.ndim() == 2 && wv.cols() == cin * kh * kw, "conv2d: weight must be [Cout,Cin*kh*kw]");
    const int cout = wv.rows();
    check(t.val(b).numel() == cout, "conv2d: bias size mismatch");
    const int oh = conv_out(h, kh, stride, pad);
    const int ow = conv_out(wd, kw, stride, pad);

    Tensor cols = im2col(xv, kh, kw, stride, pad);
    Tensor out({cout, oh, ow});
    as_mat(out, cout, oh * ow).noalias() = as_mat(wv) * as_mat(cols);
    as_mat(out, cout, oh * ow).colwise() += as_vec(t.val(b));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, w, b, kh, kw, stride, pad, oh, ow, cout, h, wd,
                                 cin, o]() mutable {
        Tensor cols = im2col(t.val(x), kh, kw, stride, pad);
        auto g2 = as_mat(t.grad(o), cout, oh * ow);
        as_mat(t.grad(w)).noalias() += g2 * as_mat(cols).transpose();
        as_vec(t.grad(b)) += g2.rowwise().sum();
        Tensor gcols({cin * kh * kw, oh * ow});
        as_mat(gcols).noalias() = as_mat(t.val(w)).transpose() * g2;
        Tensor gimg = col2im(gcols, cin, h, wd, kh, kw, stride, pad);
        as_vec(t.grad(x)) += as_vec(gimg);
    });
    return o;
}

Var conv_transpose2d(Tape& t, Var x, Var w, Var b, int kh, int kw, int stride, int pad) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    check(xv.ndim() == 3, "conv_transpose2d: [C,H,W] required");
    const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
    check(wv.ndim() == 2 && wv.rows() == cin,
          "conv_transpose2d: weight must be [Cin,Cout*kh*kw]");
    check(wv.cols() % (kh * kw) == 0, "conv_transpose2d: weight width mismatch");
    const int cout = wv.cols() / (kh * kw);
    check(t.val(b).numel() == cout, "conv_transpose2d: bias size mismatch");
    const int oh = stride * (h - 1) + kh - 2 * pad;
    const int ow = stride * (wd - 1) + kw - 2 * pad;
    check(oh > 0 && ow > 0, "conv_transpose2d: empty output");

    Tensor cols({cout * kh * kw, h * wd});
    as_mat(cols).noalias() = as_mat(wv).transpose() * as_mat(xv, cin, h * wd);
    Tensor out = col2im(cols, cout, oh, ow, kh, kw, stride, pad);
    for (int ci = 0; ci < cout; ++ci) {
        const double bias = t.val(b)[ci];
        for (int i = 0; i < oh * ow; ++i) out[static_cast<int64_t>(ci) * oh * ow + i] += bias;
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, w, b, kh, kw, stride, pad, cin, cout, h, wd, oh,
                                 ow, o]() mutable {
        Tensor gcols = im2col(t.grad(o), kh, kw, stride, pad);  // [Cout*kh*kw, H*W]
        as_mat(t.grad(x), cin, h * wd).noalias() += as_mat(t.val(w)) * as_mat(gcols);
        as_mat(t.grad(w)).noalias() += as_mat(t.val(x), cin, h * wd) * as_mat(gcols).transpose();
        const Tensor& go = t.grad(o);
        for (int ci = 0; ci < cout; ++ci) {
            double s = 0.0;
            for (int i = 0; i < oh * ow; ++i) s += go[static_cast<int64_t>(ci) * oh * ow + i];
            t.grad(b)[ci] += s;
        }
    });
    return o;
}

Var pixel_shuffle(Tape& t, Var x, int r) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "pixel_shuffle: [C,H,W] required");
    const int c_in = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    check(r > 0 && c_in % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
    const int c = c_in / (r * r);
    Tensor out({c, h * r, w * r});
    for (int ci = 0; ci < c; ++ci) {
        for (int a = 0; a < r; ++a) {
            for (int bb = 0; bb < r; ++bb) {
                const int src_c = (ci * r + a) * r + bb;
                for (int i = 0; i < h; ++i) {
                    for (int j = 0; j < w; ++j) {
                        out.at3(ci, i * r + a, j * r + bb) = xv.at3(src_c, i, j);
                    }
                }
            }
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, r, c, h, w, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int ci = 0; ci < c; ++ci) {
            for (int a = 0; a < r; ++a) {
                for (int bb = 0; bb < r; ++bb) {
                    const int src_c = (ci * r + a) * r + bb;
                    for (int i = 0; i < h; ++i) {
                        for (int j = 0; j < w; ++j) {
                            gx.at3(src_c, i, j) += go.at3(ci, i * r + a, j * r + bb);
                        }
                    }
                }
            }
        }
    });
    return o;
}

Var finite_diff(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "finite_diff: [C,H,W] required");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({2 * c, h, w}, 0.0);
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx + 1 < w; ++xx) {
                out.at3(ci, y, xx) = xv.at3(ci, y, xx + 1) - xv.at3(ci, y, xx);
            }
        }
        for (int y = 0; y + 1 < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                out.at3(c + ci, y, xx) = xv.at3(ci, y + 1, xx) - xv.at3(ci, y, xx);
            }
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, c, h, w, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx + 1 < w; ++xx) {
                    const double g = go.at3(ci, y, xx);
                    gx.at3(ci, y, xx + 1) += g;
                    gx.at3(ci, y, xx) -= g;
                }
            }
            for (int y = 0; y + 1 < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    const double g = go.at3(c + ci, y, xx);
                    gx.at3(ci, y + 1, xx) += g;
                    gx.at3(ci, y, xx) -= g;
                }
            }
        }
    });
    return o;
}

Var channel_l2norm(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "channel_l2norm: [C,H,W] required");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            double ss = 0.0;
            for (int ci = 0; ci < c; ++ci) ss += xv.at3(ci, y, xx) * xv.at3(ci, y, xx);
            out.at2(y, xx) = std::sqrt(ss);
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, c, h, w, o]() mutable {
        const Tensor& xin = t.val(x);
        const Tensor& n = t.val(o);
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const double nv = n.at2(y, xx);
                if (nv <= 0.0) continue;
                const double g = go.at2(y, xx) / nv;
                for (int ci = 0; ci < c; ++ci) gx.at3(ci, y, xx) += g * xin.at3(ci, y, xx);
            }
        }
    });
    return o;
}

Var channel_sum(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "channel_sum: [C,H,W] required");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({h, w}, 0.0);
    for (int ci = 0; ci < c; ++ci) {
        for (int i = 0; i < h * w; ++i) out[i] += xv[static_cast<int64_t>(ci) * h * w + i];
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, c, h, w, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int ci = 0; ci < c; ++ci) {
            for (int i = 0; i < h * w; ++i) gx[static_cast<int64_t>(ci) * h * w + i] += go[i];
        }
    });
    return o;
}

Var normalize_channels(Tape& t, Var x, double eps) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "normalize_channels: [C,H,W] required");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor out({c, h, w});
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            double ss = 0.0;
            for (int ci = 0; ci < c; ++ci) ss += xv.at3(ci, y, xx) * xv.at3(ci, y, xx);
            const double n = std::sqrt(ss + eps);
            for (int ci = 0; ci < c; ++ci) out.at3(ci, y, xx) = xv.at3(ci, y, xx) / n;
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, eps, c, h, w, o]() mutable {
        const Tensor& xin = t.val(x);
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                double ss = 0.0, dot = 0.0;
                for (int ci = 0; ci < c; ++ci) {
                    ss += xin.at3(ci, y, xx) * xin.at3(ci, y, xx);
                    dot += go.at3(ci, y, xx) * xin.at3(ci, y, xx);
                }
                const double n2 = ss + eps;
                const double n = std::sqrt(n2);
                for (int ci = 0; ci < c; ++ci) {
                    gx.at3(ci, y, xx) +=
                        go.at3(ci, y, xx) / n - xin.at3(ci, y, xx) * (dot / (n2 * n));
                }
            }
        }
    });
    return o;
}

namespace {
double mask_count(const Tensor& mask) {
    double cnt = 0.0;
    for (double m : mask.data) cnt += (m != 0.0) ? 1.0 : 0.0;
    check(cnt > 0.0, "masked mean: empty mask");
    return cnt;
}
}  // namespace

Var masked_mean(Tape& t, Var x, const Tensor& mask) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "masked_mean: [H,W] required");
    check(xv.same_shape(mask), "masked_mean: mask shape mismatch");
    const double cnt = mask_count(mask);
    Tensor out({1});
    double s = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) {
        if (mask[i] != 0.0) s += xv[i];
    }
    out[0] = s / cnt;
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, mask, cnt, o]() mutable {
        Tensor& gx = t.grad(x);
        const double g = t.grad(o)[0] / cnt;
        for (int64_t i = 0; i < gx.numel(); ++i) {
            if (mask[i] != 0.0) gx[i] += g;
        }
    });
    return o;
}

Var masked_mean_channels(Tape& t, Var x, const Tensor& mask) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 3, "masked_mean_channels: [C,H,W] required");
    const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    check(mask.ndim() == 2 && mask.dim(0) == h && mask.dim(1) == w,
          "masked_mean_channels: mask shape mismatch");
    const double cnt = mask_count(mask);
    Tensor out({c}, 0.0);
    for (int ci = 0; ci < c; ++ci) {
        double s = 0.0;
        for (int i = 0; i < h * w; ++i) {
            if (mask[i] != 0.0) s += xv[static_cast<int64_t>(ci) * h * w + i];
        }
        out[ci] = s / cnt;
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, mask, cnt, c, h, w, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int ci = 0; ci < c; ++ci) {
            const double g = go[ci] / cnt;
            for (int i = 0; i < h * w; ++i) {
                if (mask[i] != 0.0) gx[static_cast<int64_t>(ci) * h * w + i] += g;
            }
        }
    });
    return o;
}

}  // namespace sapiens
