#include "sapiens/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace sapiens {

void Tape::backward(Var loss) {
    check(val(loss).numel() == 1, "backward: loss must be a scalar");
    grad(loss)[0] = 1.0;
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.has_grad && n.bwd) n.bwd();
    }
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape == b.shape,
          std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "add");
    Tensor out = t.val(a);
    as_vec(out) += as_vec(t.val(b));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, b, o]() mutable {
        as_vec(t.grad(a)) += as_vec(t.grad(o));
        as_vec(t.grad(b)) += as_vec(t.grad(o));
    });
    return o;
}

Var sub(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "sub");
    Tensor out = t.val(a);
    as_vec(out) -= as_vec(t.val(b));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, b, o]() mutable {
        as_vec(t.grad(a)) += as_vec(t.grad(o));
        as_vec(t.grad(b)) -= as_vec(t.grad(o));
    });
    return o;
}

Var mul(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "mul");
    Tensor out = t.val(a);
    as_vec(out).array() *= as_vec(t.val(b)).array();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, b, o]() mutable {
        as_vec(t.grad(a)).array() += as_vec(t.grad(o)).array() * as_vec(t.val(b)).array();
        as_vec(t.grad(b)).array() += as_vec(t.grad(o)).array() * as_vec(t.val(a)).array();
    });
    return o;
}

Var divide(Tape& t, Var a, Var b) {
    check_same_shape(t.val(a), t.val(b), "divide");
    Tensor out = t.val(a);
    as_vec(out).array() /= as_vec(t.val(b)).array();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, b, o]() mutable {
        as_vec(t.grad(a)).array() += as_vec(t.grad(o)).array() / as_vec(t.val(b)).array();
        as_vec(t.grad(b)).array() -= as_vec(t.grad(o)).array() * as_vec(t.val(a)).array() /
                                     (as_vec(t.val(b)).array() * as_vec(t.val(b)).array());
    });
    return o;
}

Var scale(Tape& t, Var a, double c) {
    Tensor out = t.val(a);
    as_vec(out) *= c;
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, c, o]() mutable {
        as_vec(t.grad(a)) += c * as_vec(t.grad(o));
    });
    return o;
}

Var add_scalar(Tape& t, Var a, double c) {
    Tensor out = t.val(a);
    as_vec(out).array() += c;
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        as_vec(t.grad(a)) += as_vec(t.grad(o));
    });
    return o;
}

Var mul_svar(Tape& t, Var a, Var s) {
    check(t.val(s).numel() == 1, "mul_svar: s must be a scalar");
    Tensor out = t.val(a);
    as_vec(out) *= t.val(s)[0];
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, s, o]() mutable {
        as_vec(t.grad(a)) += t.val(s)[0] * as_vec(t.grad(o));
        t.grad(s)[0] += as_vec(t.grad(o)).dot(as_vec(t.val(a)));
    });
    return o;
}

Var silu(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const Tensor& x = t.val(a);
        Tensor& ga = t.grad(a);
        const Tensor& go = t.grad(o);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            ga[i] += go[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
    return o;
}

Var sigmoid(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const Tensor& y = t.val(o);
        for (int64_t i = 0; i < y.numel(); ++i) {
            t.grad(a)[i] += t.grad(o)[i] * y[i] * (1.0 - y[i]);
        }
    });
    return o;
}

Var relu(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = std::max(0.0, v);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const Tensor& x = t.val(a);
        for (int64_t i = 0; i < x.numel(); ++i) {
            if (x[i] > 0.0) t.grad(a)[i] += t.grad(o)[i];
        }
    });
    return o;
}

Var expv(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = std::exp(v);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        as_vec(t.grad(a)).array() += as_vec(t.grad(o)).array() * as_vec(t.val(o)).array();
    });
    return o;
}

Var logv(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = std::log(v);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const Tensor& x = t.val(a);
        for (int64_t i = 0; i < x.numel(); ++i) {
            if (x[i] > 0.0) t.grad(a)[i] += t.grad(o)[i] / x[i];
        }
    });
    return o;
}

Var sqrtv(Tape& t, Var a) {
    Tensor out = t.val(a);
    for (auto& v : out.data) v = std::sqrt(std::max(0.0, v));
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const Tensor& y = t.val(o);
        for (int64_t i = 0; i < y.numel(); ++i) {
            if (y[i] > 0.0) t.grad(a)[i] += t.grad(o)[i] * 0.5 / y[i];
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// matrix / rowwise
// ---------------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    check(av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.rows(),
          "matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    Tensor out({av.rows(), bv.cols()});
    as_mat(out).noalias() = as_mat(av) * as_mat(bv);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, b, o]() mutable {
        as_mat(t.grad(a)).noalias() += as_mat(t.grad(o)) * as_mat(t.val(b)).transpose();
        as_mat(t.grad(b)).noalias() += as_mat(t.val(a)).transpose() * as_mat(t.grad(o));
    });
    return o;
}

Var transpose(Tape& t, Var a) {
    const Tensor& av = t.val(a);
    check(av.ndim() == 2, "transpose: rank-2 required");
    Tensor out({av.cols(), av.rows()});
    as_mat(out) = as_mat(av).transpose();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        as_mat(t.grad(a)) += as_mat(t.grad(o)).transpose();
    });
    return o;
}

Var linear(Tape& t, Var x, Var w, Var b) {
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    check(xv.ndim() == 2 && wv.ndim() == 2 && xv.cols() == wv.rows(),
          "linear: incompatible shapes " + xv.shape_str() + " x " + wv.shape_str());
    check(bv.numel() == wv.cols(), "linear: bias size mismatch");
    Tensor out({xv.rows(), wv.cols()});
    as_mat(out).noalias() = as_mat(xv) * as_mat(wv);
    as_mat(out).rowwise() += as_vec(bv).transpose();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, w, b, o]() mutable {
        auto go = as_mat(t.grad(o));
        as_mat(t.grad(x)).noalias() += go * as_mat(t.val(w)).transpose();
        as_mat(t.grad(w)).noalias() += as_mat(t.val(x)).transpose() * go;
        as_vec(t.grad(b)) += go.colwise().sum().transpose();
    });
    return o;
}

Var softmax_rows(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "softmax_rows: rank-2 required");
    Tensor out = xv;
    auto m = as_mat(out);
    for (int r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, o]() mutable {
        auto p = as_mat(t.val(o));
        auto g = as_mat(t.grad(o));
        auto gx = as_mat(t.grad(x));
        for (int r = 0; r < p.rows(); ++r) {
            const double dot = g.row(r).dot(p.row(r));
            gx.row(r).array() += p.row(r).array() * (g.row(r).array() - dot);
        }
    });
    return o;
}

Var log_softmax_rows(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "log_softmax_rows: rank-2 required");
    Tensor out = xv;
    auto m = as_mat(out);
    for (int r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double mx = row.maxCoeff();
        const double lse = std::log((row.array() - mx).exp().sum()) + mx;
        row.array() -= lse;
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, o]() mutable {
        auto lsm = as_mat(t.val(o));
        auto g = as_mat(t.grad(o));
        auto gx = as_mat(t.grad(x));
        for (int r = 0; r < lsm.rows(); ++r) {
            const double gsum = g.row(r).sum();
            gx.row(r).array() += g.row(r).array() - lsm.row(r).array().exp() * gsum;
        }
    });
    return o;
}

namespace {
// Shared RMSNorm over a contiguous chunk: y = gain * x / sqrt(mean(x^2)+eps).
void rms_chunk_fwd(const double* x, const double* gain, double* y, int d, double eps) {
    double ms = 0.0;
    for (int i = 0; i < d; ++i) ms += x[i] * x[i];
    const double r = std::sqrt(ms / d + eps);
    for (int i = 0; i < d; ++i) y[i] = gain[i] * x[i] / r;
}
void rms_chunk_bwd(const double* x, const double* gain, const double* g, double* gx,
                   double* ggain, int d, double eps) {
    double ms = 0.0;
    for (int i = 0; i < d; ++i) ms += x[i] * x[i];
    const double r = std::sqrt(ms / d + eps);
    double dot = 0.0;  // sum_i g_i * gain_i * x_i
    for (int i = 0; i < d; ++i) dot += g[i] * gain[i] * x[i];
    const double k = dot / (d * r * r * r);
    for (int i = 0; i < d; ++i) {
        gx[i] += g[i] * gain[i] / r - x[i] * k;
        ggain[i] += g[i] * x[i] / r;
    }
}
}  // namespace

Var rms_norm_rows(Tape& t, Var x, Var gain, double eps) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "rms_norm_rows: rank-2 required");
    check(t.val(gain).numel() == xv.cols(), "rms_norm_rows: gain size mismatch");
    const int rows = xv.rows(), d = xv.cols();
    Tensor out({rows, d});
    for (int r = 0; r < rows; ++r) {
        rms_chunk_fwd(&xv.data[static_cast<size_t>(r) * d], t.val(gain).data.data(),
                      &out.data[static_cast<size_t>(r) * d], d, eps);
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, gain, eps, o]() mutable {
        const Tensor& xin = t.val(x);
        const int rows = xin.rows(), d = xin.cols();
        Tensor& gx = t.grad(x);
        Tensor& gg = t.grad(gain);
        const Tensor& go = t.grad(o);
        for (int r = 0; r < rows; ++r) {
            const size_t off = static_cast<size_t>(r) * d;
            rms_chunk_bwd(&xin.data[off], t.val(gain).data.data(), &go.data[off],
                          &gx.data[off], gg.data.data(), d, eps);
        }
    });
    return o;
}

Var rms_norm_heads(Tape& t, Var x, Var gain, int heads, double eps) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2 && xv.cols() % heads == 0, "rms_norm_heads: cols not divisible by heads");
    const int d = xv.cols() / heads;
    check(t.val(gain).numel() == d, "rms_norm_heads: gain size mismatch");
    const int rows = xv.rows();
    Tensor out({rows, xv.cols()});
    for (int r = 0; r < rows; ++r) {
        for (int h = 0; h < heads; ++h) {
            const size_t off = static_cast<size_t>(r) * xv.cols() + static_cast<size_t>(h) * d;
            rms_chunk_fwd(&xv.data[off], t.val(gain).data.data(), &out.data[off], d, eps);
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, gain, heads, eps, o]() mutable {
        const Tensor& xin = t.val(x);
        const int rows = xin.rows(), d = xin.cols() / heads;
        Tensor& gx = t.grad(x);
        Tensor& gg = t.grad(gain);
        const Tensor& go = t.grad(o);
        for (int r = 0; r < rows; ++r) {
            for (int h = 0; h < heads; ++h) {
                const size_t off =
                    static_cast<size_t>(r) * xin.cols() + static_cast<size_t>(h) * d;
                rms_chunk_bwd(&xin.data[off], t.val(gain).data.data(), &go.data[off],
                              &gx.data[off], gg.data.data(), d, eps);
            }
        }
    });
    return o;
}

Var l2_normalize_rows(Tape& t, Var x, double eps) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "l2_normalize_rows: rank-2 required");
    Tensor out = xv;
    auto m = as_mat(out);
    for (int r = 0; r < m.rows(); ++r) m.row(r) /= std::sqrt(m.row(r).squaredNorm() + eps);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, eps, o]() mutable {
        auto xm = as_mat(t.val(x));
        auto g = as_mat(t.grad(o));
        auto gx = as_mat(t.grad(x));
        for (int r = 0; r < xm.rows(); ++r) {
            const double n2 = xm.row(r).squaredNorm() + eps;
            const double n = std::sqrt(n2);
            const double dot = g.row(r).dot(xm.row(r));
            gx.row(r) += g.row(r) / n - xm.row(r) * (dot / (n2 * n));
        }
    });
    return o;
}

Var colsum(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "colsum: rank-2 required");
    Tensor out({xv.cols()});
    as_vec(out) = as_mat(xv).colwise().sum().transpose();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, o]() mutable {
        as_mat(t.grad(x)).rowwise() += as_vec(t.grad(o)).transpose();
    });
    return o;
}

Var rowsum(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "rowsum: rank-2 required");
    Tensor out({xv.rows()});
    as_vec(out) = as_mat(xv).rowwise().sum();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, o]() mutable {
        as_mat(t.grad(x)).colwise() += as_vec(t.grad(o));
    });
    return o;
}

Var pick_per_row(Tape& t, Var x, const std::vector<int>& idx) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "pick_per_row: rank-2 required");
    check(static_cast<int>(idx.size()) == xv.rows(), "pick_per_row: index count mismatch");
    Tensor out({xv.rows()});
    for (int r = 0; r < xv.rows(); ++r) {
        check(idx[static_cast<size_t>(r)] >= 0 && idx[static_cast<size_t>(r)] < xv.cols(),
              "pick_per_row: index out of range");
        out[r] = xv.at2(r, idx[static_cast<size_t>(r)]);
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, idx, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        for (int r = 0; r < gx.rows(); ++r) gx.at2(r, idx[static_cast<size_t>(r)]) += go[r];
    });
    return o;
}

Var attention(Tape& t, Var q, Var k, Var v, int heads, int kv_groups) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    const Tensor& vv = t.val(v);
    check(heads % kv_groups == 0, "attention: heads not divisible by kv groups");
    check(qv.ndim() == 2 && kv.ndim() == 2 && vv.ndim() == 2, "attention: rank-2 required");
    check(qv.cols() % heads == 0, "attention: q width not divisible by heads");
    const int d = qv.cols() / heads;
    check(kv.cols() == kv_groups * d && vv.cols() == kv_groups * d,
          "attention: k/v width must be kv_groups*head_dim");
    check(kv.rows() == qv.rows() && vv.rows() == qv.rows(), "attention: row count mismatch");
    const int T = qv.rows();
    const int per_group = heads / kv_groups;
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));

    // Attention probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<EMat>>(static_cast<size_t>(heads));
    Tensor out({T, heads * d});
    for (int h = 0; h < heads; ++h) {
        const int g = h / per_group;
        auto qm = as_mat(qv).middleCols(h * d, d);
        auto km = as_mat(kv).middleCols(g * d, d);
        auto vm = as_mat(vv).middleCols(g * d, d);
        EMat s = qm * km.transpose() * sc;
        for (int r = 0; r < T; ++r) {
            auto row = s.row(r);
            const double mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
        }
        as_mat(out).middleCols(h * d, d).noalias() = s * vm;
        (*probs)[static_cast<size_t>(h)] = std::move(s);
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, q, k, v, heads, kv_groups, d, probs, o]() mutable {
        const int per_group = heads / kv_groups;
        const double sc = 1.0 / std::sqrt(static_cast<double>(d));
        auto qm = as_mat(t.val(q));
        auto km = as_mat(t.val(k));
        auto vm = as_mat(t.val(v));
        auto gq = as_mat(t.grad(q));
        auto gk = as_mat(t.grad(k));
        auto gv = as_mat(t.grad(v));
        auto go = as_mat(t.grad(o));
        for (int h = 0; h < heads; ++h) {
            const int g = h / per_group;
            const EMat& p = (*probs)[static_cast<size_t>(h)];
            auto goh = go.middleCols(h * d, d);
            EMat gp = goh * vm.middleCols(g * d, d).transpose();
            EMat gs(p.rows(), p.cols());
            for (int r = 0; r < p.rows(); ++r) {
                const double dot = gp.row(r).dot(p.row(r));
                gs.row(r).array() = p.row(r).array() * (gp.row(r).array() - dot);
            }
            gq.middleCols(h * d, d).noalias() += gs * km.middleCols(g * d, d) * sc;
            gk.middleCols(g * d, d).noalias() += gs.transpose() * qm.middleCols(h * d, d) * sc;
            gv.middleCols(g * d, d).noalias() += p.transpose() * goh;
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// shape / indexing
// ---------------------------------------------------------------------------

Var reshape(Tape& t, Var a, std::vector<int> shape) {
    const Tensor& av = t.val(a);
    check(Tensor::count(shape) == av.numel(), "reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.data = av.data;
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        as_vec(t.grad(a)) += as_vec(t.grad(o));
    });
    return o;
}

namespace {
int64_t row_width(const Tensor& x) {
    check(x.ndim() >= 1, "rows: rank >= 1 required");
    return x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
}
}  // namespace

Var gather_rows(Tape& t, Var x, std::vector<int> idx) {
    const Tensor& xv = t.val(x);
    const int64_t w = row_width(xv);
    std::vector<int> shape = xv.shape;
    shape[0] = static_cast<int>(idx.size());
    Tensor out(shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < xv.dim(0), "gather_rows: index out of range");
        std::copy_n(&xv.data[static_cast<size_t>(idx[i]) * w], w, &out.data[i * w]);
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, idx = std::move(idx), o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        const int64_t w = row_width(gx);
        for (size_t i = 0; i < idx.size(); ++i) {
            for (int64_t j = 0; j < w; ++j) {
                gx[static_cast<int64_t>(idx[i]) * w + j] += go[static_cast<int64_t>(i) * w + j];
            }
        }
    });
    return o;
}

Var slice_rows(Tape& t, Var x, int begin, int count) {
    const Tensor& xv = t.val(x);
    check(begin >= 0 && count >= 0 && begin + count <= xv.dim(0), "slice_rows: out of range");
    const int64_t w = row_width(xv);
    std::vector<int> shape = xv.shape;
    shape[0] = count;
    Tensor out(shape);
    std::copy_n(&xv.data[static_cast<size_t>(begin) * w], static_cast<size_t>(count) * w,
                out.data.begin());
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, begin, count, o]() mutable {
        Tensor& gx = t.grad(x);
        const Tensor& go = t.grad(o);
        const int64_t w = row_width(gx);
        for (int64_t i = 0; i < static_cast<int64_t>(count) * w; ++i) {
            gx[static_cast<int64_t>(begin) * w + i] += go[i];
        }
    });
    return o;
}

Var concat_rows(Tape& t, const std::vector<Var>& xs) {
    check(!xs.empty(), "concat_rows: empty input");
    std::vector<int> shape = t.val(xs[0]).shape;
    int total = 0;
    for (Var v : xs) {
        check(static_cast<size_t>(t.val(v).ndim()) == shape.size(), "concat_rows: rank mismatch");
        for (size_t i = 1; i < shape.size(); ++i) {
            check(t.val(v).shape[i] == shape[i], "concat_rows: trailing dims mismatch");
        }
        total += t.val(v).dim(0);
    }
    shape[0] = total;
    Tensor out(shape);
    int64_t off = 0;
    for (Var v : xs) {
        const Tensor& xv = t.val(v);
        std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + off);
        off += xv.numel();
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, xs, o]() mutable {
        const Tensor& go = t.grad(o);
        int64_t off = 0;
        for (Var v : xs) {
            Tensor& gx = t.grad(v);
            for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[off + i];
            off += gx.numel();
        }
    });
    return o;
}

Var slice_cols(Tape& t, Var x, int begin, int count) {
    const Tensor& xv = t.val(x);
    check(xv.ndim() == 2, "slice_cols: rank-2 required");
    check(begin >= 0 && begin + count <= xv.cols(), "slice_cols: out of range");
    Tensor out({xv.rows(), count});
    as_mat(out) = as_mat(xv).middleCols(begin, count);
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, x, begin, count, o]() mutable {
        as_mat(t.grad(x)).middleCols(begin, count) += as_mat(t.grad(o));
    });
    return o;
}

Var concat_cols(Tape& t, const std::vector<Var>& xs) {
    check(!xs.empty(), "concat_cols: empty input");
    const int rows = t.val(xs[0]).rows();
    int total = 0;
    for (Var v : xs) {
        check(t.val(v).ndim() == 2 && t.val(v).rows() == rows, "concat_cols: row mismatch");
        total += t.val(v).cols();
    }
    Tensor out({rows, total});
    int off = 0;
    for (Var v : xs) {
        as_mat(out).middleCols(off, t.val(v).cols()) = as_mat(t.val(v));
        off += t.val(v).cols();
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, xs, o]() mutable {
        int off = 0;
        for (Var v : xs) {
            const int c = t.val(v).cols();
            as_mat(t.grad(v)) += as_mat(t.grad(o)).middleCols(off, c);
            off += c;
        }
    });
    return o;
}

Var sum_all(Tape& t, Var a) {
    Tensor out({1});
    out[0] = as_vec(t.val(a)).sum();
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        as_vec(t.grad(a)).array() += t.grad(o)[0];
    });
    return o;
}

Var mean_all(Tape& t, Var a) {
    const double n = static_cast<double>(t.val(a).numel());
    check(n > 0, "mean_all: empty tensor");
    Tensor out({1});
    out[0] = as_vec(t.val(a)).sum() / n;
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, n, o]() mutable {
        as_vec(t.grad(a)).array() += t.grad(o)[0] / n;
    });
    return o;
}

Var l2norm_vec(Tape& t, Var a) {
    Tensor out({1});
    out[0] = std::sqrt(as_vec(t.val(a)).squaredNorm());
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, a, o]() mutable {
        const double n = t.val(o)[0];
        if (n > 0.0) as_vec(t.grad(a)) += (t.grad(o)[0] / n) * as_vec(t.val(a));
    });
    return o;
}

Var scatter_visible(Tape& t, Var z_vis, const std::vector<uint8_t>& mask_bits, Var mask_token,
                    Var pos_table) {
    const Tensor& zv = t.val(z_vis);
    const Tensor& mt = t.val(mask_token);
    const Tensor& pt = t.val(pos_table);
    const int n = static_cast<int>(mask_bits.size());
    const int d = static_cast<int>(mt.numel());
    check(zv.ndim() == 2 && zv.cols() == d, "scatter_visible: dim mismatch");
    check(pt.ndim() == 2 && pt.rows() == n && pt.cols() == d,
          "scatter_visible: pos table must be [N,D]");
    int vis = 0;
    for (uint8_t b : mask_bits) vis += (b == 0);
    check(zv.rows() == vis, "scatter_visible: visible row count mismatch");

    Tensor out({n, d});
    int zrow = 0;
    for (int p = 0; p < n; ++p) {
        if (mask_bits[static_cast<size_t>(p)]) {
            for (int j = 0; j < d; ++j) out.at2(p, j) = mt[j] + pt.at2(p, j);
        } else {
            for (int j = 0; j < d; ++j) out.at2(p, j) = zv.at2(zrow, j);
            ++zrow;
        }
    }
    Var o = t.alloc(std::move(out), {});
    t.set_bwd(o, [&t, z_vis, mask_token, pos_table, mask_bits, o]() mutable {
        const Tensor& go = t.grad(o);
        Tensor& gz = t.grad(z_vis);
        Tensor& gm = t.grad(mask_token);
        Tensor& gp = t.grad(pos_table);
        const int n = go.rows(), d = go.cols();
        int zrow = 0;
        for (int p = 0; p < n; ++p) {
            if (mask_bits[static_cast<size_t>(p)]) {
                for (int j = 0; j < d; ++j) {
                    gm[j] += go.at2(p, j);
                    gp.at2(p, j) += go.at2(p, j);
                }
            } else {
                for (int j = 0; j < d; ++j) gz.at2(zrow, j) += go.at2(p, j);
                ++zrow;
            }
        }
    });
    return o;
}

}  // namespace sapiens
