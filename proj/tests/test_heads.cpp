#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "grad_check.hpp"
#include "sapiens/heads.hpp"

using namespace sapiens;
using sapiens::testing::random_tensor;

namespace {

Tensor full_mask(int h, int w) {
    Tensor m({h, w});
    m.fill(1.0);
    return m;
}

// inverse of pixel_shuffle: output[c*r*r + a*r + b, i, j] = x[c, r*i+a, r*j+b]
Tensor space_to_depth(const Tensor& x, int r) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out({c * r * r, h / r, w / r});
    for (int ci = 0; ci < c; ++ci) {
        for (int i = 0; i < h / r; ++i) {
            for (int j = 0; j < w / r; ++j) {
                for (int a = 0; a < r; ++a) {
                    for (int b = 0; b < r; ++b) {
                        out.at3(ci * r * r + a * r + b, i, j) = x.at3(ci, r * i + a, r * j + b);
                    }
                }
            }
        }
    }
    return out;
}

// plain-loop forward differences, channels ordered x-diffs then y-diffs
Tensor grad_oracle(const Tensor& m) {
    const int c = m.dim(0), h = m.dim(1), w = m.dim(2);
    Tensor g({2 * c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x + 1 < w; ++x) g.at3(ci, y, x) = m.at3(ci, y, x + 1) - m.at3(ci, y, x);
        }
        for (int y = 0; y + 1 < h; ++y) {
            for (int x = 0; x < w; ++x) g.at3(c + ci, y, x) = m.at3(ci, y + 1, x) - m.at3(ci, y, x);
        }
    }
    return g;
}

double pixel_norm(const Tensor& m, int y, int x) {
    double s = 0.0;
    for (int c = 0; c < m.dim(0); ++c) s += m.at3(c, y, x) * m.at3(c, y, x);
    return std::sqrt(s);
}

Tensor random_unit_field(Rng& rng, int h, int w) {
    Tensor n({3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v[3], s = 0.0;
            for (double& c : v) {
                c = rng.normal();
                s += c * c;
            }
            const double r = std::sqrt(s);
            for (int c = 0; c < 3; ++c) n.at3(c, y, x) = v[c] / r;
        }
    }
    return n;
}

}  // namespace

TEST_CASE("pixel shuffle rearranges sub-pixel channels") {
    Rng rng(3);
    {
        Tensor x = random_tensor(rng, {3, 2, 5});
        Tape t;
        Var o = pixel_shuffle(t, t.leaf(x), 1);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(o)[i] == x[i]);
    }
    {
        Tensor x = Tensor::from({4, 1, 1}, {0.0, 1.0, 2.0, 3.0});
        Tape t;
        Var o = pixel_shuffle(t, t.leaf(x), 2);
        REQUIRE(t.val(o).dim(0) == 1);
        REQUIRE(t.val(o).dim(1) == 2);
        REQUIRE(t.val(o).dim(2) == 2);
        CHECK(t.val(o).at3(0, 0, 0) == 0.0);
        CHECK(t.val(o).at3(0, 0, 1) == 1.0);
        CHECK(t.val(o).at3(0, 1, 0) == 2.0);
        CHECK(t.val(o).at3(0, 1, 1) == 3.0);
    }
    {
        Tensor x = random_tensor(rng, {2, 6, 4});
        Tape t;
        Var o = pixel_shuffle(t, t.leaf(space_to_depth(x, 2)), 2);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(o)[i] == x[i]);
    }
    {
        Tape t;
        Var x = t.leaf(Tensor({3, 2, 2}));
        CHECK_THROWS_AS((void)pixel_shuffle(t, x, 2), std::invalid_argument);
    }
}

TEST_CASE("heatmap targets are unit-peak gaussians") {
    {
        std::vector<Keypoint> kps = {{8.0, 12.0, 2}, {5.0, 5.0, 0}, {400.0, 4.0, 1}};
        HeatmapTargets tg = generate_heatmaps(kps, 8, 6, 6.0, 4);
        REQUIRE(tg.maps.dim(0) == 3);
        REQUIRE(tg.maps.dim(1) == 8);
        REQUIRE(tg.maps.dim(2) == 6);
        REQUIRE(tg.weights.size() == 3);

        // first point lands exactly on cell (3,2): peak value 1
        CHECK(tg.weights[0] == 1.0);
        CHECK(tg.maps.at3(0, 3, 2) == 1.0);
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 6; ++x) {
                if (y != 3 || x != 2) CHECK(tg.maps.at3(0, y, x) < 1.0);
            }
        }

        // unannotated and out-of-frame keypoints give dead channels
        for (int k : {1, 2}) {
            CHECK(tg.weights[static_cast<size_t>(k)] == 0.0);
            for (int y = 0; y < 8; ++y) {
                for (int x = 0; x < 6; ++x) CHECK(tg.maps.at3(k, y, x) == 0.0);
            }
        }
    }
    {
        // mass matches the gaussian integral when the peak is well inside
        std::vector<Keypoint> kps = {{64.0, 64.0, 1}};
        HeatmapTargets tg = generate_heatmaps(kps, 32, 32, 6.0, 4);
        double sum = 0.0;
        for (double v : tg.maps.data) sum += v;
        const double sp = 6.0 / 4.0;
        const double want = 2.0 * M_PI * sp * sp;
        CHECK(std::abs(sum - want) / want < 0.02);
    }
}

TEST_CASE("pose loss keeps the hardest visible channels") {
    const int h = 4, w = 4, hw = h * w;
    Tensor gt({4, h, w});
    for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = 0.1 * static_cast<double>(i % 7);

    {
        Tape t;
        PoseLossResult r = pose_loss(t, t.leaf(gt), gt, {1, 1, 1, 1}, 0.5);
        CHECK(t.val(r.value)[0] == 0.0);
        CHECK_FALSE(r.no_visible);
    }

    {
        // constant per-channel offsets make channel mse exactly the squared offset
        Tensor pred = gt;
        const double offs[4] = {std::sqrt(0.1), std::sqrt(0.4), std::sqrt(0.2), std::sqrt(0.3)};
        for (int c = 0; c < 4; ++c) {
            for (int i = 0; i < hw; ++i) pred[static_cast<int64_t>(c) * hw + i] += offs[c];
        }
        Tape t;
        PoseLossResult r = pose_loss(t, t.leaf(pred), gt, {1, 1, 1, 1}, 0.5);
        REQUIRE(r.kept.size() == 2);
        CHECK(r.kept[0] == 1);
        CHECK(r.kept[1] == 3);
        CHECK(t.val(r.value)[0] == doctest::Approx(0.35).epsilon(1e-12));

        // full fraction keeps everything: plain mean over the four channels
        Tape t2;
        PoseLossResult all = pose_loss(t2, t2.leaf(pred), gt, {1, 1, 1, 1}, 1.0);
        REQUIRE(all.kept.size() == 4);
        CHECK(t2.val(all.value)[0] == doctest::Approx(0.25).epsilon(1e-12));

        // an invisible channel never competes, however large its error
        Tensor wild = pred;
        for (int i = 0; i < hw; ++i) wild[i] += 100.0;
        Tape t3;
        PoseLossResult vis = pose_loss(t3, t3.leaf(wild), gt, {0, 1, 1, 1}, 0.5);
        REQUIRE(vis.kept.size() == 2);
        CHECK(vis.kept[0] == 1);
        CHECK(vis.kept[1] == 3);
        CHECK(t3.val(vis.value)[0] == doctest::Approx(0.35).epsilon(1e-12));
    }

    {
        Tape t;
        PoseLossResult r = pose_loss(t, t.leaf(gt), gt, {0, 0, 0, 0}, 0.5);
        CHECK(r.no_visible);
        CHECK(t.val(r.value)[0] == 0.0);
        CHECK(r.kept.empty());
    }

    {
        // gradients against central differences; channel margins keep selection stable
        Rng rng(5);
        Tensor pred = random_tensor(rng, {3, 2, 2});
        Tensor target = random_tensor(rng, {3, 2, 2});
        const std::vector<double> wts = {1, 1, 1};
        Tape t;
        Var pv = t.leaf(pred);
        PoseLossResult r = pose_loss(t, pv, target, wts, 0.7);
        t.backward(r.value);
        const Tensor g = t.grad(pv);
        auto eval = [&]() {
            Tape tt;
            return tt.val(pose_loss(tt, tt.leaf(pred), target, wts, 0.7).value)[0];
        };
        const double h2 = 1e-6;
        for (int64_t j = 0; j < pred.numel(); ++j) {
            const double orig = pred[j];
            pred[j] = orig + h2;
            const double fp = eval();
            pred[j] = orig - h2;
            const double fm = eval();
            pred[j] = orig;
            const double fd = (fp - fm) / (2.0 * h2);
            CHECK(std::abs(g[j] - fd) / std::max(std::abs(g[j]) + std::abs(fd), 1e-6) <= 1e-3);
        }
    }

    {
        Tape t;
        CHECK_THROWS_AS((void)pose_loss(t, t.leaf(gt), gt, {1, 1}, 0.5), std::invalid_argument);
        CHECK_THROWS_AS((void)pose_loss(t, t.leaf(gt), gt, {1, 1, 1, 1}, 0.0),
                        std::invalid_argument);
    }
}

TEST_CASE("segmentation loss against a scalar oracle") {
    {
        // confident correct predictions cost nothing
        const int c = 3, h = 40, w = 40;
        Tensor gt({h, w});
        for (int i = 0; i < h * w; ++i) gt[i] = i % c;
        Tensor logits({c, h, w});
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) logits.at3(static_cast<int>(gt.at2(y, x)), y, x) = 50.0;
        }
        Tape t;
        Var loss = seg_loss(t, t.leaf(logits), gt, {1.0, 1.0, 1.0});
        CHECK(t.val(loss)[0] < 1e-3);
    }

    {
        // 2x2, 3 classes, uneven weights, brute force
        Rng rng(7);
        const int c = 3, h = 2, w = 2, hw = 4;
        Tensor logits = random_tensor(rng, {c, h, w}, -2.0, 2.0);
        Tensor gt = Tensor::from({h, w}, {0.0, 1.0, 2.0, 0.0});
        const std::vector<double> cw = {0.7, 1.3, 1.0};

        Tape t;
        Var loss = seg_loss(t, t.leaf(logits), gt, cw);

        double wsum = 0.0, ce = 0.0;
        std::vector<std::vector<double>> p(hw, std::vector<double>(c));
        for (int u = 0; u < hw; ++u) {
            const int y = u / w, x = u % w;
            double mx = -1e300;
            for (int k = 0; k < c; ++k) mx = std::max(mx, logits.at3(k, y, x));
            double z = 0.0;
            for (int k = 0; k < c; ++k) {
                p[static_cast<size_t>(u)][static_cast<size_t>(k)] =
                    std::exp(logits.at3(k, y, x) - mx);
                z += p[static_cast<size_t>(u)][static_cast<size_t>(k)];
            }
            for (int k = 0; k < c; ++k) p[static_cast<size_t>(u)][static_cast<size_t>(k)] /= z;
            const int lbl = static_cast<int>(gt[u]);
            ce -= cw[static_cast<size_t>(lbl)] *
                  std::log(p[static_cast<size_t>(u)][static_cast<size_t>(lbl)]);
            wsum += cw[static_cast<size_t>(lbl)];
        }
        ce /= wsum;
        double dice_mean = 0.0;
        for (int k = 0; k < c; ++k) {
            double inter = 0.0, ps = 0.0, gs = 0.0;
            for (int u = 0; u < hw; ++u) {
                const double gk = (static_cast<int>(gt[u]) == k) ? 1.0 : 0.0;
                inter += p[static_cast<size_t>(u)][static_cast<size_t>(k)] * gk;
                ps += p[static_cast<size_t>(u)][static_cast<size_t>(k)];
                gs += gk;
            }
            dice_mean += (2.0 * inter + 1.0) / (ps + gs + 1.0);
        }
        dice_mean /= c;
        const double want = ce + (1.0 - dice_mean);
        CHECK(std::abs(t.val(loss)[0] - want) < 1e-12);

        // gradient check on the same toy case
        Tape t2;
        Var lv = t2.leaf(logits);
        t2.backward(seg_loss(t2, lv, gt, cw));
        const Tensor g = t2.grad(lv);
        auto eval = [&]() {
            Tape tt;
            return tt.val(seg_loss(tt, tt.leaf(logits), gt, cw))[0];
        };
        const double h2 = 1e-6;
        for (int64_t j = 0; j < logits.numel(); ++j) {
            const double orig = logits[j];
            logits[j] = orig + h2;
            const double fp = eval();
            logits[j] = orig - h2;
            const double fm = eval();
            logits[j] = orig;
            const double fd = (fp - fm) / (2.0 * h2);
            CHECK(std::abs(g[j] - fd) / std::max(std::abs(g[j]) + std::abs(fd), 1e-6) <= 1e-3);
        }
    }

    {
        Tape t;
        Tensor logits({3, 2, 2});
        Tensor bad = Tensor::from({2, 2}, {0.0, 3.0, 1.0, 0.0});
        CHECK_THROWS_AS((void)seg_loss(t, t.leaf(logits), bad, {1, 1, 1}),
                        std::invalid_argument);
        Tensor frac = Tensor::from({2, 2}, {0.0, 0.5, 1.0, 0.0});
        CHECK_THROWS_AS((void)seg_loss(t, t.leaf(logits), frac, {1, 1, 1}),
                        std::invalid_argument);
        Tensor ok = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 0.0});
        CHECK_THROWS_AS((void)seg_loss(t, t.leaf(logits), ok, {1, 1}), std::invalid_argument);
    }
}

TEST_CASE("pointmap loss is scale equivariant and foreground bound") {
    Rng rng(11);
    const int h = 3, w = 3;
    Tensor gt = random_tensor(rng, {3, h, w});
    Tensor omega = Tensor::from({h, w}, {1, 1, 0, 1, 1, 1, 0, 1, 0});

    {
        Tape t;
        Var loss = pointmap_loss(t, t.leaf(gt), t.leaf(Tensor::scalar(1.0)), gt, full_mask(h, w));
        CHECK(t.val(loss)[0] == 0.0);
    }

    {
        // constant offset: point term is its norm, the gradient term dies
        Tensor pt = gt;
        const double d[3] = {0.2, -0.1, 0.05};
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < h * w; ++i) pt[static_cast<int64_t>(c) * h * w + i] += d[c];
        }
        Tape t;
        Var loss = pointmap_loss(t, t.leaf(pt), t.leaf(Tensor::scalar(1.0)), gt, full_mask(h, w));
        const double want = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        CHECK(t.val(loss)[0] == doctest::Approx(want).epsilon(1e-12));
    }

    {
        // brute force on a partial foreground
        Tensor pt = random_tensor(rng, {3, h, w});
        const double s = 1.3;
        Tape t;
        Var loss = pointmap_loss(t, t.leaf(pt), t.leaf(Tensor::scalar(s)), gt, omega);

        Tensor masked({3, h, w});
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    masked.at3(c, y, x) = (s * pt.at3(c, y, x) - gt.at3(c, y, x)) * omega.at2(y, x);
                }
            }
        }
        Tensor gm = grad_oracle(masked);
        double t1 = 0.0, t2 = 0.0, cnt = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (omega.at2(y, x) == 0.0) continue;
                cnt += 1.0;
                t1 += pixel_norm(masked, y, x);
                t2 += pixel_norm(gm, y, x);
            }
        }
        const double want = t1 / cnt + t2 / cnt;
        CHECK(std::abs(t.val(loss)[0] - want) < 1e-12);

        // trading scale between the map and the scalar changes nothing
        for (double c : {0.5, 3.0, 17.0}) {
            Tensor scaled = pt;
            for (auto& v : scaled.data) v /= c;
            Tape tt;
            Var l2 = pointmap_loss(tt, tt.leaf(scaled), tt.leaf(Tensor::scalar(s * c)), gt, omega);
            CHECK(std::abs(tt.val(l2)[0] - t.val(loss)[0]) < 1e-9);
        }

        // background pixels are dead weight
        Tensor pt2 = pt;
        Tensor gt2 = gt;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (omega.at2(y, x) != 0.0) continue;
                    pt2.at3(c, y, x) += 37.0;
                    gt2.at3(c, y, x) -= 11.0;
                }
            }
        }
        Tape tb;
        Var lb = pointmap_loss(tb, tb.leaf(pt2), tb.leaf(Tensor::scalar(s)), gt2, omega);
        CHECK(tb.val(lb)[0] == t.val(loss)[0]);

        // gradient flows correctly into both the map and the scalar
        Tape tg;
        Var ptv = tg.leaf(pt);
        Var sv = tg.leaf(Tensor::scalar(s));
        tg.backward(pointmap_loss(tg, ptv, sv, gt, omega));
        const Tensor gp = tg.grad(ptv);
        const Tensor gs = tg.grad(sv);
        double sval = s;
        auto eval = [&]() {
            Tape tt;
            return tt.val(
                pointmap_loss(tt, tt.leaf(pt), tt.leaf(Tensor::scalar(sval)), gt, omega))[0];
        };
        const double h2 = 1e-6;
        for (int64_t j = 0; j < pt.numel(); ++j) {
            const double orig = pt[j];
            pt[j] = orig + h2;
            const double fp = eval();
            pt[j] = orig - h2;
            const double fm = eval();
            pt[j] = orig;
            const double fd = (fp - fm) / (2.0 * h2);
            CHECK(std::abs(gp[j] - fd) / std::max(std::abs(gp[j]) + std::abs(fd), 1e-6) <= 1e-3);
        }
        sval = s + h2;
        const double fp = eval();
        sval = s - h2;
        const double fm = eval();
        const double fd = (fp - fm) / (2.0 * h2);
        CHECK(std::abs(gs[0] - fd) / std::max(std::abs(gs[0]) + std::abs(fd), 1e-6) <= 1e-3);
    }

    {
        Tape t;
        Tensor none({h, w});
        CHECK_THROWS_AS(
            (void)pointmap_loss(t, t.leaf(gt), t.leaf(Tensor::scalar(1.0)), gt, none),
            std::invalid_argument);
    }
}

TEST_CASE("normal loss identities") {
    {
        // perfectly matched axis-aligned fields cost nothing
        Tensor n({3, 2, 3});
        for (int y = 0; y < 2; ++y) {
            for (int x = 0; x < 3; ++x) n.at3(2, y, x) = 1.0;
        }
        Tape t;
        Var loss = normal_loss(t, t.leaf(n), n, full_mask(2, 3));
        CHECK(t.val(loss)[0] == 0.0);

        // antipodal field: cosine term 2, distance 2, gradients mute
        Tensor flipped = n;
        for (auto& v : flipped.data) v = -v;
        Tape t2;
        Var l2 = normal_loss(t2, t2.leaf(flipped), n, full_mask(2, 3));
        CHECK(t2.val(l2)[0] == doctest::Approx(4.0).epsilon(1e-12));
    }

    {
        // random unit fields, partial foreground, brute force
        Rng rng(13);
        const int h = 4, w = 4;
        Tensor nh = random_unit_field(rng, h, w);
        Tensor ng = random_unit_field(rng, h, w);
        Tensor omega({h, w});
        for (int64_t i = 0; i < omega.numel(); ++i) omega[i] = (rng.uniform() < 0.7) ? 1.0 : 0.0;
        omega[5] = 1.0;  // keep it non-empty

        Tape t;
        Var loss = normal_loss(t, t.leaf(nh), ng, omega);

        Tensor masked({3, h, w});
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    masked.at3(c, y, x) = (nh.at3(c, y, x) - ng.at3(c, y, x)) * omega.at2(y, x);
                }
            }
        }
        Tensor gm = grad_oracle(masked);
        double cnt = 0.0, cos_t = 0.0, dist_t = 0.0, grad_t = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (omega.at2(y, x) == 0.0) continue;
                cnt += 1.0;
                double dot = 0.0;
                for (int c = 0; c < 3; ++c) dot += nh.at3(c, y, x) * ng.at3(c, y, x);
                cos_t += 1.0 - dot;
                dist_t += pixel_norm(masked, y, x);
                grad_t += pixel_norm(gm, y, x);
            }
        }
        const double want = (cos_t + dist_t + grad_t) / cnt;
        CHECK(std::abs(t.val(loss)[0] - want) < 1e-12);

        // background edits are invisible
        Tensor nh2 = nh, ng2 = ng;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (omega.at2(y, x) != 0.0) continue;
                    nh2.at3(c, y, x) = 5.0;
                    ng2.at3(c, y, x) = -2.0;
                }
            }
        }
        Tape tb;
        Var lb = normal_loss(tb, tb.leaf(nh2), ng2, omega);
        CHECK(tb.val(lb)[0] == t.val(loss)[0]);

        // gradient against central differences
        Tape tg;
        Var nv = tg.leaf(nh);
        tg.backward(normal_loss(tg, nv, ng, omega));
        const Tensor g = tg.grad(nv);
        auto eval = [&]() {
            Tape tt;
            return tt.val(normal_loss(tt, tt.leaf(nh), ng, omega))[0];
        };
        const double h2 = 1e-6;
        double worst = 0.0;
        for (int64_t j = 0; j < nh.numel(); ++j) {
            const double orig = nh[j];
            nh[j] = orig + h2;
            const double fp = eval();
            nh[j] = orig - h2;
            const double fm = eval();
            nh[j] = orig;
            const double fd = (fp - fm) / (2.0 * h2);
            worst = std::max(worst,
                             std::abs(g[j] - fd) / std::max(std::abs(g[j]) + std::abs(fd), 1e-6));
        }
        CHECK(worst <= 1e-3);

        Tape te;
        CHECK_THROWS_AS((void)normal_loss(te, te.leaf(nh), ng, Tensor({h, w})),
                        std::invalid_argument);
    }
}

TEST_CASE("albedo loss identities") {
    Rng rng(17);
    const int h = 4, w = 4;
    Tensor gt = random_tensor(rng, {3, h, w}, 0.1, 0.9);

    {
        Tape t;
        Var loss = albedo_loss(t, t.leaf(gt), gt, full_mask(h, w));
        CHECK(t.val(loss)[0] == 0.0);
    }

    {
        // constant shift: per-pixel and mean terms both equal its norm
        Tensor shifted = gt;
        const double d[3] = {0.05, -0.03, 0.02};
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < h * w; ++i) shifted[static_cast<int64_t>(c) * h * w + i] += d[c];
        }
        Tape t;
        Var loss = albedo_loss(t, t.leaf(shifted), gt, full_mask(h, w));
        const double nd = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        CHECK(t.val(loss)[0] == doctest::Approx(2.0 * nd).epsilon(1e-9));
    }

    {
        // brute force with a partial foreground
        Tensor pred = random_tensor(rng, {3, h, w}, 0.0, 1.0);
        Tensor omega({h, w});
        for (int64_t i = 0; i < omega.numel(); ++i) omega[i] = (rng.uniform() < 0.6) ? 1.0 : 0.0;
        omega[3] = 1.0;

        Tape t;
        Var loss = albedo_loss(t, t.leaf(pred), gt, omega);

        Tensor masked({3, h, w});
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    masked.at3(c, y, x) = (pred.at3(c, y, x) - gt.at3(c, y, x)) * omega.at2(y, x);
                }
            }
        }
        Tensor gm = grad_oracle(masked);
        double cnt = 0.0, dist_t = 0.0, grad_t = 0.0;
        double mu_d[3] = {0.0, 0.0, 0.0};
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (omega.at2(y, x) == 0.0) continue;
                cnt += 1.0;
                dist_t += pixel_norm(masked, y, x);
                grad_t += pixel_norm(gm, y, x);
                for (int c = 0; c < 3; ++c) mu_d[c] += pred.at3(c, y, x) - gt.at3(c, y, x);
            }
        }
        double mu_norm = 0.0;
        for (double v : mu_d) mu_norm += (v / cnt) * (v / cnt);
        const double want = dist_t / cnt + grad_t / cnt + std::sqrt(mu_norm);
        CHECK(std::abs(t.val(loss)[0] - want) < 1e-12);

        // gradient against central differences
        Tape tg;
        Var av = tg.leaf(pred);
        tg.backward(albedo_loss(tg, av, gt, omega));
        const Tensor g = tg.grad(av);
        auto eval = [&]() {
            Tape tt;
            return tt.val(albedo_loss(tt, tt.leaf(pred), gt, omega))[0];
        };
        const double h2 = 1e-6;
        double worst = 0.0;
        for (int64_t j = 0; j < pred.numel(); ++j) {
            const double orig = pred[j];
            pred[j] = orig + h2;
            const double fp = eval();
            pred[j] = orig - h2;
            const double fm = eval();
            pred[j] = orig;
            const double fd = (fp - fm) / (2.0 * h2);
            worst = std::max(worst,
                             std::abs(g[j] - fd) / std::max(std::abs(g[j]) + std::abs(fd), 1e-6));
        }
        CHECK(worst <= 1e-3);

        Tape te;
        CHECK_THROWS_AS((void)albedo_loss(te, te.leaf(pred), gt, Tensor({h, w})),
                        std::invalid_argument);
    }
}

TEST_CASE("token grid reshaping preserves positions") {
    Rng rng(19);
    Tensor tokens = random_tensor(rng, {6, 4});
    Tape t;
    Var grid = tokens_to_grid(t, t.leaf(tokens), 2, 3);
    REQUIRE(t.val(grid).dim(0) == 4);
    REQUIRE(t.val(grid).dim(1) == 2);
    REQUIRE(t.val(grid).dim(2) == 3);
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 3; ++x) {
            for (int d = 0; d < 4; ++d) {
                CHECK(t.val(grid).at3(d, y, x) == tokens.at2(y * 3 + x, d));
            }
        }
    }
    CHECK_THROWS_AS((void)tokens_to_grid(t, t.leaf(tokens), 3, 3), std::invalid_argument);
}

TEST_CASE("task heads produce well-formed outputs") {
    Rng rng(23);
    PixelShuffleDecoderConfig cfg;
    cfg.in_channels = 8;
    cfg.out_channels = 3;
    cfg.widths = {4, 2};

    ParamStore store;
    init_pixelshuffle_decoder(store, "normal.", cfg, Rng(23));
    init_pixelshuffle_decoder(store, "albedo.", cfg, Rng(24));
    init_pixelshuffle_decoder(store, "pointmap.", cfg, Rng(25));
    init_scale_head(store, "pointmap.scale.", 8, Rng(26));
    // symmetry breaking so no head starts at a degenerate zero output
    for (const auto& name : store.names()) {
        for (auto& v : store.at(name).data) v += rng.uniform(-0.1, 0.1);
    }

    Tensor grid_in = random_tensor(rng, {8, 3, 2});
    Tensor pooled = random_tensor(rng, {1, 8});

    Tape t;
    Binding w(t, store);
    Var grid = t.leaf(grid_in);

    Var nh = normal_head(t, w, cfg, grid);
    REQUIRE(t.val(nh).dim(0) == 3);
    REQUIRE(t.val(nh).dim(1) == 12);
    REQUIRE(t.val(nh).dim(2) == 8);
    for (int y = 0; y < 12; ++y) {
        for (int x = 0; x < 8; ++x) {
            CHECK(std::abs(pixel_norm(t.val(nh), y, x) - 1.0) < 1e-6);
        }
    }

    Var ah = albedo_head(t, w, cfg, grid);
    for (double v : t.val(ah).data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    PointmapOut pm = pointmap_head(t, w, cfg, grid, t.leaf(pooled));
    CHECK(t.val(pm.scale).numel() == 1);
    CHECK(t.val(pm.scale)[0] > 0.0);
    REQUIRE(t.val(pm.p_tilde).dim(0) == 3);

    // every decoder parameter influences the loss
    Tensor target = random_unit_field(rng, 12, 8);
    Var loss = normal_loss(t, nh, target, full_mask(12, 8));
    t.backward(loss);
    auto grads = w.collect_grads();
    for (const auto& name : store.names()) {
        if (name.rfind("normal.", 0) != 0) continue;
        CAPTURE(name);
        REQUIRE(grads.count(name) == 1);
        double mag = 0.0;
        for (double v : grads.at(name).data) mag += std::abs(v);
        CHECK(mag > 0.0);
    }
}

TEST_CASE("head gradients survive the full decoder stack") {
    Rng rng(29);
    PixelShuffleDecoderConfig cfg;
    cfg.in_channels = 4;
    cfg.out_channels = 3;
    cfg.widths = {2};

    ParamStore store;
    init_pixelshuffle_decoder(store, "albedo.", cfg, Rng(29));
    for (const auto& name : store.names()) {
        for (auto& v : store.at(name).data) v = 5.0 * v + rng.uniform(-0.2, 0.2);
    }
    Tensor grid_in = random_tensor(rng, {4, 2, 2});
    Tensor gt = random_tensor(rng, {3, 4, 4}, 0.1, 0.9);
    Tensor omega = full_mask(4, 4);

    Tape t;
    Binding w(t, store);
    Var g = t.leaf(grid_in);
    t.backward(albedo_loss(t, albedo_head(t, w, cfg, g), gt, omega));
    auto grads = w.collect_grads();
    const Tensor gg = t.grad(g);

    auto eval = [&]() {
        Tape tt;
        Binding ww(tt, store);
        return tt.val(albedo_loss(tt, albedo_head(tt, ww, cfg, tt.leaf(grid_in)), gt, omega))[0];
    };
    const double h = 1e-5;
    Rng pick(31);
    double worst = 0.0;
    for (const auto& name : store.names()) {
        Tensor& p = store.at(name);
        const Tensor& gr = grads.at(name);
        const int64_t samples = std::min<int64_t>(p.numel(), 10);
        for (int64_t s = 0; s < samples; ++s) {
            const int64_t j =
                samples == p.numel() ? s : static_cast<int64_t>(pick.uniform_int(p.numel()));
            const double orig = p[j];
            p[j] = orig + h;
            const double fp = eval();
            p[j] = orig - h;
            const double fm = eval();
            p[j] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst,
                             std::abs(gr[j] - fd) / std::max(std::abs(gr[j]) + std::abs(fd), 1e-6));
        }
    }
    for (int s = 0; s < 12; ++s) {
        const int64_t j = static_cast<int64_t>(pick.uniform_int(grid_in.numel()));
        const double orig = grid_in[j];
        grid_in[j] = orig + h;
        const double fp = eval();
        grid_in[j] = orig - h;
        const double fm = eval();
        grid_in[j] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst,
                         std::abs(gg[j] - fd) / std::max(std::abs(gg[j]) + std::abs(fd), 1e-6));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("heatmap head doubles resolution twice") {
    Rng rng(37);
    HeatmapHeadConfig cfg;
    cfg.in_channels = 8;
    cfg.out_channels = 5;
    cfg.deconv1 = 8;
    cfg.deconv2 = 8;
    cfg.conv = 8;

    ParamStore store;
    init_heatmap_head(store, "pose.", cfg, Rng(37));
    Tensor grid_in = random_tensor(rng, {8, 4, 3});

    Tape t;
    Binding w(t, store);
    Var out = heatmap_head(t, w, "pose.", cfg, t.leaf(grid_in));
    REQUIRE(t.val(out).dim(0) == 5);
    REQUIRE(t.val(out).dim(1) == 16);
    REQUIRE(t.val(out).dim(2) == 12);
    for (double v : t.val(out).data) CHECK(std::isfinite(v));

    Tensor gt({5, 16, 12});
    PoseLossResult r = pose_loss(t, out, gt, {1, 1, 1, 1, 1}, 0.5);
    t.backward(r.value);
    auto grads = w.collect_grads();
    for (const auto& name : store.names()) {
        CAPTURE(name);
        REQUIRE(grads.count(name) == 1);
    }
}

TEST_CASE("task sample validation") {
    TaskSample s;
    s.image = Tensor({3, 4, 4});
    s.foreground = full_mask(4, 4);
    s.normal_map = Tensor({3, 4, 4});
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) s.normal_map.at3(2, y, x) = 1.0;
    }
    s.albedo_map = Tensor({3, 4, 4});
    s.pointmap = Tensor({3, 4, 4});
    s.seg_map = Tensor({4, 4});
    s.validate();

    TaskSample bad = s;
    bad.normal_map.at3(2, 1, 1) = 0.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    TaskSample bad2 = s;
    bad2.albedo_map.at3(0, 0, 0) = 1.5;
    CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);

    TaskSample bad3 = s;
    bad3.seg_map = Tensor({3, 4});
    CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);

    TaskSample bad4 = s;
    bad4.focal = 0.0;
    CHECK_THROWS_AS(bad4.validate(), std::invalid_argument);
}

TEST_CASE("head configs round trip") {
    {
        HeatmapHeadConfig cfg;
        CHECK(cfg.out_channels == 308);
        CHECK(cfg.deconv1 == 768);
        CHECK(cfg.deconv2 == 768);
        CHECK(cfg.conv == 512);
        CHECK(cfg.sigma == doctest::Approx(6.0));
        CHECK(cfg.stride == 4);

        HeatmapHeadConfig c2;
        c2.in_channels = 16;
        c2.out_channels = 9;
        c2.deconv1 = 12;
        c2.deconv2 = 10;
        c2.conv = 8;
        c2.sigma = 2.0;
        c2.stride = 2;
        ConfigMap m;
        c2.to_config(m, "pose");
        HeatmapHeadConfig back = HeatmapHeadConfig::from_config(m, "pose");
        CHECK(back.in_channels == 16);
        CHECK(back.out_channels == 9);
        CHECK(back.deconv1 == 12);
        CHECK(back.deconv2 == 10);
        CHECK(back.conv == 8);
        CHECK(back.sigma == doctest::Approx(2.0));
        CHECK(back.stride == 2);

        HeatmapHeadConfig zero;
        zero.out_channels = 0;
        CHECK_THROWS_AS(zero.validate(), std::invalid_argument);
    }
    {
        PixelShuffleDecoderConfig cfg;
        cfg.in_channels = 32;
        cfg.out_channels = 30;
        cfg.widths = {8, 4, 2};
        CHECK(cfg.upscale() == 8);
        ConfigMap m;
        cfg.to_config(m, "seg");
        PixelShuffleDecoderConfig back = PixelShuffleDecoderConfig::from_config(m, "seg");
        CHECK(back.in_channels == 32);
        CHECK(back.out_channels == 30);
        REQUIRE(back.widths.size() == 3);
        CHECK(back.widths[0] == 8);
        CHECK(back.widths[1] == 4);
        CHECK(back.widths[2] == 2);

        PixelShuffleDecoderConfig bad;
        bad.widths = {4, 0};
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    }
}
