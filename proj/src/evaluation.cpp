#include "sapiens/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "sapiens/optim.hpp"

namespace sapiens {

namespace {

constexpr double kRadToDeg = 57.29577951308232;

std::string trim_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

bool is_label(double v, int num_classes) {
    return v == std::floor(v) && v >= 0.0 && v < static_cast<double>(num_classes);
}

}  // namespace

void MetricReport::validate() const {
    check(!task.empty(), "metric report: empty task id");
    check(samples > 0, "metric report: sample count must be positive");
    for (const auto& [name, v] : values) {
        check(!name.empty(), "metric report: empty metric name");
        check(std::isfinite(v), "metric report: non-finite value for " + name);
    }
}

std::string MetricReport::to_json() const {
    validate();
    nlohmann::json j;
    j["task"] = task;
    j["samples"] = samples;
    j["fingerprint"] = fingerprint;
    j["values"] = values;
    return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    MetricReport r;
    r.task = j.at("task").get<std::string>();
    r.samples = j.at("samples").get<int64_t>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.values = j.at("values").get<std::map<std::string, double>>();
    r.validate();
    return r;
}

ConfusionMatrix::ConfusionMatrix(int classes) : num_classes(classes) {
    check(classes >= 1, "confusion matrix: need at least one class");
    cells.assign(static_cast<size_t>(classes) * classes, 0);
}

void ConfusionMatrix::add(const Tensor& pred, const Tensor& gt) {
    check(pred.ndim() == 2 && pred.same_shape(gt), "confusion matrix: map dims differ");
    for (int64_t i = 0; i < gt.numel(); ++i) {
        const double p = pred[i];
        const double g = gt[i];
        check(is_label(p, num_classes) && is_label(g, num_classes),
              "confusion matrix: label out of range");
        cells[static_cast<size_t>(g) * num_classes + static_cast<size_t>(p)] += 1;
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    check(other.num_classes == num_classes, "confusion matrix: class count mismatch");
    for (size_t i = 0; i < cells.size(); ++i) cells[i] += other.cells[i];
}

int64_t ConfusionMatrix::total() const {
    int64_t n = 0;
    for (int64_t c : cells) n += c;
    return n;
}

double ConfusionMatrix::miou() const {
    check(total() > 0, "confusion matrix: no labeled pixels");
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        int64_t tp = cells[static_cast<size_t>(c) * num_classes + c];
        int64_t row = 0, col = 0;
        for (int k = 0; k < num_classes; ++k) {
            row += cells[static_cast<size_t>(c) * num_classes + k];
            col += cells[static_cast<size_t>(k) * num_classes + c];
        }
        if (row == 0) continue;  // class absent from gt
        present += 1;
        sum += static_cast<double>(tp) / static_cast<double>(row + col - tp);
    }
    return 100.0 * sum / present;
}

double ConfusionMatrix::macc() const {
    check(total() > 0, "confusion matrix: no labeled pixels");
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        int64_t tp = cells[static_cast<size_t>(c) * num_classes + c];
        int64_t row = 0;
        for (int k = 0; k < num_classes; ++k)
            row += cells[static_cast<size_t>(c) * num_classes + k];
        if (row == 0) continue;
        present += 1;
        sum += static_cast<double>(tp) / static_cast<double>(row);
    }
    return 100.0 * sum / present;
}

std::pair<double, double> miou_macc(const std::vector<Tensor>& preds,
                                    const std::vector<Tensor>& gts, int num_classes) {
    check(preds.size() == gts.size(), "miou_macc: set sizes differ");
    ConfusionMatrix cm(num_classes);
    for (size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
    return {cm.miou(), cm.macc()};
}

Tensor argmax_channels(const Tensor& scores) {
    check(scores.ndim() == 3 && scores.dim(0) >= 1, "argmax_channels: [C,H,W] required");
    const int c = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
    Tensor out({h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int best = 0;
            double bv = scores.at3(0, y, x);
            for (int k = 1; k < c; ++k) {
                const double v = scores.at3(k, y, x);
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            out.at2(y, x) = static_cast<double>(best);
        }
    }
    return out;
}

namespace {

// per-pixel angles in degrees over the foreground
std::vector<double> angle_list(const Tensor& pred, const Tensor& gt, const Tensor& omega) {
    check(pred.ndim() == 3 && pred.dim(0) == 3, "normal metrics: [3,H,W] fields required");
    check(pred.same_shape(gt), "normal metrics: field dims differ");
    check(omega.ndim() == 2 && omega.dim(0) == pred.dim(1) && omega.dim(1) == pred.dim(2),
          "normal metrics: mask dims differ");
    std::vector<double> angles;
    const int h = pred.dim(1), w = pred.dim(2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (omega.at2(y, x) == 0.0) continue;
            const double ax = pred.at3(0, y, x), ay = pred.at3(1, y, x), az = pred.at3(2, y, x);
            const double bx = gt.at3(0, y, x), by = gt.at3(1, y, x), bz = gt.at3(2, y, x);
            const double dot = ax * bx + ay * by + az * bz;
            const double cx = ay * bz - az * by;
            const double cy = az * bx - ax * bz;
            const double cz = ax * by - ay * bx;
            const double cross = std::sqrt(cx * cx + cy * cy + cz * cz);
            // atan2 keeps the angle scale-invariant and exact at 0 and 180;
            // a zero-length vector scores the neutral 90
            const double ang =
                cross == 0.0 && dot == 0.0 ? 90.0 : std::atan2(cross, dot) * kRadToDeg;
            angles.push_back(ang);
        }
    }
    return angles;
}

NormalMetrics aggregate_angles(std::vector<double> angles, std::vector<double> thresholds) {
    check(!angles.empty(), "normal metrics: empty foreground");
    NormalMetrics m;
    m.thresholds = std::move(thresholds);
    const double n = static_cast<double>(angles.size());
    double sum = 0.0;
    for (double a : angles) sum += a;
    m.mean_deg = sum / n;
    std::sort(angles.begin(), angles.end());
    const size_t mid = angles.size() / 2;
    m.median_deg = (angles.size() % 2 == 1) ? angles[mid] : 0.5 * (angles[mid - 1] + angles[mid]);
    for (double t : m.thresholds) {
        int64_t hits = 0;
        for (double a : angles)
            if (a <= t) hits += 1;
        m.within.push_back(100.0 * static_cast<double>(hits) / n);
    }
    return m;
}

}  // namespace

NormalMetrics normal_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega,
                             std::vector<double> thresholds) {
    return aggregate_angles(angle_list(pred, gt, omega), std::move(thresholds));
}

PointmapMetrics pointmap_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega) {
    check(pred.ndim() == 3 && pred.dim(0) == 3, "pointmap metrics: [3,H,W] maps required");
    check(pred.same_shape(gt), "pointmap metrics: map dims differ");
    check(omega.ndim() == 2 && omega.dim(0) == pred.dim(1) && omega.dim(1) == pred.dim(2),
          "pointmap metrics: mask dims differ");
    const int h = pred.dim(1), w = pred.dim(2);
    double num = 0.0, den = 0.0;
    int64_t n = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (omega.at2(y, x) == 0.0) continue;
            n += 1;
            for (int c = 0; c < 3; ++c) {
                num += pred.at3(c, y, x) * gt.at3(c, y, x);
                den += pred.at3(c, y, x) * pred.at3(c, y, x);
            }
        }
    }
    check(n > 0, "pointmap metrics: empty foreground");
    check(den > 0.0, "pointmap metrics: zero-norm prediction");
    PointmapMetrics m;
    m.alpha = num / den;
    double sq = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (omega.at2(y, x) == 0.0) continue;
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = m.alpha * pred.at3(c, y, x) - gt.at3(c, y, x);
                d2 += d * d;
                m.mae[static_cast<size_t>(c)] += std::abs(d);
            }
            m.l2 += std::sqrt(d2);
            sq += d2;
        }
    }
    const double dn = static_cast<double>(n);
    m.l2 /= dn;
    m.rmse = std::sqrt(sq / (3.0 * dn));
    for (auto& v : m.mae) v /= dn;
    return m;
}

namespace {

// 11x11 Gaussian weights, sigma 1.5; the window is truncated at borders and
// the remaining weights renormalized.
double ssim_at(const Tensor& a, const Tensor& b, int c, int y, int x) {
    constexpr int kR = 5;
    constexpr double kC1 = 0.01 * 0.01;
    constexpr double kC2 = 0.03 * 0.03;
    const int h = a.dim(1), w = a.dim(2);
    double wsum = 0.0, ma = 0.0, mb = 0.0, maa = 0.0, mbb = 0.0, mab = 0.0;
    for (int dy = -kR; dy <= kR; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -kR; dx <= kR; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
            const double va = a.at3(c, yy, xx);
            const double vb = b.at3(c, yy, xx);
            wsum += g;
            ma += g * va;
            mb += g * vb;
            maa += g * va * va;
            mbb += g * vb * vb;
            mab += g * va * vb;
        }
    }
    ma /= wsum;
    mb /= wsum;
    const double va = maa / wsum - ma * ma;
    const double vb = mbb / wsum - mb * mb;
    const double cov = mab / wsum - ma * mb;
    return ((2.0 * ma * mb + kC1) * (2.0 * cov + kC2)) /
           ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
}

}  // namespace

AlbedoMetrics albedo_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega) {
    check(pred.ndim() == 3 && pred.dim(0) == 3, "albedo metrics: [3,H,W] maps required");
    check(pred.same_shape(gt), "albedo metrics: map dims differ");
    check(omega.ndim() == 2 && omega.dim(0) == pred.dim(1) && omega.dim(1) == pred.dim(2),
          "albedo metrics: mask dims differ");
    for (int64_t i = 0; i < pred.numel(); ++i)
        check(pred[i] >= 0.0 && pred[i] <= 1.0 && gt[i] >= 0.0 && gt[i] <= 1.0,
              "albedo metrics: values outside [0,1]");
    const int h = pred.dim(1), w = pred.dim(2);
    int64_t n = 0;
    double abs_sum = 0.0, sq_sum = 0.0, ssim_sum = 0.0, grad_sum = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (omega.at2(y, x) == 0.0) continue;
            n += 1;
            for (int c = 0; c < 3; ++c) {
                const double d = pred.at3(c, y, x) - gt.at3(c, y, x);
                abs_sum += std::abs(d);
                sq_sum += d * d;
                ssim_sum += ssim_at(pred, gt, c, y, x);
                // forward differences, zero at the far edges
                const double gx_p = x + 1 < w ? pred.at3(c, y, x + 1) - pred.at3(c, y, x) : 0.0;
                const double gx_g = x + 1 < w ? gt.at3(c, y, x + 1) - gt.at3(c, y, x) : 0.0;
                const double gy_p = y + 1 < h ? pred.at3(c, y + 1, x) - pred.at3(c, y, x) : 0.0;
                const double gy_g = y + 1 < h ? gt.at3(c, y + 1, x) - gt.at3(c, y, x) : 0.0;
                grad_sum += std::abs(gx_p - gx_g) + std::abs(gy_p - gy_g);
            }
        }
    }
    check(n > 0, "albedo metrics: empty foreground");
    const double vals = 3.0 * static_cast<double>(n);
    AlbedoMetrics m;
    m.mae = abs_sum / vals;
    const double mse = sq_sum / vals;
    m.rmse = std::sqrt(mse);
    m.psnr = mse > 0.0 ? std::min(100.0, 10.0 * std::log10(1.0 / mse)) : 100.0;
    m.ssim = ssim_sum / vals;
    m.grad_l1 = grad_sum / (2.0 * vals);
    return m;
}

double BBox::diag() const { return std::sqrt(w * w + h * h); }

BBox foreground_bbox(const Tensor& omega) {
    check(omega.ndim() == 2, "foreground_bbox: [H,W] mask required");
    int min_x = omega.dim(1), max_x = -1, min_y = omega.dim(0), max_y = -1;
    for (int y = 0; y < omega.dim(0); ++y) {
        for (int x = 0; x < omega.dim(1); ++x) {
            if (omega.at2(y, x) == 0.0) continue;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
        }
    }
    check(max_x >= 0, "foreground_bbox: empty mask");
    return BBox{static_cast<double>(min_x), static_cast<double>(min_y),
                static_cast<double>(max_x - min_x + 1), static_cast<double>(max_y - min_y + 1)};
}

std::vector<Keypoint> decode_heatmaps(const Tensor& maps, int stride) {
    check(maps.ndim() == 3, "decode_heatmaps: [K,H,W] required");
    check(stride >= 1, "decode_heatmaps: stride must be positive");
    const int k = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
    std::vector<Keypoint> out;
    out.reserve(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
        int by = 0, bx = 0;
        double bv = maps.at3(c, 0, 0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (maps.at3(c, y, x) > bv) {
                    bv = maps.at3(c, y, x);
                    by = y;
                    bx = x;
                }
            }
        }
        double off_x = 0.0, off_y = 0.0;
        if (bx > 0 && bx + 1 < w) {
            const double d = maps.at3(c, by, bx + 1) - maps.at3(c, by, bx - 1);
            off_x = d > 0.0 ? 0.25 : (d < 0.0 ? -0.25 : 0.0);
        }
        if (by > 0 && by + 1 < h) {
            const double d = maps.at3(c, by + 1, bx) - maps.at3(c, by - 1, bx);
            off_y = d > 0.0 ? 0.25 : (d < 0.0 ? -0.25 : 0.0);
        }
        out.push_back(Keypoint{(bx + off_x) * stride, (by + off_y) * stride, 1});
    }
    return out;
}

double pck(const std::vector<Keypoint>& pred, const std::vector<Keypoint>& gt, const BBox& bbox,
           double alpha) {
    check(pred.size() == gt.size(), "pck: keypoint count mismatch");
    check(alpha > 0.0, "pck: alpha must be positive");
    check(bbox.w >= 0.0 && bbox.h >= 0.0, "pck: negative bbox extent");
    const double thresh = alpha * bbox.diag();
    int64_t visible = 0, hits = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        if (gt[i].vis <= 0) continue;
        visible += 1;
        const double dx = pred[i].x - gt[i].x;
        const double dy = pred[i].y - gt[i].y;
        if (std::sqrt(dx * dx + dy * dy) <= thresh) hits += 1;
    }
    check(visible > 0, "pck: no visible keypoints");
    return static_cast<double>(hits) / static_cast<double>(visible);
}

std::vector<int> knn_retrieve(const Tensor& query, const std::vector<Tensor>& gallery, int k) {
    check(!gallery.empty(), "knn: empty gallery");
    check(k >= 1 && k <= static_cast<int>(gallery.size()), "knn: k outside [1, gallery size]");
    check(query.numel() > 0, "knn: empty query");
    double qn = 0.0;
    for (double v : query.data) qn += v * v;
    qn = std::sqrt(qn);
    check(qn > 0.0, "knn: zero-norm query");
    std::vector<std::pair<double, int>> ranked;
    ranked.reserve(gallery.size());
    for (size_t i = 0; i < gallery.size(); ++i) {
        const Tensor& g = gallery[i];
        check(g.numel() == query.numel(), "knn: gallery width mismatch");
        double dot = 0.0, gn = 0.0;
        for (int64_t j = 0; j < g.numel(); ++j) {
            dot += query[j] * g[j];
            gn += g[j] * g[j];
        }
        gn = std::sqrt(gn);
        check(gn > 0.0, "knn: zero-norm gallery vector");
        ranked.emplace_back(dot / (qn * gn), static_cast<int>(i));
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(ranked[static_cast<size_t>(i)].second);
    return out;
}

PCAResult pca_features(const TokenGrid& grid, const Mask& foreground) {
    check(grid.dense(), "pca: dense token grid required");
    check(grid.tokens.ndim() == 2 && grid.rows() == grid.positions(),
          "pca: token count does not match the grid");
    check(foreground.grid_h == grid.grid_h && foreground.grid_w == grid.grid_w,
          "pca: mask geometry mismatch");
    const int d = grid.tokens.cols();
    std::vector<int> fg;
    for (int i = 0; i < foreground.size(); ++i)
        if (foreground.bits[static_cast<size_t>(i)]) fg.push_back(i);
    check(static_cast<int>(fg.size()) >= 3, "pca: fewer than 3 foreground tokens");
    const int f = static_cast<int>(fg.size());

    PCAResult r;
    r.foreground_tokens = fg;
    r.mean = Tensor({d});
    for (int i : fg)
        for (int c = 0; c < d; ++c) r.mean[c] += grid.tokens.at2(i, c);
    for (int c = 0; c < d; ++c) r.mean[c] /= f;

    Eigen::MatrixXd xc(f, d);
    for (int row = 0; row < f; ++row)
        for (int c = 0; c < d; ++c) xc(row, c) = grid.tokens.at2(fg[static_cast<size_t>(row)], c) - r.mean[c];
    const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(f);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    check(es.info() == Eigen::Success, "pca: eigendecomposition failed");

    double lam_sum = 0.0;
    for (int i = 0; i < d; ++i) lam_sum += std::max(0.0, es.eigenvalues()(i));
    r.basis = Tensor({3, d});
    r.scores = Tensor({f, 3});
    for (int comp = 0; comp < 3; ++comp) {
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - comp);
        // sign convention: the largest-magnitude coefficient comes out positive
        int arg = 0;
        for (int i = 1; i < d; ++i)
            if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
        if (v(arg) < 0.0) v = -v;
        for (int i = 0; i < d; ++i) r.basis.at2(comp, i) = v(i);
        const Eigen::VectorXd proj = xc * v;
        for (int row = 0; row < f; ++row) r.scores.at2(row, comp) = proj(row);
        const double lam = std::max(0.0, es.eigenvalues()(d - 1 - comp));
        r.explained[static_cast<size_t>(comp)] = lam_sum > 0.0 ? lam / lam_sum : 0.0;
    }

    r.rgb = Tensor({3, grid.grid_h, grid.grid_w});
    for (int comp = 0; comp < 3; ++comp) {
        double lo = r.scores.at2(0, comp), hi = lo;
        for (int row = 1; row < f; ++row) {
            lo = std::min(lo, r.scores.at2(row, comp));
            hi = std::max(hi, r.scores.at2(row, comp));
        }
        for (int row = 0; row < f; ++row) {
            const int pos = fg[static_cast<size_t>(row)];
            const double s = r.scores.at2(row, comp);
            r.rgb.at3(comp, pos / grid.grid_w, pos % grid.grid_w) =
                hi > lo ? (s - lo) / (hi - lo) : 0.5;
        }
    }
    return r;
}

void ProbeConfig::validate() const {
    check(task == "seg" || task == "normal" || task == "albedo" || task == "pointmap" ||
              task == "pose",
          "probe: unknown task " + task);
    check(iters >= 0, "probe: negative iteration count");
    check(lr > 0.0, "probe: lr must be positive");
    check(weight_decay >= 0.0, "probe: negative weight decay");
    check(grad_clip > 0.0, "probe: grad_clip must be positive");
    check(num_classes >= 2, "probe: need at least two classes");
    check(!widths.empty(), "probe: empty decoder widths");
    for (int w : widths) check(w >= 1, "probe: decoder width must be positive");
    check(pck_alpha > 0.0, "probe: pck_alpha must be positive");
    check(ohem_fraction > 0.0 && ohem_fraction <= 1.0, "probe: ohem fraction outside (0,1]");
}

namespace {

void check_probe_sample(const TaskSample& s, const BackboneConfig& bb, const ProbeConfig& pc) {
    s.validate();
    check(s.image.dim(1) == bb.image_height && s.image.dim(2) == bb.image_width,
          "probe: sample dims differ from the backbone config");
    if (pc.task == "seg") check(s.seg_map.numel() > 0, "probe: sample lacks a seg map");
    if (pc.task == "normal") check(s.normal_map.numel() > 0, "probe: sample lacks normals");
    if (pc.task == "albedo") check(s.albedo_map.numel() > 0, "probe: sample lacks albedo");
    if (pc.task == "pointmap") check(s.pointmap.numel() > 0, "probe: sample lacks a pointmap");
    if (pc.task == "pose")
        check(static_cast<int>(s.keypoints.size()) == pc.pose.out_channels,
              "probe: keypoint count differs from the head");
    if (pc.task != "seg" && pc.task != "pose")
        check(s.foreground.numel() > 0, "probe: sample lacks a foreground mask");
}

struct ProbeHeads {
    PixelShuffleDecoderConfig dec;
    HeatmapHeadConfig pose;
};

// Backbone forward plus the probe decoder; for pointmap also fills *scale_out.
Var probe_forward(Tape& t, Binding& w, const BackboneConfig& bb, const ProbeConfig& pc,
                  const ProbeHeads& ph, const TaskSample& s, Var* scale_out) {
    Var img = t.leaf(s.image);
    BackboneOut bo = backbone_forward(t, w, bb, img, nullptr);
    Var grid = tokens_to_grid(t, bo.tokens, bo.grid_h, bo.grid_w);
    if (pc.task == "pose") return heatmap_head(t, w, "probe.", ph.pose, grid);
    Var out = pixelshuffle_decoder(t, w, "probe.", ph.dec, grid);
    if (pc.task == "normal") return normalize_channels(t, out, 1e-12);
    if (pc.task == "albedo") return sigmoid(t, out);
    if (pc.task == "pointmap") {
        Var pooled;
        if (bo.cls.valid()) {
            pooled = bo.cls;
        } else {
            const Tensor& tv = t.val(bo.tokens);
            pooled = reshape(t, scale(t, colsum(t, bo.tokens), 1.0 / tv.rows()), {1, tv.cols()});
        }
        *scale_out = scale_head(t, w, "probe.scale.", pooled);
    }
    return out;
}

Var probe_loss(Tape& t, const ProbeConfig& pc, const ProbeHeads& ph, Var pred, Var scale_v,
               const TaskSample& s, bool* skip) {
    *skip = false;
    if (pc.task == "seg")
        return seg_loss(t, pred, s.seg_map, std::vector<double>(pc.num_classes, 1.0));
    if (pc.task == "normal") return normal_loss(t, pred, s.normal_map, s.foreground);
    if (pc.task == "albedo") return albedo_loss(t, pred, s.albedo_map, s.foreground);
    if (pc.task == "pointmap") return pointmap_loss(t, pred, scale_v, s.pointmap, s.foreground);
    const Tensor& pv = t.val(pred);
    HeatmapTargets tg =
        generate_heatmaps(s.keypoints, pv.dim(1), pv.dim(2), ph.pose.sigma, ph.pose.stride);
    PoseLossResult r = pose_loss(t, pred, tg.maps, tg.weights, pc.ohem_fraction);
    *skip = r.no_visible;
    return r.value;
}

}  // namespace

namespace {

// Shared train-then-evaluate protocol. freeze keeps every non-probe weight
// untouched and pins that with a digest; finetuning lets all weights move.
MetricReport run_probe(ParamStore& store, const BackboneConfig& bb,
                       const std::vector<TaskSample>& train,
                       const std::vector<TaskSample>& held_out, const ProbeConfig& pc,
                       uint64_t seed, bool freeze, std::vector<int>* sample_order) {
    pc.validate();
    bb.validate();
    check(!held_out.empty(), "probe: empty held-out split");
    check(pc.iters == 0 || !train.empty(), "probe: empty training split");
    for (const auto& s : train) check_probe_sample(s, bb, pc);
    for (const auto& s : held_out) check_probe_sample(s, bb, pc);
    for (const auto& name : store.names())
        check(name.rfind("probe.", 0) != 0, "probe: store already holds probe parameters");

    // token grid the decoder upsamples from (pooled for windowed layouts)
    const int eff_gh = bb.layout.windowed() ? bb.grid_h() / bb.layout.window_side : bb.grid_h();
    const int up = 1 << static_cast<int>(pc.widths.size());
    ProbeHeads ph;
    if (pc.task == "pose") {
        ph.pose = pc.pose;
        ph.pose.in_channels = bb.hidden_size;
        check(ph.pose.stride * 4 * eff_gh == bb.image_height,
              "probe: heatmap stride does not match the token grid");
    } else {
        ph.dec.in_channels = bb.hidden_size;
        ph.dec.out_channels = pc.task == "seg" ? pc.num_classes : 3;
        ph.dec.widths = pc.widths;
        check(up * eff_gh == bb.image_height,
              "probe: decoder upscale does not match the token grid");
    }

    ConfigMap cm;
    bb.to_config(cm);
    cm.set("probe.task", pc.task);
    cm.set("probe.iters", std::to_string(pc.iters));
    cm.set("probe.lr", format_real(pc.lr));
    cm.set("probe.weight_decay", format_real(pc.weight_decay));
    cm.set("probe.seed", std::to_string(seed));
    cm.set("probe.freeze", freeze ? "true" : "false");
    const std::string fingerprint = sha256_hex(cm.serialize());

    const std::string hash_before = freeze ? fingerprint_excluding(store, "probe.") : "";

    // decoder init and data order depend on the seed alone
    const Rng root(seed);
    if (pc.task == "pose")
        init_heatmap_head(store, "probe.", ph.pose, root);
    else
        init_pixelshuffle_decoder(store, "probe.", ph.dec, root);
    if (pc.task == "pointmap") init_scale_head(store, "probe.scale.", bb.hidden_size, root);

    OptimConfig oc;
    oc.lr = pc.lr;
    oc.weight_decay = pc.weight_decay;
    AdamW opt(oc);
    Rng order_rng = root.fork(fnv1a("probe.order"));
    std::vector<int> perm(train.size());
    size_t pos = perm.size();  // forces a shuffle on the first iteration
    for (int64_t it = 0; it < pc.iters; ++it) {
        if (pos >= perm.size()) {
            for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
            for (size_t i = perm.size(); i > 1; --i)
                std::swap(perm[i - 1], perm[static_cast<size_t>(order_rng.uniform_int(
                                           static_cast<int>(i)))]);
            pos = 0;
        }
        const TaskSample& s = train[static_cast<size_t>(perm[pos])];
        if (sample_order != nullptr) sample_order->push_back(perm[pos]);
        pos += 1;

        Tape t;
        Binding w(t, store);
        Var scale_v;
        Var pred = probe_forward(t, w, bb, pc, ph, s, &scale_v);
        bool skip = false;
        Var loss = probe_loss(t, pc, ph, pred, scale_v, s, &skip);
        if (skip) continue;
        t.backward(loss);
        std::map<std::string, Tensor> grads;
        for (auto& [name, g] : w.collect_grads())
            if (!freeze || name.rfind("probe.", 0) == 0) grads.emplace(name, std::move(g));
        clip_global_norm(grads, pc.grad_clip);
        opt.step(store, grads, pc.lr);
    }

    MetricReport report;
    report.task = pc.task;
    report.samples = static_cast<int64_t>(held_out.size());
    report.fingerprint = fingerprint;

    ConfusionMatrix cm_seg(pc.num_classes);
    std::vector<double> angles;
    AlbedoMetrics alb_sum;
    PointmapMetrics pm_sum;
    int64_t pck_vis = 0, pck_hits = 0;
    for (const auto& s : held_out) {
        Tape t;
        Binding w(t, store);
        Var scale_v;
        Var pred = probe_forward(t, w, bb, pc, ph, s, &scale_v);
        Tensor pv = t.val(pred);
        if (pc.task == "seg") {
            cm_seg.add(argmax_channels(pv), s.seg_map);
        } else if (pc.task == "normal") {
            for (double a : angle_list(pv, s.normal_map, s.foreground)) angles.push_back(a);
        } else if (pc.task == "albedo") {
            const AlbedoMetrics m = albedo_metrics(pv, s.albedo_map, s.foreground);
            alb_sum.mae += m.mae;
            alb_sum.rmse += m.rmse;
            alb_sum.psnr += m.psnr;
            alb_sum.ssim += m.ssim;
            alb_sum.grad_l1 += m.grad_l1;
        } else if (pc.task == "pointmap") {
            const double sv = t.val(scale_v)[0];
            for (auto& v : pv.data) v *= sv;
            const PointmapMetrics m = pointmap_metrics(pv, s.pointmap, s.foreground);
            pm_sum.l2 += m.l2;
            pm_sum.rmse += m.rmse;
            for (size_t i = 0; i < 3; ++i) pm_sum.mae[i] += m.mae[i];
        } else {
            const std::vector<Keypoint> decoded = decode_heatmaps(pv, ph.pose.stride);
            const double thresh = pc.pck_alpha * foreground_bbox(s.foreground).diag();
            for (size_t i = 0; i < s.keypoints.size(); ++i) {
                if (s.keypoints[i].vis <= 0) continue;
                pck_vis += 1;
                const double dx = decoded[i].x - s.keypoints[i].x;
                const double dy = decoded[i].y - s.keypoints[i].y;
                if (std::sqrt(dx * dx + dy * dy) <= thresh) pck_hits += 1;
            }
        }
    }
    const double ns = static_cast<double>(held_out.size());
    if (pc.task == "seg") {
        report.values["miou"] = cm_seg.miou();
        report.values["macc"] = cm_seg.macc();
    } else if (pc.task == "normal") {
        const NormalMetrics m = aggregate_angles(std::move(angles), {5.0, 11.25, 30.0});
        report.values["mean_deg"] = m.mean_deg;
        report.values["median_deg"] = m.median_deg;
        for (size_t i = 0; i < m.thresholds.size(); ++i)
            report.values["within_" + trim_num(m.thresholds[i])] = m.within[i];
    } else if (pc.task == "albedo") {
        report.values["mae"] = alb_sum.mae / ns;
        report.values["rmse"] = alb_sum.rmse / ns;
        report.values["psnr"] = alb_sum.psnr / ns;
        report.values["ssim"] = alb_sum.ssim / ns;
        report.values["grad_l1"] = alb_sum.grad_l1 / ns;
    } else if (pc.task == "pointmap") {
        report.values["l2"] = pm_sum.l2 / ns;
        report.values["rmse"] = pm_sum.rmse / ns;
        report.values["mae_x"] = pm_sum.mae[0] / ns;
        report.values["mae_y"] = pm_sum.mae[1] / ns;
        report.values["mae_z"] = pm_sum.mae[2] / ns;
    } else {
        check(pck_vis > 0, "probe: no visible keypoints in the held-out split");
        report.values["pck"] = static_cast<double>(pck_hits) / static_cast<double>(pck_vis);
    }

    if (freeze) {
        const std::string hash_after = fingerprint_excluding(store, "probe.");
        if (hash_after != hash_before)
            throw std::runtime_error("dense probe: frozen backbone weights drifted");
    }
    report.validate();
    return report;
}

}  // namespace

MetricReport dense_probe(ParamStore& store, const BackboneConfig& bb,
                         const std::vector<TaskSample>& train,
                         const std::vector<TaskSample>& held_out, const ProbeConfig& pc,
                         uint64_t seed, std::vector<int>* sample_order) {
    return run_probe(store, bb, train, held_out, pc, seed, true, sample_order);
}

MetricReport finetune_task(ParamStore& store, const BackboneConfig& bb,
                           const std::vector<TaskSample>& train,
                           const std::vector<TaskSample>& held_out, const ProbeConfig& pc,
                           uint64_t seed) {
    return run_probe(store, bb, train, held_out, pc, seed, false, nullptr);
}

}  // namespace sapiens
