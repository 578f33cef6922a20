#include "sapiens/heads.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sapiens {

namespace {

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::string int_list_str(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

// replicate a [H,W] 0/1 mask across C channels
Tensor expand_mask(const Tensor& omega, int c) {
    check(omega.ndim() == 2, "mask must be [H,W]");
    Tensor out({c, omega.dim(0), omega.dim(1)});
    for (int ci = 0; ci < c; ++ci) {
        for (int64_t i = 0; i < omega.numel(); ++i) {
            out.data[static_cast<size_t>(ci) * omega.numel() + i] = omega[i];
        }
    }
    return out;
}

double omega_count(const Tensor& omega) {
    double n = 0.0;
    for (double v : omega.data) n += (v != 0.0) ? 1.0 : 0.0;
    return n;
}

void check_map(const Tensor& m, const Tensor& omega, const std::string& what) {
    check(m.ndim() == 3, what + ": [C,H,W] required");
    check(m.dim(1) == omega.dim(0) && m.dim(2) == omega.dim(1),
          what + ": map and mask dims differ");
}

}  // namespace

void TaskSample::validate() const {
    check(image.ndim() == 3 && image.dim(0) == 3, "sample: image must be [3,H,W]");
    const int h = image.dim(1), w = image.dim(2);
    auto dims_ok = [&](const Tensor& m, int c) {
        return m.ndim() == 3 && m.dim(0) == c && m.dim(1) == h && m.dim(2) == w;
    };
    if (seg_map.numel() > 0) {
        check(seg_map.ndim() == 2 && seg_map.dim(0) == h && seg_map.dim(1) == w,
              "sample: seg map dims differ from image");
    }
    if (foreground.numel() > 0) {
        check(foreground.ndim() == 2 && foreground.dim(0) == h && foreground.dim(1) == w,
              "sample: foreground dims differ from image");
    }
    if (pointmap.numel() > 0) check(dims_ok(pointmap, 3), "sample: pointmap dims differ");
    if (albedo_map.numel() > 0) {
        check(dims_ok(albedo_map, 3), "sample: albedo dims differ");
        for (double v : albedo_map.data) check(v >= 0.0 && v <= 1.0, "sample: albedo outside [0,1]");
    }
    if (normal_map.numel() > 0) {
        check(dims_ok(normal_map, 3), "sample: normal map dims differ");
        if (foreground.numel() > 0) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (foreground.at2(y, x) == 0.0) continue;
                    double ss = 0.0;
                    for (int c = 0; c < 3; ++c) ss += normal_map.at3(c, y, x) * normal_map.at3(c, y, x);
                    check(std::abs(std::sqrt(ss) - 1.0) < 1e-4, "sample: foreground normal not unit");
                }
            }
        }
    }
    check(focal > 0.0, "sample: focal must be positive");
}

void HeatmapHeadConfig::validate() const {
    check(out_channels >= 1, "pose head: need at least one keypoint channel");
    check(in_channels > 0 && deconv1 > 0 && deconv2 > 0 && conv > 0, "pose head: bad widths");
    check(sigma > 0.0 && stride >= 1, "pose head: bad heatmap geometry");
}

HeatmapHeadConfig HeatmapHeadConfig::from_config(const ConfigMap& c, const std::string& prefix) {
    HeatmapHeadConfig cfg;
    cfg.in_channels = static_cast<int>(c.get_int(prefix + ".in_channels", cfg.in_channels));
    cfg.out_channels = static_cast<int>(c.get_int(prefix + ".out_channels", cfg.out_channels));
    cfg.deconv1 = static_cast<int>(c.get_int(prefix + ".deconv1", cfg.deconv1));
    cfg.deconv2 = static_cast<int>(c.get_int(prefix + ".deconv2", cfg.deconv2));
    cfg.conv = static_cast<int>(c.get_int(prefix + ".conv", cfg.conv));
    cfg.sigma = c.get_real(prefix + ".sigma", cfg.sigma);
    cfg.stride = static_cast<int>(c.get_int(prefix + ".stride", cfg.stride));
    cfg.validate();
    return cfg;
}

void HeatmapHeadConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".in_channels", std::to_string(in_channels));
    c.set(prefix + ".out_channels", std::to_string(out_channels));
    c.set(prefix + ".deconv1", std::to_string(deconv1));
    c.set(prefix + ".deconv2", std::to_string(deconv2));
    c.set(prefix + ".conv", std::to_string(conv));
    std::ostringstream sg;
    sg << sigma;
    c.set(prefix + ".sigma", sg.str());
    c.set(prefix + ".stride", std::to_string(stride));
}

void PixelShuffleDecoderConfig::validate() const {
    check(in_channels > 0 && out_channels > 0, "decoder head: bad channel counts");
    for (int w : widths) check(w > 0, "decoder head: stage width must be positive");
}

PixelShuffleDecoderConfig PixelShuffleDecoderConfig::from_config(const ConfigMap& c,
                                                                 const std::string& prefix) {
    PixelShuffleDecoderConfig cfg;
    cfg.in_channels = static_cast<int>(c.get_int(prefix + ".in_channels", cfg.in_channels));
    cfg.out_channels = static_cast<int>(c.get_int(prefix + ".out_channels", cfg.out_channels));
    const std::string w = c.get_str(prefix + ".widths", int_list_str(cfg.widths));
    cfg.widths = parse_int_list(w);
    cfg.validate();
    return cfg;
}

void PixelShuffleDecoderConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".in_channels", std::to_string(in_channels));
    c.set(prefix + ".out_channels", std::to_string(out_channels));
    c.set(prefix + ".widths", int_list_str(widths));
}

Var tokens_to_grid(Tape& t, Var tokens, int gh, int gw) {
    const Tensor& tv = t.val(tokens);
    check(tv.ndim() == 2 && tv.rows() == gh * gw, "tokens_to_grid: token count mismatch");
    const int d = tv.cols();
    return reshape(t, transpose(t, tokens), {d, gh, gw});
}

void init_heatmap_head(ParamStore& store, const std::string& prefix,
                       const HeatmapHeadConfig& cfg, const Rng& root) {
    cfg.validate();
    init_normal(store, prefix + "deconv0.weight", {cfg.in_channels, cfg.deconv1 * 16}, 0.02,
                root);
    init_const(store, prefix + "deconv0.bias", {cfg.deconv1}, 0.0);
    init_normal(store, prefix + "deconv1.weight", {cfg.deconv1, cfg.deconv2 * 16}, 0.02, root);
    init_const(store, prefix + "deconv1.bias", {cfg.deconv2}, 0.0);
    init_normal(store, prefix + "conv.weight", {cfg.conv, cfg.deconv2 * 9}, 0.02, root);
    init_const(store, prefix + "conv.bias", {cfg.conv}, 0.0);
    init_normal(store, prefix + "out.weight", {cfg.out_channels, cfg.conv}, 0.02, root);
    init_const(store, prefix + "out.bias", {cfg.out_channels}, 0.0);
}

Var heatmap_head(Tape& t, Binding& w, const std::string& prefix, const HeatmapHeadConfig& cfg,
                 Var grid) {
    check(t.val(grid).ndim() == 3 && t.val(grid).dim(0) == cfg.in_channels,
          "heatmap_head: grid channel mismatch");
    Var x = relu(t, conv_transpose2d(t, grid, w[prefix + "deconv0.weight"],
                                     w[prefix + "deconv0.bias"], 4, 4, 2, 1));
    x = relu(t, conv_transpose2d(t, x, w[prefix + "deconv1.weight"], w[prefix + "deconv1.bias"],
                                 4, 4, 2, 1));
    x = relu(t, conv2d(t, x, w[prefix + "conv.weight"], w[prefix + "conv.bias"], 3, 3, 1, 1));
    return conv2d(t, x, w[prefix + "out.weight"], w[prefix + "out.bias"], 1, 1, 1, 0);
}

void init_pixelshuffle_decoder(ParamStore& store, const std::string& prefix,
                               const PixelShuffleDecoderConfig& cfg, const Rng& root) {
    cfg.validate();
    int cur = cfg.in_channels;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
        const int wide = 4 * cfg.widths[i];
        const std::string stage = prefix + "stage" + std::to_string(i) + ".";
        init_normal(store, stage + "conv.weight", {wide, cur * 9}, 0.02, root);
        init_const(store, stage + "conv.bias", {wide}, 0.0);
        cur = cfg.widths[i];
    }
    init_normal(store, prefix + "proj.weight", {cfg.out_channels, cur}, 0.02, root);
    init_const(store, prefix + "proj.bias", {cfg.out_channels}, 0.0);
}

Var pixelshuffle_decoder(Tape& t, Binding& w, const std::string& prefix,
                         const PixelShuffleDecoderConfig& cfg, Var grid) {
    check(t.val(grid).ndim() == 3 && t.val(grid).dim(0) == cfg.in_channels,
          "pixelshuffle_decoder: grid channel mismatch");
    Var x = grid;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::string stage = prefix + "stage" + std::to_string(i) + ".";
        x = conv2d(t, x, w[stage + "conv.weight"], w[stage + "conv.bias"], 3, 3, 1, 1);
        x = relu(t, pixel_shuffle(t, x, 2));
    }
    return conv2d(t, x, w[prefix + "proj.weight"], w[prefix + "proj.bias"], 1, 1, 1, 0);
}

void init_scale_head(ParamStore& store, const std::string& prefix, int in_dim, const Rng& root) {
    check(in_dim > 0, "scale head: bad input dim");
    init_normal(store, prefix + "weight", {in_dim, 1}, 0.02, root);
    init_const(store, prefix + "bias", {1}, 0.0);
}

Var scale_head(Tape& t, Binding& w, const std::string& prefix, Var pooled) {
    check(t.val(pooled).ndim() == 2 && t.val(pooled).rows() == 1,
          "scale_head: pooled features must be [1,D]");
    Var z = linear(t, pooled, w[prefix + "weight"], w[prefix + "bias"]);
    return expv(t, reshape(t, z, {1}));
}

Var seg_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid) {
    return pixelshuffle_decoder(t, w, "seg.", cfg, grid);
}

Var normal_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid) {
    check(cfg.out_channels == 3, "normal_head: 3 output channels required");
    return normalize_channels(t, pixelshuffle_decoder(t, w, "normal.", cfg, grid), 1e-12);
}

Var albedo_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid) {
    check(cfg.out_channels == 3, "albedo_head: 3 output channels required");
    return sigmoid(t, pixelshuffle_decoder(t, w, "albedo.", cfg, grid));
}

PointmapOut pointmap_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid,
                          Var pooled) {
    check(cfg.out_channels == 3, "pointmap_head: 3 output channels required");
    PointmapOut out;
    out.p_tilde = pixelshuffle_decoder(t, w, "pointmap.", cfg, grid);
    out.scale = scale_head(t, w, "pointmap.scale.", pooled);
    return out;
}

HeatmapTargets generate_heatmaps(const std::vector<Keypoint>& keypoints, int out_h, int out_w,
                                 double sigma, int stride) {
    check(out_h > 0 && out_w > 0, "generate_heatmaps: empty output grid");
    check(sigma > 0.0 && stride >= 1, "generate_heatmaps: bad geometry");
    const int k = static_cast<int>(keypoints.size());
    HeatmapTargets tg;
    tg.maps = Tensor({k, out_h, out_w});
    tg.weights.assign(static_cast<size_t>(k), 0.0);
    const double sp = sigma / static_cast<double>(stride);
    for (int i = 0; i < k; ++i) {
        const Keypoint& kp = keypoints[static_cast<size_t>(i)];
        const double cx = kp.x / stride;
        const double cy = kp.y / stride;
        if (kp.vis <= 0) continue;
        if (cx < 0.0 || cx > out_w - 1.0 || cy < 0.0 || cy > out_h - 1.0) continue;
        tg.weights[static_cast<size_t>(i)] = 1.0;
        for (int y = 0; y < out_h; ++y) {
            for (int x = 0; x < out_w; ++x) {
                const double dx = x - cx;
                const double dy = y - cy;
                tg.maps.at3(i, y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sp * sp));
            }
        }
    }
    return tg;
}

PoseLossResult pose_loss(Tape& t, Var pred, const Tensor& gt, const std::vector<double>& weights,
                         double ohem_fraction) {
    const Tensor& pv = t.val(pred);
    check(pv.same_shape(gt), "pose_loss: prediction and target shapes differ");
    check(pv.ndim() == 3, "pose_loss: [K,H,W] required");
    const int k = pv.dim(0);
    const int hw = pv.dim(1) * pv.dim(2);
    check(static_cast<int>(weights.size()) == k, "pose_loss: weight count mismatch");
    check(ohem_fraction > 0.0 && ohem_fraction <= 1.0, "pose_loss: fraction outside (0,1]");

    std::vector<std::pair<double, int>> ranked;  // (-channel mse, channel)
    for (int c = 0; c < k; ++c) {
        if (weights[static_cast<size_t>(c)] <= 0.0) continue;
        double s = 0.0;
        for (int i = 0; i < hw; ++i) {
            const double d = pv[static_cast<int64_t>(c) * hw + i] - gt[static_cast<int64_t>(c) * hw + i];
            s += d * d;
        }
        ranked.emplace_back(-s / hw, c);
    }

    PoseLossResult out;
    if (ranked.empty()) {
        out.value = t.leaf(Tensor::scalar(0.0));
        out.no_visible = true;
        return out;
    }
    std::sort(ranked.begin(), ranked.end());
    const int keep = static_cast<int>(
        std::ceil(ohem_fraction * static_cast<double>(ranked.size())));
    for (int i = 0; i < keep; ++i) out.kept.push_back(ranked[static_cast<size_t>(i)].second);

    Var p2 = reshape(t, pred, {k, hw});
    Var diff = sub(t, gather_rows(t, p2, out.kept),
                   gather_rows(t, t.leaf(Tensor::from({k, hw}, gt.data)), out.kept));
    out.value = mean_all(t, mul(t, diff, diff));
    return out;
}

Var seg_loss(Tape& t, Var logits, const Tensor& gt, const std::vector<double>& class_weights) {
    const Tensor& lv = t.val(logits);
    check(lv.ndim() == 3, "seg_loss: [C,H,W] logits required");
    const int c = lv.dim(0);
    const int hw = lv.dim(1) * lv.dim(2);
    check(gt.ndim() == 2 && gt.dim(0) == lv.dim(1) && gt.dim(1) == lv.dim(2),
          "seg_loss: label map dims differ");
    check(static_cast<int>(class_weights.size()) == c, "seg_loss: class weight count mismatch");

    std::vector<int> labels(static_cast<size_t>(hw));
    Tensor pixw({hw});
    Tensor onehot({hw, c});
    double wsum = 0.0;
    for (int i = 0; i < hw; ++i) {
        const double v = gt[i];
        check(v == std::floor(v) && v >= 0.0 && v < c, "seg_loss: label out of range");
        const int lbl = static_cast<int>(v);
        labels[static_cast<size_t>(i)] = lbl;
        pixw[i] = class_weights[static_cast<size_t>(lbl)];
        onehot.at2(i, lbl) = 1.0;
        wsum += pixw[i];
    }
    check(wsum > 0.0, "seg_loss: all pixel weights are zero");

    Var rows = transpose(t, reshape(t, logits, {c, hw}));  // [HW,C]
    Var picked = pick_per_row(t, log_softmax_rows(t, rows), labels);
    Var ce = scale(t, sum_all(t, mul(t, picked, t.leaf(pixw))), -1.0 / wsum);

    Var p = softmax_rows(t, rows);
    Var g = t.leaf(onehot);
    Var inter = colsum(t, mul(t, p, g));
    Var den = add_scalar(t, add(t, colsum(t, p), colsum(t, g)), 1.0);
    Var dice = mean_all(t, divide(t, add_scalar(t, scale(t, inter, 2.0), 1.0), den));
    return add(t, ce, add_scalar(t, scale(t, dice, -1.0), 1.0));
}

Var pointmap_loss(Tape& t, Var p_tilde, Var s, const Tensor& gt, const Tensor& omega) {
    check_map(t.val(p_tilde), omega, "pointmap_loss");
    check(t.val(p_tilde).same_shape(gt), "pointmap_loss: prediction and target shapes differ");
    check(omega_count(omega) > 0.0, "pointmap_loss: empty foreground");
    Var phat = mul_svar(t, p_tilde, s);
    Var diff = mul(t, sub(t, phat, t.leaf(gt)), t.leaf(expand_mask(omega, 3)));
    Var point_term = masked_mean(t, channel_l2norm(t, diff), omega);
    Var grad_term = masked_mean(t, channel_l2norm(t, finite_diff(t, diff)), omega);
    return add(t, point_term, grad_term);
}

Var normal_loss(Tape& t, Var n_hat, const Tensor& gt, const Tensor& omega) {
    check_map(t.val(n_hat), omega, "normal_loss");
    check(t.val(n_hat).same_shape(gt), "normal_loss: prediction and target shapes differ");
    check(omega_count(omega) > 0.0, "normal_loss: empty foreground");
    Var gtv = t.leaf(gt);
    Var dots = channel_sum(t, mul(t, n_hat, gtv));
    Var cos_term = masked_mean(t, add_scalar(t, scale(t, dots, -1.0), 1.0), omega);
    Var diff = mul(t, sub(t, n_hat, gtv), t.leaf(expand_mask(omega, t.val(n_hat).dim(0))));
    Var dist_term = masked_mean(t, channel_l2norm(t, diff), omega);
    Var grad_term = masked_mean(t, channel_l2norm(t, finite_diff(t, diff)), omega);
    return add(t, add(t, cos_term, dist_term), grad_term);
}

Var albedo_loss(Tape& t, Var a_hat, const Tensor& gt, const Tensor& omega) {
    check_map(t.val(a_hat), omega, "albedo_loss");
    check(t.val(a_hat).same_shape(gt), "albedo_loss: prediction and target shapes differ");
    check(omega_count(omega) > 0.0, "albedo_loss: empty foreground");
    Var gtv = t.leaf(gt);
    Var diff = mul(t, sub(t, a_hat, gtv), t.leaf(expand_mask(omega, t.val(a_hat).dim(0))));
    Var dist_term = masked_mean(t, channel_l2norm(t, diff), omega);
    Var grad_term = masked_mean(t, channel_l2norm(t, finite_diff(t, diff)), omega);
    Var mean_term = l2norm_vec(
        t, sub(t, masked_mean_channels(t, a_hat, omega), masked_mean_channels(t, gtv, omega)));
    return add(t, add(t, dist_term, grad_term), mean_term);
}

}  // namespace sapiens
