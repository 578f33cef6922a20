#include "sapiens/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sapiens {

// ---------------------------------------------------------------------------
// reconstruction
// ---------------------------------------------------------------------------

void MAEDecoderConfig::validate() const {
    check(depth >= 0 && hidden > 0 && num_heads > 0, "decoder config: sizes must be positive");
    check(hidden % num_heads == 0, "decoder config: hidden % num_heads != 0");
}

MAEDecoderConfig MAEDecoderConfig::from_config(const ConfigMap& c, const std::string& prefix) {
    MAEDecoderConfig cfg;
    cfg.depth = static_cast<int>(c.get_int(prefix + ".depth", cfg.depth));
    cfg.hidden = static_cast<int>(c.get_int(prefix + ".hidden", cfg.hidden));
    cfg.num_heads = static_cast<int>(c.get_int(prefix + ".num_heads", cfg.num_heads));
    cfg.validate();
    return cfg;
}

void MAEDecoderConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".depth", std::to_string(depth));
    c.set(prefix + ".hidden", std::to_string(hidden));
    c.set(prefix + ".num_heads", std::to_string(num_heads));
}

std::string decoder_pos_name(int gh, int gw) {
    return "decoder.pos_table." + std::to_string(gh) + "x" + std::to_string(gw);
}

void ensure_decoder_pos_table(ParamStore& store, const MAEDecoderConfig& cfg, int gh, int gw,
                              const Rng& root) {
    const std::string name = decoder_pos_name(gh, gw);
    if (!store.has(name)) init_normal(store, name, {gh * gw, cfg.hidden}, 0.02, root);
}

void init_mae_decoder(ParamStore& store, const MAEDecoderConfig& cfg, int enc_dim, int out_dim,
                      const Rng& root) {
    cfg.validate();
    check(enc_dim > 0 && out_dim > 0, "decoder init: dims must be positive");
    init_normal(store, "decoder.embed.weight", {enc_dim, cfg.hidden}, 0.02, root);
    init_const(store, "decoder.embed.bias", {cfg.hidden}, 0.0);
    init_normal(store, "decoder.mask_token", {1, cfg.hidden}, 0.02, root);
    for (int i = 0; i < cfg.depth; ++i) {
        init_block_params(store, "decoder.layer" + std::to_string(i) + ".", cfg.hidden,
                          cfg.hidden, cfg.head_dim(), cfg.ffn(), root);
    }
    init_const(store, "decoder.final_norm.gain", {cfg.hidden}, 1.0);
    init_normal(store, "decoder.head.weight", {cfg.hidden, out_dim}, 0.02, root);
    init_const(store, "decoder.head.bias", {out_dim}, 0.0);
}

Var mae_decode(Tape& t, Binding& w, const MAEDecoderConfig& cfg, Var z_vis, const Mask& mask,
               int gh, int gw) {
    check(mask.grid_h == gh && mask.grid_w == gw, "mae_decode: mask geometry mismatch");
    const int visible = mask.size() - mask.popcount();
    check(t.val(z_vis).rows() == visible, "mae_decode: visible row count mismatch");
    Var x = linear(t, z_vis, w["decoder.embed.weight"], w["decoder.embed.bias"]);
    Var pos = w[decoder_pos_name(gh, gw)];
    x = scatter_visible(t, x, mask.bits, w["decoder.mask_token"], pos);
    for (int i = 0; i < cfg.depth; ++i) {
        x = transformer_block(t, w, "decoder.layer" + std::to_string(i) + ".", x,
                              cfg.num_heads, cfg.num_heads);
    }
    x = rms_norm_rows(t, x, w["decoder.final_norm.gain"], kNormEps);
    return linear(t, x, w["decoder.head.weight"], w["decoder.head.bias"]);
}

Tensor normalize_targets(const Tensor& patch_pixels) {
    const int64_t n = patch_pixels.numel();
    check(n > 0, "normalize_targets: empty input");
    double mean = 0.0;
    for (double v : patch_pixels.data) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : patch_pixels.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double r = std::sqrt(var + 1e-6);
    Tensor out = patch_pixels;
    for (auto& v : out.data) v = (v - mean) / r;
    return out;
}

Tensor reconstruction_targets(const Tensor& image, int gh, int gw) {
    check(image.ndim() == 3, "reconstruction_targets: [C,H,W] required");
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    check(gh > 0 && gw > 0 && H % gh == 0 && W % gw == 0,
          "reconstruction_targets: grid must tile the image");
    const int ch = H / gh, cw = W / gw;
    const int dim = C * ch * cw;
    Tensor out({gh * gw, dim});
    Tensor cell({dim});
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            int k = 0;
            for (int c = 0; c < C; ++c) {
                for (int y = 0; y < ch; ++y) {
                    for (int x = 0; x < cw; ++x) {
                        cell[k++] = image.at3(c, gy * ch + y, gx * cw + x);
                    }
                }
            }
            Tensor norm = normalize_targets(cell);
            const int row = gy * gw + gx;
            for (int j = 0; j < dim; ++j) out.at2(row, j) = norm[j];
        }
    }
    return out;
}

Var mae_loss(Tape& t, const std::vector<Var>& preds, const std::vector<Tensor>& targets,
             const std::vector<const Mask*>& masks) {
    check(!preds.empty(), "mae_loss: no views");
    check(preds.size() == targets.size() && preds.size() == masks.size(),
          "mae_loss: view list sizes differ");
    Var acc{};
    for (size_t v = 0; v < preds.size(); ++v) {
        const Mask& m = *masks[v];
        std::vector<int> rows;
        for (int p = 0; p < m.size(); ++p) {
            if (m.bits[static_cast<size_t>(p)]) rows.push_back(p);
        }
        check(!rows.empty(), "mae_loss: view has no masked tokens");
        Var diff = sub(t, gather_rows(t, preds[v], rows), gather_rows(t, t.leaf(targets[v]), rows));
        Var per_view = mean_all(t, mul(t, diff, diff));
        acc = acc.valid() ? add(t, acc, per_view) : per_view;
    }
    return scale(t, acc, 1.0 / static_cast<double>(preds.size()));
}

// ---------------------------------------------------------------------------
// contrastive
// ---------------------------------------------------------------------------

void ContrastiveHeadConfig::validate() const {
    check(hidden > 0 && bottleneck > 0, "cls head config: sizes must be positive");
    check(prototypes >= 2, "cls head config: need at least two prototypes");
}

ContrastiveHeadConfig ContrastiveHeadConfig::from_config(const ConfigMap& c,
                                                         const std::string& prefix) {
    ContrastiveHeadConfig cfg;
    cfg.hidden = static_cast<int>(c.get_int(prefix + ".hidden", cfg.hidden));
    cfg.bottleneck = static_cast<int>(c.get_int(prefix + ".bottleneck", cfg.bottleneck));
    cfg.prototypes = static_cast<int>(c.get_int(prefix + ".prototypes", cfg.prototypes));
    cfg.validate();
    return cfg;
}

void ContrastiveHeadConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".hidden", std::to_string(hidden));
    c.set(prefix + ".bottleneck", std::to_string(bottleneck));
    c.set(prefix + ".prototypes", std::to_string(prototypes));
}

void init_contrastive_head(ParamStore& store, const ContrastiveHeadConfig& cfg, int enc_dim,
                           const Rng& root) {
    cfg.validate();
    init_normal(store, "cls_head.fc1.weight", {enc_dim, cfg.hidden}, 0.02, root);
    init_const(store, "cls_head.fc1.bias", {cfg.hidden}, 0.0);
    init_normal(store, "cls_head.fc2.weight", {cfg.hidden, cfg.hidden}, 0.02, root);
    init_const(store, "cls_head.fc2.bias", {cfg.hidden}, 0.0);
    init_normal(store, "cls_head.fc3.weight", {cfg.hidden, cfg.bottleneck}, 0.02, root);
    init_const(store, "cls_head.fc3.bias", {cfg.bottleneck}, 0.0);
    init_normal(store, "cls_head.prototypes", {cfg.prototypes, cfg.bottleneck}, 0.02, root);
}

Var contrastive_logits(Tape& t, Binding& w, const ContrastiveHeadConfig& cfg, Var cls) {
    Var x = silu(t, linear(t, cls, w["cls_head.fc1.weight"], w["cls_head.fc1.bias"]));
    x = silu(t, linear(t, x, w["cls_head.fc2.weight"], w["cls_head.fc2.bias"]));
    x = linear(t, x, w["cls_head.fc3.weight"], w["cls_head.fc3.bias"]);
    Var z = l2_normalize_rows(t, x, 1e-12);
    Var protos = l2_normalize_rows(t, w["cls_head.prototypes"], 1e-12);
    return matmul(t, z, transpose(t, protos));
}

double TemperatureSchedule::teacher_temp(int64_t iter) const {
    if (warmup_iters <= 0 || iter >= warmup_iters) return teacher_temp_end;
    const double f = static_cast<double>(iter) / warmup_iters;
    return teacher_temp_start + (teacher_temp_end - teacher_temp_start) * f;
}

void TemperatureSchedule::validate() const {
    check(student_temp > 0 && teacher_temp_start > 0 && teacher_temp_end > 0,
          "temps: must be positive");
    check(warmup_iters >= 0, "temps: negative warmup");
}

TemperatureSchedule TemperatureSchedule::from_config(const ConfigMap& c,
                                                     const std::string& prefix) {
    TemperatureSchedule s;
    s.student_temp = c.get_real(prefix + ".student", s.student_temp);
    s.teacher_temp_start = c.get_real(prefix + ".teacher_start", s.teacher_temp_start);
    s.teacher_temp_end = c.get_real(prefix + ".teacher_end", s.teacher_temp_end);
    s.warmup_iters = static_cast<int>(c.get_int(prefix + ".warmup_iters", s.warmup_iters));
    s.validate();
    return s;
}

void TemperatureSchedule::to_config(ConfigMap& c, const std::string& prefix) const {
    const auto real = [](double v) { return format_real(v); };
    c.set(prefix + ".student", real(student_temp));
    c.set(prefix + ".teacher_start", real(teacher_temp_start));
    c.set(prefix + ".teacher_end", real(teacher_temp_end));
    c.set(prefix + ".warmup_iters", std::to_string(warmup_iters));
}

void LossWeights::validate() const {
    check(mae >= 0 && cls >= 0 && koleo >= 0, "loss weights: must be non-negative");
}

LossWeights LossWeights::from_config(const ConfigMap& c, const std::string& prefix) {
    LossWeights w;
    w.mae = c.get_real(prefix + ".mae", w.mae);
    w.cls = c.get_real(prefix + ".cls", w.cls);
    w.koleo = c.get_real(prefix + ".koleo", w.koleo);
    w.validate();
    return w;
}

void LossWeights::to_config(ConfigMap& c, const std::string& prefix) const {
    const auto real = [](double v) { return format_real(v); };
    c.set(prefix + ".mae", real(mae));
    c.set(prefix + ".cls", real(cls));
    c.set(prefix + ".koleo", real(koleo));
}

void teacher_init(TeacherState& ts, const ParamStore& student, int prototypes) {
    check(ts.weights.size() == 0, "teacher_init: teacher already holds weights");
    for (const auto& name : student.names()) {
        if (name.rfind("decoder.", 0) == 0) continue;
        ts.weights.add(name, student.at(name));
    }
    ts.center = Tensor({prototypes});
}

void ema_update(TeacherState& ts, const ParamStore& student, double m) {
    check(m >= 0.0 && m <= 1.0, "ema_update: momentum outside [0,1]");
    for (const auto& name : ts.weights.names()) {
        Tensor& th = ts.weights.at(name);
        const Tensor& st = student.at(name);
        check(th.same_shape(st), "ema_update: shape mismatch for " + name);
        for (int64_t i = 0; i < th.numel(); ++i) th[i] = m * th[i] + (1.0 - m) * st[i];
    }
}

void center_update(TeacherState& ts, const Tensor& teacher_logits, double momentum) {
    check(teacher_logits.ndim() == 2 && teacher_logits.rows() > 0,
          "center_update: need a non-empty [B,K] batch");
    check(teacher_logits.cols() == static_cast<int>(ts.center.numel()),
          "center_update: width mismatch");
    const int B = teacher_logits.rows(), K = teacher_logits.cols();
    for (int k = 0; k < K; ++k) {
        double mean = 0.0;
        for (int b = 0; b < B; ++b) mean += teacher_logits.at2(b, k);
        mean /= static_cast<double>(B);
        ts.center[k] = momentum * ts.center[k] + (1.0 - momentum) * mean;
    }
}

std::vector<std::pair<int, int>> build_pair_set(int num_global, int num_local) {
    check(num_global >= 2, "pair set: need at least two global views");
    check(num_local >= 0, "pair set: negative local count");
    std::vector<std::pair<int, int>> pairs;
    const int total = num_global + num_local;
    for (int j = 0; j < num_global; ++j) {
        for (int i = 0; i < total; ++i) {
            if (i == j) continue;
            pairs.emplace_back(j, i);
        }
    }
    return pairs;
}

Tensor sharpen(const Tensor& logits, const Tensor& center, double temp) {
    check(temp > 0.0, "sharpen: temperature must be positive");
    const int64_t k = logits.numel();
    check(k > 0, "sharpen: empty logits");
    if (center.numel() > 0) check(center.numel() == k, "sharpen: center width mismatch");
    Tensor out = logits;
    for (int64_t i = 0; i < k; ++i) {
        out[i] = (logits[i] - (center.numel() > 0 ? center[i] : 0.0)) / temp;
    }
    double mx = out[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, out[i]);
    double z = 0.0;
    for (int64_t i = 0; i < k; ++i) {
        out[i] = std::exp(out[i] - mx);
        z += out[i];
    }
    for (int64_t i = 0; i < k; ++i) out[i] /= z;
    return out;
}

Var cl_loss(Tape& t, const std::vector<Var>& student_logits,
            const std::vector<Tensor>& teacher_probs,
            const std::vector<std::pair<int, int>>& pairs, double student_temp) {
    check(!pairs.empty(), "cl_loss: empty pair set");
    check(student_temp > 0.0, "cl_loss: temperature must be positive");
    std::vector<Var> log_p(student_logits.size(), Var{});
    Var acc{};
    for (const auto& [j, i] : pairs) {
        check(j >= 0 && j < static_cast<int>(teacher_probs.size()), "cl_loss: teacher index");
        check(i >= 0 && i < static_cast<int>(student_logits.size()), "cl_loss: student index");
        Var& lp = log_p[static_cast<size_t>(i)];
        if (!lp.valid()) {
            lp = log_softmax_rows(t, scale(t, student_logits[static_cast<size_t>(i)],
                                           1.0 / student_temp));
        }
        const Tensor& q = teacher_probs[static_cast<size_t>(j)];
        Var qrow = t.leaf(Tensor::from({1, static_cast<int>(q.numel())}, q.data));
        Var term = sum_all(t, mul(t, qrow, lp));
        acc = acc.valid() ? add(t, acc, term) : term;
    }
    return scale(t, acc, -1.0 / static_cast<double>(pairs.size()));
}

Var koleo(Tape& t, Var embeddings) {
    const Tensor& x = t.val(embeddings);
    check(x.ndim() == 2 && x.rows() >= 2, "koleo: need at least two embeddings");
    const int n = x.rows();
    Var z = l2_normalize_rows(t, embeddings, 1e-12);
    const Tensor& zv = t.val(z);
    const int d = zv.cols();
    // nearest neighbors fixed off-tape; gradients flow through the distances
    std::vector<int> nn(static_cast<size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
        double best = 1e300;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double s = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = zv.at2(i, c) - zv.at2(j, c);
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                nn[static_cast<size_t>(i)] = j;
            }
        }
    }
    Var acc{};
    for (int i = 0; i < n; ++i) {
        Var diff = sub(t, slice_rows(t, z, i, 1), slice_rows(t, z, nn[static_cast<size_t>(i)], 1));
        Var term = logv(t, add_scalar(t, l2norm_vec(t, diff), 1e-8));
        acc = acc.valid() ? add(t, acc, term) : term;
    }
    return scale(t, acc, -1.0 / static_cast<double>(n));
}

Var total_loss(Tape& t, Var mae, Var cl, Var kol, const LossWeights& w) {
    return add(t, add(t, scale(t, mae, w.mae), scale(t, cl, w.cls)), scale(t, kol, w.koleo));
}

}  // namespace sapiens
