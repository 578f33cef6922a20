#include "sapiens/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "sapiens/tape.hpp"

namespace sapiens {

void RunConfig::validate() const {
    model.validate();
    decoder.validate();
    cls_head.validate();
    temps.validate();
    optimizer.validate();
    schedule.validate();
    views.validate();
    check(optimizer.lr > schedule.min_lr, "run config: lr must exceed the schedule floor");
    check(grad_clip > 0.0, "run config: grad_clip must be positive");
    check(ema_momentum >= 0.0 && ema_momentum < 1.0, "run config: ema_momentum outside [0,1)");
    check(center_momentum >= 0.0 && center_momentum < 1.0,
          "run config: center_momentum outside [0,1)");
    check(ckpt_every >= 1, "run config: ckpt_every must be at least 1");
    check(phase2_iters >= 0, "run config: phase2.iters must be nonnegative");
    check(data_count >= 1, "run config: data.count must be at least 1");
    check(mask.ratio > 0.0 && mask.ratio < 1.0, "run config: mask.ratio outside (0,1)");
    check(mask.blockwise_prob >= 0.0 && mask.blockwise_prob <= 1.0,
          "run config: mask.blockwise_prob outside [0,1]");
    check(mask.block_side_min >= 1 && mask.block_side_min <= mask.block_side_max,
          "run config: mask block sides must satisfy 1 <= min <= max");
    check(views.num_global >= 2, "run config: pretraining needs at least two global views");

    const int p = model.patch_size;
    check(views.global_height % p == 0 && views.global_width % p == 0,
          "run config: global view dims must divide by the patch size");
    check(views.local_height % p == 0 && views.local_width % p == 0,
          "run config: local view dims must divide by the patch size");
    if (model.layout.windowed()) {
        const int side = model.layout.window_side;
        check((views.global_height / p) % side == 0 && (views.global_width / p) % side == 0,
              "run config: global patch grid must divide by the window side");
        check((views.local_height / p) % side == 0 && (views.local_width / p) % side == 0,
              "run config: local patch grid must divide by the window side");
    }
}

RunConfig RunConfig::from_config(const ConfigMap& c) {
    RunConfig r;
    r.model = BackboneConfig::from_config(c, "model");
    r.decoder = MAEDecoderConfig::from_config(c, "decoder");
    r.cls_head = ContrastiveHeadConfig::from_config(c, "cls_head");
    r.temps = TemperatureSchedule::from_config(c, "temps");
    r.loss = LossWeights::from_config(c, "loss");
    r.optimizer = OptimConfig::from_config(c, "optimizer");
    r.schedule = ScheduleConfig::from_config(c, "schedule");
    r.views = ViewSpec::from_config(c, "views");
    r.mask.ratio = c.get_real("mask.ratio", r.mask.ratio);
    r.mask.blockwise_prob = c.get_real("mask.blockwise_prob", r.mask.blockwise_prob);
    r.mask.block_side_min = static_cast<int>(c.get_int("mask.block_side_min", r.mask.block_side_min));
    r.mask.block_side_max = static_cast<int>(c.get_int("mask.block_side_max", r.mask.block_side_max));
    r.grad_clip = c.get_real("train.grad_clip", r.grad_clip);
    r.ema_momentum = c.get_real("train.ema_momentum", r.ema_momentum);
    r.center_momentum = c.get_real("train.center_momentum", r.center_momentum);
    r.seed = static_cast<uint64_t>(c.get_int("train.seed", static_cast<int64_t>(r.seed)));
    r.ckpt_every = c.get_int("train.ckpt_every", r.ckpt_every);
    r.phase2_iters = c.get_int("phase2.iters", r.phase2_iters);
    r.data_count = c.get_int("data.count", r.data_count);
    r.data_dir = c.get_str("data.dir", r.data_dir);
    r.validate();
    return r;
}

void RunConfig::to_config(ConfigMap& c) const {
    model.to_config(c, "model");
    decoder.to_config(c, "decoder");
    cls_head.to_config(c, "cls_head");
    temps.to_config(c, "temps");
    loss.to_config(c, "loss");
    optimizer.to_config(c, "optimizer");
    schedule.to_config(c, "schedule");
    views.to_config(c, "views");
    c.set("mask.ratio", format_real(mask.ratio));
    c.set("mask.blockwise_prob", format_real(mask.blockwise_prob));
    c.set("mask.block_side_min", std::to_string(mask.block_side_min));
    c.set("mask.block_side_max", std::to_string(mask.block_side_max));
    c.set("train.grad_clip", format_real(grad_clip));
    c.set("train.ema_momentum", format_real(ema_momentum));
    c.set("train.center_momentum", format_real(center_momentum));
    c.set("train.seed", std::to_string(seed));
    c.set("train.ckpt_every", std::to_string(ckpt_every));
    c.set("phase2.iters", std::to_string(phase2_iters));
    c.set("data.count", std::to_string(data_count));
    c.set("data.dir", data_dir);
}

std::string RunConfig::hash() const {
    ConfigMap c;
    to_config(c);
    return sha256_hex(c.serialize());
}

const char* kSeedEnvVar = "SAPIENS_MINI_SEED";

uint64_t env_seed(uint64_t fallback) {
    const char* v = std::getenv(kSeedEnvVar);
    if (v == nullptr || *v == '\0') return fallback;
    char* end = nullptr;
    const uint64_t parsed = std::strtoull(v, &end, 10);
    check(end != nullptr && *end == '\0', "SAPIENS_MINI_SEED must be a decimal integer");
    return parsed;
}

std::string StepLog::jsonl() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "{\"iter\":%lld,\"mae\":%.17g,\"cl\":%.17g,\"koleo\":%.17g,\"total\":%.17g,"
                  "\"teacher_temp\":%.17g,\"lr\":%.17g}",
                  static_cast<long long>(iter), mae, cl, koleo, total, teacher_temp, lr);
    return buf;
}

std::string ckpt_name(int64_t iter) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06lld.bin", static_cast<long long>(iter));
    return buf;
}

namespace {

// [CLS] when the config has one, otherwise the token mean, always [1,D]
Var pooled_embedding(Tape& t, const BackboneOut& bo, const BackboneConfig& cfg) {
    if (cfg.use_cls) return bo.cls;
    const int rows = t.val(bo.tokens).rows();
    Var summed = colsum(t, bo.tokens);
    return reshape(t, scale(t, summed, 1.0 / rows), {1, cfg.hidden_size});
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg) : cfg_(cfg), opt_(cfg.optimizer), rng_(0) {
    cfg_.validate();
    pairs_ = build_pair_set(cfg_.views.num_global, cfg_.views.num_local);

    const Rng root(cfg_.seed);
    const Rng init = root.fork(fnv1a("init"));
    Rng data = root.fork(fnv1a("data"));
    rng_ = root.fork(fnv1a("train"));

    const BackboneConfig& bb = cfg_.model;
    const int p = bb.patch_size;
    const int g_pgh = cfg_.views.global_height / p;
    const int g_pgw = cfg_.views.global_width / p;
    const int pool = bb.layout.windowed() ? bb.layout.window_side : 1;
    global_gh_ = g_pgh / pool;
    global_gw_ = g_pgw / pool;

    init_backbone(student_, bb, init);
    ensure_pos_table(student_, bb, g_pgh, g_pgw, init);
    ensure_pos_table(student_, bb, cfg_.views.local_height / p, cfg_.views.local_width / p, init);
    const int cell_h = cfg_.views.global_height / global_gh_;
    const int cell_w = cfg_.views.global_width / global_gw_;
    init_mae_decoder(student_, cfg_.decoder, bb.hidden_size, 3 * cell_h * cell_w, init);
    ensure_decoder_pos_table(student_, cfg_.decoder, global_gh_, global_gw_, init);
    init_contrastive_head(student_, cfg_.cls_head, bb.hidden_size, init);

    if (cfg_.data_dir.empty()) {
        for (int64_t i = 0; i < cfg_.data_count; ++i) {
            SyntheticSceneSpec spec =
                make_figure_spec(bb.image_height, bb.image_width, bb.image_width, data);
            images_.push_back(synth_generate(spec, data).image);
        }
    } else {
        const DatasetInfo info = read_dataset_manifest(cfg_.data_dir);
        const int64_t n = std::min<int64_t>(info.count, cfg_.data_count);
        check(n > 0, "trainer: dataset in " + cfg_.data_dir + " is empty");
        for (int64_t i = 0; i < n; ++i)
            images_.push_back(read_sample_dir(cfg_.data_dir, static_cast<int>(i)).image);
    }

    teacher_init(teacher_, student_, cfg_.cls_head.prototypes);
    teacher_.ema_momentum = cfg_.ema_momentum;
    teacher_.center_momentum = cfg_.center_momentum;
}

StepLog Trainer::step() {
    transcript_.clear();
    const BackboneConfig& bb = cfg_.model;
    const int g = cfg_.views.num_global;
    const int K = cfg_.cls_head.prototypes;

    const int idx = rng_.uniform_int(static_cast<int>(images_.size()));
    const ViewSet vs = make_views(images_[idx], cfg_.views, rng_);
    std::vector<Mask> masks;
    masks.reserve(static_cast<size_t>(g));
    for (int j = 0; j < g; ++j) masks.push_back(sample_mask(global_gh_, global_gw_, cfg_.mask, rng_));

    // teacher pass, off the student tape
    const double ttemp = cfg_.temps.teacher_temp(iter_);
    Tensor teacher_logits({g, K});
    std::vector<Tensor> teacher_probs;
    for (int j = 0; j < g; ++j) {
        Tape tt;
        Binding tw(tt, teacher_.weights);
        const BackboneOut bo = backbone_forward(tt, tw, bb, tt.leaf(vs.views[j].image));
        const Var logits = contrastive_logits(tt, tw, cfg_.cls_head, pooled_embedding(tt, bo, bb));
        const Tensor& row = tt.val(logits);
        std::copy(row.data.begin(), row.data.end(),
                  teacher_logits.data.begin() + static_cast<size_t>(j) * K);
        teacher_probs.push_back(sharpen(row, teacher_.center, ttemp));
    }

    Tape t;
    Binding w(t, student_);
    std::vector<Var> student_logits;
    std::vector<Var> global_embeds;
    std::vector<Var> mae_preds;
    std::vector<Tensor> mae_targets;
    std::vector<const Mask*> mask_ptrs;
    for (int i = 0; i < static_cast<int>(vs.views.size()); ++i) {
        const bool global = i < g;
        const Var img = t.leaf(vs.views[i].image);
        const BackboneOut bo = backbone_forward(t, w, bb, img, global ? &masks[i] : nullptr);
        const Var pooled = pooled_embedding(t, bo, bb);
        student_logits.push_back(contrastive_logits(t, w, cfg_.cls_head, pooled));
        if (global) {
            global_embeds.push_back(pooled);
            mae_preds.push_back(
                mae_decode(t, w, cfg_.decoder, bo.tokens, masks[i], global_gh_, global_gw_));
            mae_targets.push_back(reconstruction_targets(vs.views[i].image, global_gh_, global_gw_));
            mask_ptrs.push_back(&masks[i]);
        }
    }
    transcript_.push_back("forward");

    const Var mae = mae_loss(t, mae_preds, mae_targets, mask_ptrs);
    const Var cl = cl_loss(t, student_logits, teacher_probs, pairs_, cfg_.temps.student_temp);
    const Var kol = koleo(t, concat_rows(t, global_embeds));
    const Var total = total_loss(t, mae, cl, kol, cfg_.loss);
    transcript_.push_back("loss");

    t.backward(total);
    transcript_.push_back("backward");

    auto grads = w.collect_grads();
    const double grad_norm = clip_global_norm(grads, cfg_.grad_clip);
    transcript_.push_back("clip");

    const double lr = iter_ < cfg_.schedule.total_iters
                          ? lr_schedule(iter_, cfg_.optimizer.lr, cfg_.schedule)
                          : cfg_.schedule.min_lr;
    opt_.step(student_, grads, lr);
    transcript_.push_back("step");

    ema_update(teacher_, student_, cfg_.ema_momentum);
    transcript_.push_back("ema");

    center_update(teacher_, teacher_logits, cfg_.center_momentum);
    transcript_.push_back("center");

    StepLog log;
    log.iter = iter_;
    log.mae = t.val(mae)[0];
    log.cl = t.val(cl)[0];
    log.koleo = t.val(kol)[0];
    log.total = t.val(total)[0];
    log.teacher_temp = ttemp;
    log.lr = lr;
    log.grad_norm = grad_norm;
    double entropy = 0.0;
    for (int k = 0; k < K; ++k) {
        double q = 0.0;
        for (int j = 0; j < g; ++j) q += teacher_probs[static_cast<size_t>(j)][k];
        q /= g;
        if (q > 0.0) entropy -= q * std::log(q);
    }
    log.teacher_entropy = entropy;

    ++iter_;
    return log;
}

void Trainer::save(const std::string& path) const {
    CheckpointData d;
    d.iter = iter_;
    d.config_hash = cfg_.hash();
    d.rng_state = rng_.state();
    d.has_teacher = true;
    d.opt_step = opt_.step_count();
    for (const auto& n : student_.names()) d.tensors.emplace_back("s." + n, student_.at(n));
    for (const auto& n : teacher_.weights.names())
        d.tensors.emplace_back("t." + n, teacher_.weights.at(n));
    d.tensors.emplace_back("center", teacher_.center);
    for (const auto& n : student_.names()) {
        const auto it = opt_.exp_avg().find(n);
        if (it == opt_.exp_avg().end()) continue;
        d.tensors.emplace_back("m." + n, it->second);
        d.tensors.emplace_back("v." + n, opt_.exp_avg_sq().at(n));
    }
    save_checkpoint(path, d);
}

void Trainer::load(const std::string& path) {
    const CheckpointData d = load_checkpoint(path, cfg_.hash());
    check(d.has_teacher, "trainer: checkpoint " + path + " lacks the teacher state");
    std::map<std::string, Tensor> m, v;
    size_t student_seen = 0, teacher_seen = 0;
    for (const auto& [name, ten] : d.tensors) {
        if (name.rfind("s.", 0) == 0) {
            Tensor& dst = student_.at(name.substr(2));
            check(dst.same_shape(ten), "trainer: checkpoint shape mismatch for " + name);
            dst = ten;
            ++student_seen;
        } else if (name.rfind("t.", 0) == 0) {
            Tensor& dst = teacher_.weights.at(name.substr(2));
            check(dst.same_shape(ten), "trainer: checkpoint shape mismatch for " + name);
            dst = ten;
            ++teacher_seen;
        } else if (name == "center") {
            check(ten.numel() == cfg_.cls_head.prototypes,
                  "trainer: checkpoint center has the wrong prototype count");
            teacher_.center = ten;
        } else if (name.rfind("m.", 0) == 0) {
            m[name.substr(2)] = ten;
        } else if (name.rfind("v.", 0) == 0) {
            v[name.substr(2)] = ten;
        } else {
            check(false, "trainer: unknown checkpoint entry " + name);
        }
    }
    check(student_seen == student_.size(), "trainer: checkpoint does not cover the student");
    check(teacher_seen == teacher_.weights.size(), "trainer: checkpoint does not cover the teacher");
    opt_.exp_avg() = std::move(m);
    opt_.exp_avg_sq() = std::move(v);
    opt_.set_step_count(d.opt_step);
    rng_.set_state(d.rng_state);
    iter_ = d.iter;
}

}  // namespace sapiens
