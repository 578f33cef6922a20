#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sapiens/backbone.hpp"
#include "sapiens/checkpoint.hpp"
#include "sapiens/config.hpp"
#include "sapiens/evaluation.hpp"
#include "sapiens/heads.hpp"
#include "sapiens/masking.hpp"
#include "sapiens/params.hpp"
#include "sapiens/rng.hpp"
#include "sapiens/synth.hpp"
#include "sapiens/tape.hpp"
#include "sapiens/tensor.hpp"
#include "sapiens/trainer.hpp"

namespace fs = std::filesystem;
using namespace sapiens;

namespace {

std::string stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", index);
    return buf;
}

std::string raster_path(const std::string& dir, int index, const std::string& kind,
                        const std::string& ext) {
    return (fs::path(dir) / (stem(index) + "." + kind + "." + ext)).string();
}

void require_dir(const std::string& path, const std::string& what) {
    if (!fs::is_directory(path)) throw ConfigError(what + " directory not found: " + path);
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw std::runtime_error("cannot write " + path.string());
}

// Resolves file + --set overrides into a validated RunConfig. The env seed
// wins over whatever the config says; unknown keys are fatal here, before
// anything expensive starts.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
    require_file(path, "config file");
    ConfigMap cm = ConfigMap::parse_file(path);
    for (const auto& kv : sets) cm.set_kv(kv);
    RunConfig rc = RunConfig::from_config(cm);
    cm.reject_unused();
    rc.seed = env_seed(rc.seed);
    rc.validate();
    return rc;
}

void write_resolved(const RunConfig& rc, const fs::path& run_dir) {
    ConfigMap out;
    rc.to_config(out);
    write_text(run_dir / "config.resolved", out.serialize());
}

// Backbone weights for the offline verbs: either the student half of a
// checkpoint or a fresh init from the seed (matching a step-zero trainer).
void build_student(ParamStore& store, const BackboneConfig& bb, const std::string& ckpt,
                   uint64_t seed) {
    const Rng root(seed);
    if (ckpt.empty()) {
        init_backbone(store, bb, root.fork(fnv1a("init")));
        return;
    }
    CheckpointData d = load_checkpoint(ckpt);
    for (auto& [name, t] : d.tensors)
        if (name.rfind("s.", 0) == 0) store.add(name.substr(2), std::move(t));
    ParamStore ref;
    init_backbone(ref, bb, root.fork(fnv1a("init")));
    for (const auto& name : ref.names()) {
        if (!store.has(name))
            throw ConfigError("checkpoint " + ckpt + " has no tensor " + name +
                              "; model section does not match the checkpoint");
        if (!store.at(name).same_shape(ref.at(name)))
            throw ConfigError("checkpoint " + ckpt + ": shape mismatch for " + name);
    }
}

void check_geometry(const DatasetInfo& info, const BackboneConfig& bb, const std::string& dir) {
    if (info.height != bb.image_height || info.width != bb.image_width)
        throw ConfigError("dataset " + dir + " is " + std::to_string(info.height) + "x" +
                          std::to_string(info.width) + " but the model expects " +
                          std::to_string(bb.image_height) + "x" +
                          std::to_string(bb.image_width));
}

Tensor pooled_embed(ParamStore& store, const BackboneConfig& bb, const Tensor& image) {
    Tape t;
    Binding w(t, store);
    BackboneOut bo = backbone_forward(t, w, bb, t.leaf(image));
    Tensor out({bb.hidden_size});
    if (bb.use_cls) {
        const Tensor c = t.val(bo.cls);
        for (int i = 0; i < bb.hidden_size; ++i) out[i] = c[i];
    } else {
        const Tensor tok = t.val(bo.tokens);
        for (int r = 0; r < tok.rows(); ++r)
            for (int c = 0; c < tok.cols(); ++c) out[c] += tok.at2(r, c);
        for (int i = 0; i < bb.hidden_size; ++i) out[i] /= static_cast<double>(tok.rows());
    }
    return out;
}

std::vector<int> parse_widths(const std::string& text) {
    std::vector<int> out;
    std::string cur;
    for (char ch : text + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (out.empty()) throw ConfigError("widths: expected a comma-separated list, got " + text);
    return out;
}

std::vector<Keypoint> load_keypoints(const std::string& dir, int index) {
    const std::string path = (fs::path(dir) / (stem(index) + ".kp.json")).string();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    std::vector<Keypoint> out;
    for (const auto& row : j.at("keypoints"))
        out.push_back({row.at(0).get<double>(), row.at(1).get<double>(), row.at(2).get<int>()});
    return out;
}

void report_to_stdout(const MetricReport& rep) {
    std::cout << rep.task << ":";
    for (const auto& [name, v] : rep.values) std::cout << " " << name << "=" << format_real(v);
    std::cout << " (" << rep.samples << " samples)\n";
}

// [3,H,W] maps stacked into [3,N*H,W] so a single metric call pools every
// foreground pixel across the dataset.
Tensor stack_fields(const std::vector<Tensor>& maps) {
    const int n = static_cast<int>(maps.size());
    const int h = maps[0].dim(1), w = maps[0].dim(2);
    Tensor out({3, n * h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < n; ++i)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out.at3(c, i * h + y, x) = maps[i].at3(c, y, x);
    return out;
}

Tensor stack_planes(const std::vector<Tensor>& maps) {
    const int n = static_cast<int>(maps.size());
    const int h = maps[0].dim(0), w = maps[0].dim(1);
    Tensor out({n * h, w});
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at2(i * h + y, x) = maps[i].at2(y, x);
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

struct pretrain_opts {
    std::string config;
    std::vector<std::string> sets;
    std::string out = "run";
    std::string resume;
};

void cmd_pretrain(const pretrain_opts& o) {
    RunConfig rc = load_run_config(o.config, o.sets);
    if (!rc.data_dir.empty()) require_dir(rc.data_dir, "data");
    if (!o.resume.empty()) require_file(o.resume, "checkpoint");

    const fs::path run_dir(o.out);
    fs::create_directories(run_dir);
    write_resolved(rc, run_dir);

    Trainer trainer(rc);
    if (!o.resume.empty()) trainer.load(o.resume);
    std::ofstream log(run_dir / "log.jsonl",
                      o.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + (run_dir / "log.jsonl").string());

    const int64_t total = rc.schedule.total_iters + rc.phase2_iters;
    StepLog last;
    int64_t saved_at = -1;
    while (trainer.iter() < total) {
        last = trainer.step();
        log << last.jsonl() << "\n";
        if (trainer.iter() % rc.ckpt_every == 0) {
            trainer.save((run_dir / ckpt_name(trainer.iter())).string());
            saved_at = trainer.iter();
        }
    }
    log.flush();
    if (!log) throw std::runtime_error("log write failed in " + run_dir.string());
    if (saved_at != trainer.iter())
        trainer.save((run_dir / ckpt_name(trainer.iter())).string());

    std::cout << "pretrain: " << trainer.iter() << " iters";
    if (trainer.iter() > 0) std::cout << ", total loss " << format_real(last.total);
    std::cout << ", run dir " << run_dir.string() << "\n";
}

struct synth_opts {
    std::string out;
    int count = 64;
    uint64_t seed = 0;
    int height = 64;
    int width = 64;
    double focal = 0.0;  // 0: use the image width
};

void cmd_synth(const synth_opts& o) {
    if (o.count < 1) throw ConfigError("synth: count must be positive");
    if (o.height < 1 || o.width < 1) throw ConfigError("synth: dims must be positive");
    fs::create_directories(o.out);
    const double focal = o.focal > 0.0 ? o.focal : static_cast<double>(o.width);
    const Rng root(o.seed);
    for (int i = 0; i < o.count; ++i) {
        Rng ri = root.fork(static_cast<uint64_t>(i));
        const SyntheticSceneSpec spec = make_figure_spec(o.height, o.width, focal, ri);
        write_sample_dir(o.out, i, synth_generate(spec, ri));
    }
    write_dataset_manifest(o.out, {o.count, o.height, o.width, kFigureClasses, kFigureLandmarks});
    std::cout << "synth: " << o.count << " samples in " << o.out << "\n";
}

struct probe_opts {
    std::string config;
    std::vector<std::string> sets;
    std::string ckpt;
    std::string data;
    std::string out = "run";
    std::string task = "normal";
    std::string widths = "32,16,16";
    int64_t iters = 100;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double grad_clip = 5.0;
    double pck_alpha = 0.2;
    double ohem = 0.7;
    double pose_sigma = 6.0;
    int pose_width = 64;
    int holdout = 0;  // 0 scores the training split
    int classes = 0;  // 0: manifest value
};

void cmd_probe(const probe_opts& o, bool freeze) {
    RunConfig rc = load_run_config(o.config, o.sets);
    const BackboneConfig& bb = rc.model;
    require_dir(o.data, "data");
    if (!o.ckpt.empty()) require_file(o.ckpt, "checkpoint");
    const DatasetInfo info = read_dataset_manifest(o.data);
    check_geometry(info, bb, o.data);

    std::vector<TaskSample> samples = read_dataset(o.data);
    const int n = static_cast<int>(samples.size());
    if (o.holdout < 0 || o.holdout >= n)
        throw ConfigError("holdout must leave at least one training sample, got " +
                          std::to_string(o.holdout) + " of " + std::to_string(n));
    std::vector<TaskSample> train(samples.begin(), samples.end() - o.holdout);
    std::vector<TaskSample> held_out(samples.end() - o.holdout, samples.end());
    const std::vector<TaskSample>& held = o.holdout > 0 ? held_out : train;

    ProbeConfig pc;
    pc.task = o.task;
    pc.iters = o.iters;
    pc.lr = o.lr;
    pc.weight_decay = o.weight_decay;
    pc.grad_clip = o.grad_clip;
    pc.num_classes = o.classes > 0 ? o.classes : info.num_classes;
    pc.widths = parse_widths(o.widths);
    pc.pck_alpha = o.pck_alpha;
    pc.ohem_fraction = o.ohem;
    if (o.task == "pose") {
        const int eff_gh =
            bb.layout.windowed() ? bb.grid_h() / bb.layout.window_side : bb.grid_h();
        if (bb.image_height % (4 * eff_gh) != 0)
            throw ConfigError("pose: image height is not a multiple of 4x the token grid");
        pc.pose.stride = bb.image_height / (4 * eff_gh);
        pc.pose.out_channels = info.keypoints;
        pc.pose.deconv1 = o.pose_width;
        pc.pose.deconv2 = o.pose_width;
        pc.pose.conv = o.pose_width;
        pc.pose.sigma = o.pose_sigma;
    }

    ParamStore store;
    build_student(store, bb, o.ckpt, rc.seed);
    const MetricReport rep = freeze ? dense_probe(store, bb, train, held, pc, rc.seed)
                                    : finetune_task(store, bb, train, held, pc, rc.seed);

    const fs::path reports = fs::path(o.out) / "reports";
    fs::create_directories(reports);
    const std::string name = std::string(freeze ? "probe_" : "finetune_") + o.task + ".json";
    write_text(reports / name, rep.to_json());
    report_to_stdout(rep);
}

struct eval_opts {
    std::string pred;
    std::string gt;
    std::string out = "run";
    std::string tasks = "albedo,normal,pointmap,seg,pose";
    double pck_alpha = 0.2;
};

std::string eval_fingerprint(const eval_opts& o, int count, const std::string& task) {
    ConfigMap cm;
    cm.set("eval.count", std::to_string(count));
    cm.set("eval.gt", o.gt);
    cm.set("eval.pck_alpha", format_real(o.pck_alpha));
    cm.set("eval.pred", o.pred);
    cm.set("eval.task", task);
    return sha256_hex(cm.serialize());
}

// Prediction directories follow the dataset layout; only the files a
// requested task needs have to exist. Aggregation matches the probe: normals
// pool every angle, seg merges one confusion matrix, pose pools keypoint
// hits, albedo and pointmap average per-sample metrics.
void cmd_eval(const eval_opts& o) {
    require_dir(o.pred, "prediction");
    require_dir(o.gt, "ground truth");
    const DatasetInfo info = read_dataset_manifest(o.gt);

    std::vector<std::string> tasks;
    std::string cur;
    for (char ch : o.tasks + ",") {
        if (ch != ',') {
            cur += ch;
            continue;
        }
        if (cur.empty()) continue;
        if (cur != "albedo" && cur != "normal" && cur != "pointmap" && cur != "seg" &&
            cur != "pose")
            throw ConfigError("eval: unknown task " + cur);
        tasks.push_back(cur);
        cur.clear();
    }
    if (tasks.empty()) throw ConfigError("eval: no tasks requested");

    // every needed file is checked before any metric math runs
    for (const auto& task : tasks) {
        for (int i = 0; i < info.count; ++i) {
            require_file(raster_path(o.gt, i, "mask", "sprb"), "ground truth mask");
            if (task == "seg") {
                require_file(raster_path(o.gt, i, "seg", "sprb"), "ground truth seg");
                require_file(raster_path(o.pred, i, "seg", "sprb"), "predicted seg");
            } else if (task == "pose") {
                require_file((fs::path(o.gt) / (stem(i) + ".kp.json")).string(),
                             "ground truth keypoints");
                require_file((fs::path(o.pred) / (stem(i) + ".kp.json")).string(),
                             "predicted keypoints");
            } else {
                require_file(raster_path(o.gt, i, task, "sprf"), "ground truth " + task);
                require_file(raster_path(o.pred, i, task, "sprf"), "predicted " + task);
            }
        }
    }

    const fs::path reports = fs::path(o.out) / "reports";
    fs::create_directories(reports);
    std::string csv = "task,metric,value\n";

    for (const auto& task : tasks) {
        MetricReport rep;
        rep.task = task;
        rep.samples = info.count;
        rep.fingerprint = eval_fingerprint(o, info.count, task);

        if (task == "normal") {
            std::vector<Tensor> preds, gts, masks;
            for (int i = 0; i < info.count; ++i) {
                preds.push_back(read_raster_f32(raster_path(o.pred, i, "normal", "sprf")));
                gts.push_back(read_raster_f32(raster_path(o.gt, i, "normal", "sprf")));
                masks.push_back(read_raster_u8(raster_path(o.gt, i, "mask", "sprb")));
            }
            const NormalMetrics m =
                normal_metrics(stack_fields(preds), stack_fields(gts), stack_planes(masks));
            rep.values["mean_deg"] = m.mean_deg;
            rep.values["median_deg"] = m.median_deg;
            for (size_t i = 0; i < m.thresholds.size(); ++i) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%g", m.thresholds[i]);
                rep.values[std::string("within_") + buf] = m.within[i];
            }
        } else if (task == "seg") {
            ConfusionMatrix cmx(info.num_classes);
            for (int i = 0; i < info.count; ++i)
                cmx.add(read_raster_u8(raster_path(o.pred, i, "seg", "sprb")),
                        read_raster_u8(raster_path(o.gt, i, "seg", "sprb")));
            rep.values["miou"] = cmx.miou();
            rep.values["macc"] = cmx.macc();
        } else if (task == "pose") {
            int64_t vis = 0, hits = 0;
            for (int i = 0; i < info.count; ++i) {
                const std::vector<Keypoint> pred = load_keypoints(o.pred, i);
                const std::vector<Keypoint> gt = load_keypoints(o.gt, i);
                if (pred.size() != gt.size())
                    throw std::runtime_error("eval: keypoint count differs in sample " +
                                             stem(i));
                const Tensor fg = read_raster_u8(raster_path(o.gt, i, "mask", "sprb"));
                const double thresh = o.pck_alpha * foreground_bbox(fg).diag();
                for (size_t k = 0; k < gt.size(); ++k) {
                    if (gt[k].vis <= 0) continue;
                    vis += 1;
                    const double dx = pred[k].x - gt[k].x, dy = pred[k].y - gt[k].y;
                    if (std::sqrt(dx * dx + dy * dy) <= thresh) hits += 1;
                }
            }
            if (vis == 0) throw std::runtime_error("eval: no visible keypoints in " + o.gt);
            rep.values["pck"] = static_cast<double>(hits) / static_cast<double>(vis);
        } else if (task == "albedo") {
            AlbedoMetrics sum;
            for (int i = 0; i < info.count; ++i) {
                const AlbedoMetrics m =
                    albedo_metrics(read_raster_f32(raster_path(o.pred, i, "albedo", "sprf")),
                                   read_raster_f32(raster_path(o.gt, i, "albedo", "sprf")),
                                   read_raster_u8(raster_path(o.gt, i, "mask", "sprb")));
                sum.mae += m.mae;
                sum.rmse += m.rmse;
                sum.psnr += m.psnr;
                sum.ssim += m.ssim;
                sum.grad_l1 += m.grad_l1;
            }
            const double ns = static_cast<double>(info.count);
            rep.values["mae"] = sum.mae / ns;
            rep.values["rmse"] = sum.rmse / ns;
            rep.values["psnr"] = sum.psnr / ns;
            rep.values["ssim"] = sum.ssim / ns;
            rep.values["grad_l1"] = sum.grad_l1 / ns;
        } else {
            PointmapMetrics sum;
            sum.l2 = 0.0;
            for (int i = 0; i < info.count; ++i) {
                const PointmapMetrics m = pointmap_metrics(
                    read_raster_f32(raster_path(o.pred, i, "pointmap", "sprf")),
                    read_raster_f32(raster_path(o.gt, i, "pointmap", "sprf")),
                    read_raster_u8(raster_path(o.gt, i, "mask", "sprb")));
                sum.l2 += m.l2;
                sum.rmse += m.rmse;
                for (size_t c = 0; c < 3; ++c) sum.mae[c] += m.mae[c];
            }
            const double ns = static_cast<double>(info.count);
            rep.values["l2"] = sum.l2 / ns;
            rep.values["rmse"] = sum.rmse / ns;
            rep.values["mae_x"] = sum.mae[0] / ns;
            rep.values["mae_y"] = sum.mae[1] / ns;
            rep.values["mae_z"] = sum.mae[2] / ns;
        }

        write_text(reports / (task + ".json"), rep.to_json());
        for (const auto& [name, v] : rep.values)
            csv += task + "," + name + "," + format_real(v) + "\n";
        report_to_stdout(rep);
    }

    write_text(reports / "summary.csv", csv);
}

struct knn_opts {
    std::string config;
    std::vector<std::string> sets;
    std::string ckpt;
    std::string data;
    std::string out = "run";
    int k = 5;
};

void cmd_knn(const knn_opts& o) {
    if (o.k < 1) throw ConfigError("knn: k must be positive");
    RunConfig rc = load_run_config(o.config, o.sets);
    require_dir(o.data, "data");
    if (!o.ckpt.empty()) require_file(o.ckpt, "checkpoint");
    const DatasetInfo info = read_dataset_manifest(o.data);
    check_geometry(info, rc.model, o.data);

    ParamStore store;
    build_student(store, rc.model, o.ckpt, rc.seed);
    const std::vector<TaskSample> samples = read_dataset(o.data);
    std::vector<Tensor> embeds;
    embeds.reserve(samples.size());
    for (const auto& s : samples) embeds.push_back(pooled_embed(store, rc.model, s.image));

    const int n = static_cast<int>(embeds.size());
    nlohmann::ordered_json out;
    out["k"] = o.k;
    out["count"] = n;
    out["dim"] = rc.model.hidden_size;
    auto rows = nlohmann::ordered_json::array();
    for (int i = 0; i < n; ++i) {
        const std::vector<int> ranked =
            knn_retrieve(embeds[static_cast<size_t>(i)], embeds, std::min(o.k + 1, n));
        auto row = nlohmann::ordered_json::array();
        for (int j : ranked) {
            if (j == i || static_cast<int>(row.size()) >= o.k) continue;
            row.push_back(j);
        }
        rows.push_back(row);
    }
    out["neighbors"] = rows;

    const fs::path reports = fs::path(o.out) / "reports";
    fs::create_directories(reports);
    write_text(reports / "knn.json", out.dump(2) + "\n");
    std::cout << "knn: " << n << " embeddings, reports/knn.json written\n";
}

struct pca_opts {
    std::string config;
    std::vector<std::string> sets;
    std::string ckpt;
    std::string data;
    std::string out = "run";
    int index = 0;
};

void cmd_pca(const pca_opts& o) {
    RunConfig rc = load_run_config(o.config, o.sets);
    const BackboneConfig& bb = rc.model;
    require_dir(o.data, "data");
    if (!o.ckpt.empty()) require_file(o.ckpt, "checkpoint");
    const DatasetInfo info = read_dataset_manifest(o.data);
    check_geometry(info, bb, o.data);
    if (o.index < 0 || o.index >= info.count)
        throw ConfigError("pca: index " + std::to_string(o.index) + " outside dataset of " +
                          std::to_string(info.count));

    ParamStore store;
    build_student(store, bb, o.ckpt, rc.seed);
    const TaskSample sample = read_sample_dir(o.data, o.index);

    Tape t;
    Binding w(t, store);
    BackboneOut bo = backbone_forward(t, w, bb, t.leaf(sample.image));
    TokenGrid grid;
    grid.tokens = t.val(bo.tokens);
    grid.grid_h = bo.grid_h;
    grid.grid_w = bo.grid_w;

    // a token is foreground when any pixel of its cell is
    Mask fg;
    fg.grid_h = bo.grid_h;
    fg.grid_w = bo.grid_w;
    fg.bits.assign(static_cast<size_t>(bo.grid_h) * bo.grid_w, 0);
    const int cell_h = bb.image_height / bo.grid_h, cell_w = bb.image_width / bo.grid_w;
    for (int y = 0; y < bb.image_height; ++y)
        for (int x = 0; x < bb.image_width; ++x)
            if (sample.foreground.at2(y, x) != 0.0)
                fg.bits[static_cast<size_t>(y / cell_h) * bo.grid_w + x / cell_w] = 1;

    const PCAResult r = pca_features(grid, fg);

    fs::create_directories(fs::path(o.out) / "reports");
    const std::string raster = (fs::path(o.out) / ("pca_" + stem(o.index) + ".sprf")).string();
    write_raster_f32(raster, r.rgb);
    nlohmann::ordered_json j;
    j["grid"] = {bo.grid_h, bo.grid_w};
    j["foreground_tokens"] = r.foreground_tokens.size();
    j["explained"] = {r.explained[0], r.explained[1], r.explained[2]};
    j["raster"] = raster;
    write_text(fs::path(o.out) / "reports" / ("pca_" + stem(o.index) + ".json"),
               j.dump(2) + "\n");
    std::cout << "pca: " << r.foreground_tokens.size() << " foreground tokens, " << raster
              << " written\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sapiens-mini: desk-scale human vision pretraining and evaluation"};
    app.require_subcommand(1);

    pretrain_opts po;
    CLI::App* pre = app.add_subcommand("pretrain", "run the joint pretraining loop");
    pre->add_option("--config", po.config, "run config file")->required();
    pre->add_option("--set", po.sets, "override, key=value");
    pre->add_option("--out", po.out, "run directory");
    pre->add_option("--resume", po.resume, "checkpoint to continue from");

    synth_opts so;
    CLI::App* syn = app.add_subcommand("synth", "materialize a synthetic figure dataset");
    syn->add_option("--out", so.out, "dataset directory")->required();
    syn->add_option("--count", so.count, "number of samples");
    syn->add_option("--seed", so.seed, "generator seed");
    syn->add_option("--height", so.height, "image height");
    syn->add_option("--width", so.width, "image width");
    syn->add_option("--focal", so.focal, "focal length in pixels, 0 for the image width");

    probe_opts bo;
    CLI::App* prb = app.add_subcommand("probe", "train a decoder on a frozen backbone");
    CLI::App* fin = app.add_subcommand("finetune", "train a decoder and the backbone");
    for (CLI::App* sub : {prb, fin}) {
        sub->add_option("--config", bo.config, "run config file")->required();
        sub->add_option("--set", bo.sets, "override, key=value");
        sub->add_option("--ckpt", bo.ckpt, "checkpoint, omit for a fresh init");
        sub->add_option("--data", bo.data, "dataset directory")->required();
        sub->add_option("--out", bo.out, "run directory");
        sub->add_option("--task", bo.task, "seg | normal | albedo | pointmap | pose");
        sub->add_option("--iters", bo.iters, "training iterations");
        sub->add_option("--lr", bo.lr, "decoder learning rate");
        sub->add_option("--weight-decay", bo.weight_decay, "decoder weight decay");
        sub->add_option("--grad-clip", bo.grad_clip, "gradient norm bound");
        sub->add_option("--widths", bo.widths, "decoder stage widths, comma separated");
        sub->add_option("--classes", bo.classes, "seg classes, 0 for the manifest value");
        sub->add_option("--holdout", bo.holdout, "held-out samples, 0 scores the train split");
        sub->add_option("--pck-alpha", bo.pck_alpha, "pck threshold fraction");
        sub->add_option("--ohem", bo.ohem, "hard-example fraction for pose");
        sub->add_option("--pose-width", bo.pose_width, "pose head channel width");
        sub->add_option("--pose-sigma", bo.pose_sigma, "heatmap target sigma");
    }

    eval_opts eo;
    CLI::App* evl = app.add_subcommand("eval", "score raster predictions against ground truth");
    evl->add_option("--pred", eo.pred, "prediction directory")->required();
    evl->add_option("--gt", eo.gt, "ground truth dataset directory")->required();
    evl->add_option("--out", eo.out, "run directory");
    evl->add_option("--tasks", eo.tasks, "comma-separated task list");
    evl->add_option("--pck-alpha", eo.pck_alpha, "pck threshold fraction");

    knn_opts ko;
    CLI::App* knn = app.add_subcommand("knn", "nearest neighbors over pooled embeddings");
    knn->add_option("--config", ko.config, "run config file")->required();
    knn->add_option("--set", ko.sets, "override, key=value");
    knn->add_option("--ckpt", ko.ckpt, "checkpoint, omit for a fresh init");
    knn->add_option("--data", ko.data, "dataset directory")->required();
    knn->add_option("--out", ko.out, "run directory");
    knn->add_option("--k", ko.k, "neighbors per query");

    pca_opts ca;
    CLI::App* pca = app.add_subcommand("pca", "pca rendering of dense features");
    pca->add_option("--config", ca.config, "run config file")->required();
    pca->add_option("--set", ca.sets, "override, key=value");
    pca->add_option("--ckpt", ca.ckpt, "checkpoint, omit for a fresh init");
    pca->add_option("--data", ca.data, "dataset directory")->required();
    pca->add_option("--out", ca.out, "run directory");
    pca->add_option("--index", ca.index, "sample index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }

    try {
        if (pre->parsed()) cmd_pretrain(po);
        if (syn->parsed()) cmd_synth(so);
        if (prb->parsed()) cmd_probe(bo, true);
        if (fin->parsed()) cmd_probe(bo, false);
        if (evl->parsed()) cmd_eval(eo);
        if (knn->parsed()) cmd_knn(ko);
        if (pca->parsed()) cmd_pca(ca);
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
