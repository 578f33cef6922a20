#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sapiens/backbone.hpp"
#include "sapiens/heads.hpp"
#include "sapiens/masking.hpp"
#include "sapiens/token_grid.hpp"

namespace sapiens {

// One evaluated task: metric values keyed by name plus the hash of the config
// that produced them.
struct MetricReport {
    std::string task;
    std::map<std::string, double> values;
    int64_t samples = 0;
    std::string fingerprint;

    void validate() const;
    std::string to_json() const;
    static MetricReport from_json(const std::string& text);
};

// gt-major cells: cells[gt * num_classes + pred]. Shards accumulated on
// different sample subsets merge by addition.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<int64_t> cells;

    explicit ConfusionMatrix(int classes);
    void add(const Tensor& pred, const Tensor& gt);
    void merge(const ConfusionMatrix& other);
    int64_t total() const;

    // percentages, averaged over the classes present in gt
    double miou() const;
    double macc() const;
};

std::pair<double, double> miou_macc(const std::vector<Tensor>& preds,
                                    const std::vector<Tensor>& gts, int num_classes);

// Channel argmax of a [C,H,W] score map, ties to the lower class id.
Tensor argmax_channels(const Tensor& scores);

struct NormalMetrics {
    double mean_deg = 0.0;
    double median_deg = 0.0;
    std::vector<double> thresholds;  // degrees
    std::vector<double> within;      // percentages, aligned with thresholds
};
NormalMetrics normal_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega,
                             std::vector<double> thresholds = {5.0, 11.25, 30.0});

struct PointmapMetrics {
    double alpha = 1.0;  // least-squares scale applied to pred before the metrics
    double l2 = 0.0;     // mean per-pixel distance
    double rmse = 0.0;   // over all coordinates
    std::array<double, 3> mae{};
};
PointmapMetrics pointmap_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega);

struct AlbedoMetrics {
    double mae = 0.0;
    double rmse = 0.0;
    double psnr = 0.0;  // dB against peak 1.0, capped at 100
    double ssim = 0.0;  // 11x11 Gaussian window, sigma 1.5, truncated and
                        // renormalized at image borders
    double grad_l1 = 0.0;
};
AlbedoMetrics albedo_metrics(const Tensor& pred, const Tensor& gt, const Tensor& omega);

struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;
    double diag() const;
};

// Tight box around the nonzero pixels of a [H,W] mask.
BBox foreground_bbox(const Tensor& omega);

// Per-channel argmax plus a quarter-pixel shift toward the larger neighbor,
// mapped back to image coordinates via stride.
std::vector<Keypoint> decode_heatmaps(const Tensor& maps, int stride);

// Fraction of gt-visible keypoints within alpha * bbox diagonal.
double pck(const std::vector<Keypoint>& pred, const std::vector<Keypoint>& gt, const BBox& bbox,
           double alpha);

// Cosine-similarity top-k gallery indices, descending, ties to the lower
// index.
std::vector<int> knn_retrieve(const Tensor& query, const std::vector<Tensor>& gallery, int k);

// PCA rendering of a dense token grid. The mask bits select the foreground
// tokens the fit runs on; background pixels come out exactly black. Scores
// are the unscaled projections of the foreground rows, in grid order.
struct PCAResult {
    Tensor rgb;     // [3,gh,gw], values in [0,1]
    Tensor mean;    // [D]
    Tensor basis;   // [3,D], leading component first
    Tensor scores;  // [F,3]
    std::vector<int> foreground_tokens;
    std::array<double, 3> explained{};  // variance fraction per component
};
PCAResult pca_features(const TokenGrid& grid, const Mask& foreground);

struct ProbeConfig {
    std::string task = "normal";  // seg | normal | albedo | pointmap | pose
    int64_t iters = 100;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double grad_clip = 5.0;
    int num_classes = 4;                     // seg
    std::vector<int> widths = {32, 16, 16};  // pixel-shuffle decoder stages
    HeatmapHeadConfig pose;                  // pose; stride must match the grid
    double pck_alpha = 0.2;
    double ohem_fraction = 0.7;

    void validate() const;
};

// Frozen-backbone probing: a decoder under "probe." is initialized from the
// seed alone, trained on the training split, and scored on the held-out
// split. Sample order depends only on the seed. The non-probe weights are
// hashed before and after; any drift is a hard failure, not a metric.
MetricReport dense_probe(ParamStore& store, const BackboneConfig& bb,
                         const std::vector<TaskSample>& train,
                         const std::vector<TaskSample>& held_out, const ProbeConfig& pc,
                         uint64_t seed, std::vector<int>* sample_order = nullptr);

// Same protocol with nothing frozen: the head still lives under "probe." but
// every parameter takes optimizer steps.
MetricReport finetune_task(ParamStore& store, const BackboneConfig& bb,
                           const std::vector<TaskSample>& train,
                           const std::vector<TaskSample>& held_out, const ProbeConfig& pc,
                           uint64_t seed);

}  // namespace sapiens
