#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sapiens/config.hpp"
#include "sapiens/params.hpp"
#include "sapiens/tape.hpp"

namespace sapiens {

// One labeled person crop. Maps are optional; present ones share the image dims.
struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    int vis = 0;  // 0 = not annotated / out of frame
};

struct TaskSample {
    Tensor image;  // [3,H,W]
    std::vector<Keypoint> keypoints;
    Tensor seg_map;     // [H,W], integer class ids
    Tensor pointmap;    // [3,H,W]
    Tensor normal_map;  // [3,H,W], unit on the foreground
    Tensor albedo_map;  // [3,H,W], values in [0,1]
    Tensor foreground;  // [H,W], 0/1
    double focal = 1.0;

    void validate() const;
};

// Deconvolution head for keypoint heatmaps: two stride-2 upsampling stages,
// one 3x3 refinement, then a 1x1 projection to one channel per keypoint.
struct HeatmapHeadConfig {
    int in_channels = 64;
    int out_channels = 308;
    int deconv1 = 768;
    int deconv2 = 768;
    int conv = 512;
    double sigma = 6.0;
    int stride = 4;

    void validate() const;
    static HeatmapHeadConfig from_config(const ConfigMap& c, const std::string& prefix);
    void to_config(ConfigMap& c, const std::string& prefix) const;
};

// Each stage is conv 3x3 -> pixel shuffle (r=2), doubling the spatial dims.
// A final 1x1 projection maps to the task channels.
struct PixelShuffleDecoderConfig {
    int in_channels = 64;
    int out_channels = 3;
    std::vector<int> widths = {64, 32, 16};

    int upscale() const { return 1 << static_cast<int>(widths.size()); }
    void validate() const;
    static PixelShuffleDecoderConfig from_config(const ConfigMap& c, const std::string& prefix);
    void to_config(ConfigMap& c, const std::string& prefix) const;
};

// [T,D] token rows back to a [D,gh,gw] feature grid.
Var tokens_to_grid(Tape& t, Var tokens, int gh, int gw);

void init_heatmap_head(ParamStore& store, const std::string& prefix,
                       const HeatmapHeadConfig& cfg, const Rng& root);
Var heatmap_head(Tape& t, Binding& w, const std::string& prefix, const HeatmapHeadConfig& cfg,
                 Var grid);

void init_pixelshuffle_decoder(ParamStore& store, const std::string& prefix,
                               const PixelShuffleDecoderConfig& cfg, const Rng& root);
Var pixelshuffle_decoder(Tape& t, Binding& w, const std::string& prefix,
                         const PixelShuffleDecoderConfig& cfg, Var grid);

// Positive scalar from pooled features, exponential parameterization.
void init_scale_head(ParamStore& store, const std::string& prefix, int in_dim, const Rng& root);
Var scale_head(Tape& t, Binding& w, const std::string& prefix, Var pooled);

// Task wrappers over the shared decoder. Parameter prefixes: "seg.", "pointmap.",
// "normal.", "albedo.", "pose.".
Var seg_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid);
Var normal_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid);
Var albedo_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid);

struct PointmapOut {
    Var p_tilde;  // [3,H,W]
    Var scale;    // [1], positive
};
PointmapOut pointmap_head(Tape& t, Binding& w, const PixelShuffleDecoderConfig& cfg, Var grid,
                          Var pooled);

struct HeatmapTargets {
    Tensor maps;                  // [K, out_h, out_w]
    std::vector<double> weights;  // 1 per visible keypoint, 0 otherwise
};
HeatmapTargets generate_heatmaps(const std::vector<Keypoint>& keypoints, int out_h, int out_w,
                                 double sigma, int stride);

struct PoseLossResult {
    Var value;
    std::vector<int> kept;  // channel indices that survived hard-example selection
    bool no_visible = false;
};
// Per-keypoint MSE with online hard-example mining: the hardest
// ceil(fraction * visible) channels are averaged, the rest dropped.
PoseLossResult pose_loss(Tape& t, Var pred, const Tensor& gt, const std::vector<double>& weights,
                         double ohem_fraction);

// Weighted cross-entropy plus macro soft Dice (smoothing 1.0), summed 1:1.
Var seg_loss(Tape& t, Var logits, const Tensor& gt, const std::vector<double>& class_weights);

// Mean over the foreground of the per-pixel distance between s*p_tilde and gt,
// plus the same for forward-difference gradients. Maps are zeroed outside the
// foreground before differencing so background pixels can never leak in.
Var pointmap_loss(Tape& t, Var p_tilde, Var s, const Tensor& gt, const Tensor& omega);

// (1 - cos) + distance + gradient-distance per foreground pixel, weights 1:1:1.
Var normal_loss(Tape& t, Var n_hat, const Tensor& gt, const Tensor& omega);

// distance + gradient-distance per foreground pixel + distance of the
// foreground RGB means, weights 1:1:1.
Var albedo_loss(Tape& t, Var a_hat, const Tensor& gt, const Tensor& omega);

}  // namespace sapiens
