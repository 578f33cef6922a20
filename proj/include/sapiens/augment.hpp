#pragma once

#include <array>
#include <string>
#include <vector>

#include "sapiens/config.hpp"
#include "sapiens/rng.hpp"
#include "sapiens/tensor.hpp"

namespace sapiens {

enum class ViewKind { global, local };

struct ViewSpec {
    int num_global = 2;
    int num_local = 4;
    double global_scale_min = 0.5;
    double global_scale_max = 1.0;
    double local_scale_min = 0.2;
    double local_scale_max = 0.7;
    int global_height = 64;
    int global_width = 48;
    int local_height = 32;
    int local_width = 32;
    double flip_prob = 0.5;
    // photometric draws happen on local views only
    double color_jitter_prob = 0.8;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double solarize_prob = 0.2;
    std::array<double, 3> mean = {0.485, 0.456, 0.406};
    std::array<double, 3> stdev = {0.229, 0.224, 0.225};

    void validate() const;
    static ViewSpec from_config(const ConfigMap& c, const std::string& prefix = "views");
    void to_config(ConfigMap& c, const std::string& prefix = "views") const;
};

struct CropBox {
    int y = 0;
    int x = 0;
    int h = 0;
    int w = 0;
};

// Everything needed to replay the view deterministically from the raw image.
struct AugRecord {
    int src_h = 0;  // dims the crop was taken from, after any fallback resize
    int src_w = 0;
    bool fallback_resize = false;
    CropBox crop;
    bool flip = false;
    bool color_jitter = false;
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    bool grayscale = false;
    bool blur = false;
    double blur_sigma = 0.0;
    bool solarize = false;
    double solarize_threshold = 0.5;
};

struct View {
    Tensor image;  // [3,H,W], normalized
    ViewKind kind = ViewKind::global;
    AugRecord rec;
};

struct ViewSet {
    std::vector<View> views;  // globals first, then locals
    int num_global = 0;
};

// image ops, [3,H,W] in [0,1] unless noted
Tensor bilinear_resize(const Tensor& img, int out_h, int out_w);
Tensor crop_image(const Tensor& img, const CropBox& box);
Tensor hflip(const Tensor& img);
Tensor luminance(const Tensor& img);  // [H,W]
Tensor to_grayscale(const Tensor& img);
Tensor color_jitter(const Tensor& img, double brightness, double contrast, double saturation);
Tensor gaussian_blur(const Tensor& img, double sigma);
Tensor solarize(const Tensor& img, double threshold);
Tensor clamp01(const Tensor& img);
Tensor normalize_image(const Tensor& img, const std::array<double, 3>& mean,
                       const std::array<double, 3>& stdev);
Tensor denormalize_image(const Tensor& img, const std::array<double, 3>& mean,
                         const std::array<double, 3>& stdev);

ViewSet make_views(const Tensor& image, const ViewSpec& spec, Rng& rng);

// Rebuilds a view's pixels from the raw image and its record. Photometric
// steps replay too, so this reproduces any view exactly.
Tensor replay_view(const Tensor& image, const AugRecord& rec, int out_h, int out_w,
                   const ViewSpec& spec);

// one JSON object per view, one per line
std::string viewset_jsonl(const ViewSet& vs);

}  // namespace sapiens
