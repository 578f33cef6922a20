#include "sapiens/augment.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace sapiens {

namespace {

std::array<double, 3> parse_triple(const std::string& s, const char* what) {
    std::array<double, 3> out{};
    std::stringstream ss(s);
    std::string part;
    int i = 0;
    while (std::getline(ss, part, ',')) {
        check(i < 3, std::string(what) + ": expected three comma-separated reals");
        try {
            size_t pos = 0;
            out[static_cast<size_t>(i)] = std::stod(part, &pos);
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": bad real: " + part);
        }
        ++i;
    }
    check(i == 3, std::string(what) + ": expected three comma-separated reals");
    return out;
}

std::string triple_str(const std::array<double, 3>& a) {
    return format_real(a[0]) + "," + format_real(a[1]) + "," + format_real(a[2]);
}

}  // namespace

void ViewSpec::validate() const {
    check(num_global >= 2, "views: need at least two global views");
    check(num_local >= 0, "views: negative local count");
    for (auto [lo, hi] : {std::pair{global_scale_min, global_scale_max},
                          std::pair{local_scale_min, local_scale_max}}) {
        check(lo > 0.0 && lo <= hi && hi <= 1.0, "views: scale interval must sit inside (0,1]");
    }
    check(global_height > 0 && global_width > 0 && local_height > 0 && local_width > 0,
          "views: view dims must be positive");
    for (double p : {flip_prob, color_jitter_prob, grayscale_prob, blur_prob, solarize_prob}) {
        check(p >= 0.0 && p <= 1.0, "views: probabilities must sit in [0,1]");
    }
    for (double s : stdev) check(s > 0.0, "views: stdev must be positive");
}

ViewSpec ViewSpec::from_config(const ConfigMap& c, const std::string& prefix) {
    ViewSpec v;
    const auto key = [&](const char* k) { return prefix + "." + k; };
    v.num_global = static_cast<int>(c.get_int(key("num_global"), v.num_global));
    v.num_local = static_cast<int>(c.get_int(key("num_local"), v.num_local));
    v.global_scale_min = c.get_real(key("global_scale_min"), v.global_scale_min);
    v.global_scale_max = c.get_real(key("global_scale_max"), v.global_scale_max);
    v.local_scale_min = c.get_real(key("local_scale_min"), v.local_scale_min);
    v.local_scale_max = c.get_real(key("local_scale_max"), v.local_scale_max);
    v.global_height = static_cast<int>(c.get_int(key("global_height"), v.global_height));
    v.global_width = static_cast<int>(c.get_int(key("global_width"), v.global_width));
    v.local_height = static_cast<int>(c.get_int(key("local_height"), v.local_height));
    v.local_width = static_cast<int>(c.get_int(key("local_width"), v.local_width));
    v.flip_prob = c.get_real(key("flip_prob"), v.flip_prob);
    v.color_jitter_prob = c.get_real(key("color_jitter_prob"), v.color_jitter_prob);
    v.grayscale_prob = c.get_real(key("grayscale_prob"), v.grayscale_prob);
    v.blur_prob = c.get_real(key("blur_prob"), v.blur_prob);
    v.solarize_prob = c.get_real(key("solarize_prob"), v.solarize_prob);
    v.mean = parse_triple(c.get_str(key("mean"), triple_str(v.mean)), "views.mean");
    v.stdev = parse_triple(c.get_str(key("stdev"), triple_str(v.stdev)), "views.stdev");
    v.validate();
    return v;
}

void ViewSpec::to_config(ConfigMap& c, const std::string& prefix) const {
    const auto key = [&](const char* k) { return prefix + "." + k; };
    c.set(key("num_global"), std::to_string(num_global));
    c.set(key("num_local"), std::to_string(num_local));
    const auto real = [&](double v) { return format_real(v); };
    c.set(key("global_scale_min"), real(global_scale_min));
    c.set(key("global_scale_max"), real(global_scale_max));
    c.set(key("local_scale_min"), real(local_scale_min));
    c.set(key("local_scale_max"), real(local_scale_max));
    c.set(key("global_height"), std::to_string(global_height));
    c.set(key("global_width"), std::to_string(global_width));
    c.set(key("local_height"), std::to_string(local_height));
    c.set(key("local_width"), std::to_string(local_width));
    c.set(key("flip_prob"), real(flip_prob));
    c.set(key("color_jitter_prob"), real(color_jitter_prob));
    c.set(key("grayscale_prob"), real(grayscale_prob));
    c.set(key("blur_prob"), real(blur_prob));
    c.set(key("solarize_prob"), real(solarize_prob));
    c.set(key("mean"), triple_str(mean));
    c.set(key("stdev"), triple_str(stdev));
}

Tensor bilinear_resize(const Tensor& img, int out_h, int out_w) {
    check(img.ndim() == 3, "bilinear_resize: [C,H,W] required");
    check(out_h > 0 && out_w > 0, "bilinear_resize: output dims must be positive");
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    if (out_h == H && out_w == W) return img;
    Tensor out({C, out_h, out_w});
    const double sy = static_cast<double>(H) / out_h;
    const double sx = static_cast<double>(W) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, H - 1);
        const double ty = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, W - 1);
            const double tx = fx - x0;
            for (int c = 0; c < C; ++c) {
                const double top = img.at3(c, y0, x0) * (1 - tx) + img.at3(c, y0, x1) * tx;
                const double bot = img.at3(c, y1, x0) * (1 - tx) + img.at3(c, y1, x1) * tx;
                out.at3(c, y, x) = top * (1 - ty) + bot * ty;
            }
        }
    }
    return out;
}

Tensor crop_image(const Tensor& img, const CropBox& box) {
    check(img.ndim() == 3, "crop_image: [C,H,W] required");
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    check(box.h > 0 && box.w > 0 && box.y >= 0 && box.x >= 0 && box.y + box.h <= H &&
              box.x + box.w <= W,
          "crop_image: box outside image");
    Tensor out({C, box.h, box.w});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < box.h; ++y) {
            for (int x = 0; x < box.w; ++x) out.at3(c, y, x) = img.at3(c, box.y + y, box.x + x);
        }
    }
    return out;
}

Tensor hflip(const Tensor& img) {
    check(img.ndim() == 3, "hflip: [C,H,W] required");
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) out.at3(c, y, x) = img.at3(c, y, W - 1 - x);
        }
    }
    return out;
}

Tensor luminance(const Tensor& img) {
    check(img.ndim() == 3 && img.dim(0) == 3, "luminance: [3,H,W] required");
    const int H = img.dim(1), W = img.dim(2);
    Tensor out({H, W});
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            out.at2(y, x) =
                0.299 * img.at3(0, y, x) + 0.587 * img.at3(1, y, x) + 0.114 * img.at3(2, y, x);
        }
    }
    return out;
}

Tensor to_grayscale(const Tensor& img) {
    Tensor g = luminance(img);
    Tensor out({3, img.dim(1), img.dim(2)});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.dim(1); ++y) {
            for (int x = 0; x < img.dim(2); ++x) out.at3(c, y, x) = g.at2(y, x);
        }
    }
    return out;
}

Tensor color_jitter(const Tensor& img, double brightness, double contrast, double saturation) {
    Tensor v = img;
    for (auto& e : v.data) e *= brightness;
    Tensor lum = luminance(v);
    double m = 0.0;
    for (double e : lum.data) m += e;
    m /= static_cast<double>(lum.numel());
    for (auto& e : v.data) e = (e - m) * contrast + m;
    lum = luminance(v);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < v.dim(1); ++y) {
            for (int x = 0; x < v.dim(2); ++x) {
                const double g = lum.at2(y, x);
                v.at3(c, y, x) = g + (v.at3(c, y, x) - g) * saturation;
            }
        }
    }
    return v;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
    check(sigma > 0.0, "gaussian_blur: sigma must be positive");
    const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const int rad = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * rad + 1));
    double z = 0.0;
    for (int i = -rad; i <= rad; ++i) {
        k[static_cast<size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
        z += k[static_cast<size_t>(i + rad)];
    }
    for (auto& e : k) e /= z;
    Tensor mid({C, H, W});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -rad; i <= rad; ++i) {
                    const int xx = std::min(std::max(x + i, 0), W - 1);
                    s += k[static_cast<size_t>(i + rad)] * img.at3(c, y, xx);
                }
                mid.at3(c, y, x) = s;
            }
        }
    }
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double s = 0.0;
                for (int i = -rad; i <= rad; ++i) {
                    const int yy = std::min(std::max(y + i, 0), H - 1);
                    s += k[static_cast<size_t>(i + rad)] * mid.at3(c, yy, x);
                }
                out.at3(c, y, x) = s;
            }
        }
    }
    return out;
}

Tensor solarize(const Tensor& img, double threshold) {
    Tensor out = img;
    for (auto& e : out.data) {
        if (e >= threshold) e = 1.0 - e;
    }
    return out;
}

Tensor clamp01(const Tensor& img) {
    Tensor out = img;
    for (auto& e : out.data) e = std::min(std::max(e, 0.0), 1.0);
    return out;
}

Tensor normalize_image(const Tensor& img, const std::array<double, 3>& mean,
                       const std::array<double, 3>& stdev) {
    check(img.ndim() == 3 && img.dim(0) == 3, "normalize_image: [3,H,W] required");
    Tensor out = img;
    for (int c = 0; c < 3; ++c) {
        const auto ci = static_cast<size_t>(c);
        for (int y = 0; y < img.dim(1); ++y) {
            for (int x = 0; x < img.dim(2); ++x) {
                out.at3(c, y, x) = (img.at3(c, y, x) - mean[ci]) / stdev[ci];
            }
        }
    }
    return out;
}

Tensor denormalize_image(const Tensor& img, const std::array<double, 3>& mean,
                         const std::array<double, 3>& stdev) {
    check(img.ndim() == 3 && img.dim(0) == 3, "denormalize_image: [3,H,W] required");
    Tensor out = img;
    for (int c = 0; c < 3; ++c) {
        const auto ci = static_cast<size_t>(c);
        for (int y = 0; y < img.dim(1); ++y) {
            for (int x = 0; x < img.dim(2); ++x) {
                out.at3(c, y, x) = img.at3(c, y, x) * stdev[ci] + mean[ci];
            }
        }
    }
    return out;
}

namespace {

// Crop geometry at the target aspect with the realized area fraction held
// inside [lo, hi] relative to the (possibly fallback-resized) source.
void sample_crop(int H, int W, double lo, double hi, double aspect, Rng& rng, AugRecord& rec) {
    const double r = rng.uniform(lo, hi);
    const double S = static_cast<double>(H) * W;
    const double ideal_h = std::sqrt(r * S * aspect);
    const double ideal_w = ideal_h / aspect;
    rec.src_h = H;
    rec.src_w = W;
    rec.fallback_resize = false;
    if (ideal_h > H || ideal_w > W) {
        const double scale = std::max(ideal_h / H, ideal_w / W);
        rec.src_h = static_cast<int>(std::ceil(H * scale));
        rec.src_w = static_cast<int>(std::ceil(W * scale));
        rec.fallback_resize = true;
    }
    const double S2 = static_cast<double>(rec.src_h) * rec.src_w;
    // the absolute crop area is kept; under fallback the realized fraction
    // of the enlarged source drops below r, the loops below pull it back in
    const double area = r * S;
    int ch = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    ch = std::min(std::max(ch, 1), rec.src_h);
    int cw = static_cast<int>(std::lround(area / ch));
    cw = std::min(std::max(cw, 1), rec.src_w);
    // rounding can push the realized fraction past a bound, walk it back in
    auto realized = [&]() { return ch * cw / S2; };
    while (realized() > hi && (ch > 1 || cw > 1)) {
        if (cw >= ch && cw > 1) {
            --cw;
        } else {
            --ch;
        }
    }
    while (realized() < lo && (ch < rec.src_h || cw < rec.src_w)) {
        if ((cw <= ch || ch == rec.src_h) && cw < rec.src_w) {
            ++cw;
        } else {
            ++ch;
        }
    }
    rec.crop.h = ch;
    rec.crop.w = cw;
    rec.crop.y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(rec.src_h - ch + 1)));
    rec.crop.x = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(rec.src_w - cw + 1)));
}

}  // namespace

Tensor replay_view(const Tensor& image, const AugRecord& rec, int out_h, int out_w,
                   const ViewSpec& spec) {
    Tensor src = rec.fallback_resize ? bilinear_resize(image, rec.src_h, rec.src_w) : image;
    Tensor v = bilinear_resize(crop_image(src, rec.crop), out_h, out_w);
    if (rec.flip) v = hflip(v);
    const bool photometric = rec.color_jitter || rec.grayscale || rec.blur || rec.solarize;
    if (rec.color_jitter) v = color_jitter(v, rec.brightness, rec.contrast, rec.saturation);
    if (rec.grayscale) v = to_grayscale(v);
    if (rec.blur) v = gaussian_blur(v, rec.blur_sigma);
    if (rec.solarize) v = solarize(v, rec.solarize_threshold);
    if (photometric) v = clamp01(v);
    return normalize_image(v, spec.mean, spec.stdev);
}

ViewSet make_views(const Tensor& image, const ViewSpec& spec, Rng& rng) {
    spec.validate();
    check(image.ndim() == 3 && image.dim(0) == 3, "make_views: [3,H,W] required");
    const int H = image.dim(1), W = image.dim(2);
    ViewSet out;
    out.num_global = spec.num_global;
    const int total = spec.num_global + spec.num_local;
    out.views.reserve(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) {
        const bool global = i < spec.num_global;
        const int th = global ? spec.global_height : spec.local_height;
        const int tw = global ? spec.global_width : spec.local_width;
        const double lo = global ? spec.global_scale_min : spec.local_scale_min;
        const double hi = global ? spec.global_scale_max : spec.local_scale_max;
        View view;
        view.kind = global ? ViewKind::global : ViewKind::local;
        sample_crop(H, W, lo, hi, static_cast<double>(th) / tw, rng, view.rec);
        view.rec.flip = rng.bernoulli(spec.flip_prob);
        if (!global) {
            view.rec.color_jitter = rng.bernoulli(spec.color_jitter_prob);
            if (view.rec.color_jitter) {
                view.rec.brightness = rng.uniform(0.6, 1.4);
                view.rec.contrast = rng.uniform(0.6, 1.4);
                view.rec.saturation = rng.uniform(0.6, 1.4);
            }
            view.rec.grayscale = rng.bernoulli(spec.grayscale_prob);
            view.rec.blur = rng.bernoulli(spec.blur_prob);
            if (view.rec.blur) view.rec.blur_sigma = rng.uniform(0.1, 2.0);
            view.rec.solarize = rng.bernoulli(spec.solarize_prob);
        }
        view.image = replay_view(image, view.rec, th, tw, spec);
        out.views.push_back(std::move(view));
    }
    return out;
}

std::string viewset_jsonl(const ViewSet& vs) {
    std::ostringstream out;
    for (const View& v : vs.views) {
        nlohmann::json j;
        j["kind"] = v.kind == ViewKind::global ? "global" : "local";
        j["src_h"] = v.rec.src_h;
        j["src_w"] = v.rec.src_w;
        j["fallback_resize"] = v.rec.fallback_resize;
        j["crop"] = {{"y", v.rec.crop.y}, {"x", v.rec.crop.x}, {"h", v.rec.crop.h},
                     {"w", v.rec.crop.w}};
        j["flip"] = v.rec.flip;
        j["color_jitter"] = v.rec.color_jitter;
        if (v.rec.color_jitter) {
            j["brightness"] = v.rec.brightness;
            j["contrast"] = v.rec.contrast;
            j["saturation"] = v.rec.saturation;
        }
        j["grayscale"] = v.rec.grayscale;
        j["blur"] = v.rec.blur;
        if (v.rec.blur) j["blur_sigma"] = v.rec.blur_sigma;
        j["solarize"] = v.rec.solarize;
        if (v.rec.solarize) j["solarize_threshold"] = v.rec.solarize_threshold;
        out << j.dump() << "\n";
    }
    return out.str();
}

}  // namespace sapiens
