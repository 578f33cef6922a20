#include "sapiens/synth.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sapiens/evaluation.hpp"

namespace sapiens {

namespace {

double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

Vec3 unit3(const Vec3& a) {
    const double n = norm3(a);
    check(n > 0.0, "synth: zero-length direction");
    return {a[0] / n, a[1] / n, a[2] / n};
}

constexpr double kTMin = 1e-9;

// Nearest positive ray parameter for a camera-origin ray against one
// primitive, or a negative value on miss. Solved in the space where the
// ellipsoid is the unit sphere.
double hit_param(const ScenePrimitive& pr, const Vec3& d) {
    Vec3 o, s;
    for (int i = 0; i < 3; ++i) {
        o[i] = -pr.center[i] / pr.radii[i];
        s[i] = d[i] / pr.radii[i];
    }
    const double a = dot3(s, s);
    const double b = 2.0 * dot3(o, s);
    const double c = dot3(o, o) - 1.0;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) return -1.0;
    const double sq = std::sqrt(disc);
    const double t0 = (-b - sq) / (2.0 * a);
    if (t0 > kTMin) return t0;
    const double t1 = (-b + sq) / (2.0 * a);
    if (t1 > kTMin) return t1;
    return -1.0;
}

}  // namespace

int SyntheticSceneSpec::landmark_count() const {
    int n = 0;
    for (const auto& p : primitives) n += static_cast<int>(p.landmarks.size());
    return n;
}

void SyntheticSceneSpec::validate() const {
    check(!primitives.empty(), "scene spec: empty scene");
    check(focal > 0.0, "scene spec: focal must be positive");
    check(height > 0 && width > 0, "scene spec: image dims must be positive");
    check(norm3(light) > 0.0, "scene spec: light direction must be nonzero");
    for (const auto& p : primitives) {
        for (double r : p.radii) check(r > 0.0, "scene spec: radii must be positive");
        for (double c : p.color) check(c >= 0.0 && c <= 1.0, "scene spec: colors live in [0,1]");
        check(p.part_class >= 1 && p.part_class <= 255, "scene spec: part class out of range");
        check(p.center[2] - p.radii[2] > 0.0,
              "scene spec: primitives must sit in front of the camera");
    }
}

SyntheticSceneSpec make_figure_spec(int height, int width, double focal, Rng& rng) {
    check(height > 0 && width > 0, "figure spec: image dims must be positive");
    check(focal > 0.0, "figure spec: focal must be positive");
    SyntheticSceneSpec spec;
    spec.height = height;
    spec.width = width;
    spec.focal = focal;
    spec.light = unit3({0.8 * (rng.uniform() - 0.5), 0.8 * (rng.uniform() - 0.5),
                        -(0.6 + 0.4 * rng.uniform())});

    const double z0 = 3.2 + 1.2 * rng.uniform();
    // half extent of the frame at depth z0, used to keep the figure in view
    const double span = z0 * 0.5 * width / focal;
    const Vec3 base{(rng.uniform() - 0.5) * 0.5 * span, (rng.uniform() - 0.5) * 0.2 * span, z0};
    const double scale = 0.8 + 0.4 * rng.uniform();

    auto jit = [&](double a) { return a * (0.9 + 0.2 * rng.uniform()); };
    auto tint = [&](Vec3 c) {
        for (double& v : c) v = std::min(0.95, std::max(0.05, v + 0.16 * (rng.uniform() - 0.5)));
        return c;
    };
    auto add = [&](Vec3 off, Vec3 radii, Vec3 color, int cls, std::vector<Vec3> lms) {
        ScenePrimitive p;
        for (int i = 0; i < 3; ++i) p.center[i] = base[i] + scale * off[i];
        for (int i = 0; i < 3; ++i) p.radii[i] = scale * radii[i];
        p.color = tint(color);
        p.part_class = cls;
        p.landmarks = std::move(lms);
        spec.primitives.push_back(std::move(p));
    };
    auto limb_z = [&] { return 0.15 * (rng.uniform() - 0.5); };

    add({0.0, -1.02, 0.0}, {jit(0.30), jit(0.30), jit(0.30)}, {0.85, 0.66, 0.50}, 1,
        {{0.0, 0.0, 0.0}});
    add({0.0, -0.28, 0.0}, {jit(0.38), jit(0.50), jit(0.26)}, {0.20, 0.36, 0.74}, 2,
        {{0.0, 0.0, 0.0}});
    const std::vector<Vec3> ends{{0.0, -1.0, 0.0}, {0.0, 1.0, 0.0}};
    add({-0.56, -0.30, limb_z()}, {jit(0.13), jit(0.42), jit(0.13)}, {0.70, 0.26, 0.20}, 3, ends);
    add({0.56, -0.30, limb_z()}, {jit(0.13), jit(0.42), jit(0.13)}, {0.70, 0.26, 0.20}, 3, ends);
    add({-0.21, 0.72, limb_z()}, {jit(0.15), jit(0.55), jit(0.15)}, {0.25, 0.55, 0.30}, 4, ends);
    add({0.21, 0.72, limb_z()}, {jit(0.15), jit(0.55), jit(0.15)}, {0.25, 0.55, 0.30}, 4, ends);
    spec.validate();
    return spec;
}

TaskSample synth_generate(const SyntheticSceneSpec& spec, Rng& rng) {
    spec.validate();
    (void)rng;
    const int h = spec.height, w = spec.width;
    TaskSample s;
    s.image = Tensor({3, h, w});
    s.albedo_map = Tensor({3, h, w});
    s.normal_map = Tensor({3, h, w});
    s.pointmap = Tensor({3, h, w});
    s.seg_map = Tensor({h, w});
    s.foreground = Tensor({h, w});
    s.focal = spec.focal;
    const Vec3 lhat = unit3(spec.light);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Vec3 d = unit3({(x + 0.5 - 0.5 * w) / spec.focal,
                                  (y + 0.5 - 0.5 * h) / spec.focal, 1.0});
            double best = -1.0;
            int prim = -1;
            for (int k = 0; k < static_cast<int>(spec.primitives.size()); ++k) {
                const double t = hit_param(spec.primitives[k], d);
                if (t > 0.0 && (prim < 0 || t < best)) {
                    best = t;
                    prim = k;
                }
            }
            if (prim < 0) continue;
            const ScenePrimitive& pr = spec.primitives[prim];
            const Vec3 p{best * d[0], best * d[1], best * d[2]};
            Vec3 n;
            for (int i = 0; i < 3; ++i)
                n[i] = (p[i] - pr.center[i]) / (pr.radii[i] * pr.radii[i]);
            n = unit3(n);
            const double shade = std::max(0.0, dot3(n, lhat));
            for (int c = 0; c < 3; ++c) {
                s.image.at3(c, y, x) = pr.color[c] * shade;
                s.albedo_map.at3(c, y, x) = pr.color[c];
                s.normal_map.at3(c, y, x) = n[c];
                s.pointmap.at3(c, y, x) = p[c];
            }
            s.seg_map.at2(y, x) = pr.part_class;
            s.foreground.at2(y, x) = 1.0;
        }
    }

    for (const auto& pr : spec.primitives) {
        for (const auto& off : pr.landmarks) {
            Vec3 pw;
            for (int i = 0; i < 3; ++i) pw[i] = pr.center[i] + off[i] * pr.radii[i];
            Keypoint kp;
            if (pw[2] > kTMin) {
                kp.x = spec.focal * pw[0] / pw[2] + 0.5 * w - 0.5;
                kp.y = spec.focal * pw[1] / pw[2] + 0.5 * h - 0.5;
                kp.vis = (kp.x >= 0.0 && kp.x <= w - 1.0 && kp.y >= 0.0 && kp.y <= h - 1.0) ? 1 : 0;
            }
            s.keypoints.push_back(kp);
        }
    }
    s.validate();
    return s;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& in, size_t pos) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "raster: cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    check(f.good(), "raster: short write to " + path);
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "raster: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// rank 2 or 3 only; single channel round-trips as [H,W]
void raster_dims(const Tensor& t, int* c, int* h, int* w) {
    check(t.ndim() == 2 || t.ndim() == 3, "raster: rank must be 2 or 3");
    *c = t.ndim() == 3 ? t.dim(0) : 1;
    *h = t.ndim() == 3 ? t.dim(1) : t.dim(0);
    *w = t.ndim() == 3 ? t.dim(2) : t.dim(1);
}

std::string raster_header(const char* magic, const std::string& path, const std::string& bytes,
                          int* c, int* h, int* w) {
    check(bytes.size() >= 16, "raster: truncated header in " + path);
    check(bytes.compare(0, 4, magic) == 0, "raster: bad magic in " + path);
    *c = static_cast<int>(get_u32(bytes, 4));
    *h = static_cast<int>(get_u32(bytes, 8));
    *w = static_cast<int>(get_u32(bytes, 12));
    check(*c > 0 && *h > 0 && *w > 0, "raster: bad dims in " + path);
    return bytes;
}

Tensor raster_alloc(int c, int h, int w) {
    return c == 1 ? Tensor({h, w}) : Tensor({c, h, w});
}

}  // namespace

void write_raster_f32(const std::string& path, const Tensor& t) {
    int c, h, w;
    raster_dims(t, &c, &h, &w);
    std::string out;
    out.reserve(16 + 4 * static_cast<size_t>(t.numel()));
    out += "SPRF";
    put_u32(out, static_cast<uint32_t>(c));
    put_u32(out, static_cast<uint32_t>(h));
    put_u32(out, static_cast<uint32_t>(w));
    for (double v : t.data) {
        const float f = static_cast<float>(v);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
    write_file_bytes(path, out);
}

Tensor read_raster_f32(const std::string& path) {
    int c, h, w;
    const std::string bytes = raster_header("SPRF", path, read_file_bytes(path), &c, &h, &w);
    Tensor t = raster_alloc(c, h, w);
    check(bytes.size() == 16 + 4 * static_cast<size_t>(t.numel()),
          "raster: payload size mismatch in " + path);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const uint32_t bits = get_u32(bytes, 16 + 4 * static_cast<size_t>(i));
        float f;
        std::memcpy(&f, &bits, 4);
        t.data[static_cast<size_t>(i)] = static_cast<double>(f);
    }
    return t;
}

void write_raster_u8(const std::string& path, const Tensor& t) {
    int c, h, w;
    raster_dims(t, &c, &h, &w);
    std::string out;
    out.reserve(16 + static_cast<size_t>(t.numel()));
    out += "SPRB";
    put_u32(out, static_cast<uint32_t>(c));
    put_u32(out, static_cast<uint32_t>(h));
    put_u32(out, static_cast<uint32_t>(w));
    for (double v : t.data) {
        check(v == std::floor(v) && v >= 0.0 && v <= 255.0,
              "raster: byte payload needs integers in [0,255]");
        out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
    write_file_bytes(path, out);
}

Tensor read_raster_u8(const std::string& path) {
    int c, h, w;
    const std::string bytes = raster_header("SPRB", path, read_file_bytes(path), &c, &h, &w);
    Tensor t = raster_alloc(c, h, w);
    check(bytes.size() == 16 + static_cast<size_t>(t.numel()),
          "raster: payload size mismatch in " + path);
    for (int64_t i = 0; i < t.numel(); ++i)
        t.data[static_cast<size_t>(i)] =
            static_cast<double>(static_cast<unsigned char>(bytes[16 + static_cast<size_t>(i)]));
    return t;
}

namespace {

std::string sample_stem(const std::string& dir, int index) {
    check(index >= 0 && index <= 9999, "dataset: sample index out of range");
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", index);
    return (std::filesystem::path(dir) / buf).string();
}

}  // namespace

void write_sample_dir(const std::string& dir, int index, const TaskSample& s) {
    s.validate();
    std::filesystem::create_directories(dir);
    const std::string stem = sample_stem(dir, index);
    write_raster_f32(stem + ".image.sprf", s.image);
    write_raster_f32(stem + ".albedo.sprf", s.albedo_map);
    write_raster_f32(stem + ".normal.sprf", s.normal_map);
    write_raster_f32(stem + ".pointmap.sprf", s.pointmap);
    write_raster_u8(stem + ".seg.sprb", s.seg_map);
    write_raster_u8(stem + ".mask.sprb", s.foreground);

    nlohmann::ordered_json j;
    j["focal"] = s.focal;
    bool any_fg = false;
    for (double v : s.foreground.data) any_fg = any_fg || v != 0.0;
    if (any_fg) {
        const BBox bb = foreground_bbox(s.foreground);
        j["bbox"] = {bb.x, bb.y, bb.w, bb.h};
    } else {
        j["bbox"] = {0, 0, 0, 0};
    }
    auto arr = nlohmann::ordered_json::array();
    for (const auto& kp : s.keypoints) arr.push_back({kp.x, kp.y, kp.vis});
    j["keypoints"] = arr;
    std::ofstream f(stem + ".kp.json", std::ios::trunc);
    check(f.good(), "dataset: cannot write " + stem + ".kp.json");
    f << j.dump(2) << "\n";
}

TaskSample read_sample_dir(const std::string& dir, int index) {
    const std::string stem = sample_stem(dir, index);
    TaskSample s;
    s.image = read_raster_f32(stem + ".image.sprf");
    s.albedo_map = read_raster_f32(stem + ".albedo.sprf");
    s.normal_map = read_raster_f32(stem + ".normal.sprf");
    s.pointmap = read_raster_f32(stem + ".pointmap.sprf");
    s.seg_map = read_raster_u8(stem + ".seg.sprb");
    s.foreground = read_raster_u8(stem + ".mask.sprb");

    std::ifstream f(stem + ".kp.json");
    check(f.good(), "dataset: cannot open " + stem + ".kp.json");
    nlohmann::json j;
    f >> j;
    s.focal = j.at("focal").get<double>();
    for (const auto& row : j.at("keypoints")) {
        Keypoint kp;
        kp.x = row.at(0).get<double>();
        kp.y = row.at(1).get<double>();
        kp.vis = row.at(2).get<int>();
        s.keypoints.push_back(kp);
    }
    s.validate();
    return s;
}

void write_dataset_manifest(const std::string& dir, const DatasetInfo& info) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["count"] = info.count;
    j["height"] = info.height;
    j["width"] = info.width;
    j["num_classes"] = info.num_classes;
    j["keypoints"] = info.keypoints;
    std::ofstream f(std::filesystem::path(dir) / "dataset.json", std::ios::trunc);
    check(f.good(), "dataset: cannot write manifest in " + dir);
    f << j.dump(2) << "\n";
}

DatasetInfo read_dataset_manifest(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "dataset.json");
    check(f.good(), "dataset: missing manifest in " + dir);
    nlohmann::json j;
    f >> j;
    DatasetInfo info;
    info.count = j.at("count").get<int>();
    info.height = j.at("height").get<int>();
    info.width = j.at("width").get<int>();
    info.num_classes = j.at("num_classes").get<int>();
    info.keypoints = j.at("keypoints").get<int>();
    check(info.count >= 0 && info.height > 0 && info.width > 0, "dataset: bad manifest in " + dir);
    return info;
}

std::vector<TaskSample> read_dataset(const std::string& dir) {
    const DatasetInfo info = read_dataset_manifest(dir);
    std::vector<TaskSample> out;
    out.reserve(static_cast<size_t>(info.count));
    for (int i = 0; i < info.count; ++i) out.push_back(read_sample_dir(dir, i));
    return out;
}

}  // namespace sapiens
