#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sapiens/evaluation.hpp"
#include "sapiens/trainer.hpp"

using namespace sapiens;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("sapiens_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

uint64_t bits_of(double v) {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    return b;
}

// geometric-method sphere intersection, a different algebra than the
// quadratic the generator solves
double sphere_ray_t(const Vec3& c, double radius, const Vec3& dhat) {
    const double tc = c[0] * dhat[0] + c[1] * dhat[1] + c[2] * dhat[2];
    const double h2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - tc * tc;
    if (h2 > radius * radius) return -1.0;
    const double dt = std::sqrt(radius * radius - h2);
    if (tc - dt > 1e-9) return tc - dt;
    if (tc + dt > 1e-9) return tc + dt;
    return -1.0;
}

Vec3 pixel_dir(int x, int y, int w, int h, double f) {
    const Vec3 d{(x + 0.5 - 0.5 * w) / f, (y + 0.5 - 0.5 * h) / f, 1.0};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    return {d[0] / n, d[1] / n, d[2] / n};
}

RunConfig micro_run_config() {
    RunConfig r;
    r.model.hidden_size = 16;
    r.model.depth = 2;
    r.model.num_heads = 2;
    r.model.kv_groups_mid = 1;
    r.model.patch_size = 8;
    r.model.image_height = 32;
    r.model.image_width = 32;
    r.model.layout = AttentionLayout::flat(2, 2, 1);
    r.decoder.depth = 1;
    r.decoder.hidden = 16;
    r.decoder.num_heads = 2;
    r.cls_head.hidden = 32;
    r.cls_head.bottleneck = 16;
    r.cls_head.prototypes = 64;
    r.temps.warmup_iters = 4;
    r.views.num_global = 2;
    r.views.num_local = 2;
    r.views.global_height = 32;
    r.views.global_width = 32;
    r.views.local_height = 16;
    r.views.local_width = 16;
    r.schedule.warmup_iters = 2;
    r.schedule.total_iters = 10;
    r.mask.block_side_max = 2;  // the global grid is 4x4
    r.data_count = 3;
    r.seed = 11;
    r.validate();
    return r;
}

}  // namespace

TEST_CASE("axial sphere gives the textbook center pixel") {
    SyntheticSceneSpec spec;
    spec.height = 65;
    spec.width = 65;
    spec.focal = 64.0;
    spec.light = {0.0, 0.0, -1.0};
    ScenePrimitive sphere;
    sphere.center = {0.0, 0.0, 4.0};
    sphere.radii = {1.0, 1.0, 1.0};
    sphere.color = {0.3, 0.6, 0.9};
    sphere.landmarks = {{0.0, 0.0, 0.0}};
    spec.primitives.push_back(sphere);

    Rng rng(1);
    const TaskSample s = synth_generate(spec, rng);
    CHECK(std::abs(s.normal_map.at3(0, 32, 32)) <= 1e-6);
    CHECK(std::abs(s.normal_map.at3(1, 32, 32)) <= 1e-6);
    CHECK(std::abs(s.normal_map.at3(2, 32, 32) + 1.0) <= 1e-6);
    for (int c = 0; c < 3; ++c) {
        CHECK(s.image.at3(c, 32, 32) == doctest::Approx(sphere.color[c]).epsilon(1e-12));
        CHECK(s.albedo_map.at3(c, 32, 32) == sphere.color[c]);
        CHECK(s.pointmap.at3(c, 32, 32) == doctest::Approx(c == 2 ? 3.0 : 0.0).epsilon(1e-12));
    }
    CHECK(s.seg_map.at2(32, 32) == 1.0);
    CHECK(s.foreground.at2(32, 32) == 1.0);
    // the landmark is the sphere center, projected straight down the axis
    REQUIRE(s.keypoints.size() == 1);
    CHECK(s.keypoints[0].x == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(s.keypoints[0].y == doctest::Approx(32.0).epsilon(1e-12));
    CHECK(s.keypoints[0].vis == 1);
}

TEST_CASE("sphere pointmaps match a scalar geometric tracer") {
    SyntheticSceneSpec spec;
    spec.height = 48;
    spec.width = 40;
    spec.focal = 36.0;
    spec.light = {0.2, -0.3, -0.9};
    const std::vector<Vec3> centers{{0.0, 0.0, 4.0}, {0.7, -0.4, 3.1}, {-0.9, 0.5, 5.2}};
    const std::vector<double> radii{1.0, 0.6, 0.8};
    for (size_t i = 0; i < centers.size(); ++i) {
        ScenePrimitive p;
        p.center = centers[i];
        p.radii = {radii[i], radii[i], radii[i]};
        p.color = {0.4, 0.5, 0.6};
        p.part_class = static_cast<int>(i) + 1;
        spec.primitives.push_back(p);
    }
    Rng rng(2);
    const TaskSample s = synth_generate(spec, rng);

    int checked = 0;
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const Vec3 d = pixel_dir(x, y, spec.width, spec.height, spec.focal);
            double best = -1.0;
            for (size_t i = 0; i < centers.size(); ++i) {
                const double t = sphere_ray_t(centers[i], radii[i], d);
                if (t > 0.0 && (best < 0.0 || t < best)) best = t;
            }
            if (best < 0.0) {
                CHECK(s.foreground.at2(y, x) == 0.0);
                continue;
            }
            REQUIRE(s.foreground.at2(y, x) == 1.0);
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(s.pointmap.at3(c, y, x) - best * d[c]) <=
                      1e-9 * std::max(1.0, best));
            ++checked;
        }
    }
    CHECK(checked > 200);
}

TEST_CASE("figure ground truth is self-consistent") {
    Rng rng(7);
    const SyntheticSceneSpec spec = make_figure_spec(64, 64, 64.0, rng);
    REQUIRE(spec.primitives.size() == 6);
    CHECK(spec.landmark_count() == kFigureLandmarks);
    Rng gen(8);
    const TaskSample s = synth_generate(spec, gen);
    s.validate();

    const double ln = std::sqrt(spec.light[0] * spec.light[0] + spec.light[1] * spec.light[1] +
                                spec.light[2] * spec.light[2]);
    const Vec3 lhat{spec.light[0] / ln, spec.light[1] / ln, spec.light[2] / ln};
    int fg = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            if (s.foreground.at2(y, x) == 0.0) {
                CHECK(s.seg_map.at2(y, x) == 0.0);
                for (int c = 0; c < 3; ++c) {
                    CHECK(s.image.at3(c, y, x) == 0.0);
                    CHECK(s.normal_map.at3(c, y, x) == 0.0);
                    CHECK(s.pointmap.at3(c, y, x) == 0.0);
                    CHECK(s.albedo_map.at3(c, y, x) == 0.0);
                }
                continue;
            }
            ++fg;
            const double cls = s.seg_map.at2(y, x);
            CHECK(cls >= 1.0);
            CHECK(cls <= 4.0);
            double nn = 0.0, ndotl = 0.0;
            for (int c = 0; c < 3; ++c) {
                nn += s.normal_map.at3(c, y, x) * s.normal_map.at3(c, y, x);
                ndotl += s.normal_map.at3(c, y, x) * lhat[c];
            }
            CHECK(std::abs(std::sqrt(nn) - 1.0) <= 1e-9);
            const double shade = std::max(0.0, ndotl);
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(s.image.at3(c, y, x) - s.albedo_map.at3(c, y, x) * shade) <= 1e-12);
        }
    }
    CHECK(fg > 200);
    CHECK(s.keypoints.size() == kFigureLandmarks);
}

TEST_CASE("ellipsoid normals agree with the implicit surface gradient") {
    SyntheticSceneSpec spec;
    spec.height = 33;
    spec.width = 33;
    spec.focal = 30.0;
    ScenePrimitive p;
    p.center = {0.2, -0.1, 3.5};
    p.radii = {1.1, 0.5, 0.8};
    p.color = {0.5, 0.5, 0.5};
    spec.primitives.push_back(p);
    Rng rng(3);
    const TaskSample s = synth_generate(spec, rng);

    const double h = 1e-6;
    auto implicit = [&](double x, double y, double z) {
        const double a = (x - p.center[0]) / p.radii[0];
        const double b = (y - p.center[1]) / p.radii[1];
        const double c = (z - p.center[2]) / p.radii[2];
        return a * a + b * b + c * c;
    };
    int checked = 0;
    for (int y = 0; y < 33; y += 4) {
        for (int x = 0; x < 33; x += 4) {
            if (s.foreground.at2(y, x) == 0.0) continue;
            const double px = s.pointmap.at3(0, y, x);
            const double py = s.pointmap.at3(1, y, x);
            const double pz = s.pointmap.at3(2, y, x);
            Vec3 g{(implicit(px + h, py, pz) - implicit(px - h, py, pz)) / (2 * h),
                   (implicit(px, py + h, pz) - implicit(px, py - h, pz)) / (2 * h),
                   (implicit(px, py, pz + h) - implicit(px, py, pz - h)) / (2 * h)};
            const double gn = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(s.normal_map.at3(c, y, x) - g[c] / gn) <= 1e-5);
            ++checked;
        }
    }
    CHECK(checked >= 4);
}

TEST_CASE("landmark projection and visibility") {
    SyntheticSceneSpec spec;
    spec.height = 64;
    spec.width = 64;
    spec.focal = 64.0;
    ScenePrimitive a;
    a.center = {0.8, -0.4, 5.0};
    a.radii = {0.5, 0.5, 0.5};
    a.color = {0.2, 0.2, 0.2};
    a.landmarks = {{0.0, 0.0, 0.0}, {0.0, -1.0, 0.0}};
    spec.primitives.push_back(a);
    ScenePrimitive b = a;
    b.center = {3.5, 0.0, 4.0};  // projects far outside the frame
    b.landmarks = {{0.0, 0.0, 0.0}};
    b.part_class = 2;
    spec.primitives.push_back(b);

    Rng rng(4);
    const TaskSample s = synth_generate(spec, rng);
    REQUIRE(s.keypoints.size() == 3);
    CHECK(s.keypoints[0].x == doctest::Approx(64.0 * 0.8 / 5.0 + 31.5).epsilon(1e-12));
    CHECK(s.keypoints[0].y == doctest::Approx(64.0 * -0.4 / 5.0 + 31.5).epsilon(1e-12));
    CHECK(s.keypoints[0].vis == 1);
    // the top-of-sphere landmark sits at center + (0,-r,0)
    CHECK(s.keypoints[1].y == doctest::Approx(64.0 * (-0.4 - 0.5) / 5.0 + 31.5).epsilon(1e-12));
    CHECK(s.keypoints[2].vis == 0);
    CHECK(s.focal == 64.0);
}

TEST_CASE("scene spec validation") {
    SyntheticSceneSpec spec;
    Rng rng(5);
    CHECK_THROWS_AS(synth_generate(spec, rng), std::invalid_argument);  // empty scene
    ScenePrimitive p;
    spec.primitives.push_back(p);
    spec.focal = 0.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.focal = 32.0;
    spec.primitives[0].center = {0.0, 0.0, 0.5};  // overlaps the camera plane
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.primitives[0].center = {0.0, 0.0, 4.0};
    spec.primitives[0].color = {1.5, 0.0, 0.0};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec.primitives[0].color = {0.5, 0.5, 0.5};
    spec.light = {0.0, 0.0, 0.0};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("figure generation is seed-deterministic") {
    Rng a(21), b(21), c(22);
    const SyntheticSceneSpec sa = make_figure_spec(48, 48, 48.0, a);
    const SyntheticSceneSpec sb = make_figure_spec(48, 48, 48.0, b);
    const SyntheticSceneSpec sc = make_figure_spec(48, 48, 48.0, c);
    Rng ga(1), gb(1), gc(1);
    const TaskSample ta = synth_generate(sa, ga);
    const TaskSample tb = synth_generate(sb, gb);
    const TaskSample tc = synth_generate(sc, gc);
    CHECK(ta.image.data == tb.image.data);
    CHECK(ta.seg_map.data == tb.seg_map.data);
    CHECK(ta.image.data != tc.image.data);
}

TEST_CASE("raster files round trip") {
    const std::string dir = fresh_dir("raster");
    Rng rng(9);
    Tensor t({3, 5, 7});
    for (auto& v : t.data) v = rng.uniform(-2.0, 2.0);

    SUBCASE("float32 stores the nearest single") {
        write_raster_f32(dir + "/a.sprf", t);
        const Tensor back = read_raster_f32(dir + "/a.sprf");
        REQUIRE(back.same_shape(t));
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(back.data[static_cast<size_t>(i)] ==
                  static_cast<double>(static_cast<float>(t.data[static_cast<size_t>(i)])));
        write_raster_f32(dir + "/b.sprf", t);
        std::ifstream fa(dir + "/a.sprf", std::ios::binary), fb(dir + "/b.sprf", std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        CHECK(ba == bb);
    }
    SUBCASE("bytes are exact and validated") {
        Tensor m({4, 6});
        for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(i % 5);
        write_raster_u8(dir + "/m.sprb", m);
        const Tensor back = read_raster_u8(dir + "/m.sprb");
        REQUIRE(back.same_shape(m));
        CHECK(back.data == m.data);
        Tensor frac({2, 2});
        frac.data[1] = 0.5;
        CHECK_THROWS_AS(write_raster_u8(dir + "/bad.sprb", frac), std::invalid_argument);
    }
    SUBCASE("header errors") {
        write_raster_f32(dir + "/a.sprf", t);
        CHECK_THROWS_AS(read_raster_u8(dir + "/a.sprf"), std::invalid_argument);  // wrong magic
        std::ofstream trunc(dir + "/short.sprf", std::ios::binary);
        trunc << "SPRF123";
        trunc.close();
        CHECK_THROWS_AS(read_raster_f32(dir + "/short.sprf"), std::invalid_argument);
        CHECK_THROWS_AS(read_raster_f32(dir + "/missing.sprf"), std::invalid_argument);
        Tensor bad({1});
        CHECK_THROWS_AS(write_raster_f32(dir + "/r1.sprf", bad), std::invalid_argument);
    }
}

TEST_CASE("sample directories round trip") {
    const std::string dir = fresh_dir("dataset");
    Rng rng(31);
    for (int i = 0; i < 2; ++i) {
        const SyntheticSceneSpec spec = make_figure_spec(32, 32, 32.0, rng);
        write_sample_dir(dir, i, synth_generate(spec, rng));
    }
    DatasetInfo info;
    info.count = 2;
    info.height = 32;
    info.width = 32;
    info.num_classes = kFigureClasses;
    info.keypoints = kFigureLandmarks;
    write_dataset_manifest(dir, info);

    const DatasetInfo back = read_dataset_manifest(dir);
    CHECK(back.count == 2);
    CHECK(back.height == 32);
    CHECK(back.num_classes == kFigureClasses);

    Rng rng2(31);
    const SyntheticSceneSpec spec0 = make_figure_spec(32, 32, 32.0, rng2);
    const TaskSample orig = synth_generate(spec0, rng2);
    const TaskSample s = read_sample_dir(dir, 0);
    CHECK(s.seg_map.data == orig.seg_map.data);
    CHECK(s.foreground.data == orig.foreground.data);
    for (int64_t i = 0; i < orig.image.numel(); ++i) {
        CHECK(s.image.data[static_cast<size_t>(i)] ==
              static_cast<double>(static_cast<float>(orig.image.data[static_cast<size_t>(i)])));
        CHECK(s.normal_map.data[static_cast<size_t>(i)] ==
              static_cast<double>(
                  static_cast<float>(orig.normal_map.data[static_cast<size_t>(i)])));
    }
    REQUIRE(s.keypoints.size() == orig.keypoints.size());
    for (size_t i = 0; i < s.keypoints.size(); ++i) {
        CHECK(s.keypoints[i].x == orig.keypoints[i].x);
        CHECK(s.keypoints[i].y == orig.keypoints[i].y);
        CHECK(s.keypoints[i].vis == orig.keypoints[i].vis);
    }
    CHECK(s.focal == orig.focal);
    CHECK(read_dataset(dir).size() == 2);
}

TEST_CASE("adamw first step and no-op identities") {
    SUBCASE("unit signal moves by the learning rate") {
        OptimConfig oc;
        oc.beta1 = 0.9;
        oc.beta2 = 0.999;
        oc.weight_decay = 0.0;
        AdamW opt(oc);
        ParamStore store;
        store.add("x", Tensor::scalar(1.0));
        std::map<std::string, Tensor> grads{{"x", Tensor::scalar(1.0)}};
        opt.step(store, grads, 0.1);
        CHECK(store.at("x")[0] == doctest::Approx(0.9).epsilon(1e-6));
        CHECK(opt.step_count() == 1);
    }
    SUBCASE("zero gradient with zero decay is a no-op") {
        OptimConfig oc;
        oc.weight_decay = 0.0;
        AdamW opt(oc);
        ParamStore store;
        store.add("layer.weight", Tensor({2, 2}, 0.37));
        std::map<std::string, Tensor> grads{{"layer.weight", Tensor({2, 2}, 0.0)}};
        opt.step(store, grads, 1e-3);
        for (double v : store.at("layer.weight").data) CHECK(v == 0.37);
    }
    SUBCASE("decay exemptions hold under weight decay") {
        OptimConfig oc;
        oc.weight_decay = 0.05;
        AdamW opt(oc);
        ParamStore store;
        store.add("norm.gain", Tensor({3}, 1.0));
        store.add("layer.weight", Tensor({3}, 1.0));
        std::map<std::string, Tensor> grads{{"norm.gain", Tensor({3}, 0.0)},
                                            {"layer.weight", Tensor({3}, 0.0)}};
        opt.step(store, grads, 1e-2);
        for (double v : store.at("norm.gain").data) CHECK(v == 1.0);
        // the plain weight decays, which is what makes the exemption visible
        for (double v : store.at("layer.weight").data) CHECK(v < 1.0);
    }
    SUBCASE("params absent from the gradient map stay put") {
        OptimConfig oc;
        AdamW opt(oc);
        ParamStore store;
        store.add("a", Tensor({2}, 0.5));
        store.add("b", Tensor({2}, 0.5));
        std::map<std::string, Tensor> grads{{"a", Tensor({2}, 1.0)}};
        opt.step(store, grads, 1e-2);
        CHECK(store.at("a")[0] != 0.5);
        CHECK(store.at("b")[0] == 0.5);
    }
    SUBCASE("two steps match a scalar reimplementation") {
        OptimConfig oc;
        oc.beta1 = 0.9;
        oc.beta2 = 0.95;
        oc.weight_decay = 0.05;
        oc.eps = 1e-8;
        AdamW opt(oc);
        ParamStore store;
        store.add("w", Tensor::scalar(0.7));
        const double lr = 0.01;
        const std::vector<double> gs{0.3, -0.2};
        double p = 0.7, m = 0.0, v = 0.0;
        for (size_t i = 0; i < gs.size(); ++i) {
            std::map<std::string, Tensor> grads{{"w", Tensor::scalar(gs[i])}};
            opt.step(store, grads, lr);
            const double t = static_cast<double>(i) + 1.0;
            m = 0.9 * m + 0.1 * gs[i];
            v = 0.95 * v + 0.05 * gs[i] * gs[i];
            const double mhat = m / (1.0 - std::pow(0.9, t));
            const double vhat = v / (1.0 - std::pow(0.95, t));
            p -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.05 * p);
            CHECK(store.at("w")[0] == doctest::Approx(p).epsilon(1e-14));
        }
    }
    SUBCASE("non-finite gradients fail loudly") {
        AdamW opt(OptimConfig{});
        ParamStore store;
        store.add("bad.weight", Tensor({2}, 1.0));
        Tensor g({2}, 1.0);
        g.data[1] = std::nan("");
        std::map<std::string, Tensor> grads{{"bad.weight", g}};
        try {
            opt.step(store, grads, 1e-3);
            CHECK(false);
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("bad.weight") != std::string::npos);
        }
    }
    SUBCASE("decay predicate") {
        CHECK(zero_decay_param("layer0.attn.q.bias"));
        CHECK(zero_decay_param("norm.gain"));
        CHECK(zero_decay_param("pos_table.8x8"));
        CHECK(zero_decay_param("mask_token"));
        CHECK(zero_decay_param("cls.token"));
        CHECK(zero_decay_param("encoder.cls.pos"));
        CHECK_FALSE(zero_decay_param("layer0.ffn.down.weight"));
        CHECK_FALSE(zero_decay_param("patch_embed.weight"));
    }
}

TEST_CASE("lr schedule endpoints and shape") {
    ScheduleConfig sc;
    sc.warmup_iters = 100;
    sc.total_iters = 1000;
    sc.min_lr = 1e-7;
    const double base = 1e-4;
    CHECK(lr_schedule(0, base, sc) == 0.0);
    CHECK(lr_schedule(50, base, sc) == 0.5 * base);
    CHECK(lr_schedule(100, base, sc) == base);
    CHECK(lr_schedule(1000, base, sc) == sc.min_lr);
    CHECK(lr_schedule(550, base, sc) ==
          doctest::Approx(0.5 * (base + sc.min_lr)).epsilon(1e-9));
    // monotone decay after warmup
    double prev = lr_schedule(100, base, sc);
    for (int64_t it = 150; it <= 1000; it += 50) {
        const double cur = lr_schedule(it, base, sc);
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK_THROWS_AS(lr_schedule(-1, base, sc), std::invalid_argument);
    CHECK_THROWS_AS(lr_schedule(1001, base, sc), std::invalid_argument);

    ScheduleConfig flat;
    flat.warmup_iters = 0;
    flat.total_iters = 10;
    CHECK(lr_schedule(0, base, flat) == base);
}

TEST_CASE("global norm clipping") {
    SUBCASE("under the limit nothing moves") {
        std::map<std::string, Tensor> grads{{"a", Tensor({2})}};
        grads.at("a").data = {1.5, 2.0};
        CHECK(clip_global_norm(grads, 5.0) == doctest::Approx(2.5).epsilon(1e-12));
        CHECK(grads.at("a").data[0] == 1.5);
        CHECK(grads.at("a").data[1] == 2.0);
    }
    SUBCASE("over the limit scales to the limit") {
        std::map<std::string, Tensor> grads{{"a", Tensor({2})}};
        grads.at("a").data = {6.0, 8.0};
        CHECK(clip_global_norm(grads, 5.0) == doctest::Approx(10.0).epsilon(1e-12));
        CHECK(grads.at("a").data[0] == doctest::Approx(3.0).epsilon(1e-9));
        CHECK(grads.at("a").data[1] == doctest::Approx(4.0).epsilon(1e-9));
        double post = 0.0;
        for (double v : grads.at("a").data) post += v * v;
        CHECK(std::sqrt(post) == doctest::Approx(5.0).epsilon(1e-9));
    }
    SUBCASE("many tensors behave like one concatenated vector") {
        Rng rng(13);
        std::map<std::string, Tensor> grads;
        grads.emplace("p", Tensor({3, 4}));
        grads.emplace("q", Tensor({5}));
        grads.emplace("r", Tensor({2, 2, 2}));
        long double ss = 0.0L;
        for (auto& [name, g] : grads)
            for (auto& v : g.data) {
                v = rng.uniform(0.5, 2.0);
                ss += static_cast<long double>(v) * v;
            }
        const double norm = static_cast<double>(std::sqrt(ss));
        std::map<std::string, Tensor> orig = grads;
        const double max_norm = 1.5;
        CHECK(clip_global_norm(grads, max_norm) == doctest::Approx(norm).epsilon(1e-12));
        REQUIRE(norm > max_norm);
        for (auto& [name, g] : grads)
            for (size_t i = 0; i < g.data.size(); ++i)
                CHECK(g.data[i] == doctest::Approx(orig.at(name).data[i] * max_norm / norm)
                                       .epsilon(1e-9));
    }
    SUBCASE("empty map reports zero") {
        std::map<std::string, Tensor> grads;
        CHECK(clip_global_norm(grads, 1.0) == 0.0);
    }
}

TEST_CASE("checkpoint container is bit-exact") {
    const std::string dir = fresh_dir("ckpt");
    CheckpointData d;
    d.iter = 7;
    d.config_hash = "cafe01";
    d.rng_state = {1ULL, 0xffffffffffffffffULL, 42ULL, 1ULL << 63};
    d.has_teacher = true;
    d.opt_step = 9;
    Tensor odd({2, 3});
    odd.data = {0.1, -0.0, 5e-324, std::nan(""), std::numeric_limits<double>::infinity(), 1e300};
    Tensor plain({4}, 0.25);
    d.tensors.emplace_back("alpha", odd);
    d.tensors.emplace_back("beta", plain);

    const std::string path = dir + "/state.bin";
    save_checkpoint(path, d);
    CHECK_FALSE(fs::exists(path + ".tmp"));

    const CheckpointData e = load_checkpoint(path);
    CHECK(e.iter == 7);
    CHECK(e.config_hash == "cafe01");
    CHECK(e.rng_state == d.rng_state);
    CHECK(e.has_teacher);
    CHECK(e.opt_step == 9);
    REQUIRE(e.tensors.size() == 2);
    const Tensor* a = e.find("alpha");
    REQUIRE(a != nullptr);
    REQUIRE(a->same_shape(odd));
    for (size_t i = 0; i < odd.data.size(); ++i) CHECK(bits_of(a->data[i]) == bits_of(odd.data[i]));
    CHECK(e.find("missing") == nullptr);

    CHECK_THROWS_AS(load_checkpoint(path, "different"), ConfigError);
    CHECK_NOTHROW(load_checkpoint(path, "cafe01"));
    CHECK_THROWS_AS(load_checkpoint(dir + "/nope.bin"), std::invalid_argument);
    std::ofstream bad(dir + "/bad.bin", std::ios::binary);
    bad << "NOPExxxxxxxxxxxx";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad.bin"), std::invalid_argument);
}

TEST_CASE("run config round trips and validates") {
    RunConfig cfg = micro_run_config();
    ConfigMap cm;
    cfg.to_config(cm);
    const RunConfig back = RunConfig::from_config(cm);
    CHECK(back.hash() == cfg.hash());
    CHECK(cm.unused_keys().empty());  // from_config consumes every emitted key

    SUBCASE("hash tracks content") {
        RunConfig other = micro_run_config();
        other.seed = 99;
        CHECK(other.hash() != cfg.hash());
    }
    SUBCASE("unknown keys are rejected") {
        ConfigMap cm2;
        cfg.to_config(cm2);
        cm2.set("model.depht", "3");
        (void)RunConfig::from_config(cm2);
        CHECK_THROWS_AS(cm2.reject_unused(), ConfigError);
    }
    SUBCASE("invariants") {
        RunConfig bad = micro_run_config();
        bad.schedule.warmup_iters = 20;  // exceeds total_iters
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = micro_run_config();
        bad.optimizer.lr = 1e-8;  // at or below the floor
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = micro_run_config();
        bad.views.num_global = 1;
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = micro_run_config();
        bad.views.global_height = 30;  // not patch aligned
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = micro_run_config();
        bad.mask.ratio = 0.0;
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    }
    SUBCASE("environment seed override") {
        unsetenv(kSeedEnvVar);
        CHECK(env_seed(7) == 7);
        setenv(kSeedEnvVar, "123", 1);
        CHECK(env_seed(7) == 123);
        setenv(kSeedEnvVar, "12x", 1);
        CHECK_THROWS_AS(env_seed(7), std::invalid_argument);
        unsetenv(kSeedEnvVar);
    }
}

TEST_CASE("trainer runs the documented step order") {
    Trainer tr(micro_run_config());
    const StepLog log = tr.step();
    const std::vector<std::string> want{"forward", "loss",   "backward", "clip",
                                        "step",    "ema",    "center"};
    CHECK(tr.last_transcript() == want);
    CHECK(tr.iter() == 1);
    CHECK(log.iter == 0);
    CHECK(std::isfinite(log.total));
    CHECK(log.grad_norm > 0.0);
    // the center moved off its zero start
    bool center_moved = false;
    for (double v : tr.teacher().center.data) center_moved = center_moved || v != 0.0;
    CHECK(center_moved);
}

TEST_CASE("trainer losses compose and schedules flow through") {
    const RunConfig cfg = micro_run_config();
    Trainer a(cfg), b(cfg);
    for (int i = 0; i < 3; ++i) {
        const StepLog la = a.step();
        const StepLog lb = b.step();
        CHECK(la.total == lb.total);
        CHECK(la.iter == i);
        CHECK(la.total ==
              doctest::Approx(cfg.loss.mae * la.mae + cfg.loss.cls * la.cl +
                              cfg.loss.koleo * la.koleo)
                  .epsilon(1e-12));
        CHECK(la.lr == lr_schedule(i, cfg.optimizer.lr, cfg.schedule));
        CHECK(la.teacher_temp == cfg.temps.teacher_temp(i));
        CHECK(la.teacher_entropy > 0.0);
        CHECK(la.teacher_entropy <= std::log(static_cast<double>(cfg.cls_head.prototypes)) + 1e-9);
    }
    CHECK(a.student().fingerprint() == b.student().fingerprint());
    CHECK(a.teacher().weights.fingerprint() == b.teacher().weights.fingerprint());

    RunConfig seeded = cfg;
    seeded.seed = 12;
    Trainer c(seeded), d(cfg);
    CHECK(c.step().total != d.step().total);
}

TEST_CASE("trainer log records carry the expected fields") {
    Trainer tr(micro_run_config());
    const StepLog log = tr.step();
    const nlohmann::json j = nlohmann::json::parse(log.jsonl());
    CHECK(j.size() == 7);
    CHECK(j.at("iter").get<int64_t>() == log.iter);
    CHECK(j.at("mae").get<double>() == log.mae);
    CHECK(j.at("cl").get<double>() == log.cl);
    CHECK(j.at("koleo").get<double>() == log.koleo);
    CHECK(j.at("total").get<double>() == log.total);
    CHECK(j.at("teacher_temp").get<double>() == log.teacher_temp);
    CHECK(j.at("lr").get<double>() == log.lr);
    CHECK(ckpt_name(10) == "ckpt_000010.bin");
}

TEST_CASE("resume replays the exact trajectory") {
    const std::string dir = fresh_dir("resume");
    const RunConfig cfg = micro_run_config();
    const std::string path = dir + "/" + ckpt_name(2);

    Trainer a(cfg);
    a.step();
    a.step();
    const StepLog a3 = a.step();

    Trainer b(cfg);
    b.step();
    b.step();
    b.save(path);
    CHECK_FALSE(fs::exists(path + ".tmp"));

    Trainer c(cfg);
    c.load(path);
    CHECK(c.iter() == 2);
    const StepLog c3 = c.step();
    CHECK(c3.total == a3.total);
    CHECK(c3.mae == a3.mae);
    CHECK(c3.cl == a3.cl);
    CHECK(c3.koleo == a3.koleo);
    CHECK(c.student().fingerprint() == a.student().fingerprint());
    CHECK(c.teacher().weights.fingerprint() == a.teacher().weights.fingerprint());

    SUBCASE("one more save/load round trip stays bit-stable") {
        const std::string p2 = dir + "/" + ckpt_name(3);
        c.save(p2);
        Trainer d(cfg);
        d.load(p2);
        CHECK(d.student().fingerprint() == c.student().fingerprint());
        CHECK(d.step().total == a.step().total);
    }
    SUBCASE("a different run config refuses the file") {
        RunConfig other = cfg;
        other.model.hidden_size = 32;
        other.decoder.hidden = 32;
        Trainer e(other);
        CHECK_THROWS_AS(e.load(path), ConfigError);
    }
}

TEST_CASE("steps past the schedule hold the floor") {
    RunConfig cfg = micro_run_config();
    cfg.schedule.total_iters = 3;
    cfg.schedule.warmup_iters = 1;
    Trainer tr(cfg);
    for (int i = 0; i < 3; ++i) tr.step();
    const StepLog extra = tr.step();  // phase-two style extension
    CHECK(extra.lr == cfg.schedule.min_lr);
}

TEST_CASE("finetuning moves the backbone where probing freezes it") {
    BackboneConfig bb;
    bb.hidden_size = 32;
    bb.depth = 2;
    bb.num_heads = 4;
    bb.kv_groups_mid = 2;
    bb.patch_size = 8;
    bb.image_height = 32;
    bb.image_width = 32;
    bb.layout = AttentionLayout::flat(2, 4, 2);
    bb.validate();

    Rng data(77);
    std::vector<TaskSample> train, held;
    for (int i = 0; i < 3; ++i)
        train.push_back(synth_generate(make_figure_spec(32, 32, 32.0, data), data));
    for (int i = 0; i < 2; ++i)
        held.push_back(synth_generate(make_figure_spec(32, 32, 32.0, data), data));

    ProbeConfig pc;
    pc.task = "normal";
    pc.iters = 3;
    pc.lr = 1e-3;
    pc.widths = {8, 4, 2};

    ParamStore frozen;
    init_backbone(frozen, bb, Rng(5));
    const std::string before_frozen = fingerprint_excluding(frozen, "probe.");
    const MetricReport probe_rep = dense_probe(frozen, bb, train, held, pc, 99);
    CHECK(fingerprint_excluding(frozen, "probe.") == before_frozen);

    ParamStore tuned;
    init_backbone(tuned, bb, Rng(5));
    const MetricReport tune_rep = finetune_task(tuned, bb, train, held, pc, 99);
    CHECK(fingerprint_excluding(tuned, "probe.") != before_frozen);
    CHECK(tune_rep.task == "normal");
    CHECK(tune_rep.samples == 2);
    CHECK(probe_rep.fingerprint != tune_rep.fingerprint);
}
