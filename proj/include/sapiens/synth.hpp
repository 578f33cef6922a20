#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sapiens/heads.hpp"
#include "sapiens/rng.hpp"
#include "sapiens/tensor.hpp"

namespace sapiens {

using Vec3 = std::array<double, 3>;

// Axis-aligned ellipsoid. Landmarks live in the unit-sphere frame of the
// primitive: world position is center + offset * radii, so they track the
// body under resizing.
struct ScenePrimitive {
    Vec3 center{0.0, 0.0, 4.0};
    Vec3 radii{1.0, 1.0, 1.0};
    Vec3 color{0.5, 0.5, 0.5};
    int part_class = 1;  // 0 is reserved for background
    std::vector<Vec3> landmarks;
};

// Camera sits at the origin looking along +z, x right, y down. light is the
// direction from a surface point toward the source.
struct SyntheticSceneSpec {
    std::vector<ScenePrimitive> primitives;
    Vec3 light{0.0, 0.0, -1.0};
    double focal = 64.0;  // pixels
    int height = 64;
    int width = 64;

    int landmark_count() const;
    void validate() const;
};

constexpr int kFigureClasses = 5;     // background + head/torso/arms/legs
constexpr int kFigureLandmarks = 10;  // head, torso, two per limb

// Stock six-primitive figure posed and colored from rng. Part classes:
// 1 head, 2 torso, 3 arms, 4 legs.
SyntheticSceneSpec make_figure_spec(int height, int width, double focal, Rng& rng);

// Lambertian render plus exact ground truth for every task: shaded image,
// camera-frame pointmap, unit normals, albedo, part segmentation, hit mask
// and projected landmarks. The cast is analytic, so rng is left untouched.
TaskSample synth_generate(const SyntheticSceneSpec& spec, Rng& rng);

// Rasters carry a 16-byte header (magic plus channels, height, width as
// little-endian u32) and a row-major payload. "SPRF" stores float32, "SPRB"
// stores uint8. Single-channel files read back as [H,W].
void write_raster_f32(const std::string& path, const Tensor& t);
Tensor read_raster_f32(const std::string& path);
void write_raster_u8(const std::string& path, const Tensor& t);
Tensor read_raster_u8(const std::string& path);

// Dataset directory layout: dataset.json plus, per sample (4-digit index),
// NNNN.image.sprf, NNNN.albedo.sprf, NNNN.normal.sprf, NNNN.pointmap.sprf,
// NNNN.seg.sprb, NNNN.mask.sprb and NNNN.kp.json.
struct DatasetInfo {
    int count = 0;
    int height = 0;
    int width = 0;
    int num_classes = 0;
    int keypoints = 0;
};

void write_sample_dir(const std::string& dir, int index, const TaskSample& s);
TaskSample read_sample_dir(const std::string& dir, int index);
void write_dataset_manifest(const std::string& dir, const DatasetInfo& info);
DatasetInfo read_dataset_manifest(const std::string& dir);
std::vector<TaskSample> read_dataset(const std::string& dir);

}  // namespace sapiens
