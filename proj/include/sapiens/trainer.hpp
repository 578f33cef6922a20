#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sapiens/augment.hpp"
#include "sapiens/backbone.hpp"
#include "sapiens/checkpoint.hpp"
#include "sapiens/config.hpp"
#include "sapiens/masking.hpp"
#include "sapiens/objectives.hpp"
#include "sapiens/optim.hpp"
#include "sapiens/params.hpp"
#include "sapiens/rng.hpp"
#include "sapiens/synth.hpp"

namespace sapiens {

// Everything one pretraining run needs. Section prefixes in config files:
// model, decoder, cls_head, temps, loss, optimizer, schedule, views, mask,
// train, phase2, data.
struct RunConfig {
    BackboneConfig model;
    MAEDecoderConfig decoder;
    ContrastiveHeadConfig cls_head;
    TemperatureSchedule temps;
    LossWeights loss;
    OptimConfig optimizer;
    ScheduleConfig schedule;
    ViewSpec views;
    MaskSpec mask;
    double grad_clip = 5.0;
    double ema_momentum = 0.992;
    double center_momentum = 0.9;
    uint64_t seed = 0;
    int64_t ckpt_every = 1000;
    int64_t phase2_iters = 0;  // extra steps run at the schedule floor
    int64_t data_count = 32;
    std::string data_dir;  // empty: figures are synthesized in memory

    void validate() const;
    static RunConfig from_config(const ConfigMap& c);
    void to_config(ConfigMap& c) const;
    std::string hash() const;  // digest of the canonical serialization
};

extern const char* kSeedEnvVar;  // "SAPIENS_MINI_SEED", overrides the config seed
uint64_t env_seed(uint64_t fallback);

struct StepLog {
    int64_t iter = 0;
    double mae = 0.0;
    double cl = 0.0;
    double koleo = 0.0;
    double total = 0.0;
    double teacher_temp = 0.0;
    double lr = 0.0;
    // not part of the log record
    double grad_norm = 0.0;
    double teacher_entropy = 0.0;

    std::string jsonl() const;
};

// Single-process pretraining loop. Each step draws an image, builds views,
// masks the globals, runs the teacher off-tape and the student on-tape, then
// applies losses, clipping, the optimizer step, the EMA update and the center
// update, in that order.
class Trainer {
public:
    explicit Trainer(const RunConfig& cfg);

    StepLog step();

    int64_t iter() const { return iter_; }
    const RunConfig& config() const { return cfg_; }
    ParamStore& student() { return student_; }
    const ParamStore& student() const { return student_; }
    const TeacherState& teacher() const { return teacher_; }
    const std::vector<Tensor>& images() const { return images_; }
    // phase markers for the latest step, in execution order
    const std::vector<std::string>& last_transcript() const { return transcript_; }

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    RunConfig cfg_;
    ParamStore student_;
    TeacherState teacher_;
    AdamW opt_;
    Rng rng_;
    int64_t iter_ = 0;
    int global_gh_ = 0;  // mask grid for global views; pooled when windowed
    int global_gw_ = 0;
    std::vector<std::pair<int, int>> pairs_;
    std::vector<Tensor> images_;
    std::vector<std::string> transcript_;
};

std::string ckpt_name(int64_t iter);  // "ckpt_000123.bin"

}  // namespace sapiens
