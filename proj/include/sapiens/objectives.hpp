#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sapiens/backbone.hpp"
#include "sapiens/masking.hpp"
#include "sapiens/params.hpp"

namespace sapiens {

// ---------------------------------------------------------------------------
// reconstruction
// ---------------------------------------------------------------------------

struct MAEDecoderConfig {
    int depth = 8;
    int hidden = 512;
    int num_heads = 8;

    int ffn() const { return default_swiglu_hidden(hidden); }
    int head_dim() const { return hidden / num_heads; }
    void validate() const;
    static MAEDecoderConfig from_config(const ConfigMap& c,
                                        const std::string& prefix = "decoder");
    void to_config(ConfigMap& c, const std::string& prefix = "decoder") const;
};

std::string decoder_pos_name(int gh, int gw);
void ensure_decoder_pos_table(ParamStore& store, const MAEDecoderConfig& cfg, int gh, int gw,
                              const Rng& root);
// out_dim is the per-token pixel vector length (3 * cell_h * cell_w).
void init_mae_decoder(ParamStore& store, const MAEDecoderConfig& cfg, int enc_dim, int out_dim,
                      const Rng& root);

// Visible rows are re-embedded, masked positions filled with the learned mask
// token plus the decoder positional row, then full-attention blocks and a
// linear head predict every token's pixel vector.
Var mae_decode(Tape& t, Binding& w, const MAEDecoderConfig& cfg, Var z_vis, const Mask& mask,
               int gh, int gw);

// (x - mean) / sqrt(var + 1e-6) over the whole vector.
Tensor normalize_targets(const Tensor& patch_pixels);

// Rows follow the token grid; each row is the cell's pixels in (c, y, x)
// order, normalized per cell.
Tensor reconstruction_targets(const Tensor& image, int gh, int gw);

// Mean over views of mean over masked tokens of per-token MSE.
Var mae_loss(Tape& t, const std::vector<Var>& preds, const std::vector<Tensor>& targets,
             const std::vector<const Mask*>& masks);

// ---------------------------------------------------------------------------
// contrastive
// ---------------------------------------------------------------------------

struct ContrastiveHeadConfig {
    int hidden = 2048;
    int bottleneck = 256;
    int prototypes = 4096;  // K

    void validate() const;
    static ContrastiveHeadConfig from_config(const ConfigMap& c,
                                             const std::string& prefix = "cls_head");
    void to_config(ConfigMap& c, const std::string& prefix = "cls_head") const;
};

void init_contrastive_head(ParamStore& store, const ContrastiveHeadConfig& cfg, int enc_dim,
                           const Rng& root);
// cls: [B, enc_dim] -> [B, K]; bottleneck l2-normalized, prototype rows
// l2-normalized (weight norm), so logits are cosine similarities.
Var contrastive_logits(Tape& t, Binding& w, const ContrastiveHeadConfig& cfg, Var cls);

struct TemperatureSchedule {
    double student_temp = 0.1;
    double teacher_temp_start = 0.065;
    double teacher_temp_end = 0.07;
    int warmup_iters = 1000;

    double teacher_temp(int64_t iter) const;
    void validate() const;
    static TemperatureSchedule from_config(const ConfigMap& c,
                                           const std::string& prefix = "temps");
    void to_config(ConfigMap& c, const std::string& prefix = "temps") const;
};

struct LossWeights {
    double mae = 1.0;
    double cls = 0.4;
    double koleo = 0.04;

    void validate() const;
    static LossWeights from_config(const ConfigMap& c, const std::string& prefix = "loss");
    void to_config(ConfigMap& c, const std::string& prefix = "loss") const;
};

struct TeacherState {
    ParamStore weights;  // EMA mirror of encoder + head; the optimizer never sees it
    Tensor center;       // [K]
    double ema_momentum = 0.992;
    double center_momentum = 0.9;
};

// Copies every student tensor except the reconstruction decoder ("decoder.*"),
// which stays student-only. Center starts at zero.
void teacher_init(TeacherState& ts, const ParamStore& student, int prototypes);
void ema_update(TeacherState& ts, const ParamStore& student, double m);
void center_update(TeacherState& ts, const Tensor& teacher_logits, double momentum);

// (teacher global j, student view i) for all cross pairs, i == j excluded,
// j over globals only.
std::vector<std::pair<int, int>> build_pair_set(int num_global, int num_local);

// Teacher path when center is non-empty: softmax((logits - center) / temp).
// Student path with an empty center: softmax(logits / temp).
Tensor sharpen(const Tensor& logits, const Tensor& center, double temp);

// (1/|S|) sum of H(q_j, p_i); teacher distributions enter as constants so no
// gradient can reach them.
Var cl_loss(Tape& t, const std::vector<Var>& student_logits,
            const std::vector<Tensor>& teacher_probs,
            const std::vector<std::pair<int, int>>& pairs, double student_temp);

// -(1/n) sum_i log(nearest-neighbor distance of l2-normalized row i + 1e-8).
// The neighbor index is found off-tape and held fixed for the gradient.
Var koleo(Tape& t, Var embeddings);

Var total_loss(Tape& t, Var mae, Var cl, Var kol, const LossWeights& w);

}  // namespace sapiens
