#pragma once

#include <string>
#include <vector>

#include "sapiens/config.hpp"
#include "sapiens/masking.hpp"
#include "sapiens/params.hpp"
#include "sapiens/token_grid.hpp"

namespace sapiens {

inline constexpr double kNormEps = 1e-6;

enum class AttnKind { full, grouped, windowed };

struct LayerSpec {
    AttnKind kind = AttnKind::full;
    int groups = 0;       // grouped only
    int window_side = 0;  // windowed only
};

// Per-layer attention plan. Windowed layers may appear only as a leading run
// (the local stage); the first and last layer never use grouped attention.
struct AttentionLayout {
    std::vector<LayerSpec> layers;
    int local_layers = 0;  // K
    int window_side = 0;   // uniform side of the local stage, 0 for flat

    int depth() const { return static_cast<int>(layers.size()); }
    int global_layers() const { return depth() - local_layers; }
    int pool_stride() const { return window_side * window_side; }  // tokens per window
    bool windowed() const { return local_layers > 0; }

    // Compact text form, e.g. "w8:6,gqa4:28,full:6".
    static AttentionLayout parse(const std::string& text);
    std::string to_string() const;

    // Flat default: grouped attention over the central half of the depth,
    // full attention elsewhere.
    static AttentionLayout flat(int depth, int num_heads, int kv_groups_mid);

    void validate(int num_heads) const;
};

struct BackboneConfig {
    int hidden_size = 64;
    int depth = 4;
    int num_heads = 4;
    int kv_groups_mid = 2;
    int patch_size = 8;
    int image_height = 64;
    int image_width = 64;
    AttentionLayout layout;
    int ffn_hidden = 0;  // 0 applies default_swiglu_hidden
    bool use_cls = true;

    int head_dim() const { return hidden_size / num_heads; }
    int grid_h() const { return image_height / patch_size; }
    int grid_w() const { return image_width / patch_size; }
    int tokens() const { return grid_h() * grid_w(); }
    int ffn() const;
    void validate() const;

    static BackboneConfig from_config(const ConfigMap& c, const std::string& prefix = "model");
    void to_config(ConfigMap& c, const std::string& prefix = "model") const;
};

// 4*D*(2/3) rounded to the nearest multiple of 64, never below 64.
int default_swiglu_hidden(int hidden_size);

int64_t backbone_param_count(const BackboneConfig& cfg);

std::string pos_table_name(int gh, int gw);
void ensure_pos_table(ParamStore& store, const BackboneConfig& cfg, int gh, int gw,
                      const Rng& root);
void init_backbone(ParamStore& store, const BackboneConfig& cfg, const Rng& root);

// ---------------------------------------------------------------------------
// numeric ops on TokenGrid (module surface; the tape forward mirrors these)
// ---------------------------------------------------------------------------
TokenGrid patch_embed(const Tensor& image, const BackboneConfig& cfg, const ParamStore& store);
TokenGrid add_positional(const TokenGrid& grid, const Tensor& pos_table);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = kNormEps);
// q: [h,T,d]; k, v: [g,T,d]; returns concatenated heads [T, h*d].
Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down);
// Row-major over windows and within each window: perm[new_row] = old_row.
std::vector<int> window_permutation(int gh, int gw, int window_side);
std::vector<TokenGrid> window_partition(const TokenGrid& grid, int window_side);
TokenGrid window_unpartition(const std::vector<TokenGrid>& windows, int gh, int gw,
                             int window_side);
Tensor cls_guided_pool(const TokenGrid& window, const Tensor& cls);

// ---------------------------------------------------------------------------
// tape forward
// ---------------------------------------------------------------------------
struct BackboneOut {
    Var cls;     // [1,D]; invalid when the config has no [CLS]
    Var tokens;  // [rows,D] after the final norm
    int grid_h = 0;
    int grid_w = 0;              // pooled dims for the windowed layout
    std::vector<int> index_map;  // origin position per row
};

struct EncodeOptions {
    std::vector<int> index_map;         // sparse origins (flat layout only)
    const Mask* pooled_mask = nullptr;  // windowed: applied after the local stage
};

// One pre-norm block, attention then SwiGLU FFN, parameters found under
// `prefix` (e.g. "layer0."). groups == heads gives standard self-attention.
Var transformer_block(Tape& t, Binding& w, const std::string& prefix, Var x, int heads,
                      int groups);

// Creates the parameter set transformer_block expects under `prefix`.
void init_block_params(ParamStore& store, const std::string& prefix, int dim, int kv_dim,
                       int head_dim, int ffn_hidden, const Rng& root);

// Patch projection without positional terms: [N,D] for an image of any
// p-divisible size.
Var embed_image(Tape& t, Binding& w, const BackboneConfig& cfg, Var image);

BackboneOut encode_tokens(Tape& t, Binding& w, const BackboneConfig& cfg, Var tokens, int gh,
                          int gw, const EncodeOptions& opt = {});

// mask semantics follow the layout: flat gathers visible patch tokens before
// the blocks; windowed runs the local stage dense and masks the pooled grid.
BackboneOut backbone_forward(Tape& t, Binding& w, const BackboneConfig& cfg, Var image,
                             const Mask* mask = nullptr);

}  // namespace sapiens
