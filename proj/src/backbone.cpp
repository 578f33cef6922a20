#include "sapiens/backbone.hpp"

#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sapiens {

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

namespace {
std::string trim_ws(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

int parse_int(const std::string& s, const char* what) {
    try {
        size_t pos = 0;
        const int v = std::stoi(s, &pos);
        check(pos == s.size(), "trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string("layout: bad ") + what + ": " + s);
    }
}
}  // namespace

AttentionLayout AttentionLayout::parse(const std::string& text) {
    AttentionLayout out;
    std::stringstream ss(text);
    std::string seg;
    while (std::getline(ss, seg, ',')) {
        seg = trim_ws(seg);
        if (seg.empty()) continue;
        const auto colon = seg.find(':');
        if (colon == std::string::npos) throw ConfigError("layout: segment needs kind:count");
        const std::string kind = seg.substr(0, colon);
        const int count = parse_int(seg.substr(colon + 1), "count");
        if (count <= 0) throw ConfigError("layout: count must be positive");
        LayerSpec ls;
        if (kind == "full") {
            ls.kind = AttnKind::full;
        } else if (kind.rfind("gqa", 0) == 0) {
            ls.kind = AttnKind::grouped;
            ls.groups = parse_int(kind.substr(3), "group count");
        } else if (kind.size() > 1 && kind[0] == 'w') {
            ls.kind = AttnKind::windowed;
            ls.window_side = parse_int(kind.substr(1), "window side");
        } else {
            throw ConfigError("layout: unknown kind: " + kind);
        }
        for (int i = 0; i < count; ++i) out.layers.push_back(ls);
    }
    int k = 0;
    while (k < out.depth() && out.layers[static_cast<size_t>(k)].kind == AttnKind::windowed) ++k;
    out.local_layers = k;
    out.window_side = k > 0 ? out.layers[0].window_side : 0;
    return out;
}

std::string AttentionLayout::to_string() const {
    std::ostringstream out;
    size_t i = 0;
    bool first = true;
    while (i < layers.size()) {
        size_t j = i;
        while (j < layers.size() && layers[j].kind == layers[i].kind &&
               layers[j].groups == layers[i].groups &&
               layers[j].window_side == layers[i].window_side) {
            ++j;
        }
        if (!first) out << ",";
        first = false;
        switch (layers[i].kind) {
            case AttnKind::full: out << "full"; break;
            case AttnKind::grouped: out << "gqa" << layers[i].groups; break;
            case AttnKind::windowed: out << "w" << layers[i].window_side; break;
        }
        out << ":" << (j - i);
        i = j;
    }
    return out.str();
}

AttentionLayout AttentionLayout::flat(int depth, int num_heads, int kv_groups_mid) {
    AttentionLayout out;
    out.layers.resize(static_cast<size_t>(depth));
    for (int i = 0; i < depth; ++i) {
        const bool mid = i >= depth / 4 && i < (3 * depth) / 4 && i != 0 && i != depth - 1;
        if (mid && kv_groups_mid < num_heads) {
            out.layers[static_cast<size_t>(i)] = {AttnKind::grouped, kv_groups_mid, 0};
        } else {
            out.layers[static_cast<size_t>(i)] = {AttnKind::full, 0, 0};
        }
    }
    return out;
}

void AttentionLayout::validate(int num_heads) const {
    for (int i = 0; i < depth(); ++i) {
        const LayerSpec& ls = layers[static_cast<size_t>(i)];
        switch (ls.kind) {
            case AttnKind::windowed:
                check(i < local_layers, "layout: windowed layers must form a leading run");
                check(ls.window_side == window_side && window_side >= 1,
                      "layout: windowed layers must share one window side");
                break;
            case AttnKind::grouped:
                check(ls.groups >= 1 && num_heads % ls.groups == 0,
                      "layout: heads not divisible by group count");
                check(i != 0 && i != depth() - 1,
                      "layout: first and last layer must not use grouped attention");
                break;
            case AttnKind::full: break;
        }
    }
    if (local_layers > 0) check(depth() > local_layers, "layout: no global layers after pooling");
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

int default_swiglu_hidden(int hidden_size) {
    const double raw = 4.0 * hidden_size * (2.0 / 3.0);
    const int f = static_cast<int>(std::lround(raw / 64.0)) * 64;
    return f < 64 ? 64 : f;
}

int BackboneConfig::ffn() const { return ffn_hidden > 0 ? ffn_hidden : default_swiglu_hidden(hidden_size); }

void BackboneConfig::validate() const {
    check(hidden_size > 0 && num_heads > 0 && kv_groups_mid > 0 && patch_size > 0 &&
              image_height > 0 && image_width > 0 && depth >= 0,
          "backbone config: sizes must be positive");
    check(hidden_size % num_heads == 0, "backbone config: hidden_size % num_heads != 0");
    check(num_heads % kv_groups_mid == 0, "backbone config: num_heads % kv_groups_mid != 0");
    check(image_height % patch_size == 0 && image_width % patch_size == 0,
          "backbone config: image dims must be divisible by patch size");
    check(layout.depth() == depth, "backbone config: layout length != depth");
    layout.validate(num_heads);
    if (layout.windowed()) {
        check(grid_h() % layout.window_side == 0 && grid_w() % layout.window_side == 0,
              "backbone config: token grid not divisible by window side");
    }
}

BackboneConfig BackboneConfig::from_config(const ConfigMap& c, const std::string& prefix) {
    BackboneConfig cfg;
    const auto key = [&](const char* k) { return prefix + "." + k; };
    cfg.hidden_size = static_cast<int>(c.get_int(key("hidden_size"), cfg.hidden_size));
    cfg.depth = static_cast<int>(c.get_int(key("depth"), cfg.depth));
    cfg.num_heads = static_cast<int>(c.get_int(key("num_heads"), cfg.num_heads));
    cfg.kv_groups_mid = static_cast<int>(c.get_int(key("kv_groups_mid"), cfg.kv_groups_mid));
    cfg.patch_size = static_cast<int>(c.get_int(key("patch_size"), cfg.patch_size));
    cfg.image_height = static_cast<int>(c.get_int(key("image_height"), cfg.image_height));
    cfg.image_width = static_cast<int>(c.get_int(key("image_width"), cfg.image_width));
    cfg.ffn_hidden = static_cast<int>(c.get_int(key("ffn_hidden"), cfg.ffn_hidden));
    cfg.use_cls = c.get_bool(key("use_cls"), cfg.use_cls);
    const std::string lay = c.get_str(key("layout"), "");
    cfg.layout = lay.empty() ? AttentionLayout::flat(cfg.depth, cfg.num_heads, cfg.kv_groups_mid)
                             : AttentionLayout::parse(lay);
    cfg.validate();
    return cfg;
}

void BackboneConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    const auto key = [&](const char* k) { return prefix + "." + k; };
    c.set(key("hidden_size"), std::to_string(hidden_size));
    c.set(key("depth"), std::to_string(depth));
    c.set(key("num_heads"), std::to_string(num_heads));
    c.set(key("kv_groups_mid"), std::to_string(kv_groups_mid));
    c.set(key("patch_size"), std::to_string(patch_size));
    c.set(key("image_height"), std::to_string(image_height));
    c.set(key("image_width"), std::to_string(image_width));
    c.set(key("ffn_hidden"), std::to_string(ffn_hidden));
    c.set(key("use_cls"), use_cls ? "true" : "false");
    c.set(key("layout"), layout.to_string());
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

namespace {
int layer_groups(const BackboneConfig& cfg, int i) {
    const LayerSpec& ls = cfg.layout.layers[static_cast<size_t>(i)];
    return ls.kind == AttnKind::grouped ? ls.groups : cfg.num_heads;
}
}  // namespace

int64_t backbone_param_count(const BackboneConfig& cfg) {
    const int64_t d = cfg.hidden_size, hd = cfg.head_dim(), f = cfg.ffn();
    const int64_t p2 = static_cast<int64_t>(cfg.patch_size) * cfg.patch_size;
    int64_t n = 3 * p2 * d + d;                        // patch embed
    n += static_cast<int64_t>(cfg.tokens()) * d;       // positional table
    if (cfg.use_cls) n += 2 * d;                       // cls token + its position
    for (int i = 0; i < cfg.depth; ++i) {
        const int64_t kv = static_cast<int64_t>(layer_groups(cfg, i)) * hd;
        n += d;                     // norm1
        n += d * d + d;             // q
        n += 2 * (d * kv + kv);     // k, v
        n += d * d + d;             // o
        n += 2 * hd;                // qk-norm gains
        n += d;                     // norm2
        n += 3 * d * f;             // swiglu
    }
    n += d;  // final norm
    return n;
}

std::string pos_table_name(int gh, int gw) {
    return "pos_table." + std::to_string(gh) + "x" + std::to_string(gw);
}

void ensure_pos_table(ParamStore& store, const BackboneConfig& cfg, int gh, int gw,
                      const Rng& root) {
    const std::string name = pos_table_name(gh, gw);
    if (!store.has(name)) init_normal(store, name, {gh * gw, cfg.hidden_size}, 0.02, root);
}

void init_backbone(ParamStore& store, const BackboneConfig& cfg, const Rng& root) {
    cfg.validate();
    const int d = cfg.hidden_size, hd = cfg.head_dim(), f = cfg.ffn();
    init_normal(store, "patch_embed.weight", {3 * cfg.patch_size * cfg.patch_size, d}, 0.02,
                root);
    init_const(store, "patch_embed.bias", {d}, 0.0);
    ensure_pos_table(store, cfg, cfg.grid_h(), cfg.grid_w(), root);
    if (cfg.use_cls) {
        init_normal(store, "cls.token", {1, d}, 0.02, root);
        init_normal(store, "cls.pos", {1, d}, 0.02, root);
    }
    for (int i = 0; i < cfg.depth; ++i) {
        init_block_params(store, "layer" + std::to_string(i) + ".", d,
                          layer_groups(cfg, i) * hd, hd, f, root);
    }
    init_const(store, "final_norm.gain", {d}, 1.0);
}

// ---------------------------------------------------------------------------
// numeric surface ops
// ---------------------------------------------------------------------------

TokenGrid patch_embed(const Tensor& image, const BackboneConfig& cfg, const ParamStore& store) {
    check(image.ndim() == 3 && image.dim(0) == 3 && image.dim(1) == cfg.image_height &&
              image.dim(2) == cfg.image_width,
          "patch_embed: image dims do not match config");
    Tape t;
    Var patches = patchify(t, t.leaf(image), cfg.patch_size);
    Var tok = linear(t, patches, t.leaf(store.at("patch_embed.weight")),
                     t.leaf(store.at("patch_embed.bias")));
    TokenGrid out;
    out.grid_h = cfg.grid_h();
    out.grid_w = cfg.grid_w();
    out.tokens = t.val(tok);
    if (cfg.use_cls) {
        out.cls = Tensor::from({cfg.hidden_size}, store.at("cls.token").data);
    }
    return out;
}

TokenGrid add_positional(const TokenGrid& grid, const Tensor& pos_table) {
    check(pos_table.ndim() == 2 && pos_table.rows() == grid.positions() &&
              pos_table.cols() == grid.tokens.cols(),
          "add_positional: table size mismatch");
    TokenGrid out = grid;
    for (int r = 0; r < out.rows(); ++r) {
        const int p = grid.dense() ? r : grid.index_map[static_cast<size_t>(r)];
        check(p >= 0 && p < grid.positions(), "add_positional: index_map out of range");
        for (int j = 0; j < out.tokens.cols(); ++j) out.tokens.at2(r, j) += pos_table.at2(p, j);
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    check(x.numel() == gain.numel(), "rms_norm: gain size mismatch");
    double ms = 0.0;
    for (double v : x.data) ms += v * v;
    const double r = std::sqrt(ms / static_cast<double>(x.numel()) + eps);
    Tensor out = x;
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = gain[i] * x[i] / r;
    return out;
}

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    check(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3, "grouped_attention: rank-3 required");
    const int h = q.dim(0), T = q.dim(1), d = q.dim(2);
    const int g = k.dim(0);
    check(k.dim(1) == T && k.dim(2) == d && v.dim(0) == g && v.dim(1) == T && v.dim(2) == d,
          "grouped_attention: k/v shape mismatch");
    check(g >= 1 && h % g == 0, "grouped_attention: heads not divisible by groups");
    auto to_rows = [T](const Tensor& src, int nh) {
        const int d = src.dim(2);
        Tensor out({T, nh * d});
        for (int hi = 0; hi < nh; ++hi) {
            for (int tt = 0; tt < T; ++tt) {
                for (int c = 0; c < d; ++c) out.at2(tt, hi * d + c) = src.at3(hi, tt, c);
            }
        }
        return out;
    };
    Tape t;
    Var o = attention(t, t.leaf(to_rows(q, h)), t.leaf(to_rows(k, g)), t.leaf(to_rows(v, g)), h,
                      g);
    return t.val(o);
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
    const int d = static_cast<int>(x.numel());
    check(w_gate.ndim() == 2 && w_gate.rows() == d, "swiglu_ffn: gate shape");
    Tape t;
    Var xr = t.leaf(Tensor::from({1, d}, x.data));
    Var gate = silu(t, matmul(t, xr, t.leaf(w_gate)));
    Var up = matmul(t, xr, t.leaf(w_up));
    Var out = matmul(t, mul(t, gate, up), t.leaf(w_down));
    return Tensor::from({static_cast<int>(t.val(out).numel())}, t.val(out).data);
}

std::vector<int> window_permutation(int gh, int gw, int ws) {
    check(ws >= 1 && gh % ws == 0 && gw % ws == 0, "window_permutation: grid not divisible");
    std::vector<int> perm;
    perm.reserve(static_cast<size_t>(gh) * gw);
    for (int by = 0; by < gh / ws; ++by) {
        for (int bx = 0; bx < gw / ws; ++bx) {
            for (int wy = 0; wy < ws; ++wy) {
                for (int wx = 0; wx < ws; ++wx) {
                    perm.push_back((by * ws + wy) * gw + bx * ws + wx);
                }
            }
        }
    }
    return perm;
}

std::vector<TokenGrid> window_partition(const TokenGrid& grid, int ws) {
    check(grid.dense(), "window_partition: dense grid required");
    const auto perm = window_permutation(grid.grid_h, grid.grid_w, ws);
    const int d = grid.tokens.cols();
    const int per = ws * ws;
    const int nwin = grid.positions() / per;
    std::vector<TokenGrid> out(static_cast<size_t>(nwin));
    for (int wi = 0; wi < nwin; ++wi) {
        TokenGrid& g = out[static_cast<size_t>(wi)];
        g.grid_h = g.grid_w = ws;
        g.tokens = Tensor({per, d});
        for (int r = 0; r < per; ++r) {
            const int src = perm[static_cast<size_t>(wi) * per + r];
            for (int j = 0; j < d; ++j) g.tokens.at2(r, j) = grid.tokens.at2(src, j);
        }
    }
    return out;
}

TokenGrid window_unpartition(const std::vector<TokenGrid>& windows, int gh, int gw, int ws) {
    const auto perm = window_permutation(gh, gw, ws);
    check(!windows.empty(), "window_unpartition: empty window list");
    const int per = ws * ws;
    check(static_cast<int>(windows.size()) * per == gh * gw,
          "window_unpartition: window count mismatch");
    const int d = windows[0].tokens.cols();
    TokenGrid out;
    out.grid_h = gh;
    out.grid_w = gw;
    out.tokens = Tensor({gh * gw, d});
    for (size_t wi = 0; wi < windows.size(); ++wi) {
        check(windows[wi].rows() == per, "window_unpartition: bad window size");
        for (int r = 0; r < per; ++r) {
            const int dst = perm[wi * static_cast<size_t>(per) + static_cast<size_t>(r)];
            for (int j = 0; j < d; ++j) out.tokens.at2(dst, j) = windows[wi].tokens.at2(r, j);
        }
    }
    return out;
}

Tensor cls_guided_pool(const TokenGrid& window, const Tensor& cls) {
    const int n = window.rows(), d = window.tokens.cols();
    check(n > 0, "cls_guided_pool: empty window");
    check(static_cast<int>(cls.numel()) == d, "cls_guided_pool: cls dim mismatch");
    std::vector<double> score(static_cast<size_t>(n));
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    double mx = -1e300;
    for (int r = 0; r < n; ++r) {
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += window.tokens.at2(r, j) * cls[j];
        score[static_cast<size_t>(r)] = dot * sc;
        mx = std::max(mx, score[static_cast<size_t>(r)]);
    }
    double z = 0.0;
    for (auto& s : score) {
        s = std::exp(s - mx);
        z += s;
    }
    Tensor out({d});
    for (int r = 0; r < n; ++r) {
        const double a = score[static_cast<size_t>(r)] / z;
        for (int j = 0; j < d; ++j) out[j] += a * window.tokens.at2(r, j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// tape forward
// ---------------------------------------------------------------------------

Var embed_image(Tape& t, Binding& w, const BackboneConfig& cfg, Var image) {
    const Tensor& img = t.val(image);
    check(img.ndim() == 3 && img.dim(0) == 3, "embed_image: [3,H,W] required");
    check(img.dim(1) % cfg.patch_size == 0 && img.dim(2) % cfg.patch_size == 0,
          "embed_image: image dims not divisible by patch size");
    Var patches = patchify(t, image, cfg.patch_size);
    return linear(t, patches, w["patch_embed.weight"], w["patch_embed.bias"]);
}

namespace {

struct WindowSpan {
    int begin;
    int count;
};

Var block_forward(Tape& t, Binding& w, const std::string& pre, Var x, int heads, int groups,
                  const std::vector<WindowSpan>* windows) {
    Var h1 = rms_norm_rows(t, x, w[pre + "norm1.gain"], kNormEps);
    Var q = linear(t, h1, w[pre + "attn.q.weight"], w[pre + "attn.q.bias"]);
    Var k = linear(t, h1, w[pre + "attn.k.weight"], w[pre + "attn.k.bias"]);
    Var v = linear(t, h1, w[pre + "attn.v.weight"], w[pre + "attn.v.bias"]);
    q = rms_norm_heads(t, q, w[pre + "attn.qnorm.gain"], heads, kNormEps);
    k = rms_norm_heads(t, k, w[pre + "attn.knorm.gain"], groups, kNormEps);
    Var a;
    if (windows == nullptr) {
        a = attention(t, q, k, v, heads, groups);
    } else {
        std::vector<Var> outs;
        outs.reserve(windows->size());
        for (const WindowSpan& span : *windows) {
            outs.push_back(attention(t, slice_rows(t, q, span.begin, span.count),
                                     slice_rows(t, k, span.begin, span.count),
                                     slice_rows(t, v, span.begin, span.count), heads, groups));
        }
        a = concat_rows(t, outs);
    }
    Var o = linear(t, a, w[pre + "attn.o.weight"], w[pre + "attn.o.bias"]);
    Var x1 = add(t, x, o);
    Var h2 = rms_norm_rows(t, x1, w[pre + "norm2.gain"], kNormEps);
    Var gate = silu(t, matmul(t, h2, w[pre + "ffn.gate.weight"]));
    Var up = matmul(t, h2, w[pre + "ffn.up.weight"]);
    Var down = matmul(t, mul(t, gate, up), w[pre + "ffn.down.weight"]);
    return add(t, x1, down);
}

std::vector<int> identity_map(int n) {
    std::vector<int> m(static_cast<size_t>(n));
    std::iota(m.begin(), m.end(), 0);
    return m;
}

}  // namespace

Var transformer_block(Tape& t, Binding& w, const std::string& prefix, Var x, int heads,
                      int groups) {
    return block_forward(t, w, prefix, x, heads, groups, nullptr);
}

void init_block_params(ParamStore& store, const std::string& prefix, int dim, int kv_dim,
                       int head_dim, int ffn_hidden, const Rng& root) {
    init_const(store, prefix + "norm1.gain", {dim}, 1.0);
    init_normal(store, prefix + "attn.q.weight", {dim, dim}, 0.02, root);
    init_const(store, prefix + "attn.q.bias", {dim}, 0.0);
    init_normal(store, prefix + "attn.k.weight", {dim, kv_dim}, 0.02, root);
    init_const(store, prefix + "attn.k.bias", {kv_dim}, 0.0);
    init_normal(store, prefix + "attn.v.weight", {dim, kv_dim}, 0.02, root);
    init_const(store, prefix + "attn.v.bias", {kv_dim}, 0.0);
    init_normal(store, prefix + "attn.o.weight", {dim, dim}, 0.02, root);
    init_const(store, prefix + "attn.o.bias", {dim}, 0.0);
    init_const(store, prefix + "attn.qnorm.gain", {head_dim}, 1.0);
    init_const(store, prefix + "attn.knorm.gain", {head_dim}, 1.0);
    init_const(store, prefix + "norm2.gain", {dim}, 1.0);
    init_normal(store, prefix + "ffn.gate.weight", {dim, ffn_hidden}, 0.02, root);
    init_normal(store, prefix + "ffn.up.weight", {dim, ffn_hidden}, 0.02, root);
    init_normal(store, prefix + "ffn.down.weight", {ffn_hidden, dim}, 0.02, root);
}

BackboneOut encode_tokens(Tape& t, Binding& w, const BackboneConfig& cfg, Var tokens, int gh,
                          int gw, const EncodeOptions& opt) {
    const int rows = t.val(tokens).rows();
    const int d = cfg.hidden_size;
    check(t.val(tokens).cols() == d, "encode_tokens: token width != hidden size");
    const bool sparse = !opt.index_map.empty();
    const bool windowed = cfg.layout.windowed();
    if (sparse) {
        check(!windowed, "encode_tokens: sparse input to windowed local stage");
        check(static_cast<int>(opt.index_map.size()) == rows,
              "encode_tokens: index_map size mismatch");
        for (int p : opt.index_map) {
            check(p >= 0 && p < gh * gw, "encode_tokens: index_map out of range");
        }
    } else {
        check(rows == gh * gw, "encode_tokens: dense grid row count mismatch");
    }
    if (opt.pooled_mask != nullptr) check(windowed, "encode_tokens: pooled mask needs windowed layout");

    Var pos = w[pos_table_name(gh, gw)];
    if (sparse) pos = gather_rows(t, pos, opt.index_map);
    Var x = add(t, tokens, pos);

    Var cls_row{};
    if (cfg.use_cls) cls_row = add(t, w["cls.token"], w["cls.pos"]);

    BackboneOut out;
    if (!windowed) {
        Var seq = cfg.use_cls ? concat_rows(t, {cls_row, x}) : x;
        for (int i = 0; i < cfg.depth; ++i) {
            seq = transformer_block(t, w, "layer" + std::to_string(i) + ".", seq, cfg.num_heads,
                                    layer_groups(cfg, i));
        }
        Var fin = rms_norm_rows(t, seq, w["final_norm.gain"], kNormEps);
        out.grid_h = gh;
        out.grid_w = gw;
        out.index_map = sparse ? opt.index_map : identity_map(rows);
        if (cfg.use_cls) {
            out.cls = slice_rows(t, fin, 0, 1);
            out.tokens = slice_rows(t, fin, 1, rows);
        } else {
            out.tokens = fin;
        }
        return out;
    }

    // local stage: tokens regrouped so each window is a contiguous row span
    const int ws = cfg.layout.window_side;
    check(gh % ws == 0 && gw % ws == 0, "encode_tokens: grid not divisible by window side");
    const int per = ws * ws;
    const int nwin = rows / per;
    Var xp = gather_rows(t, x, window_permutation(gh, gw, ws));
    std::vector<WindowSpan> spans;
    spans.reserve(static_cast<size_t>(nwin));
    for (int i = 0; i < nwin; ++i) spans.push_back({i * per, per});
    for (int i = 0; i < cfg.layout.local_layers; ++i) {
        xp = block_forward(t, w, "layer" + std::to_string(i) + ".", xp, cfg.num_heads,
                                 cfg.num_heads, &spans);
    }

    // pooled token wi lands at pooled-grid position wi (windows are row-major)
    Var guide = cfg.use_cls ? cls_row : t.leaf(Tensor({1, d}));
    Var guide_col = transpose(t, guide);
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Var> pooled_rows;
    pooled_rows.reserve(static_cast<size_t>(nwin));
    for (int i = 0; i < nwin; ++i) {
        Var win = slice_rows(t, xp, i * per, per);
        Var scores = scale(t, matmul(t, win, guide_col), sc);
        Var alpha = softmax_rows(t, reshape(t, scores, {1, per}));
        pooled_rows.push_back(matmul(t, alpha, win));
    }
    Var pooled = concat_rows(t, pooled_rows);

    const int ph = gh / ws, pw = gw / ws;
    std::vector<int> pooled_map = identity_map(nwin);
    if (opt.pooled_mask != nullptr) {
        const Mask& m = *opt.pooled_mask;
        check(m.grid_h == ph && m.grid_w == pw, "encode_tokens: pooled mask geometry mismatch");
        std::vector<int> vis;
        for (int p = 0; p < m.size(); ++p) {
            if (!m.bits[static_cast<size_t>(p)]) vis.push_back(p);
        }
        check(!vis.empty(), "encode_tokens: pooled mask leaves no tokens");
        pooled = gather_rows(t, pooled, vis);
        pooled_map = std::move(vis);
    }

    Var seq = cfg.use_cls ? concat_rows(t, {cls_row, pooled}) : pooled;
    for (int i = cfg.layout.local_layers; i < cfg.depth; ++i) {
        seq = transformer_block(t, w, "layer" + std::to_string(i) + ".", seq, cfg.num_heads,
                                layer_groups(cfg, i));
    }
    Var fin = rms_norm_rows(t, seq, w["final_norm.gain"], kNormEps);
    out.grid_h = ph;
    out.grid_w = pw;
    out.index_map = std::move(pooled_map);
    const int prows = static_cast<int>(out.index_map.size());
    if (cfg.use_cls) {
        out.cls = slice_rows(t, fin, 0, 1);
        out.tokens = slice_rows(t, fin, 1, prows);
    } else {
        out.tokens = fin;
    }
    return out;
}

BackboneOut backbone_forward(Tape& t, Binding& w, const BackboneConfig& cfg, Var image,
                             const Mask* mask) {
    const Tensor& img = t.val(image);
    const int gh = img.dim(1) / cfg.patch_size;
    const int gw = img.dim(2) / cfg.patch_size;
    Var tokens = embed_image(t, w, cfg, image);
    EncodeOptions opt;
    if (cfg.layout.windowed()) {
        opt.pooled_mask = mask;
        return encode_tokens(t, w, cfg, tokens, gh, gw, opt);
    }
    if (mask != nullptr) {
        check(mask->grid_h == gh && mask->grid_w == gw,
              "backbone_forward: mask geometry mismatch");
        std::vector<int> vis;
        for (int p = 0; p < mask->size(); ++p) {
            if (!mask->bits[static_cast<size_t>(p)]) vis.push_back(p);
        }
        check(!vis.empty(), "backbone_forward: mask leaves no visible tokens");
        tokens = gather_rows(t, tokens, vis);
        opt.index_map = std::move(vis);
    }
    return encode_tokens(t, w, cfg, tokens, gh, gw, opt);
}

}  // namespace sapiens
