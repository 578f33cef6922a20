#pragma once

#include <functional>
#include <vector>

#include "sapiens/tensor.hpp"

namespace sapiens {

// Handle into a Tape's node arena.
struct Var {
    int32_t id{-1};
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape over Tensors. Nodes are appended in evaluation
// order, so reverse creation order is a valid topological order for the
// backward sweep. A tape is built per training step and reset afterwards.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor v) { return alloc(std::move(v), {}); }
    Var leaf(const std::vector<int>& shape, std::vector<double> d) {
        return leaf(Tensor::from(shape, std::move(d)));
    }

    Var alloc(Tensor v, std::function<void()> bwd) {
        nodes_.push_back(Node{std::move(v), Tensor{}, false, std::move(bwd)});
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    // Attach the backward closure after allocation, so the closure can capture
    // the node's own handle.
    void set_bwd(Var v, std::function<void()> bwd) {
        nodes_[static_cast<size_t>(v.id)].bwd = std::move(bwd);
    }

    Tensor& val(Var v) { return nodes_[static_cast<size_t>(v.id)].val; }
    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].val; }

    // Gradient buffer, zero-initialized on first touch.
    Tensor& grad(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.has_grad) {
            n.grad = Tensor(n.val.shape);
            n.has_grad = true;
        }
        return n.grad;
    }
    bool has_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].has_grad; }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order.
    void backward(Var loss);

    size_t size() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool has_grad{false};
        std::function<void()> bwd;
    };
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var divide(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var add_scalar(Tape& t, Var a, double c);
Var mul_svar(Tape& t, Var a, Var s);  // s is a [1] scalar variable
Var silu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var expv(Tape& t, Var a);
Var logv(Tape& t, Var a);   // gradient clamped for non-positive inputs
Var sqrtv(Tape& t, Var a);  // gradient 0 at non-positive inputs

// ---------------------------------------------------------------------------
// matrix / rowwise (rank-2 operands)
// ---------------------------------------------------------------------------
Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var linear(Tape& t, Var x, Var w, Var b);  // x[T,Din] * w[Din,Dout] + b[Dout]
Var softmax_rows(Tape& t, Var x);
Var log_softmax_rows(Tape& t, Var x);
Var rms_norm_rows(Tape& t, Var x, Var gain, double eps);
// Rowwise RMSNorm applied independently to each of `heads` chunks of the row;
// `gain` has the chunk width and is shared across heads.
Var rms_norm_heads(Tape& t, Var x, Var gain, int heads, double eps);
Var l2_normalize_rows(Tape& t, Var x, double eps);
Var colsum(Tape& t, Var x);  // [R,C] -> [C]
Var rowsum(Tape& t, Var x);  // [R,C] -> [R]
Var pick_per_row(Tape& t, Var x, const std::vector<int>& idx);  // [T,C] -> [T]

// Multi-head scaled-dot-product attention with grouped key/value heads.
// q:[T,h*d], k,v:[T,g*d]; query head i uses kv head i/(h/g); scale 1/sqrt(d).
Var attention(Tape& t, Var q, Var k, Var v, int heads, int kv_groups);

// ---------------------------------------------------------------------------
// shape / indexing (first dim = rows for any rank)
// ---------------------------------------------------------------------------
Var reshape(Tape& t, Var a, std::vector<int> shape);
Var gather_rows(Tape& t, Var x, std::vector<int> idx);
Var slice_rows(Tape& t, Var x, int begin, int count);
Var concat_rows(Tape& t, const std::vector<Var>& xs);
Var slice_cols(Tape& t, Var x, int begin, int count);
Var concat_cols(Tape& t, const std::vector<Var>& xs);
Var sum_all(Tape& t, Var a);
Var mean_all(Tape& t, Var a);
Var l2norm_vec(Tape& t, Var a);  // sqrt(sum of squares), gradient 0 at 0

// Rebuild a dense [N,D] sequence: visible positions (clear mask bits, in
// ascending index order) take rows of z_vis, masked positions take
// mask_token + pos_table row.
Var scatter_visible(Tape& t, Var z_vis, const std::vector<uint8_t>& mask_bits,
                    Var mask_token, Var pos_table);

// ---------------------------------------------------------------------------
// image ops, [C,H,W] layout
// ---------------------------------------------------------------------------
// Non-overlapping p x p patches, row-major over the (H/p, W/p) grid; each row
// is the patch flattened in (c, py, px) order.
Var patchify(Tape& t, Var img, int p);
Var conv2d(Tape& t, Var x, Var w, Var b, int kh, int kw, int stride, int pad);
Var conv_transpose2d(Tape& t, Var x, Var w, Var b, int kh, int kw, int stride, int pad);
Var pixel_shuffle(Tape& t, Var x, int r);
// Forward differences along x then y, stacked: out[0..C) = d/dx, out[C..2C) = d/dy.
Var finite_diff(Tape& t, Var x);
Var channel_l2norm(Tape& t, Var x);        // [C,H,W] -> [H,W], gradient 0 at 0
Var channel_sum(Tape& t, Var x);           // [C,H,W] -> [H,W]
Var normalize_channels(Tape& t, Var x, double eps);  // unit per pixel
Var masked_mean(Tape& t, Var x, const Tensor& mask);            // [H,W] -> [1]
Var masked_mean_channels(Tape& t, Var x, const Tensor& mask);   // [C,H,W] -> [C]

// numeric (non-tape) helpers shared with the ops
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad);
Tensor col2im(const Tensor& cols, int channels, int out_h, int out_w, int kh, int kw,
              int stride, int pad);

}  // namespace sapiens
