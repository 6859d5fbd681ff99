#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "pfmda/ops.hpp"
#include "pfmda/parameters.hpp"

namespace pfmda {

/// Splits C×H×W into non-overlapping patches, projects each to `dim`, and adds
/// a learnable positional embedding.
struct PatchEmbedder {
    std::size_t patch_size = 8;
    std::size_t in_channels = 3;
    std::size_t dim = 64;
    std::size_t tokens = 0;
    Tensor proj_w;  // (C·p·p) × d
    Tensor proj_b;  // d
    Tensor pos;     // N × d

    template <class Rng>
    PatchEmbedder(ParameterStore& store, const std::string& prefix, std::size_t in_channels_, std::size_t patch,
                  std::size_t height, std::size_t width, std::size_t dim_, Rng& rng)
        : patch_size(patch), in_channels(in_channels_), dim(dim_) {
        if (patch == 0 || height % patch != 0 || width % patch != 0)
            throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) +
                                 " not divisible by patch size " + std::to_string(patch));
        tokens = (height / patch) * (width / patch);
        const std::size_t feat = in_channels * patch * patch;
        proj_w = store.add(prefix + ".proj_w", scaled_normal({feat, dim}, feat, rng));
        proj_b = store.add(prefix + ".proj_b", Tensor::zeros({dim}));
        pos = store.add(prefix + ".pos", Tensor::randn({tokens, dim}, rng, 0.02));
    }
};

inline Tensor embed_patches(const Tensor& x, const PatchEmbedder& e) {
    if (x.dim() != 3 || x.extent(0) != e.in_channels)
        throw DimensionError("embed_patches: expected " + std::to_string(e.in_channels) + " channels, got " +
                             shape_str(x.shape()));
    Tensor patches = patchify(x, e.patch_size);
    if (patches.extent(0) != e.tokens)
        throw DimensionError("embed_patches: input yields " + std::to_string(patches.extent(0)) +
                             " tokens, embedder expects " + std::to_string(e.tokens));
    return add(linear(patches, e.proj_w, e.proj_b), e.pos);
}

/// One pre-norm Transformer encoder parameter set. The same tensors serve the
/// source, target, and polymerized wirings.
struct PFMBlock {
    std::size_t dim = 64;
    std::size_t heads = 4;
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv;
    Tensor wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;

    template <class Rng>
    PFMBlock(ParameterStore& store, const std::string& prefix, std::size_t dim_, std::size_t heads_,
             std::size_t ffn_mult, Rng& rng)
        : dim(dim_), heads(heads_) {
        if (heads == 0 || dim % heads != 0)
            throw DimensionError("embed dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                                 " heads");
        const std::size_t hidden = ffn_mult * dim;
        ln1_g = store.add(prefix + ".ln1_g", Tensor::full({dim}, 1.0));
        ln1_b = store.add(prefix + ".ln1_b", Tensor::zeros({dim}));
        wq = store.add(prefix + ".wq", scaled_normal({dim, dim}, dim, rng));
        wk = store.add(prefix + ".wk", scaled_normal({dim, dim}, dim, rng));
        wv = store.add(prefix + ".wv", scaled_normal({dim, dim}, dim, rng));
        wo = store.add(prefix + ".wo", scaled_normal({dim, dim}, dim, rng));
        bo = store.add(prefix + ".bo", Tensor::zeros({dim}));
        ln2_g = store.add(prefix + ".ln2_g", Tensor::full({dim}, 1.0));
        ln2_b = store.add(prefix + ".ln2_b", Tensor::zeros({dim}));
        w1 = store.add(prefix + ".w1", scaled_normal({dim, hidden}, dim, rng, 2.0));
        b1 = store.add(prefix + ".b1", Tensor::zeros({hidden}));
        w2 = store.add(prefix + ".w2", scaled_normal({hidden, dim}, hidden, rng));
        b2 = store.add(prefix + ".b2", Tensor::zeros({dim}));
    }

    std::size_t head_dim() const { return dim / heads; }
};

/// softmax(Q Kᵀ / √(d/h)) V per head, heads concatenated then projected.
/// Queries come from `q_norm`, keys and values from `kv_norm`.
inline Tensor multi_head_attention(const Tensor& q_norm, const Tensor& kv_norm, const PFMBlock& block) {
    const Tensor q = matmul(q_norm, block.wq);
    const Tensor k = matmul(kv_norm, block.wk);
    const Tensor v = matmul(kv_norm, block.wv);
    const std::size_t hd = block.head_dim();
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    heads.reserve(block.heads);
    for (std::size_t h = 0; h < block.heads; ++h) {
        const Tensor qh = slice_cols(q, h * hd, hd);
        const Tensor kh = slice_cols(k, h * hd, hd);
        const Tensor vh = slice_cols(v, h * hd, hd);
        const Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale));
        heads.push_back(matmul(weights, vh));
    }
    const Tensor merged = block.heads == 1 ? heads[0] : concat_cols(heads);
    return linear(merged, block.wo, block.bo);
}

namespace detail {

inline void check_tokens(const char* op, const Tensor& t, const PFMBlock& block) {
    if (t.dim() != 2 || t.extent(1) != block.dim)
        throw DimensionError(std::string(op) + ": tokens " + shape_str(t.shape()) + " do not match block dim " +
                             std::to_string(block.dim));
}

// Residual stream follows the query tokens.
inline Tensor encoder_block(const Tensor& query_tokens, const Tensor& kv_tokens, const PFMBlock& block) {
    const Tensor q_norm = layer_norm(query_tokens, block.ln1_g, block.ln1_b);
    const Tensor kv_norm =
        kv_tokens.same_storage(query_tokens) ? q_norm : layer_norm(kv_tokens, block.ln1_g, block.ln1_b);
    const Tensor y = add(query_tokens, multi_head_attention(q_norm, kv_norm, block));
    const Tensor hidden = gelu(linear(layer_norm(y, block.ln2_g, block.ln2_b), block.w1, block.b1));
    return add(y, linear(hidden, block.w2, block.b2));
}

}  // namespace detail

/// Self-attention encoder block (the b_s / b_t wiring).
inline Tensor msa(const Tensor& tokens, const PFMBlock& block) {
    detail::check_tokens("msa", tokens, block);
    return detail::encoder_block(tokens, tokens, block);
}

/// Cross-attention encoder block (the b_p wiring): source queries, target keys/values.
inline Tensor mca(const Tensor& q_src, const Tensor& kv_tgt, const PFMBlock& block) {
    detail::check_tokens("mca", q_src, block);
    detail::check_tokens("mca", kv_tgt, block);
    if (q_src.shape() != kv_tgt.shape())
        throw DimensionError("mca: source " + shape_str(q_src.shape()) + " vs target " + shape_str(kv_tgt.shape()));
    return detail::encoder_block(q_src, kv_tgt, block);
}

struct BranchOutputs {
    Tensor p_s;
    Tensor p_t;
    Tensor p_p;  // undefined when the polymerized branch is disabled

    bool has_polymerized() const { return p_p.defined(); }
};

/// Runs all three wirings of one PFM over a source/target token pair.
inline BranchOutputs pfm_forward(const Tensor& src, const Tensor& tgt, const PFMBlock& block, bool polymerized = true) {
    BranchOutputs out;
    out.p_s = msa(src, block);
    out.p_t = msa(tgt, block);
    if (polymerized) out.p_p = mca(src, tgt, block);
    return out;
}

struct GeodesicReport {
    double d_sp = 0.0;
    double d_tp = 0.0;
    double d_st = 0.0;
    double ratio = 1.0;
    double slack = 0.0;
};

namespace detail {
inline double flat_distance(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("distance between " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    double ss = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(ss);
}

inline double distance_ratio(double d_sp, double d_tp) {
    if (d_tp == 0.0) return d_sp == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return d_sp / d_tp;
}
}  // namespace detail

/// Distances between the three branch outputs and the triangle slack
/// d_sp + d_tp - d_st, which is nonnegative by the triangle inequality.
inline GeodesicReport geodesic_report(const BranchOutputs& out) {
    if (!out.has_polymerized()) throw ContractError("geodesic_report needs the polymerized branch output");
    GeodesicReport r;
    r.d_sp = detail::flat_distance(out.p_s, out.p_p);
    r.d_tp = detail::flat_distance(out.p_t, out.p_p);
    r.d_st = detail::flat_distance(out.p_s, out.p_t);
    r.ratio = detail::distance_ratio(r.d_sp, r.d_tp);
    r.slack = r.d_sp + r.d_tp - r.d_st;
    return r;
}

/// Batch form: per-sample distances averaged over the batch.
inline GeodesicReport geodesic_report(const std::vector<BranchOutputs>& batch) {
    if (batch.empty()) throw ContractError("geodesic_report on empty batch");
    GeodesicReport r;
    for (const auto& b : batch) {
        const auto one = geodesic_report(b);
        r.d_sp += one.d_sp;
        r.d_tp += one.d_tp;
        r.d_st += one.d_st;
    }
    const double n = static_cast<double>(batch.size());
    r.d_sp /= n;
    r.d_tp /= n;
    r.d_st /= n;
    r.ratio = detail::distance_ratio(r.d_sp, r.d_tp);
    r.slack = r.d_sp + r.d_tp - r.d_st;
    return r;
}

}  // namespace pfmda
