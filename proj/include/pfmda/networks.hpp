#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pfmda/attention.hpp"
#include "pfmda/ops.hpp"
#include "pfmda/parameters.hpp"

namespace pfmda {

inline constexpr std::size_t kPfmBlocks = 3;

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t in_channels = 3;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t head_channels = 8;  // channels produced by the unpatch projection
    std::size_t conv_width = 16;

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            throw DimensionError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                                 std::to_string(patch_size));
        if (heads == 0 || embed_dim % heads != 0)
            throw DimensionError("embed dim " + std::to_string(embed_dim) + " not divisible by heads " +
                                 std::to_string(heads));
        if (in_channels == 0 || head_channels == 0 || conv_width == 0 || ffn_mult == 0)
            throw DimensionError("model widths must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class Mode { Train, Eval };

/// Conv3×3+BN+ReLU, Conv3×3+BN+ReLU, Conv3×3+Sigmoid.
struct ConvHead {
    Tensor conv0_w, conv0_b, bn0_g, bn0_b;
    Tensor conv1_w, conv1_b, bn1_g, bn1_b;
    Tensor conv2_w, conv2_b;
    BatchNormStats bn0, bn1;

    template <class Rng>
    ConvHead(ParameterStore& store, const std::string& prefix, std::size_t in_ch, std::size_t width, Rng& rng) {
        conv0_w = store.add(prefix + ".conv0_w", scaled_normal({width, in_ch, 3, 3}, in_ch * 9, rng, 2.0));
        conv0_b = store.add(prefix + ".conv0_b", Tensor::zeros({width}));
        bn0_g = store.add(prefix + ".bn0_g", Tensor::full({width}, 1.0));
        bn0_b = store.add(prefix + ".bn0_b", Tensor::zeros({width}));
        conv1_w = store.add(prefix + ".conv1_w", scaled_normal({width, width, 3, 3}, width * 9, rng, 2.0));
        conv1_b = store.add(prefix + ".conv1_b", Tensor::zeros({width}));
        bn1_g = store.add(prefix + ".bn1_g", Tensor::full({width}, 1.0));
        bn1_b = store.add(prefix + ".bn1_b", Tensor::zeros({width}));
        conv2_w = store.add(prefix + ".conv2_w", scaled_normal({1, width, 3, 3}, width * 9, rng));
        conv2_b = store.add(prefix + ".conv2_b", Tensor::zeros({1}));
        bn0.mean = store.add(prefix + ".bn0_running_mean", Tensor::zeros({width}), false);
        bn0.var = store.add(prefix + ".bn0_running_var", Tensor::full({width}, 1.0), false);
        bn1.mean = store.add(prefix + ".bn1_running_mean", Tensor::zeros({width}), false);
        bn1.var = store.add(prefix + ".bn1_running_var", Tensor::full({width}, 1.0), false);
    }

    /// B×C×H×W -> B×1×H×W in (0,1).
    Tensor forward(const Tensor& x, Mode mode) const {
        const bool training = mode == Mode::Train;
        Tensor h = relu(batch_norm(conv3x3(x, conv0_w, conv0_b), bn0_g, bn0_b, bn0, training));
        h = relu(batch_norm(conv3x3(h, conv1_w, conv1_b), bn1_g, bn1_b, bn1, training));
        return sigmoid(conv3x3(h, conv2_w, conv2_b));
    }
};

/// The parameter set shared by Agg and Infer: patch embedder, three PFM
/// blocks, unpatch projection, and conv head.
class DoseModel {
public:
    DoseModel(const ModelConfig& cfg, std::uint64_t seed) : DoseModel(cfg, seed, 0) {}

    DoseModel(const DoseModel&) = delete;
    DoseModel& operator=(const DoseModel&) = delete;
    DoseModel(DoseModel&&) = default;

    /// Deep value copy with fresh storage.
    DoseModel clone() const {
        DoseModel copy(config_, 0, 0);
        copy.store_.copy_values_from(store_);
        return copy;
    }

    const ModelConfig& config() const { return config_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }

    const PatchEmbedder& embedder() const { return embedder_; }
    const std::vector<PFMBlock>& blocks() const { return blocks_; }
    const ConvHead& head() const { return head_; }

    Tensor embed(const Tensor& x) const {
        if (x.dim() != 3 || x.extent(1) != config_.image_size || x.extent(2) != config_.image_size)
            throw DimensionError("model expects " + std::to_string(config_.in_channels) + "x" +
                                 std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size) +
                                 " input, got " + shape_str(x.shape()));
        return embed_patches(x, embedder_);
    }

    /// Per-sample N×d tokens -> B×1×H×W dose maps via unpatch projection and conv head.
    Tensor decode(const std::vector<Tensor>& tokens, Mode mode) const {
        std::vector<Tensor> maps;
        maps.reserve(tokens.size());
        const auto s = config_.image_size;
        for (const auto& t : tokens)
            maps.push_back(unpatchify(linear(t, unpatch_w_, unpatch_b_), config_.head_channels, s, s,
                                      config_.patch_size));
        return head_.forward(stack(maps), mode);
    }

private:
    DoseModel(const ModelConfig& cfg, std::uint64_t seed, int)
        : config_((cfg.validate(), cfg)),
          init_rng_(seed),
          embedder_(store_, "embed", cfg.in_channels, cfg.patch_size, cfg.image_size, cfg.image_size, cfg.embed_dim,
                    init_rng_),
          blocks_(make_blocks(cfg)),
          unpatch_w_(store_.add("unpatch.w",
                                scaled_normal({cfg.embed_dim, cfg.head_channels * cfg.patch_size * cfg.patch_size},
                                              cfg.embed_dim, init_rng_))),
          unpatch_b_(store_.add("unpatch.b", Tensor::zeros({cfg.head_channels * cfg.patch_size * cfg.patch_size}))),
          head_(store_, "head", cfg.head_channels, cfg.conv_width, init_rng_) {}

    std::vector<PFMBlock> make_blocks(const ModelConfig& cfg) {
        std::vector<PFMBlock> out;
        out.reserve(kPfmBlocks);
        for (std::size_t i = 0; i < kPfmBlocks; ++i)
            out.emplace_back(store_, "block" + std::to_string(i), cfg.embed_dim, cfg.heads, cfg.ffn_mult, init_rng_);
        return out;
    }

    ModelConfig config_;
    ParameterStore store_;
    std::mt19937_64 init_rng_;
    PatchEmbedder embedder_;
    std::vector<PFMBlock> blocks_;
    Tensor unpatch_w_, unpatch_b_;
    ConvHead head_;
};

/// Aggregated network: source and target token streams through three PFMs.
struct AggNetwork {
    DoseModel model;
    bool polymerized = true;  // evaluate the cross-attention branch b_p

    AggNetwork(const ModelConfig& cfg, std::uint64_t seed, bool polymerized_ = true)
        : model(cfg, seed), polymerized(polymerized_) {}
    AggNetwork(DoseModel m, bool polymerized_) : model(std::move(m)), polymerized(polymerized_) {}
};

/// Inference network: the target (b_t) wiring only.
struct InferNetwork {
    DoseModel model;

    InferNetwork(const ModelConfig& cfg, std::uint64_t seed) : model(cfg, seed) {}
    explicit InferNetwork(DoseModel m) : model(std::move(m)) {}
};

struct AggOutput {
    Tensor y_s;  // B×1×H×W
    Tensor y_t;  // B×1×H×W
    std::array<std::vector<BranchOutputs>, kPfmBlocks> per_block;  // [block][sample]
};

/// Block i+1 consumes (p_s, p_t) of block i; p_p feeds only the bridge loss.
inline AggOutput agg_forward(const AggNetwork& net, const std::vector<Tensor>& x_s, const std::vector<Tensor>& x_t,
                             Mode mode = Mode::Train) {
    if (x_s.empty() || x_s.size() != x_t.size())
        throw DimensionError("agg_forward: source and target batches must be non-empty and equally sized");
    const auto& m = net.model;
    AggOutput out;
    std::vector<Tensor> src(x_s.size()), tgt(x_t.size());
    for (std::size_t b = 0; b < x_s.size(); ++b) {
        src[b] = m.embed(x_s[b]);
        tgt[b] = m.embed(x_t[b]);
    }
    for (std::size_t i = 0; i < kPfmBlocks; ++i) {
        auto& level = out.per_block[i];
        level.reserve(src.size());
        for (std::size_t b = 0; b < src.size(); ++b) {
            level.push_back(pfm_forward(src[b], tgt[b], m.blocks()[i], net.polymerized));
            src[b] = level.back().p_s;
            tgt[b] = level.back().p_t;
        }
    }
    out.y_s = m.decode(src, mode);
    out.y_t = m.decode(tgt, mode);
    return out;
}

inline InferNetwork build_infer_from_agg(const AggNetwork& net) { return InferNetwork(net.model.clone()); }

/// Returns B×1×H×W dose maps.
inline Tensor infer_forward(const InferNetwork& net, const std::vector<Tensor>& x_t, Mode mode = Mode::Train) {
    if (x_t.empty()) throw DimensionError("infer_forward: empty batch");
    const auto& m = net.model;
    std::vector<Tensor> tokens;
    tokens.reserve(x_t.size());
    for (const auto& x : x_t) {
        Tensor t = m.embed(x);
        for (const auto& block : m.blocks()) t = msa(t, block);
        tokens.push_back(t);
    }
    return m.decode(tokens, mode);
}

/// Single-sample form returning 1×H×W.
inline Tensor infer_forward(const InferNetwork& net, const Tensor& x_t, Mode mode = Mode::Train) {
    return select(infer_forward(net, std::vector<Tensor>{x_t}, mode), 0);
}

}  // namespace pfmda
