// 4D occupancy scene tokenizer: learnable category embedding, strided 3D
// conv encoder with cross-channel attention, nearest-code quantization with a
// straight-through gradient, mirrored transposed-conv decoder, and the
// vector-quantization training objective (reconstruction + codebook + commit).
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "occ4d/core.hpp"
#include "occ4d/nn/autodiff.hpp"
#include "occ4d/nn/optim.hpp"
#include "occ4d/nn/rng.hpp"

namespace occ4d::tok {

struct TokenizerConfig {
    int num_classes = 8;
    int grid_depth = 4;        // D; folded into channels with the embedding
    int class_embed_dim = 2;   // c'
    int levels = 2;            // L downsample stages
    int latent_channels = 16;  // c, the code dimension
    int codebook_size = 64;    // N
    int attn_groups = 8;
    double commitment_beta = 0.25;
    double dropout = 0.0;       // active only in training forward passes
    int dead_code_steps = 200;  // 0 disables dead-code reinit

    int base_channels() const { return grid_depth * class_embed_dim; }
    int deep_channels() const { return base_channels() << levels; }

    // Shape algebra for the token cell grid: each level halves (T, H, W).
    static std::array<int, 3> encoded_cells(const std::array<int, 3>& thw, int levels);

    // Throws ConfigError naming the offending field.
    void validate(const core::GridDims& dims) const;
};

struct TokenGrid {
    nn::Tensor values;              // (c, t', h', w')
    std::vector<int> code_indices;  // (t'*h'*w') row-major; empty when absent
};

// Spatio-temporal cell compression ratio (channels excluded).
double compression_ratio(const std::array<int, 3>& input_thw, const std::array<int, 3>& token_thw);

struct ResBlockParams {
    nn::NodePtr w1, b1, w2, b2;
};

struct AttnParams {
    nn::NodePtr wq, wk, wv, wo;  // (d, d) with d = channels / attn_groups
};

struct ConvStage {
    nn::NodePtr w, b;  // strided (transposed) conv
    ResBlockParams res;
};

class Tokenizer {
public:
    static Tokenizer init(const TokenizerConfig& cfg, uint64_t seed);

    const TokenizerConfig& config() const { return cfg_; }
    std::vector<nn::NodePtr> parameters() const;
    nn::NodePtr codebook() const { return codebook_; }

    // (D*c', T, H, W); channel index d*c' + j
    nn::NodePtr embed_categories(const core::OccupancySequence& seq) const;

    // Continuous pre-quantization latent (c, t', h', w').
    nn::NodePtr encode_graph(const core::OccupancySequence& seq, bool training = false,
                             nn::Rng* rng = nullptr) const;
    nn::Tensor encode(const core::OccupancySequence& seq) const;

    // Nearest-code snap; ties resolve to the lowest code index.
    TokenGrid quantize(const nn::Tensor& latent) const;

    // Per-voxel class logits (num_classes, T, H, W, D).
    nn::NodePtr decode_graph(const nn::NodePtr& tokens, bool training = false,
                             nn::Rng* rng = nullptr) const;
    nn::Tensor decode(const TokenGrid& tokens) const;

    // argmax over classes, lowest index wins ties
    core::OccupancySequence logits_to_sequence(const nn::Tensor& logits,
                                               const core::ClassVocabulary& vocab) const;
    core::OccupancySequence reconstruct(const core::OccupancySequence& seq) const;

    struct LossGraph {
        nn::NodePtr total, recon, codebook, commit;
        nn::NodePtr latent;  // pre-quantization (c, S)
        nn::NodePtr values;  // straight-through output (c, S)
        std::vector<int> indices;
    };
    LossGraph loss_graph(const core::OccupancySequence& seq, bool training = false,
                         nn::Rng* rng = nullptr) const;

    struct LossParts {
        double recon = 0, codebook = 0, commit = 0, total = 0;
    };
    LossParts loss(const core::OccupancySequence& seq) const;

    const std::vector<long long>& usage_counts() const { return usage_counts_; }
    std::vector<long long>& usage_counts() { return usage_counts_; }
    std::vector<int>& steps_since_use() { return steps_since_use_; }

private:
    TokenizerConfig cfg_;
    nn::NodePtr class_embed_;           // (num_classes, c')
    std::vector<ConvStage> enc_;
    AttnParams enc_attn_;
    nn::NodePtr enc_proj_w_, enc_proj_b_;  // deep -> c
    nn::NodePtr codebook_;                 // (N, c)
    nn::NodePtr dec_proj_w_, dec_proj_b_;  // c -> deep
    AttnParams dec_attn_;
    std::vector<ConvStage> dec_;
    nn::NodePtr head_w_, head_b_;  // base -> D*num_classes
    std::vector<long long> usage_counts_;
    std::vector<int> steps_since_use_;
};

struct TokenizerTrainRecord {
    long long step = 0;
    double recon = 0, codebook = 0, commit = 0, total = 0;
};

class TokenizerTrainer {
public:
    TokenizerTrainer(Tokenizer model, double lr, double weight_decay, uint64_t seed);

    Tokenizer& model() { return model_; }
    const Tokenizer& model() const { return model_; }
    nn::AdamW& optimizer() { return opt_; }
    long long step_count() const { return step_; }

    TokenizerTrainRecord step(const std::vector<const core::OccupancySequence*>& batch);

    // OTK1 container; saving rounds the live state through float32
    void save_checkpoint(const std::string& path);
    static TokenizerTrainer load_checkpoint(const std::string& path);

private:
    Tokenizer model_;
    nn::AdamW opt_;
    nn::Rng rng_;
    long long step_ = 0;
};

}  // namespace occ4d::tok
