#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mft/masking.hpp"
#include "mft/tensor.hpp"

namespace mft {

struct PruneSchedule;  // pruning.hpp

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int channels = 3;
    int embed_dim = 192;
    int depth = 6;
    int heads = 3;
    int mlp_ratio = 4;
    int num_classes = 10;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }  // L, patch tokens
    int patch_dim() const { return channels * patch_size * patch_size; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Field names that differ between two configs (for mismatch diagnostics).
std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b);

// Class-token vision transformer with pre-norm blocks and learned positional
// embeddings; the class token sits at index 0 and is never masked or pruned.
struct ViTModel {
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor qkv_w, qkv_b;    // (D, 3D), (3D)
        Tensor proj_w, proj_b;  // (D, D), (D)
        Tensor ln2_g, ln2_b;
        Tensor fc1_w, fc1_b;  // (D, mlp_ratio*D)
        Tensor fc2_w, fc2_b;  // (mlp_ratio*D, D)
    };

    ModelConfig cfg;
    Tensor patch_w, patch_b;  // (C*p*p, D), (D)
    Tensor cls_token;         // (1, 1, D)
    Tensor pos_embed;         // (1, L+1, D)
    std::vector<Block> blocks;
    Tensor ln_f_g, ln_f_b;
    Tensor head_w, head_b;  // (D, K), (K)

    static ViTModel init(const ModelConfig& cfg, uint64_t seed);

    // Stable (name, tensor) list; every parameter appears exactly once.
    std::vector<std::pair<std::string, Tensor>> parameters();
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    void set_requires_grad(bool r);
    void zero_grads();
    int64_t param_count() const;
};

enum class MaskMode { kDrop, kAttnMask };

struct ForwardOutput {
    Tensor logits;  // (N, num_classes)
    // Head-averaged attention of the class-token query over the patch tokens
    // attended in each block, renormalized to sum to 1; [block][sample].
    std::vector<std::vector<std::vector<float>>> cls_attn;
    // Original patch indices alive in each stage, ascending; [stage][sample].
    // Stage 0 is the input token set; later stages exist under pruning.
    std::vector<std::vector<std::vector<int>>> stage_kept;
    std::vector<int> block_stage;  // block -> stage index
};

struct ForwardOptions {
    const MaskPlan* mask_plan = nullptr;
    MaskMode mask_mode = MaskMode::kDrop;
    const PruneSchedule* schedule = nullptr;
    uint64_t prune_seed = 0;                        // random selector stream
    const std::vector<uint64_t>* sample_keys = nullptr;  // per-sample stream keys
};

// Linear projection of non-overlapping patches, row-major over the grid.
Tensor patch_embed(const ViTModel& model, const Tensor& images, Tape* tape);

// patch_embed plus positional embeddings for the patch positions. Selection
// always happens after this point, so kept tokens retain positional identity.
Tensor embed_patches(const ViTModel& model, const Tensor& images, Tape* tape);

ForwardOutput vit_forward(const ViTModel& model, const Tensor& images, Tape* tape,
                          const ForwardOptions& opts = {});

// Same as vit_forward but starting from already-embedded patch tokens (N,L,D).
ForwardOutput vit_forward_from_patches(const ViTModel& model, const Tensor& patch_tokens,
                                       Tape* tape, const ForwardOptions& opts = {});

// Analytic inference cost in GFLOPs, one entry of token_counts per block;
// multiply-accumulate counted as one operation.
double flops_gflops(const ModelConfig& cfg, const std::vector<int>& token_counts);

}  // namespace mft
