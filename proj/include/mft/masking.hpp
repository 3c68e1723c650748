#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

// Per-batch keep/remove matrix plus bookkeeping. mask is 1 keep, 0 remove.
struct MaskPlan {
    int batch = 0;
    int tokens = 0;                     // L, patch tokens per sample
    std::vector<uint8_t> mask;          // batch * tokens
    std::vector<int> kept_counts;       // per sample
    std::vector<float> sampled_ratios;  // per sample
    uint64_t seed = 0;

    uint8_t keep(int sample, int token) const {
        return mask[size_t(sample) * size_t(tokens) + size_t(token)];
    }
    // Kept token indices of one sample, ascending.
    std::vector<int> kept_indices(int sample) const;
    bool all_kept() const;
};

struct MaskStrategy {
    enum class Kind { kNone, kSingle, kHybrid };
    Kind kind = Kind::kNone;
    float single_ratio = 0.f;
    std::vector<float> ratio_set = {0.f, 0.25f, 0.5f, 0.75f};
};

std::string to_string(MaskStrategy::Kind k);
MaskStrategy::Kind mask_kind_from_string(const std::string& s);

// Every row keeps exactly int(L * (1 - ratio)) tokens, uniform over subsets.
MaskPlan single_mask(int batch, int tokens, float ratio, uint64_t seed);

// Each sample draws one ratio uniformly from ratio_set; rows are produced via
// noise -> argsort -> argsort -> gather.
MaskPlan hybrid_mask(int batch, int tokens, const std::vector<float>& ratio_set,
                     uint64_t seed);

// Dispatch on strategy kind; kNone yields an all-keep plan.
MaskPlan make_plan(const MaskStrategy& strategy, int batch, int tokens, uint64_t seed);

// Kept token sequences of each sample in original relative order.
struct MaskedTokens {
    std::vector<Tensor> tokens;             // per sample, (kept_counts[i], D)
    std::vector<std::vector<int>> indices;  // per sample, ascending original indices
};
MaskedTokens apply(const MaskPlan& plan, const Tensor& tokens);

}  // namespace mft
