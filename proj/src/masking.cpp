#include "mft/masking.hpp"

#include <algorithm>
#include <stdexcept>

#include "mft/rng.hpp"

namespace mft {

std::vector<int> MaskPlan::kept_indices(int sample) const {
    std::vector<int> out;
    out.reserve(size_t(kept_counts[size_t(sample)]));
    const uint8_t* row = mask.data() + size_t(sample) * size_t(tokens);
    for (int j = 0; j < tokens; ++j) {
        if (row[j]) out.push_back(j);
    }
    return out;
}

bool MaskPlan::all_kept() const {
    for (uint8_t m : mask) {
        if (!m) return false;
    }
    return true;
}

std::string to_string(MaskStrategy::Kind k) {
    switch (k) {
        case MaskStrategy::Kind::kNone: return "none";
        case MaskStrategy::Kind::kSingle: return "single";
        case MaskStrategy::Kind::kHybrid: return "hybrid";
    }
    return "none";
}

MaskStrategy::Kind mask_kind_from_string(const std::string& s) {
    if (s == "none") return MaskStrategy::Kind::kNone;
    if (s == "single") return MaskStrategy::Kind::kSingle;
    if (s == "hybrid") return MaskStrategy::Kind::kHybrid;
    throw std::invalid_argument("unknown mask kind '" + s + "'");
}

namespace {

// Shared mask-matrix construction: per-sample keep counts are already chosen,
// rows come from noise -> ids_shuffle -> ids_restore -> gather.
MaskPlan build_plan(int batch, int tokens, std::vector<int> keep_counts,
                    std::vector<float> ratios, uint64_t seed, Rng& rng) {
    MaskPlan plan;
    plan.batch = batch;
    plan.tokens = tokens;
    plan.seed = seed;
    plan.kept_counts = std::move(keep_counts);
    plan.sampled_ratios = std::move(ratios);
    plan.mask.assign(size_t(batch) * size_t(tokens), 0);

    std::vector<float> noise(size_t(tokens));
    std::vector<uint8_t> sorted_row(size_t(tokens));
    for (int i = 0; i < batch; ++i) {
        for (int j = 0; j < tokens; ++j) noise[size_t(j)] = rng.uniform_f();
        const std::vector<int> ids_shuffle = argsort(noise);
        std::vector<int> ids_restore(size_t(tokens));
        for (int j = 0; j < tokens; ++j) ids_restore[size_t(ids_shuffle[size_t(j)])] = j;

        const int keep = plan.kept_counts[size_t(i)];
        for (int j = 0; j < tokens; ++j) sorted_row[size_t(j)] = j < keep ? 1 : 0;
        uint8_t* row = plan.mask.data() + size_t(i) * size_t(tokens);
        for (int j = 0; j < tokens; ++j) row[j] = sorted_row[size_t(ids_restore[size_t(j)])];
    }
    return plan;
}

int keep_count(int tokens, double ratio) {
    return int(double(tokens) * (1.0 - ratio));
}

}  // namespace

MaskPlan single_mask(int batch, int tokens, float ratio, uint64_t seed) {
    if (ratio < 0.f || ratio > 1.f) {
        throw std::invalid_argument("single_mask: ratio " + std::to_string(ratio) +
                                    " outside [0,1]");
    }
    Rng rng(seed);
    std::vector<int> counts(size_t(batch), keep_count(tokens, ratio));
    std::vector<float> ratios(size_t(batch), ratio);
    return build_plan(batch, tokens, std::move(counts), std::move(ratios), seed, rng);
}

MaskPlan hybrid_mask(int batch, int tokens, const std::vector<float>& ratio_set,
                     uint64_t seed) {
    if (ratio_set.empty()) throw std::invalid_argument("hybrid_mask: empty ratio set");
    for (float r : ratio_set) {
        if (r < 0.f || r > 1.f) {
            throw std::invalid_argument("hybrid_mask: ratio " + std::to_string(r) +
                                        " outside [0,1]");
        }
    }
    Rng rng(seed);
    // sample a mask ratio for each sample in the batch
    std::vector<int> counts(size_t(batch));
    std::vector<float> ratios(size_t(batch));
    const int m = int(ratio_set.size());
    for (int i = 0; i < batch; ++i) {
        const float r = ratio_set[size_t(rng.uniform_int(m))];
        ratios[size_t(i)] = r;
        counts[size_t(i)] = keep_count(tokens, r);
    }
    return build_plan(batch, tokens, std::move(counts), std::move(ratios), seed, rng);
}

MaskPlan make_plan(const MaskStrategy& strategy, int batch, int tokens, uint64_t seed) {
    switch (strategy.kind) {
        case MaskStrategy::Kind::kNone: {
            MaskPlan plan;
            plan.batch = batch;
            plan.tokens = tokens;
            plan.seed = seed;
            plan.mask.assign(size_t(batch) * size_t(tokens), 1);
            plan.kept_counts.assign(size_t(batch), tokens);
            plan.sampled_ratios.assign(size_t(batch), 0.f);
            return plan;
        }
        case MaskStrategy::Kind::kSingle:
            return single_mask(batch, tokens, strategy.single_ratio, seed);
        case MaskStrategy::Kind::kHybrid:
            return hybrid_mask(batch, tokens, strategy.ratio_set, seed);
    }
    throw std::invalid_argument("make_plan: bad strategy kind");
}

MaskedTokens apply(const MaskPlan& plan, const Tensor& tokens) {
    if (tokens.ndim() != 3 || tokens.dim(0) != plan.batch || tokens.dim(1) != plan.tokens) {
        throw std::invalid_argument("apply: plan (" + std::to_string(plan.batch) + "," +
                                    std::to_string(plan.tokens) +
                                    ") does not match tokens " + shape_str(tokens.shape()));
    }
    const int d = tokens.dim(2);
    MaskedTokens out;
    out.tokens.reserve(size_t(plan.batch));
    out.indices.reserve(size_t(plan.batch));
    for (int i = 0; i < plan.batch; ++i) {
        std::vector<int> idx = plan.kept_indices(i);
        Tensor t = Tensor::zeros({int(idx.size()), d});
        for (size_t j = 0; j < idx.size(); ++j) {
            const float* src = tokens.data() + (int64_t(i) * plan.tokens + idx[j]) * d;
            std::copy(src, src + d, t.data() + int64_t(j) * d);
        }
        out.tokens.push_back(std::move(t));
        out.indices.push_back(std::move(idx));
    }
    return out;
}

}  // namespace mft
