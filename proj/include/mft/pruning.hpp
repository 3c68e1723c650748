#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mft/vit.hpp"

namespace mft {

struct Dataset;  // data.hpp

// Staged token-keep plan. Counts are cumulative patch-token keeps; the class
// token is implicit and never pruned. Pruning at block b means tokens are
// dropped before block b runs, scored on the preceding block's attention.
struct PruneSchedule {
    enum class Selector { kRandom, kAttention };
    struct Stage {
        int block = 0;  // 0-based block index the stage applies before
        int keep = 0;   // cumulative patch tokens kept from this stage on
    };

    std::vector<Stage> stages;
    Selector selector = Selector::kAttention;
    float keep_ratio = 1.f;
    // Block whose cls attention scores the selection; -1 means the block
    // immediately preceding each pruning point.
    int attn_block = -1;

    void validate(const ModelConfig& cfg) const;
};

std::string to_string(PruneSchedule::Selector s);
PruneSchedule::Selector selector_from_string(const std::string& s);

// Stage s (1-based) sits at block floor(s*depth/(num_stages+1)) with
// cumulative keep floor(L * keep_ratio^s). Stages whose keep count equals the
// previous count are no-ops and are dropped (keep_ratio 1 yields no stages).
PruneSchedule make_schedule(const ModelConfig& cfg, double keep_ratio, int num_stages,
                            PruneSchedule::Selector selector = PruneSchedule::Selector::kAttention);

// Per-block token counts (class token included) under a schedule; nullptr or
// empty schedule means the full L+1 everywhere.
std::vector<int> schedule_token_counts(const ModelConfig& cfg, const PruneSchedule* schedule);

ForwardOutput prune_forward(const ViTModel& model, const Tensor& images,
                            const PruneSchedule& schedule, Tape* tape,
                            uint64_t prune_seed = 0,
                            const std::vector<uint64_t>* sample_keys = nullptr);

struct PruneEvalResult {
    double top1 = 0.0;    // percent
    double gflops = 0.0;  // per-image analytic cost
    int64_t correct = 0;
    int64_t total = 0;
};

struct PruneEvalOptions {
    int batch_size = 100;
    int64_t subset = 0;  // 0 = whole dataset
    uint64_t eval_seed = 0;
    // Destination for per-image kept-index records (image_id, stage, indices)
    // for the first `keep_records` images; empty disables.
    int keep_records = 0;
    std::vector<std::vector<std::vector<int>>>* kept_out = nullptr;  // [image][stage]
};

// Training-free evaluation: top-1 accuracy under prune_forward plus the
// analytic GFLOPs of the schedule.
PruneEvalResult eval_pruned(const ViTModel& model, const Dataset& data,
                            const PruneSchedule& schedule, const PruneEvalOptions& opts = {});

}  // namespace mft
