#include "mft/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mft/pruning.hpp"
#include "mft/rng.hpp"

namespace mft {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

constexpr float kLnEps = 1e-6f;
constexpr float kMaskBias = -1e9f;

}  // namespace

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 ||
        depth < 0 || heads <= 0 || mlp_ratio <= 0 || num_classes <= 0) {
        fail("ModelConfig: all extents must be positive");
    }
    if (image_size % patch_size != 0) {
        fail("ModelConfig: image_size " + std::to_string(image_size) +
             " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (embed_dim % heads != 0) {
        fail("ModelConfig: embed_dim " + std::to_string(embed_dim) +
             " not divisible by heads " + std::to_string(heads));
    }
}

std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
    std::vector<std::string> out;
    if (a.image_size != b.image_size) out.push_back("image_size");
    if (a.patch_size != b.patch_size) out.push_back("patch_size");
    if (a.channels != b.channels) out.push_back("channels");
    if (a.embed_dim != b.embed_dim) out.push_back("embed_dim");
    if (a.depth != b.depth) out.push_back("depth");
    if (a.heads != b.heads) out.push_back("heads");
    if (a.mlp_ratio != b.mlp_ratio) out.push_back("mlp_ratio");
    if (a.num_classes != b.num_classes) out.push_back("num_classes");
    return out;
}

// ---- model construction ----------------------------------------------------

ViTModel ViTModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ViTModel m;
    m.cfg = cfg;
    const int d = cfg.embed_dim, l = cfg.tokens(), pd = cfg.patch_dim();
    const int hidden = cfg.mlp_ratio * d;

    int stream = 0;
    auto normal = [&](Shape shape, float stddev) {
        Rng rng = Rng::stream(seed, 0x1717, uint64_t(stream++));
        Tensor t = Tensor::zeros(std::move(shape), true);
        float* v = t.data();
        for (int64_t i = 0; i < t.size(); ++i) v[i] = rng.normal_f(0.f, stddev);
        return t;
    };
    auto constant = [&](Shape shape, float value) {
        Tensor t = Tensor::full(std::move(shape), value, true);
        return t;
    };

    m.patch_w = normal({pd, d}, 0.02f);
    m.patch_b = constant({d}, 0.f);
    m.cls_token = normal({1, 1, d}, 0.02f);
    m.pos_embed = normal({1, l + 1, d}, 0.02f);
    m.blocks.resize(size_t(cfg.depth));
    for (auto& blk : m.blocks) {
        blk.ln1_g = constant({d}, 1.f);
        blk.ln1_b = constant({d}, 0.f);
        blk.qkv_w = normal({d, 3 * d}, 0.02f);
        blk.qkv_b = constant({3 * d}, 0.f);
        blk.proj_w = normal({d, d}, 0.02f);
        blk.proj_b = constant({d}, 0.f);
        blk.ln2_g = constant({d}, 1.f);
        blk.ln2_b = constant({d}, 0.f);
        blk.fc1_w = normal({d, hidden}, 0.02f);
        blk.fc1_b = constant({hidden}, 0.f);
        blk.fc2_w = normal({hidden, d}, 0.02f);
        blk.fc2_b = constant({d}, 0.f);
    }
    m.ln_f_g = constant({d}, 1.f);
    m.ln_f_b = constant({d}, 0.f);
    m.head_w = normal({d, cfg.num_classes}, 0.02f);
    m.head_b = constant({cfg.num_classes}, 0.f);
    return m;
}

std::vector<std::pair<std::string, Tensor>> ViTModel::parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_w);
    out.emplace_back("patch.b", patch_b);
    out.emplace_back("cls", cls_token);
    out.emplace_back("pos", pos_embed);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "blk" + std::to_string(i) + ".";
        Block& b = blocks[i];
        out.emplace_back(p + "ln1.g", b.ln1_g);
        out.emplace_back(p + "ln1.b", b.ln1_b);
        out.emplace_back(p + "qkv.w", b.qkv_w);
        out.emplace_back(p + "qkv.b", b.qkv_b);
        out.emplace_back(p + "proj.w", b.proj_w);
        out.emplace_back(p + "proj.b", b.proj_b);
        out.emplace_back(p + "ln2.g", b.ln2_g);
        out.emplace_back(p + "ln2.b", b.ln2_b);
        out.emplace_back(p + "fc1.w", b.fc1_w);
        out.emplace_back(p + "fc1.b", b.fc1_b);
        out.emplace_back(p + "fc2.w", b.fc2_w);
        out.emplace_back(p + "fc2.b", b.fc2_b);
    }
    out.emplace_back("ln_f.g", ln_f_g);
    out.emplace_back("ln_f.b", ln_f_b);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ViTModel::parameters() const {
    return const_cast<ViTModel*>(this)->parameters();
}

void ViTModel::set_requires_grad(bool r) {
    for (auto& [name, t] : parameters()) t.set_requires_grad(r);
}

void ViTModel::zero_grads() {
    for (auto& [name, t] : parameters()) t.zero_grad();
}

int64_t ViTModel::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
}

// ---- embedding ---------------------------------------------------------------

Tensor patch_embed(const ViTModel& model, const Tensor& images, Tape* tape) {
    const ModelConfig& cfg = model.cfg;
    if (images.ndim() != 4 || images.dim(1) != cfg.channels ||
        images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
        fail("patch_embed: expected (N," + std::to_string(cfg.channels) + "," +
             std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
             "), got " + shape_str(images.shape()));
    }
    const int n = images.dim(0), c = cfg.channels, hw = cfg.image_size;
    const int p = cfg.patch_size, g = cfg.grid(), l = cfg.tokens(), pd = cfg.patch_dim();

    // Patch matrix (N*L, C*p*p); per patch the values are laid out
    // channel-planar, row within patch, matching the CIFAR byte order.
    Tensor patches = Tensor::zeros({n * l, pd});
    const float* iv = images.data();
    float* pv = patches.data();
    for (int i = 0; i < n; ++i) {
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                float* dst = pv + (int64_t(i) * l + gy * g + gx) * pd;
                for (int ch = 0; ch < c; ++ch) {
                    for (int py = 0; py < p; ++py) {
                        const float* src =
                            iv + ((int64_t(i) * c + ch) * hw + (gy * p + py)) * hw + gx * p;
                        std::copy(src, src + p, dst);
                        dst += p;
                    }
                }
            }
        }
    }
    Tensor proj = add(matmul(patches, model.patch_w, tape), model.patch_b, tape);
    return reshape(proj, {n, l, cfg.embed_dim}, tape);
}

Tensor embed_patches(const ViTModel& model, const Tensor& images, Tape* tape) {
    const int l = model.cfg.tokens();
    Tensor tokens = patch_embed(model, images, tape);
    std::vector<int> patch_pos(size_t(l));
    std::iota(patch_pos.begin(), patch_pos.end(), 1);
    Tensor pos = gather(model.pos_embed, patch_pos, 1, tape);  // (1, L, D)
    return add(tokens, pos, tape);
}

// ---- encoder ---------------------------------------------------------------

namespace {

// Class token replicated across the batch with its positional embedding.
Tensor cls_rows(const ViTModel& m, int batch, Tape* tape) {
    Tensor cls_pos = gather(m.pos_embed, {0}, 1, tape);            // (1, 1, D)
    Tensor cls = add(m.cls_token, cls_pos, tape);                  // (1, 1, D)
    Tensor cls2d = reshape(cls, {1, m.cfg.embed_dim}, tape);       // (1, D)
    Tensor ones = Tensor::full({batch, 1}, 1.f);
    return reshape(matmul(ones, cls2d, tape), {batch, 1, m.cfg.embed_dim}, tape);
}

struct EncoderIo {
    // Per local row: original patch indices of the tokens at positions 1..T-1.
    std::vector<std::vector<int>> alive;
    // Global sample slot of each local row.
    std::vector<int> slots;
    const Tensor* key_bias = nullptr;  // (N, 1, 1, T) or null
    const PruneSchedule* schedule = nullptr;
    uint64_t prune_seed = 0;
    const std::vector<uint64_t>* sample_keys = nullptr;
    ForwardOutput* out = nullptr;
};

Tensor run_block(const ViTModel::Block& blk, const ModelConfig& cfg, const Tensor& x,
                 const Tensor* key_bias, Tape* tape,
                 std::vector<std::vector<float>>& cls_attn_rows,
                 const std::vector<std::vector<int>>& alive, bool positions_are_dense) {
    const int b = x.dim(0), t = x.dim(1), d = cfg.embed_dim;
    const int h = cfg.heads, hd = d / h;

    Tensor hnorm = layer_norm(x, blk.ln1_g, blk.ln1_b, kLnEps, tape);
    Tensor qkv = add(matmul(reshape(hnorm, {b * t, d}, tape), blk.qkv_w, tape), blk.qkv_b, tape);
    Tensor qkv5 = reshape(qkv, {b, t, 3, h, hd}, tape);
    auto head_view = [&](int which) {
        Tensor s = gather(qkv5, {which}, 2, tape);                  // (B,T,1,H,hd)
        return transpose(reshape(s, {b, t, h, hd}, tape), {0, 2, 1, 3}, tape);  // (B,H,T,hd)
    };
    Tensor q = head_view(0), k = head_view(1), v = head_view(2);

    Tensor scores = scale(matmul(q, transpose(k, {0, 1, 3, 2}, tape), tape),
                          1.f / std::sqrt(float(hd)), tape);
    if (key_bias) scores = add(scores, *key_bias, tape);
    Tensor attn = softmax(scores, 3, tape);

    // cls-attention: head-averaged weights of the class-token query over the
    // attended patch tokens, renormalized to sum to 1.
    cls_attn_rows.assign(size_t(b), {});
    {
        const float* pv = attn.data();
        for (int i = 0; i < b; ++i) {
            const int kp = int(alive[size_t(i)].size());
            std::vector<float>& row = cls_attn_rows[size_t(i)];
            row.assign(size_t(kp), 0.f);
            double total = 0.0;
            for (int j = 0; j < kp; ++j) {
                const int pos = positions_are_dense ? j + 1 : alive[size_t(i)][size_t(j)] + 1;
                double acc = 0.0;
                for (int hh = 0; hh < h; ++hh) {
                    acc += pv[((int64_t(i) * h + hh) * t + 0) * t + pos];
                }
                row[size_t(j)] = float(acc / h);
                total += acc / h;
            }
            if (total > 0.0) {
                const float inv = float(1.0 / total);
                for (float& rv : row) rv *= inv;
            }
        }
    }

    Tensor ctx = matmul(attn, v, tape);                                  // (B,H,T,hd)
    Tensor merged = reshape(transpose(ctx, {0, 2, 1, 3}, tape), {b * t, d}, tape);
    Tensor proj = add(matmul(merged, blk.proj_w, tape), blk.proj_b, tape);
    Tensor x1 = add(x, reshape(proj, {b, t, d}, tape), tape);

    Tensor h2 = layer_norm(x1, blk.ln2_g, blk.ln2_b, kLnEps, tape);
    Tensor f1 = add(matmul(reshape(h2, {b * t, d}, tape), blk.fc1_w, tape), blk.fc1_b, tape);
    Tensor f2 = add(matmul(gelu(f1, tape), blk.fc2_w, tape), blk.fc2_b, tape);
    return add(x1, reshape(f2, {b, t, d}, tape), tape);
}

// Runs the block stack over one rectangular group of samples, handling pruning
// stages when a schedule is present. Returns logits (rows align with io.slots).
Tensor run_encoder(const ViTModel& m, Tensor x, EncoderIo io, Tape* tape) {
    const ModelConfig& cfg = m.cfg;
    const int b = x.dim(0);
    ForwardOutput& fo = *io.out;

    // Stage 0: the input token set.
    int stage = int(fo.stage_kept.size()) - 1;
    if (stage < 0) {
        fo.stage_kept.emplace_back();
        stage = 0;
    }
    auto record_stage = [&](int s) {
        while (int(fo.stage_kept.size()) <= s) {
            fo.stage_kept.emplace_back(std::vector<std::vector<int>>(
                size_t(fo.cls_attn.empty() ? 0 : fo.cls_attn[0].size())));
        }
        for (int i = 0; i < b; ++i) {
            fo.stage_kept[size_t(s)][size_t(io.slots[size_t(i)])] = io.alive[size_t(i)];
        }
    };
    record_stage(0);

    // In drop mode tokens are dense (positions 1..k follow alive order); in
    // attn-mask mode the full grid stays and alive names the kept subset.
    const bool dense = io.key_bias == nullptr;

    std::vector<std::vector<float>> cls_attn_rows;
    std::vector<std::vector<float>> prev_attn;  // selector input, aligned with alive
    size_t next_stage = 0;
    std::vector<uint64_t> default_keys;
    if (!io.sample_keys && io.schedule) {
        default_keys.resize(size_t(b));
        for (int i = 0; i < b; ++i) default_keys[size_t(i)] = uint64_t(io.slots[size_t(i)]);
    }
    const std::vector<uint64_t>* keys = io.sample_keys ? io.sample_keys : &default_keys;

    for (int blk = 0; blk < cfg.depth; ++blk) {
        if (io.schedule && next_stage < io.schedule->stages.size() &&
            io.schedule->stages[next_stage].block == blk) {
            const int keep = io.schedule->stages[next_stage].keep;
            const int cur = int(io.alive[0].size());
            if (keep < cur) {
                // Score the currently alive tokens.
                std::vector<std::vector<int>> gather_idx(size_t(b));
                for (int i = 0; i < b; ++i) {
                    std::vector<float> score;
                    if (io.schedule->selector == PruneSchedule::Selector::kAttention) {
                        if (io.schedule->attn_block >= 0) {
                            // Fixed scoring block: match recorded scores to the
                            // currently alive tokens by original index.
                            const int f = io.schedule->attn_block;
                            const int slot = io.slots[size_t(i)];
                            const auto& rec = fo.cls_attn[size_t(f)][size_t(slot)];
                            const auto& rec_alive =
                                fo.stage_kept[size_t(fo.block_stage[size_t(f)])][size_t(slot)];
                            score.resize(size_t(cur));
                            size_t p = 0;
                            for (int j = 0; j < cur; ++j) {
                                const int orig = io.alive[size_t(i)][size_t(j)];
                                while (p < rec_alive.size() && rec_alive[p] < orig) ++p;
                                score[size_t(j)] = (p < rec_alive.size() && rec_alive[p] == orig)
                                                       ? rec[p]
                                                       : 0.f;
                            }
                        } else {
                            score = prev_attn[size_t(i)];
                        }
                    } else {
                        Rng rng = Rng::stream(io.prune_seed, (*keys)[size_t(i)],
                                              uint64_t(next_stage));
                        score.resize(size_t(cur));
                        for (float& s : score) s = rng.uniform_f();
                    }
                    // top-k by score, ties to the lower original index
                    std::vector<int> order(size_t(cur));
                    std::iota(order.begin(), order.end(), 0);
                    std::stable_sort(order.begin(), order.end(), [&](int a2, int b2) {
                        if (score[size_t(a2)] != score[size_t(b2)]) {
                            return score[size_t(a2)] > score[size_t(b2)];
                        }
                        return io.alive[size_t(i)][size_t(a2)] < io.alive[size_t(i)][size_t(b2)];
                    });
                    order.resize(size_t(keep));
                    std::sort(order.begin(), order.end());

                    std::vector<int> rows;
                    rows.reserve(size_t(keep) + 1);
                    rows.push_back(0);  // class token
                    std::vector<int> new_alive;
                    new_alive.reserve(size_t(keep));
                    for (int local : order) {
                        rows.push_back(local + 1);
                        new_alive.push_back(io.alive[size_t(i)][size_t(local)]);
                    }
                    gather_idx[size_t(i)] = std::move(rows);
                    io.alive[size_t(i)] = std::move(new_alive);
                }
                x = gather_tokens(x, gather_idx, tape);
            }
            ++next_stage;
            record_stage(int(next_stage));
            stage = int(next_stage);
        }
        fo.block_stage[size_t(blk)] = stage;
        x = run_block(m.blocks[size_t(blk)], cfg, x, io.key_bias, tape, cls_attn_rows,
                      io.alive, dense || io.schedule != nullptr);
        for (int i = 0; i < b; ++i) {
            fo.cls_attn[size_t(blk)][size_t(io.slots[size_t(i)])] = cls_attn_rows[size_t(i)];
        }
        prev_attn = std::move(cls_attn_rows);
    }

    Tensor xn = layer_norm(x, m.ln_f_g, m.ln_f_b, kLnEps, tape);
    Tensor cls = reshape(gather(xn, {0}, 1, tape), {b, cfg.embed_dim}, tape);
    return add(matmul(cls, m.head_w, tape), m.head_b, tape);
}

}  // namespace

ForwardOutput vit_forward_from_patches(const ViTModel& model, const Tensor& patch_tokens,
                                       Tape* tape, const ForwardOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    const int n = patch_tokens.dim(0), l = patch_tokens.dim(1);
    if (opts.mask_plan && opts.schedule) {
        fail("forward: mask_plan and prune_schedule are mutually exclusive");
    }
    if (opts.mask_plan &&
        (opts.mask_plan->batch != n || opts.mask_plan->tokens != l)) {
        fail("forward: mask plan (" + std::to_string(opts.mask_plan->batch) + "," +
             std::to_string(opts.mask_plan->tokens) + ") does not match tokens (" +
             std::to_string(n) + "," + std::to_string(l) + ")");
    }
    if (opts.schedule) opts.schedule->validate(cfg);

    ForwardOutput fo;
    fo.cls_attn.assign(size_t(cfg.depth), std::vector<std::vector<float>>(size_t(n)));
    fo.block_stage.assign(size_t(cfg.depth), 0);

    std::vector<int> all_patches(size_t(l));
    std::iota(all_patches.begin(), all_patches.end(), 0);

    Tensor cls = cls_rows(model, n, tape);

    const bool masked = opts.mask_plan && !opts.mask_plan->all_kept();
    if (!masked || opts.mask_mode == MaskMode::kAttnMask) {
        Tensor x = concat({cls, patch_tokens}, 1, tape);
        EncoderIo io;
        io.slots.resize(size_t(n));
        std::iota(io.slots.begin(), io.slots.end(), 0);
        io.schedule = opts.schedule;
        io.prune_seed = opts.prune_seed;
        io.sample_keys = opts.sample_keys;
        io.out = &fo;
        Tensor key_bias;
        if (masked) {
            key_bias = Tensor::zeros({n, 1, 1, l + 1});
            float* kb = key_bias.data();
            io.alive.resize(size_t(n));
            for (int i = 0; i < n; ++i) {
                io.alive[size_t(i)] = opts.mask_plan->kept_indices(i);
                for (int j = 0; j < l; ++j) {
                    if (!opts.mask_plan->keep(i, j)) {
                        kb[int64_t(i) * (l + 1) + j + 1] = kMaskBias;
                    }
                }
            }
            io.key_bias = &key_bias;
        } else {
            io.alive.assign(size_t(n), all_patches);
        }
        fo.stage_kept.emplace_back(std::vector<std::vector<int>>(size_t(n)));
        for (int i = 0; i < n; ++i) fo.stage_kept[0][size_t(i)] = io.alive[size_t(i)];
        fo.logits = run_encoder(model, x, std::move(io), tape);
        return fo;
    }

    // Drop mode with a non-trivial plan: group samples by kept count so each
    // group stays rectangular, then restore the original row order.
    std::vector<std::vector<int>> buckets;  // sample indices per kept count
    {
        std::vector<std::pair<int, int>> order(size_t(n));  // (kept, sample)
        for (int i = 0; i < n; ++i) order[size_t(i)] = {opts.mask_plan->kept_counts[size_t(i)], i};
        std::stable_sort(order.begin(), order.end());
        for (size_t i = 0; i < order.size();) {
            size_t j = i;
            buckets.emplace_back();
            while (j < order.size() && order[j].first == order[i].first) {
                buckets.back().push_back(order[j].second);
                ++j;
            }
            i = j;
        }
    }

    std::vector<Tensor> logits_parts;
    std::vector<int> merged_rows;
    for (const auto& rows : buckets) {
        const int nb = int(rows.size());
        Tensor sub_patches = gather(patch_tokens, rows, 0, tape);
        Tensor sub_cls = gather(cls, rows, 0, tape);
        std::vector<std::vector<int>> kept(size_t(nb));
        for (int i = 0; i < nb; ++i) kept[size_t(i)] = opts.mask_plan->kept_indices(rows[size_t(i)]);
        Tensor sub_tokens = gather_tokens(sub_patches, kept, tape);
        Tensor x = concat({sub_cls, sub_tokens}, 1, tape);

        EncoderIo io;
        io.alive = kept;
        io.slots = rows;
        io.out = &fo;
        if (fo.stage_kept.empty()) {
            fo.stage_kept.emplace_back(std::vector<std::vector<int>>(size_t(n)));
        }
        logits_parts.push_back(run_encoder(model, x, std::move(io), tape));
        merged_rows.insert(merged_rows.end(), rows.begin(), rows.end());
    }
    Tensor stacked = logits_parts.size() == 1 ? logits_parts[0]
                                              : concat(logits_parts, 0, tape);
    std::vector<int> inverse(size_t(n));
    for (int i = 0; i < n; ++i) inverse[size_t(merged_rows[size_t(i)])] = i;
    fo.logits = gather(stacked, inverse, 0, tape);
    return fo;
}

ForwardOutput vit_forward(const ViTModel& model, const Tensor& images, Tape* tape,
                          const ForwardOptions& opts) {
    Tensor patches = embed_patches(model, images, tape);
    return vit_forward_from_patches(model, patches, tape, opts);
}

// ---- flops -------------------------------------------------------------------

double flops_gflops(const ModelConfig& cfg, const std::vector<int>& token_counts) {
    if (int(token_counts.size()) != cfg.depth) {
        fail("flops: " + std::to_string(token_counts.size()) + " token counts for depth " +
             std::to_string(cfg.depth));
    }
    const double d = cfg.embed_dim;
    double total = double(cfg.tokens()) * d * double(cfg.patch_dim());
    for (int nt : token_counts) {
        const double n = nt;
        total += (4.0 + 2.0 * cfg.mlp_ratio) * n * d * d;  // qkv, proj, two MLP mats
        total += 2.0 * n * n * d;                          // attention scores and values
    }
    return total / 1e9;
}

}  // namespace mft
