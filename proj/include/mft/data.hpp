#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mft/rng.hpp"
#include "mft/tensor.hpp"

namespace mft {

// Images are stored exactly as CIFAR-10 lays them out: per image, channel
// planes R,G,B of 32x32 row-major bytes. Normalization stats live on the
// x/255 scale and always come from the training split.
struct Dataset {
    int channels = 3;
    int height = 32;
    int width = 32;
    int num_classes = 10;
    std::vector<uint8_t> images;
    std::vector<int> labels;
    std::string split;
    std::array<float, 3> mean{0.f, 0.f, 0.f};
    std::array<float, 3> stddev{1.f, 1.f, 1.f};

    int64_t count() const { return int64_t(labels.size()); }
    int64_t image_bytes() const { return int64_t(channels) * height * width; }
    const uint8_t* image(int64_t i) const { return images.data() + i * image_bytes(); }
};

// Decodes CIFAR-10 binary records (1 label byte + 3072 pixel bytes). `path`
// may be a single .bin file or the dataset directory, in which case the
// standard batch files of the requested split ("train" or "test") are read.
Dataset load_cifar10(const std::string& path, const std::string& split = "train");

// Byte-faithful single-file encoder (the loader's inverse).
void write_cifar10(const Dataset& ds, const std::string& file);

// Class c is a fixed seeded template image plus per-pixel Gaussian noise of
// scale sigma, clamped to [0,255]. Sample i has label i % num_classes, so a
// prefix split keeps classes balanced.
Dataset make_synthetic(int num_classes, int per_class, float sigma, uint64_t seed);

// Splits off the first `first_count` samples (e.g. train/test halves of one
// synthetic generation, which share templates but not noise).
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, int64_t first_count);

// Per-channel mean/std of x/255 over the dataset's own images.
void compute_normalization(Dataset& ds);

// Deterministic core of augment: optional horizontal flip, then a crop of the
// 4-pixel zero-padded image at offset (dy, dx) in [0,8]; (4,4) with no flip is
// the identity. Output is normalized float CHW.
void augment_image_explicit(const Dataset& ds, int64_t index, bool flip, int dy, int dx,
                            float* out);

// Random horizontal flip (p = 0.5) and random crop, then normalization.
void augment_image(const Dataset& ds, int64_t index, Rng& rng, float* out);

// Normalization only (evaluation path).
void normalize_image(const Dataset& ds, int64_t index, float* out);

// Batch tensor (N, C, H, W). With augment=true, each image uses its own
// substream Rng::stream(seed, salt, dataset index), so results do not depend
// on batch composition.
Tensor make_batch(const Dataset& ds, const std::vector<int64_t>& indices, bool augment,
                  uint64_t seed = 0, uint64_t salt = 0);

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& indices);

}  // namespace mft
