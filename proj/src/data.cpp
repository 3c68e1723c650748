#include "mft/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace mft {

namespace {

constexpr int64_t kRecordBytes = 3073;  // 1 label byte + 3 * 32 * 32 pixels

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

void decode_file(const std::string& file, Dataset& ds) {
    std::ifstream in(file, std::ios::binary);
    if (!in) fail("cannot open '" + file + "'");
    in.seekg(0, std::ios::end);
    const int64_t bytes = in.tellg();
    in.seekg(0);
    if (bytes % kRecordBytes != 0) {
        fail("'" + file + "': size " + std::to_string(bytes) +
             " is not a multiple of 3073; partial record at offset " +
             std::to_string((bytes / kRecordBytes) * kRecordBytes));
    }
    const int64_t records = bytes / kRecordBytes;
    std::vector<uint8_t> buf(size_t(bytes));
    if (!in.read(reinterpret_cast<char*>(buf.data()), bytes)) {
        fail("'" + file + "': short read");
    }
    const int64_t img = ds.image_bytes();
    const int64_t base = ds.count();
    ds.labels.resize(size_t(base + records));
    ds.images.resize(size_t((base + records) * img));
    for (int64_t r = 0; r < records; ++r) {
        const uint8_t label = buf[size_t(r * kRecordBytes)];
        if (label >= ds.num_classes) {
            fail("'" + file + "': label " + std::to_string(int(label)) + " at record " +
                 std::to_string(r) + " outside [0," + std::to_string(ds.num_classes) + ")");
        }
        ds.labels[size_t(base + r)] = label;
        std::memcpy(ds.images.data() + (base + r) * img,
                    buf.data() + r * kRecordBytes + 1, size_t(img));
    }
}

}  // namespace

Dataset load_cifar10(const std::string& path, const std::string& split) {
    Dataset ds;
    ds.split = split;
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        if (split == "train") {
            for (int i = 1; i <= 5; ++i) {
                decode_file(path + "/data_batch_" + std::to_string(i) + ".bin", ds);
            }
        } else if (split == "test") {
            decode_file(path + "/test_batch.bin", ds);
        } else {
            fail("load_cifar10: unknown split '" + split + "'");
        }
    } else {
        decode_file(path, ds);
    }
    return ds;
}

void write_cifar10(const Dataset& ds, const std::string& file) {
    if (ds.image_bytes() != kRecordBytes - 1) {
        fail("write_cifar10: dataset geometry is not 3x32x32");
    }
    std::ofstream out(file, std::ios::binary);
    if (!out) fail("cannot open '" + file + "' for writing");
    const int64_t img = ds.image_bytes();
    for (int64_t i = 0; i < ds.count(); ++i) {
        const uint8_t label = uint8_t(ds.labels[size_t(i)]);
        out.write(reinterpret_cast<const char*>(&label), 1);
        out.write(reinterpret_cast<const char*>(ds.image(i)), img);
    }
    if (!out) fail("write failed for '" + file + "'");
}

namespace {

// Smooth color field plus a few localized high-contrast blobs; gives every
// class both globally and locally informative structure.
std::vector<float> class_template(int klass, uint64_t seed) {
    Rng rng = Rng::stream(seed, 0x7E3Au, uint64_t(klass));
    std::vector<float> t(3 * 32 * 32, 128.f);
    constexpr double kTau = 6.283185307179586;
    for (int c = 0; c < 3; ++c) {
        for (int w = 0; w < 3; ++w) {
            const double fx = 0.5 + 2.0 * rng.uniform();
            const double fy = 0.5 + 2.0 * rng.uniform();
            const double ph = kTau * rng.uniform();
            const double amp = 14.0 + 14.0 * rng.uniform();
            for (int y = 0; y < 32; ++y) {
                for (int x = 0; x < 32; ++x) {
                    t[size_t((c * 32 + y) * 32 + x)] +=
                        float(amp * std::cos(kTau * (fx * x + fy * y) / 32.0 + ph));
                }
            }
        }
    }
    for (int blob = 0; blob < 4; ++blob) {
        const double cx = 4.0 + 24.0 * rng.uniform();
        const double cy = 4.0 + 24.0 * rng.uniform();
        const double r = 2.5 + 3.0 * rng.uniform();
        double amp[3];
        for (double& a : amp) a = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (60.0 + 60.0 * rng.uniform());
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < 32; ++y) {
                for (int x = 0; x < 32; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    t[size_t((c * 32 + y) * 32 + x)] +=
                        float(amp[c] * std::exp(-d2 / (2.0 * r * r)));
                }
            }
        }
    }
    return t;
}

}  // namespace

Dataset make_synthetic(int num_classes, int per_class, float sigma, uint64_t seed) {
    if (num_classes < 2) {
        fail("make_synthetic: need at least 2 classes, got " + std::to_string(num_classes));
    }
    Dataset ds;
    ds.num_classes = num_classes;
    ds.split = "synthetic";
    const int64_t n = int64_t(num_classes) * per_class;
    const int64_t img = ds.image_bytes();
    ds.labels.resize(size_t(n));
    ds.images.resize(size_t(n * img));

    std::vector<std::vector<float>> templates(size_t(num_classes));
    for (int k = 0; k < num_classes; ++k) templates[size_t(k)] = class_template(k, seed);

    for (int64_t i = 0; i < n; ++i) {
        const int klass = int(i % num_classes);
        ds.labels[size_t(i)] = klass;
        Rng rng = Rng::stream(seed, 0x401Eu, uint64_t(i));
        const std::vector<float>& t = templates[size_t(klass)];
        uint8_t* dst = ds.images.data() + i * img;
        for (int64_t p = 0; p < img; ++p) {
            const float v = sigma > 0.f ? t[size_t(p)] + sigma * rng.normal_f() : t[size_t(p)];
            dst[p] = uint8_t(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, int64_t first_count) {
    if (first_count < 0 || first_count > ds.count()) {
        fail("split_dataset: bad split point " + std::to_string(first_count));
    }
    Dataset a = ds, b = ds;
    const int64_t img = ds.image_bytes();
    a.labels.assign(ds.labels.begin(), ds.labels.begin() + first_count);
    a.images.assign(ds.images.begin(), ds.images.begin() + first_count * img);
    b.labels.assign(ds.labels.begin() + first_count, ds.labels.end());
    b.images.assign(ds.images.begin() + first_count * img, ds.images.end());
    return {std::move(a), std::move(b)};
}

void compute_normalization(Dataset& ds) {
    const int64_t hw = int64_t(ds.height) * ds.width;
    for (int c = 0; c < ds.channels; ++c) {
        double s1 = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < ds.count(); ++i) {
            const uint8_t* plane = ds.image(i) + c * hw;
            for (int64_t p = 0; p < hw; ++p) {
                const double v = plane[p] / 255.0;
                s1 += v;
                s2 += v * v;
            }
        }
        const double n = double(ds.count()) * double(hw);
        const double mean = s1 / n;
        const double var = std::max(s2 / n - mean * mean, 1e-12);
        ds.mean[size_t(c)] = float(mean);
        ds.stddev[size_t(c)] = float(std::sqrt(var));
    }
}

void augment_image_explicit(const Dataset& ds, int64_t index, bool flip, int dy, int dx,
                            float* out) {
    const int h = ds.height, w = ds.width, c = ds.channels;
    const uint8_t* src = ds.image(index);
    constexpr int kPad = 4;
    for (int ch = 0; ch < c; ++ch) {
        const uint8_t* plane = src + int64_t(ch) * h * w;
        const float inv_std = 1.f / ds.stddev[size_t(ch)];
        const float mean = ds.mean[size_t(ch)];
        for (int y = 0; y < h; ++y) {
            const int sy = y + dy - kPad;
            for (int x = 0; x < w; ++x) {
                const int sx0 = x + dx - kPad;
                const int sx = flip ? (w - 1 - sx0) : sx0;
                float v = 0.f;
                if (sy >= 0 && sy < h && sx0 >= 0 && sx0 < w) {
                    v = plane[sy * w + sx] / 255.f;
                }
                out[(int64_t(ch) * h + y) * w + x] = (v - mean) * inv_std;
            }
        }
    }
}

void augment_image(const Dataset& ds, int64_t index, Rng& rng, float* out) {
    const bool flip = rng.uniform() < 0.5;
    const int dy = rng.uniform_int(9);
    const int dx = rng.uniform_int(9);
    augment_image_explicit(ds, index, flip, dy, dx, out);
}

void normalize_image(const Dataset& ds, int64_t index, float* out) {
    augment_image_explicit(ds, index, false, 4, 4, out);
}

Tensor make_batch(const Dataset& ds, const std::vector<int64_t>& indices, bool augment,
                  uint64_t seed, uint64_t salt) {
    const int n = int(indices.size());
    Tensor batch = Tensor::zeros({n, ds.channels, ds.height, ds.width});
    const int64_t img = ds.image_bytes();
    for (int i = 0; i < n; ++i) {
        float* dst = batch.data() + int64_t(i) * img;
        if (augment) {
            Rng rng = Rng::stream(seed, salt, uint64_t(indices[size_t(i)]));
            augment_image(ds, indices[size_t(i)], rng, dst);
        } else {
            normalize_image(ds, indices[size_t(i)], dst);
        }
    }
    return batch;
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& indices) {
    std::vector<int> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) out[i] = ds.labels[size_t(indices[i])];
    return out;
}

}  // namespace mft
