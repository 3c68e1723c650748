#include "mft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

#ifdef MFT_WITH_OPENBLAS
#include <cblas.h>
#endif

namespace mft {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

int64_t prod(const Shape& s, size_t from, size_t to) {
    int64_t p = 1;
    for (size_t i = from; i < to; ++i) p *= s[i];
    return p;
}

int normalize_axis(int axis, int ndim, const char* op) {
    int a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) {
        std::ostringstream os;
        os << op << ": axis " << axis << " out of range for rank " << ndim;
        fail(os.str());
    }
    return a;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto p = std::make_shared<Impl>();
    p->shape = std::move(shape);
    p->v.assign(size_t(shape_numel(p->shape)), 0.f);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.p_->v.begin(), t.p_->v.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    if (int64_t(values.size()) != shape_numel(shape)) {
        fail("Tensor::from: " + std::to_string(values.size()) +
             " values do not fill shape " + shape_str(shape));
    }
    auto p = std::make_shared<Impl>();
    p->shape = std::move(shape);
    p->v = std::move(values);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

float* Tensor::grad() {
    if (p_->g.empty()) p_->g.assign(p_->v.size(), 0.f);
    return p_->g.data();
}

const std::vector<float>& Tensor::grad_values() const {
    if (p_->g.empty()) p_->g.assign(p_->v.size(), 0.f);
    return p_->g;
}

void Tensor::zero_grad() {
    if (!p_->g.empty()) std::fill(p_->g.begin(), p_->g.end(), 0.f);
}

float Tensor::item() const {
    if (size() != 1) fail("item(): tensor has " + std::to_string(size()) + " elements");
    return p_->v[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
    if (int(idx.size()) != ndim()) fail("at(): index rank mismatch");
    int64_t off = 0;
    int i = 0;
    for (int v : idx) {
        off = off * p_->shape[size_t(i)] + v;
        ++i;
    }
    return p_->v[size_t(off)];
}

Tensor Tensor::clone() const {
    auto p = std::make_shared<Impl>();
    p->shape = p_->shape;
    p->v = p_->v;
    p->requires_grad = p_->requires_grad;
    return Tensor(std::move(p));
}

// ---- Tape ----------------------------------------------------------------

void Tape::backward(Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        fail("backward: loss must be a scalar, got " +
             (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    loss.grad()[0] += 1.f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void backward(Tensor& loss, Tape& tape) { tape.backward(loss); }

// ---- sgemm ---------------------------------------------------------------

#ifdef MFT_WITH_OPENBLAS
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}
#else
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc) {
    // Portable fallback; row-major, k-innermost with accumulation in float to
    // match the BLAS path's precision class.
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            float acc = 0.f;
            for (int p = 0; p < k; ++p) {
                const float av = trans_a ? a[p * lda + i] : a[i * lda + p];
                const float bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + (beta == 0.f ? 0.f : beta * c[i * ldc + j]);
        }
    }
}
#endif

// ---- matmul --------------------------------------------------------------

namespace {

struct BatchMap {
    Shape out_batch;          // broadcast batch extents
    std::vector<int64_t> sa;  // strides (in units of one matrix) into a
    std::vector<int64_t> sb;  // strides into b
};

BatchMap broadcast_batches(const Shape& a, const Shape& b) {
    const int ra = int(a.size()) - 2, rb = int(b.size()) - 2;
    const int r = std::max(ra, rb);
    BatchMap m;
    m.out_batch.assign(size_t(r), 1);
    std::vector<int> ba(size_t(r), 1), bb(size_t(r), 1);
    for (int i = 0; i < ra; ++i) ba[size_t(r - ra + i)] = a[size_t(i)];
    for (int i = 0; i < rb; ++i) bb[size_t(r - rb + i)] = b[size_t(i)];
    for (int i = 0; i < r; ++i) {
        if (ba[size_t(i)] != bb[size_t(i)] && ba[size_t(i)] != 1 && bb[size_t(i)] != 1) {
            fail("matmul: batch extents not broadcast-compatible: " + shape_str(a) +
                 " vs " + shape_str(b));
        }
        m.out_batch[size_t(i)] = std::max(ba[size_t(i)], bb[size_t(i)]);
    }
    // Row-major strides over batch dims, zero where broadcast.
    m.sa.assign(size_t(r), 0);
    m.sb.assign(size_t(r), 0);
    int64_t stri = 1;
    for (int i = r - 1; i >= 0; --i) {
        if (ba[size_t(i)] != 1) m.sa[size_t(i)] = stri;
        stri *= ba[size_t(i)];
    }
    stri = 1;
    for (int i = r - 1; i >= 0; --i) {
        if (bb[size_t(i)] != 1) m.sb[size_t(i)] = stri;
        stri *= bb[size_t(i)];
    }
    return m;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        fail("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
             " and " + shape_str(b.shape()));
    }
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const int k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != k2) {
        fail("matmul: inner extents mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    }
    BatchMap map = broadcast_batches(sa, sb);
    Shape out_shape = map.out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);

    const int64_t nbatch = prod(map.out_batch, 0, map.out_batch.size());
    const int64_t amat = int64_t(m) * k, bmat = int64_t(k) * n, cmat = int64_t(m) * n;
    const int r = int(map.out_batch.size());

    auto batch_offsets = [map, r](int64_t flat, int64_t& oa, int64_t& ob) {
        oa = 0;
        ob = 0;
        for (int i = r - 1; i >= 0; --i) {
            const int64_t idx = flat % map.out_batch[size_t(i)];
            flat /= map.out_batch[size_t(i)];
            oa += idx * map.sa[size_t(i)];
            ob += idx * map.sb[size_t(i)];
        }
    };

    for (int64_t bi = 0; bi < nbatch; ++bi) {
        int64_t oa, ob;
        batch_offsets(bi, oa, ob);
        sgemm(false, false, m, n, k, 1.f, a.data() + oa * amat, k,
              b.data() + ob * bmat, n, 0.f, out.data() + bi * cmat, n);
    }

    const bool rec = tape && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rec);
    if (rec) {
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, m, n, k, nbatch, amat, bmat, cmat,
                      batch_offsets]() mutable {
            if (!oc.has_grad()) return;
            const float* dc = oc.grad();
            if (ac.requires_grad()) {
                float* da = ac.grad();
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    int64_t oa, ob;
                    batch_offsets(bi, oa, ob);
                    // dA += dC * B^T
                    sgemm(false, true, m, k, n, 1.f, dc + bi * cmat, n,
                          bc.data() + ob * bmat, n, 1.f, da + oa * amat, k);
                }
            }
            if (bc.requires_grad()) {
                float* db = bc.grad();
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    int64_t oa, ob;
                    batch_offsets(bi, oa, ob);
                    // dB += A^T * dC
                    sgemm(true, false, k, n, m, 1.f, ac.data() + oa * amat, k,
                          dc + bi * cmat, n, 1.f, db + ob * bmat, n);
                }
            }
        });
    }
    return out;
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis, Tape* tape) {
    const int a = normalize_axis(axis, x.ndim(), "softmax");
    const Shape& s = x.shape();
    const int64_t outer = prod(s, 0, size_t(a));
    const int len = s[size_t(a)];
    const int64_t inner = prod(s, size_t(a) + 1, s.size());
    Tensor out = Tensor::zeros(s);
    const float* xv = x.data();
    float* yv = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * len * inner + i;
            float mx = xv[base];
            for (int j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double denom = 0.0;
            for (int j = 0; j < len; ++j) {
                const float e = std::exp(xv[base + j * inner] - mx);
                yv[base + j * inner] = e;
                denom += e;
            }
            const float inv = float(1.0 / denom);
            for (int j = 0; j < len; ++j) yv[base + j * inner] *= inv;
        }
    }
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        tape->record([xc, oc, outer, len, inner]() mutable {
            if (!oc.has_grad()) return;
            const float* p = oc.data();
            const float* dy = oc.grad();
            float* dx = xc.grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t i = 0; i < inner; ++i) {
                    const int64_t base = o * len * inner + i;
                    double dot = 0.0;
                    for (int j = 0; j < len; ++j) {
                        dot += double(dy[base + j * inner]) * double(p[base + j * inner]);
                    }
                    for (int j = 0; j < len; ++j) {
                        const int64_t k = base + j * inner;
                        dx[k] += p[k] * (dy[k] - float(dot));
                    }
                }
            }
        });
    }
    return out;
}

// ---- layer_norm ------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps, Tape* tape) {
    const Shape& s = x.shape();
    const int d = s.back();
    if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d) {
        fail("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
             shape_str(beta.shape()) + " do not match last extent of " + shape_str(s));
    }
    const int64_t rows = x.size() / d;
    Tensor out = Tensor::zeros(s);
    std::vector<float> inv_std(size_t(rows)), means(size_t(rows));
    const float* xv = x.data();
    const float* gv = gamma.data();
    const float* bv = beta.data();
    float* yv = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = xv + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        const float inv = float(1.0 / std::sqrt(var + double(eps)));
        means[size_t(r)] = float(mean);
        inv_std[size_t(r)] = inv;
        float* yrow = yv + r * d;
        for (int j = 0; j < d; ++j) {
            yrow[j] = (row[j] - float(mean)) * inv * gv[j] + bv[j];
        }
    }
    const bool rec = tape && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, gc = gamma, bc = beta, oc = out;
        tape->record([xc, gc, bc, oc, rows, d, means, inv_std]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            const float* xv2 = xc.data();
            const float* gv2 = gc.data();
            float* dg = gc.requires_grad() ? gc.grad() : nullptr;
            float* db = bc.requires_grad() ? bc.grad() : nullptr;
            float* dx = xc.requires_grad() ? xc.grad() : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const float* row = xv2 + r * d;
                const float* dyr = dy + r * d;
                const float mean = means[size_t(r)];
                const float inv = inv_std[size_t(r)];
                if (dg || db) {
                    for (int j = 0; j < d; ++j) {
                        const float xh = (row[j] - mean) * inv;
                        if (dg) dg[j] += dyr[j] * xh;
                        if (db) db[j] += dyr[j];
                    }
                }
                if (dx) {
                    double s1 = 0.0, s2 = 0.0;  // mean(dy*g), mean(dy*g*xhat)
                    for (int j = 0; j < d; ++j) {
                        const double dg_ = double(dyr[j]) * double(gv2[j]);
                        s1 += dg_;
                        s2 += dg_ * double((row[j] - mean) * inv);
                    }
                    s1 /= d;
                    s2 /= d;
                    float* dxr = dx + r * d;
                    for (int j = 0; j < d; ++j) {
                        const float xh = (row[j] - mean) * inv;
                        dxr[j] += inv * (dyr[j] * gv2[j] - float(s1) - xh * float(s2));
                    }
                }
            }
        });
    }
    return out;
}

// ---- gelu ------------------------------------------------------------------

Tensor gelu(const Tensor& x, Tape* tape) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.data();
    float* yv = out.data();
    const int64_t n = x.size();
    constexpr double kInvSqrt2 = 0.7071067811865475;
    for (int64_t i = 0; i < n; ++i) {
        const double v = xv[i];
        yv[i] = float(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        tape->record([xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            const float* xv2 = xc.data();
            float* dx = xc.grad();
            constexpr double kInvSqrt2 = 0.7071067811865475;
            constexpr double kInvSqrt2Pi = 0.3989422804014327;
            for (int64_t i = 0; i < n; ++i) {
                const double v = xv2[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                dx[i] += dy[i] * float(cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---- add / mul / scale -------------------------------------------------------

namespace {

// Checks that b broadcasts onto a, returns b's extents padded to a's rank.
Shape broadcast_onto(const Shape& a, const Shape& b, const char* op) {
    if (b.size() > a.size()) {
        fail(std::string(op) + ": second operand rank exceeds first: " + shape_str(a) +
             " vs " + shape_str(b));
    }
    Shape pb(a.size(), 1);
    const size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i) pb[off + i] = b[i];
    for (size_t i = 0; i < a.size(); ++i) {
        if (pb[i] != a[i] && pb[i] != 1) {
            fail(std::string(op) + ": shapes not broadcast-compatible: " + shape_str(a) +
                 " vs " + shape_str(b));
        }
    }
    return pb;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    const Shape& sa = a.shape();
    const Shape pb = broadcast_onto(sa, b.shape(), "add");
    Tensor out = Tensor::zeros(sa);
    const int64_t n = a.size();
    const float* av = a.data();
    const float* bv = b.data();
    float* yv = out.data();

    const int r = int(sa.size());
    std::vector<int64_t> bstride(size_t(r), 0);
    int64_t st = 1;
    for (int i = r - 1; i >= 0; --i) {
        if (pb[size_t(i)] != 1) bstride[size_t(i)] = st;
        st *= pb[size_t(i)];
    }
    const bool same = (st == n);

    if (same) {
        for (int64_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];
    } else {
        std::vector<int> idx(size_t(r), 0);
        int64_t boff = 0;
        for (int64_t i = 0; i < n; ++i) {
            yv[i] = av[i] + bv[boff];
            for (int d = r - 1; d >= 0; --d) {
                boff += bstride[size_t(d)];
                if (++idx[size_t(d)] < sa[size_t(d)]) break;
                idx[size_t(d)] = 0;
                boff -= bstride[size_t(d)] * sa[size_t(d)];
            }
        }
    }

    const bool rec = tape && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rec);
    if (rec) {
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, sa, bstride, n, r, same]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            if (ac.requires_grad()) {
                float* da = ac.grad();
                for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
            }
            if (bc.requires_grad()) {
                if (same) {
                    float* db = bc.grad();
                    for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
                } else {
                    std::vector<double> acc(size_t(bc.size()), 0.0);
                    std::vector<int> idx(size_t(r), 0);
                    int64_t boff = 0;
                    for (int64_t i = 0; i < n; ++i) {
                        acc[size_t(boff)] += dy[i];
                        for (int d = r - 1; d >= 0; --d) {
                            boff += bstride[size_t(d)];
                            if (++idx[size_t(d)] < sa[size_t(d)]) break;
                            idx[size_t(d)] = 0;
                            boff -= bstride[size_t(d)] * sa[size_t(d)];
                        }
                    }
                    float* db = bc.grad();
                    for (size_t i = 0; i < acc.size(); ++i) db[i] += float(acc[i]);
                }
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) {
        fail("mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    const bool rec = tape && (a.requires_grad() || b.requires_grad());
    out.set_requires_grad(rec);
    if (rec) {
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            if (ac.requires_grad()) {
                float* da = ac.grad();
                const float* bv = bc.data();
                for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
            }
            if (bc.requires_grad()) {
                float* db = bc.grad();
                const float* av = ac.data();
                for (int64_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, float s, Tape* tape) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * s;
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        tape->record([xc, oc, s, n]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            float* dx = xc.grad();
            for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * s;
        });
    }
    return out;
}

// ---- transpose / reshape / concat -------------------------------------------

namespace {

void permute_copy(const float* src, float* dst, const Shape& in_shape,
                  const std::vector<int>& perm, bool accumulate) {
    const int r = int(in_shape.size());
    Shape out_shape(size_t(r));
    for (int i = 0; i < r; ++i) out_shape[size_t(i)] = in_shape[size_t(perm[size_t(i)])];
    std::vector<int64_t> in_stride(size_t(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_stride[size_t(i)] = in_stride[size_t(i + 1)] * in_shape[size_t(i + 1)];
    }
    // stride of output dim i in the input layout
    std::vector<int64_t> walk(size_t(r));
    for (int i = 0; i < r; ++i) walk[size_t(i)] = in_stride[size_t(perm[size_t(i)])];

    const int64_t n = shape_numel(in_shape);
    std::vector<int> idx(size_t(r), 0);
    int64_t src_off = 0;
    for (int64_t o = 0; o < n; ++o) {
        if (accumulate) {
            dst[o] += src[src_off];
        } else {
            dst[o] = src[src_off];
        }
        for (int d = r - 1; d >= 0; --d) {
            src_off += walk[size_t(d)];
            if (++idx[size_t(d)] < out_shape[size_t(d)]) break;
            idx[size_t(d)] = 0;
            src_off -= walk[size_t(d)] * out_shape[size_t(d)];
        }
    }
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<int>& perm, Tape* tape) {
    const int r = x.ndim();
    if (int(perm.size()) != r) fail("transpose: perm rank mismatch for " + shape_str(x.shape()));
    std::vector<bool> seen(size_t(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[size_t(p)]) fail("transpose: invalid permutation");
        seen[size_t(p)] = true;
    }
    Shape out_shape(size_t(r));
    for (int i = 0; i < r; ++i) out_shape[size_t(i)] = x.dim(perm[size_t(i)]);
    Tensor out = Tensor::zeros(out_shape);
    permute_copy(x.data(), out.data(), x.shape(), perm, false);

    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        std::vector<int> inv(size_t(r));
        for (int i = 0; i < r; ++i) inv[size_t(perm[size_t(i)])] = i;
        Tensor xc = x, oc = out;
        Shape oshape = out_shape;
        tape->record([xc, oc, inv, oshape]() mutable {
            if (!oc.has_grad()) return;
            permute_copy(oc.grad(), xc.grad(), oshape, inv, true);
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape) {
    // A single extent of -1 is inferred.
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) fail("reshape: more than one inferred extent");
            infer = int(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.size() % known != 0) {
            fail("reshape: cannot infer extent for " + shape_str(x.shape()));
        }
        new_shape[size_t(infer)] = int(x.size() / known);
    }
    if (shape_numel(new_shape) != x.size()) {
        fail("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
    }
    Tensor out = Tensor::from(new_shape, x.values());
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            float* dx = xc.grad();
            const int64_t n = xc.size();
            for (int64_t i = 0; i < n; ++i) dx[i] += dy[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis, Tape* tape) {
    if (xs.empty()) fail("concat: no inputs");
    const int a = normalize_axis(axis, xs[0].ndim(), "concat");
    Shape out_shape = xs[0].shape();
    int total = 0;
    for (const Tensor& t : xs) {
        if (t.ndim() != xs[0].ndim()) fail("concat: rank mismatch");
        for (int i = 0; i < t.ndim(); ++i) {
            if (i != a && t.dim(i) != out_shape[size_t(i)]) {
                fail("concat: shape mismatch at axis " + std::to_string(i) + ": " +
                     shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
            }
        }
        total += t.dim(a);
    }
    out_shape[size_t(a)] = total;
    Tensor out = Tensor::zeros(out_shape);

    const int64_t outer = prod(out_shape, 0, size_t(a));
    const int64_t inner = prod(out_shape, size_t(a) + 1, out_shape.size());
    float* yv = out.data();
    int64_t col = 0;
    for (const Tensor& t : xs) {
        const int64_t rows = t.dim(a) * inner;
        const float* tv = t.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(yv + (o * total * inner + col * inner), tv + o * rows,
                        size_t(rows) * sizeof(float));
        }
        col += t.dim(a);
    }

    bool any = false;
    for (const Tensor& t : xs) any = any || t.requires_grad();
    const bool rec = tape && any;
    out.set_requires_grad(rec);
    if (rec) {
        std::vector<Tensor> xc = xs;
        Tensor oc = out;
        tape->record([xc, oc, outer, inner, total, a]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            int64_t col2 = 0;
            for (Tensor& t : xc) {
                const int64_t rows = t.dim(a) * inner;
                if (t.requires_grad()) {
                    float* dt = t.grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const float* src = dy + (o * total * inner + col2 * inner);
                        float* dst = dt + o * rows;
                        for (int64_t i = 0; i < rows; ++i) dst[i] += src[i];
                    }
                }
                col2 += t.dim(a);
            }
        });
    }
    return out;
}

// ---- gather ------------------------------------------------------------------

Tensor gather(const Tensor& x, const std::vector<int>& index, int axis, Tape* tape) {
    const int a = normalize_axis(axis, x.ndim(), "gather");
    const Shape& s = x.shape();
    const int extent = s[size_t(a)];
    for (int idx : index) {
        if (idx < 0 || idx >= extent) {
            fail("gather: index " + std::to_string(idx) + " out of range for extent " +
                 std::to_string(extent));
        }
    }
    Shape out_shape = s;
    out_shape[size_t(a)] = int(index.size());
    Tensor out = Tensor::zeros(out_shape);

    const int64_t outer = prod(s, 0, size_t(a));
    const int64_t inner = prod(s, size_t(a) + 1, s.size());
    const float* xv = x.data();
    float* yv = out.data();
    const int k = int(index.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int j = 0; j < k; ++j) {
            std::memcpy(yv + (o * k + j) * inner, xv + (o * extent + index[size_t(j)]) * inner,
                        size_t(inner) * sizeof(float));
        }
    }

    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        std::vector<int> ic = index;
        tape->record([xc, oc, ic, outer, inner, extent, k]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            float* dx = xc.grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int j = 0; j < k; ++j) {
                    const float* src = dy + (o * k + j) * inner;
                    float* dst = dx + (o * extent + ic[size_t(j)]) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx, Tape* tape) {
    if (x.ndim() != 3) fail("gather_tokens: expected rank-3 input, got " + shape_str(x.shape()));
    const int n = x.dim(0), t = x.dim(1), d = x.dim(2);
    if (int(idx.size()) != n) {
        fail("gather_tokens: " + std::to_string(idx.size()) + " index lists for batch " +
             std::to_string(n));
    }
    const int k = idx.empty() ? 0 : int(idx[0].size());
    for (const auto& row : idx) {
        if (int(row.size()) != k) fail("gather_tokens: ragged index lists");
        for (int v : row) {
            if (v < 0 || v >= t) {
                fail("gather_tokens: index " + std::to_string(v) + " out of range for extent " +
                     std::to_string(t));
            }
        }
    }
    Tensor out = Tensor::zeros({n, k, d});
    const float* xv = x.data();
    float* yv = out.data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            std::memcpy(yv + (int64_t(i) * k + j) * d,
                        xv + (int64_t(i) * t + idx[size_t(i)][size_t(j)]) * d,
                        size_t(d) * sizeof(float));
        }
    }
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        auto ic = idx;
        tape->record([xc, oc, ic, n, t, d, k]() mutable {
            if (!oc.has_grad()) return;
            const float* dy = oc.grad();
            float* dx = xc.grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    const float* src = dy + (int64_t(i) * k + j) * d;
                    float* dst = dx + (int64_t(i) * t + ic[size_t(i)][size_t(j)]) * d;
                    for (int v = 0; v < d; ++v) dst[v] += src[v];
                }
            }
        });
    }
    return out;
}

// ---- sum ---------------------------------------------------------------------

Tensor sum(const Tensor& x, Tape* tape) {
    double acc = 0.0;
    const float* xv = x.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) acc += xv[i];
    Tensor out = Tensor::scalar(float(acc));
    const bool rec = tape && x.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor xc = x, oc = out;
        tape->record([xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const float g = oc.grad()[0];
            float* dx = xc.grad();
            for (int64_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

// ---- argsort -------------------------------------------------------------------

std::vector<int> argsort(const float* v, int n) {
    std::vector<int> idx(size_t(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [v](int a, int b) { return v[a] < v[b]; });
    return idx;
}

std::vector<int> argsort(const std::vector<float>& v) {
    return argsort(v.data(), int(v.size()));
}

}  // namespace mft
