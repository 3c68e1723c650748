#include "mft/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace mft {

std::string to_string(DistillConfig::Mode m) {
    switch (m) {
        case DistillConfig::Mode::kNone: return "none";
        case DistillConfig::Mode::kSoft: return "soft";
        case DistillConfig::Mode::kHard: return "hard";
    }
    return "none";
}

DistillConfig::Mode distill_mode_from_string(const std::string& s) {
    if (s == "none") return DistillConfig::Mode::kNone;
    if (s == "soft") return DistillConfig::Mode::kSoft;
    if (s == "hard") return DistillConfig::Mode::kHard;
    throw std::invalid_argument("unknown distillation mode '" + s + "'");
}

std::string to_string(DistillConfig::TeacherInput t) {
    return t == DistillConfig::TeacherInput::kFull ? "full" : "masked";
}

DistillConfig::TeacherInput teacher_input_from_string(const std::string& s) {
    if (s == "full") return DistillConfig::TeacherInput::kFull;
    if (s == "masked") return DistillConfig::TeacherInput::kMasked;
    throw std::invalid_argument("unknown teacher input '" + s + "'");
}

std::string to_string(DistillConfig::KlDirection d) {
    return d == DistillConfig::KlDirection::kPaperLiteral ? "paper-literal" : "teacher-first";
}

DistillConfig::KlDirection kl_direction_from_string(const std::string& s) {
    if (s == "paper-literal") return DistillConfig::KlDirection::kPaperLiteral;
    if (s == "teacher-first") return DistillConfig::KlDirection::kTeacherFirst;
    throw std::invalid_argument("unknown KL direction '" + s + "'");
}

int argmax_row(const float* v, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j) {
        if (v[j] > v[best]) best = j;
    }
    return best;
}

namespace {

// log-softmax of one row into out (double precision).
void log_softmax_row(const float* v, int n, double inv_temp, std::vector<double>& out) {
    double mx = double(v[0]) * inv_temp;
    for (int j = 1; j < n; ++j) mx = std::max(mx, double(v[j]) * inv_temp);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(double(v[j]) * inv_temp - mx);
    const double lse = mx + std::log(denom);
    out.resize(size_t(n));
    for (int j = 0; j < n; ++j) out[size_t(j)] = double(v[j]) * inv_temp - lse;
}

Tensor ce_against(const Tensor& logits, const std::vector<int>& labels, Tape* tape,
                  const char* op) {
    if (logits.ndim() != 2) {
        throw std::invalid_argument(std::string(op) + ": logits must be (N,K), got " +
                                    shape_str(logits.shape()));
    }
    const int n = logits.dim(0), k = logits.dim(1);
    if (int(labels.size()) != n) {
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels.size()) +
                                    " labels for batch " + std::to_string(n));
    }
    for (int label : labels) {
        if (label < 0 || label >= k) {
            throw std::invalid_argument(std::string(op) + ": label " + std::to_string(label) +
                                        " outside [0," + std::to_string(k) + ")");
        }
    }
    double acc = 0.0;
    std::vector<float> probs(size_t(n) * size_t(k));
    std::vector<double> logp;
    for (int i = 0; i < n; ++i) {
        log_softmax_row(logits.data() + int64_t(i) * k, k, 1.0, logp);
        acc -= logp[size_t(labels[size_t(i)])];
        for (int j = 0; j < k; ++j) {
            probs[size_t(i) * size_t(k) + size_t(j)] = float(std::exp(logp[size_t(j)]));
        }
    }
    Tensor out = Tensor::scalar(float(acc / n));
    const bool rec = tape && logits.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor lc = logits, oc = out;
        std::vector<int> lab = labels;
        tape->record([lc, oc, lab, probs, n, k]() mutable {
            if (!oc.has_grad()) return;
            const float g = oc.grad()[0] / float(n);
            float* dl = lc.grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    const float p = probs[size_t(i) * size_t(k) + size_t(j)];
                    const float onehot = (j == lab[size_t(i)]) ? 1.f : 0.f;
                    dl[int64_t(i) * k + j] += g * (p - onehot);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tape* tape) {
    return ce_against(logits, labels, tape, "cross_entropy");
}

Tensor kl_distill(const Tensor& student_logits, const Tensor& teacher_logits,
                  float temperature, DistillConfig::KlDirection direction, Tape* tape) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.ndim() != 2) {
        throw std::invalid_argument("kl_distill: logits shapes differ: " +
                                    shape_str(student_logits.shape()) + " vs " +
                                    shape_str(teacher_logits.shape()));
    }
    if (!(temperature > 0.f)) {
        throw std::invalid_argument("kl_distill: temperature must be positive");
    }
    const int n = student_logits.dim(0), k = student_logits.dim(1);
    const double inv_t = 1.0 / double(temperature);
    const bool student_first = direction == DistillConfig::KlDirection::kPaperLiteral;

    double acc = 0.0;
    // Per-row data needed by the adjoint.
    std::vector<float> sprob(size_t(n) * size_t(k));
    std::vector<float> tprob(size_t(n) * size_t(k));
    std::vector<float> diff(size_t(n) * size_t(k));   // logp_s - logp_t
    std::vector<double> logp_s, logp_t;
    for (int i = 0; i < n; ++i) {
        log_softmax_row(student_logits.data() + int64_t(i) * k, k, inv_t, logp_s);
        log_softmax_row(teacher_logits.data() + int64_t(i) * k, k, inv_t, logp_t);
        double row = 0.0;
        for (int j = 0; j < k; ++j) {
            const double ps = std::exp(logp_s[size_t(j)]);
            const double pt = std::exp(logp_t[size_t(j)]);
            const double u = logp_s[size_t(j)] - logp_t[size_t(j)];
            sprob[size_t(i) * size_t(k) + size_t(j)] = float(ps);
            tprob[size_t(i) * size_t(k) + size_t(j)] = float(pt);
            diff[size_t(i) * size_t(k) + size_t(j)] = float(u);
            row += student_first ? ps * u : pt * (-u);
        }
        acc += row;
    }
    Tensor out = Tensor::scalar(float(acc / n));
    const bool rec = tape && student_logits.requires_grad();
    out.set_requires_grad(rec);
    if (rec) {
        Tensor sc = student_logits, oc = out;
        tape->record([sc, oc, sprob, tprob, diff, n, k, inv_t, student_first]() mutable {
            if (!oc.has_grad()) return;
            const float g = oc.grad()[0] * float(inv_t) / float(n);
            float* ds = sc.grad();
            for (int i = 0; i < n; ++i) {
                const float* ps = sprob.data() + size_t(i) * size_t(k);
                const float* pt = tprob.data() + size_t(i) * size_t(k);
                const float* u = diff.data() + size_t(i) * size_t(k);
                if (student_first) {
                    // d/ds KL(p_s || p_t) = p_s (u - <p_s, u>) / tau
                    double dot = 0.0;
                    for (int j = 0; j < k; ++j) dot += double(ps[j]) * double(u[j]);
                    for (int j = 0; j < k; ++j) {
                        ds[int64_t(i) * k + j] += g * ps[j] * (u[j] - float(dot));
                    }
                } else {
                    // d/ds KL(p_t || p_s) = (p_s - p_t) / tau
                    for (int j = 0; j < k; ++j) {
                        ds[int64_t(i) * k + j] += g * (ps[j] - pt[j]);
                    }
                }
            }
        });
    }
    return out;
}

Tensor hard_distill(const Tensor& student_logits, const Tensor& teacher_logits, Tape* tape) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.ndim() != 2) {
        throw std::invalid_argument("hard_distill: logits shapes differ: " +
                                    shape_str(student_logits.shape()) + " vs " +
                                    shape_str(teacher_logits.shape()));
    }
    const int n = teacher_logits.dim(0), k = teacher_logits.dim(1);
    std::vector<int> labels(size_t(n));
    for (int i = 0; i < n; ++i) {
        labels[size_t(i)] = argmax_row(teacher_logits.data() + int64_t(i) * k, k);
    }
    return ce_against(student_logits, labels, tape, "hard_distill");
}

LossBreakdown total_loss(const Tensor& student_logits, const std::vector<int>& labels,
                         const Tensor* teacher_logits, const DistillConfig& cfg, Tape* tape) {
    if (cfg.mode != DistillConfig::Mode::kNone && teacher_logits == nullptr) {
        throw std::invalid_argument("total_loss: distillation mode '" + to_string(cfg.mode) +
                                    "' requires teacher logits");
    }
    LossBreakdown out;
    Tensor ce = cross_entropy(student_logits, labels, tape);
    out.ce = double(ce.item());
    switch (cfg.mode) {
        case DistillConfig::Mode::kNone:
            out.total = ce;
            return out;
        case DistillConfig::Mode::kSoft: {
            Tensor kl = kl_distill(student_logits, *teacher_logits, cfg.temperature,
                                   cfg.kl_direction, tape);
            out.distill = double(kl.item());
            out.total = add(ce, scale(kl, cfg.balance, tape), tape);
            return out;
        }
        case DistillConfig::Mode::kHard: {
            Tensor hd = hard_distill(student_logits, *teacher_logits, tape);
            out.distill = double(hd.item());
            out.total = add(ce, scale(hd, cfg.balance, tape), tape);
            return out;
        }
    }
    throw std::invalid_argument("total_loss: bad distillation mode");
}

}  // namespace mft
