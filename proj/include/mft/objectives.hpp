#pragma once

#include <string>
#include <vector>

#include "mft/tensor.hpp"

namespace mft {

struct DistillConfig {
    enum class Mode { kNone, kSoft, kHard };
    enum class TeacherInput { kFull, kMasked };
    enum class KlDirection { kPaperLiteral, kTeacherFirst };

    Mode mode = Mode::kNone;
    float temperature = 1.0f;
    float balance = 1.0f;  // lambda
    TeacherInput teacher_input = TeacherInput::kFull;
    KlDirection kl_direction = KlDirection::kPaperLiteral;
};

std::string to_string(DistillConfig::Mode m);
DistillConfig::Mode distill_mode_from_string(const std::string& s);
std::string to_string(DistillConfig::TeacherInput t);
DistillConfig::TeacherInput teacher_input_from_string(const std::string& s);
std::string to_string(DistillConfig::KlDirection d);
DistillConfig::KlDirection kl_direction_from_string(const std::string& s);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tape* tape);

// Mean over the batch of KL(a || b) on temperature-scaled softmaxes. In the
// paper-literal direction a is the student, b the teacher; teacher-first
// swaps them. Teacher logits are treated as constants.
Tensor kl_distill(const Tensor& student_logits, const Tensor& teacher_logits,
                  float temperature, DistillConfig::KlDirection direction, Tape* tape);

// Cross-entropy against the teacher argmax; ties resolve to the lowest index.
Tensor hard_distill(const Tensor& student_logits, const Tensor& teacher_logits, Tape* tape);

struct LossBreakdown {
    Tensor total;
    double ce = 0.0;       // cross-entropy component
    double distill = 0.0;  // distillation component (0 when mode == none)
};

// L = L_CE + lambda * L_distill, components returned for logging. teacher may
// be null only when cfg.mode == kNone.
LossBreakdown total_loss(const Tensor& student_logits, const std::vector<int>& labels,
                         const Tensor* teacher_logits, const DistillConfig& cfg, Tape* tape);

// Row argmax with lowest-index tie-break.
int argmax_row(const float* v, int n);

}  // namespace mft
