#pragma once

#include "entranf/core.hpp"
#include "entranf/kernels.hpp"

#include <vector>

namespace entranf {

/// Kernel plus variance-penalty weight lambda in [0, 1].
struct MmdLossSpec {
  Kernel kernel = Kernel::linear();
  double lambda = 0.0;

  void validate() const {
    detail::require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
    if (kernel.kind == KernelKind::gaussian)
      detail::require(kernel.bandwidth > 0.0, "gaussian bandwidth must be positive");
  }
};

inline constexpr double kLossZeroFloor = 1e-10;

inline double clip_loss(double raw) { return raw < kLossZeroFloor ? 0.0 : raw; }

/// Unclipped and clipped components of the penalized loss.
struct LossTerms {
  double mmd2_raw = 0.0;
  double penalty_raw = 0.0;
  double mmd2 = 0.0;
  double penalty = 0.0;
  double loss = 0.0;
};

/// Weighted MMD^2 and variance-penalty loss against a fixed weighted reference.
///
/// The reference/reference double sum does not depend on the candidate, so it is
/// evaluated once at construction. Candidate points are passed as an N_c x n
/// matrix; candidate weights are fixed. The linear kernel reduces to weighted
/// first and second moments and skips the pairwise loops.
class MmdLoss {
 public:
  MmdLoss(MmdLossSpec spec, Matrix reference, Vector reference_weights, Vector candidate_weights)
      : spec_(spec),
        reference_(std::move(reference)),
        packed_reference_(detail::packed_rows(reference_)),
        w_(std::move(reference_weights)),
        v_(std::move(candidate_weights)) {
    spec_.validate();
    detail::require(w_.size() == reference_.rows(), "reference weight count mismatch");
    const auto n = reference_.cols();
    const auto nr = reference_.rows();
    ref_ref_ = 0.0;
    ref_diag_ = 0.0;
    if (spec_.kernel.kind == KernelKind::linear) {
      const Vector a = reference_.transpose() * w_;
      ref_ref_ = a.squaredNorm() + w_.sum() * w_.sum();
      ref_diag_ = w_.dot(reference_.rowwise().squaredNorm()) + w_.sum();
      return;
    }
    for (Eigen::Index i = 0; i < nr; ++i) {
      const double* xi = packed_reference_.data() + i * n;
      double row = 0.0;
      for (Eigen::Index j = 0; j < nr; ++j)
        row += w_[j] * detail::kernel_value(spec_.kernel, xi, packed_reference_.data() + j * n, n);
      ref_ref_ += w_[i] * row;
      ref_diag_ += w_[i] * detail::kernel_value(spec_.kernel, xi, xi, n);
    }
  }

  static MmdLoss uniform_candidate(MmdLossSpec spec, Matrix reference, Vector reference_weights,
                                   Eigen::Index candidate_count) {
    return MmdLoss(spec, std::move(reference), std::move(reference_weights),
                   Vector::Constant(candidate_count, 1.0 / static_cast<double>(candidate_count)));
  }

  const MmdLossSpec& spec() const noexcept { return spec_; }

  LossTerms evaluate(const Matrix& candidate) const { return run(candidate, nullptr); }

  /// Also fills `gradient` (N_c x n) with d loss / d candidate member.
  LossTerms evaluate(const Matrix& candidate, Matrix& gradient) const { return run(candidate, &gradient); }

 private:
  LossTerms run(const Matrix& candidate, Matrix* gradient) const {
    detail::require(candidate.cols() == reference_.cols(), "candidate and reference differ in dimension");
    detail::require(candidate.rows() == v_.size(), "candidate weight count mismatch");
    const auto n = candidate.cols();
    const auto nr = reference_.rows();
    const auto nc = candidate.rows();
    const auto& k = spec_.kernel;
    const double lambda = spec_.lambda;
    if (k.kind == KernelKind::linear) return run_linear(candidate, gradient);
    const auto packed = detail::packed_rows(candidate);
    std::vector<double> grad;
    if (gradient) grad.assign(static_cast<std::size_t>(nc * n), 0.0);

    // Cross term: sum_i sum_j w_i v_j k(x_i, z_j).
    double cross = 0.0;
    for (Eigen::Index j = 0; j < nc; ++j) {
      const double* zj = packed.data() + j * n;
      double col = 0.0;
      for (Eigen::Index i = 0; i < nr; ++i) {
        const double* xi = packed_reference_.data() + i * n;
        const double kv = detail::kernel_value(k, xi, zj, n);
        col += w_[i] * kv;
        if (gradient) detail::kernel_grad_first_acc(k, zj, xi, n, kv, -2.0 * v_[j] * w_[i], grad.data() + j * n);
      }
      cross += v_[j] * col;
    }

    // Candidate terms: full double sum and diagonal.
    double cand_cand = 0.0;
    double cand_diag = 0.0;
    for (Eigen::Index j = 0; j < nc; ++j) {
      const double* zj = packed.data() + j * n;
      const double kd = detail::kernel_value(k, zj, zj, n);
      cand_diag += v_[j] * kd;
      double row = v_[j] * kd;
      if (gradient) {
        double* gj = grad.data() + j * n;
        // d/dz k(z, z): 2 v_j^2 grad_1 k(z_j, z_j) from the double sum, v_j times it twice from the diagonal.
        detail::kernel_grad_first_acc(k, zj, zj, n, kd, 2.0 * (1.0 - lambda) * v_[j] * v_[j] + 2.0 * lambda * v_[j], gj);
      }
      for (Eigen::Index l = j + 1; l < nc; ++l) {
        const double* zl = packed.data() + l * n;
        const double kv = detail::kernel_value(k, zj, zl, n);
        row += 2.0 * v_[l] * kv;
        if (gradient && lambda < 1.0) {
          const double s = 2.0 * (1.0 - lambda) * v_[j] * v_[l];
          detail::kernel_grad_first_acc(k, zj, zl, n, kv, s, grad.data() + j * n);
          detail::kernel_grad_first_acc(k, zl, zj, n, kv, s, grad.data() + l * n);
        }
      }
      cand_cand += v_[j] * row;
    }

    if (gradient) {
      gradient->resize(nc, n);
      for (Eigen::Index j = 0; j < nc; ++j)
        for (Eigen::Index c = 0; c < n; ++c) (*gradient)(j, c) = grad[static_cast<std::size_t>(j * n + c)];
    }
    return finish(ref_ref_ - 2.0 * cross + cand_cand, ref_diag_ - 2.0 * cross + cand_diag);
  }

  // k(x, y) = x.y + 1 factorizes through the weighted means, so every sum is O(N n).
  LossTerms run_linear(const Matrix& candidate, Matrix* gradient) const {
    const double lambda = spec_.lambda;
    const double wsum = w_.sum();
    const double vsum = v_.sum();
    const Vector a = reference_.transpose() * w_;
    const Vector b = candidate.transpose() * v_;
    const double cross = a.dot(b) + wsum * vsum;
    const double cand_cand = b.squaredNorm() + vsum * vsum;
    const double cand_diag = v_.dot(candidate.rowwise().squaredNorm()) + vsum;
    if (gradient) {
      // (1 - lambda) 2 v_j (b - a) + lambda 2 v_j (z_j - a)
      const Vector shift = (1.0 - lambda) * b - a;
      *gradient = (2.0 * lambda) * candidate;
      gradient->rowwise() += 2.0 * shift.transpose();
      for (Eigen::Index j = 0; j < candidate.rows(); ++j) gradient->row(j) *= v_[j];
    }
    return finish(ref_ref_ - 2.0 * cross + cand_cand, ref_diag_ - 2.0 * cross + cand_diag);
  }

  LossTerms finish(double mmd2_raw, double penalty_raw) const {
    const double lambda = spec_.lambda;
    LossTerms t;
    t.mmd2_raw = mmd2_raw;
    t.penalty_raw = penalty_raw;
    t.mmd2 = clip_loss(t.mmd2_raw);
    t.penalty = clip_loss(t.penalty_raw);
    t.loss = clip_loss((1.0 - lambda) * t.mmd2 + lambda * t.penalty);
    return t;
  }

  MmdLossSpec spec_;
  Matrix reference_;
  std::vector<double> packed_reference_;
  Vector w_;
  Vector v_;
  double ref_ref_ = 0.0;
  double ref_diag_ = 0.0;
};

namespace detail {

inline LossTerms loss_terms(const MmdLossSpec& spec, const WeightedEnsemble& reference,
                            const WeightedEnsemble& candidate) {
  detail::require(reference.dim() == candidate.dim(), "reference and candidate differ in dimension");
  MmdLoss loss(spec, reference.ensemble().members(), reference.weights(), candidate.weights());
  return loss.evaluate(candidate.ensemble().members());
}

}  // namespace detail

/// Weighted empirical MMD^2 between reference (weights w) and candidate (weights v).
inline double mmd_squared(const MmdLossSpec& spec, const WeightedEnsemble& reference,
                          const WeightedEnsemble& candidate) {
  return detail::loss_terms(spec, reference, candidate).mmd2;
}

/// sum_i w_i k(x_i, x_i) - 2 sum_ij w_i v_j k(x_i, z_j) + sum_j v_j k(z_j, z_j).
inline double pairwise_penalty(const MmdLossSpec& spec, const WeightedEnsemble& reference,
                               const WeightedEnsemble& candidate) {
  return detail::loss_terms(spec, reference, candidate).penalty;
}

/// (1 - lambda) MMD^2 + lambda * penalty.
inline double penalized_loss(const MmdLossSpec& spec, const WeightedEnsemble& reference,
                             const WeightedEnsemble& candidate) {
  return detail::loss_terms(spec, reference, candidate).loss;
}

/// Row j holds d penalized_loss / d candidate member j.
inline Matrix loss_gradient_wrt_candidate(const MmdLossSpec& spec, const WeightedEnsemble& reference,
                                          const WeightedEnsemble& candidate) {
  detail::require(reference.dim() == candidate.dim(), "reference and candidate differ in dimension");
  MmdLoss loss(spec, reference.ensemble().members(), reference.weights(), candidate.weights());
  Matrix g;
  loss.evaluate(candidate.ensemble().members(), g);
  return g;
}

}  // namespace entranf
