#pragma once

#include <Eigen/Dense>
#include <vector>

#include "corrmoe/errors.hpp"

namespace corrmoe::geom {

/// Relative camera pose. A point X in the first camera frame maps to
/// R*X + t in the second. Translation carries no scale and is kept at
/// unit norm.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::UnitX();

  /// Throws PreconditionError unless R is orthonormal with det +1 and
  /// t has unit norm (tolerance 1e-9).
  void validate(double tol = 1e-9) const;
};

/// 3x3 essential matrix, Frobenius-normalized to 1.
struct EssentialMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();

  static EssentialMatrix from_raw(const Eigen::Matrix3d& raw);

  /// rank 2 and equal leading singular values, tolerance 1e-7.
  bool satisfies_invariants(double tol = 1e-7) const;
};

/// N x 4 set of intrinsics-normalized point pairs (x, y, x', y') with
/// optional binary labels and non-negative weights (empty when absent).
struct CorrespondenceSet {
  Eigen::Matrix<double, Eigen::Dynamic, 4> coords;
  Eigen::VectorXd labels;
  Eigen::VectorXd weights;

  int size() const { return static_cast<int>(coords.rows()); }
  CorrespondenceSet subset(const std::vector<int>& idx) const;
};

/// Distance returned when a point sits at an epipole and the symmetric
/// epipolar denominator underflows; keeps batch evaluation alive.
inline constexpr double kEpipoleSentinel = 1e6;
inline constexpr double kEpipoleDenomFloor = 1e-20;

/// E = [t]_x R, Frobenius-normalized. Throws DegenerateInputError when
/// the translation is (numerically) zero.
EssentialMatrix essential_from_pose(const Pose& pose);

/// (p'^T E p)^2 / ((Ep)_1^2 + (Ep)_2^2 + (E^T p')_1^2 + (E^T p')_2^2)
/// with p = (x, y, 1), p' = (x', y', 1).
double symmetric_epipolar_distance(const Eigen::Matrix3d& e,
                                   const Eigen::RowVector4d& c,
                                   double sentinel = kEpipoleSentinel);

/// Weighted least-squares essential estimate: design row i is the
/// row-major flattening of p'_i p_i^T scaled by w_i; the minimizer is the
/// eigenvector of the smallest eigenvalue of the weighted normal matrix,
/// then singular values are replaced by (1,1,0) and the result
/// renormalized. Sign is canonicalized so the entry of largest magnitude
/// (first such index) is positive.
EssentialMatrix weighted_eight_point(const CorrespondenceSet& cands,
                                     const Eigen::VectorXd& weights);

struct VerificationResult {
  Eigen::VectorXd distances;
  std::vector<bool> inlier_mask;  // distances[i] < threshold
};

/// Scores every correspondence of the full initial set against E.
VerificationResult full_size_verification(const EssentialMatrix& e,
                                          const CorrespondenceSet& all,
                                          double threshold);

/// Decomposes E into the four (R, t) candidates and picks the one with
/// the most positive-depth points under midpoint triangulation; ties go
/// to the candidate with the lowest mean epipolar distance, then to the
/// lower candidate index.
Pose pose_from_essential(const EssentialMatrix& e,
                         const CorrespondenceSet& inliers);

/// Normalized area under the cumulative error curve on [0, tau] per
/// threshold, by trapezoidal integration over the sorted errors.
std::vector<double> pose_auc(std::vector<double> errors_deg,
                             const std::vector<double>& thresholds_deg);

double rotation_angle_deg(const Eigen::Matrix3d& r_est,
                          const Eigen::Matrix3d& r_gt);
/// Angle between translation directions, sign-insensitive.
double translation_angle_deg(const Eigen::Vector3d& t_est,
                             const Eigen::Vector3d& t_gt);
/// max(rotation angle, translation angle), the per-pair pose error.
double pose_error_deg(const Pose& est, const Pose& gt);

namespace detail {

/// N x 9 epipolar design matrix, row i = rowmajor(p'_i p_i^T).
Eigen::Matrix<double, Eigen::Dynamic, 9> epipolar_design(
    const Eigen::Matrix<double, Eigen::Dynamic, 4>& coords);

struct WeightedNormalEig {
  Eigen::Matrix<double, 9, 9> eigvecs;  // columns, eigenvalues ascending
  Eigen::Matrix<double, 9, 1> eigvals;
};

/// Eigendecomposition of A^T diag(w^2) A. Throws on rank < 8.
WeightedNormalEig weighted_normal_eig(
    const Eigen::Matrix<double, Eigen::Dynamic, 9>& design,
    const Eigen::VectorXd& weights);

/// U diag(1,1,0) V^T / sqrt(2).
Eigen::Matrix3d enforce_essential(const Eigen::Matrix3d& raw);

/// First index (row-major) attaining the max |entry|.
int sign_pivot_index(const Eigen::Matrix3d& e);

}  // namespace detail

}  // namespace corrmoe::geom
