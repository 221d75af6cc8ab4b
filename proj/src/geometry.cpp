#include "corrmoe/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace corrmoe::geom {

namespace {
constexpr double kRad2Deg = 180.0 / std::numbers::pi;

Eigen::Matrix3d cross_matrix(const Eigen::Vector3d& t) {
  Eigen::Matrix3d m;
  m << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  return m;
}
}  // namespace

void Pose::validate(double tol) const {
  const Eigen::Matrix3d rtr = rotation.transpose() * rotation;
  if ((rtr - Eigen::Matrix3d::Identity()).norm() > tol)
    throw PreconditionError("Pose: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > tol)
    throw PreconditionError("Pose: rotation determinant is not +1");
  if (std::abs(translation.norm() - 1.0) > tol)
    throw PreconditionError("Pose: translation is not unit norm");
}

EssentialMatrix EssentialMatrix::from_raw(const Eigen::Matrix3d& raw) {
  const double n = raw.norm();
  if (n < 1e-15)
    throw DegenerateInputError("EssentialMatrix: zero matrix");
  EssentialMatrix e;
  e.m = raw / n;
  return e;
}

bool EssentialMatrix::satisfies_invariants(double tol) const {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
  const Eigen::Vector3d s = svd.singularValues();
  if (s(2) >= tol) return false;
  if (std::abs(s(0) - s(1)) >= tol * s(0)) return false;
  return std::abs(m.norm() - 1.0) < 1e-9;
}

CorrespondenceSet CorrespondenceSet::subset(const std::vector<int>& idx) const {
  CorrespondenceSet out;
  out.coords.resize(static_cast<int>(idx.size()), 4);
  if (labels.size() > 0) out.labels.resize(static_cast<int>(idx.size()));
  if (weights.size() > 0) out.weights.resize(static_cast<int>(idx.size()));
  for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
    out.coords.row(i) = coords.row(idx[i]);
    if (labels.size() > 0) out.labels(i) = labels(idx[i]);
    if (weights.size() > 0) out.weights(i) = weights(idx[i]);
  }
  return out;
}

EssentialMatrix essential_from_pose(const Pose& pose) {
  if (pose.translation.norm() < 1e-12)
    throw DegenerateInputError(
        "essential_from_pose: zero translation (pure rotation)");
  return EssentialMatrix::from_raw(cross_matrix(pose.translation) *
                                   pose.rotation);
}

double symmetric_epipolar_distance(const Eigen::Matrix3d& e,
                                   const Eigen::RowVector4d& c,
                                   double sentinel) {
  const Eigen::Vector3d p(c(0), c(1), 1.0);
  const Eigen::Vector3d pp(c(2), c(3), 1.0);
  const Eigen::Vector3d ep = e * p;
  const Eigen::Vector3d etp = e.transpose() * pp;
  const double num = pp.dot(ep);
  const double denom =
      ep(0) * ep(0) + ep(1) * ep(1) + etp(0) * etp(0) + etp(1) * etp(1);
  if (denom < kEpipoleDenomFloor) return sentinel;
  return num * num / denom;
}

namespace detail {

Eigen::Matrix<double, Eigen::Dynamic, 9> epipolar_design(
    const Eigen::Matrix<double, Eigen::Dynamic, 4>& coords) {
  const int n = static_cast<int>(coords.rows());
  Eigen::Matrix<double, Eigen::Dynamic, 9> a(n, 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p(coords(i, 0), coords(i, 1), 1.0);
    const Eigen::Vector3d pp(coords(i, 2), coords(i, 3), 1.0);
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) a(i, 3 * r + col) = pp(r) * p(col);
  }
  return a;
}

WeightedNormalEig weighted_normal_eig(
    const Eigen::Matrix<double, Eigen::Dynamic, 9>& design,
    const Eigen::VectorXd& weights) {
  Eigen::Matrix<double, 9, 9> m = Eigen::Matrix<double, 9, 9>::Zero();
  for (int i = 0; i < design.rows(); ++i) {
    const double w2 = weights(i) * weights(i);
    if (w2 == 0.0) continue;
    m.noalias() += w2 * design.row(i).transpose() * design.row(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(m);
  if (eig.info() != Eigen::Success)
    throw DegenerateInputError("weighted_eight_point: eigensolver failed");
  WeightedNormalEig out;
  out.eigvals = eig.eigenvalues();
  out.eigvecs = eig.eigenvectors();
  // rank >= 8 requires the second-smallest eigenvalue to be nonzero
  if (out.eigvals(1) <= 1e-13 * std::max(out.eigvals(8), 1e-300))
    throw DegenerateInputError(
        "weighted_eight_point: weighted design matrix has rank < 8");
  return out;
}

Eigen::Matrix3d enforce_essential(const Eigen::Matrix3d& raw) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s(1.0, 1.0, 0.0);
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose() /
         std::numbers::sqrt2;
}

int sign_pivot_index(const Eigen::Matrix3d& e) {
  int best = 0;
  double best_abs = -1.0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double a = std::abs(e(r, c));
      if (a > best_abs) {
        best_abs = a;
        best = 3 * r + c;
      }
    }
  return best;
}

}  // namespace detail

EssentialMatrix weighted_eight_point(const CorrespondenceSet& cands,
                                     const Eigen::VectorXd& weights) {
  const int n = cands.size();
  if (n < 8)
    throw PreconditionError("weighted_eight_point: need at least 8 rows");
  if (weights.size() != n)
    throw PreconditionError("weighted_eight_point: weight length mismatch");
  int positive = 0;
  for (int i = 0; i < n; ++i) {
    if (weights(i) < 0.0)
      throw PreconditionError("weighted_eight_point: negative weight");
    if (weights(i) > 0.0) ++positive;
  }
  if (positive < 8)
    throw PreconditionError(
        "weighted_eight_point: fewer than 8 positive weights");
  if (!cands.coords.allFinite())
    throw PreconditionError("weighted_eight_point: non-finite coordinates");

  const auto design = detail::epipolar_design(cands.coords);
  const auto eig = detail::weighted_normal_eig(design, weights);
  Eigen::Matrix3d raw;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) raw(r, c) = eig.eigvecs(3 * r + c, 0);
  Eigen::Matrix3d e = detail::enforce_essential(raw);
  const int pivot = detail::sign_pivot_index(e);
  if (e(pivot / 3, pivot % 3) < 0.0) e = -e;
  EssentialMatrix out;
  out.m = e;
  return out;
}

VerificationResult full_size_verification(const EssentialMatrix& e,
                                          const CorrespondenceSet& all,
                                          double threshold) {
  const int n = all.size();
  if (n == 0)
    throw PreconditionError("full_size_verification: empty set");
  VerificationResult out;
  out.distances.resize(n);
  out.inlier_mask.resize(n);
  for (int i = 0; i < n; ++i) {
    out.distances(i) = symmetric_epipolar_distance(e.m, all.coords.row(i));
    out.inlier_mask[i] = out.distances(i) < threshold;
  }
  return out;
}

namespace {

// Midpoint triangulation; returns true when the point lies in front of
// both cameras.
bool positive_depths(const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                     const Eigen::RowVector4d& c) {
  const Eigen::Vector3d d1(c(0), c(1), 1.0);
  const Eigen::Vector3d c2 = -r.transpose() * t;
  const Eigen::Vector3d d2 = r.transpose() * Eigen::Vector3d(c(2), c(3), 1.0);
  const double a = d1.dot(d1);
  const double b = d1.dot(d2);
  const double cc = d2.dot(d2);
  const double r1 = c2.dot(d1);
  const double r2 = c2.dot(d2);
  const double det = b * b - a * cc;
  if (std::abs(det) < 1e-12 * a * cc) return false;  // near-parallel rays
  const double s = (-cc * r1 + b * r2) / det;
  const double u = (-b * r1 + a * r2) / det;
  if (s <= 0.0 || u <= 0.0) return false;
  const Eigen::Vector3d x = 0.5 * (s * d1 + c2 + u * d2);
  if (x.z() <= 0.0) return false;
  const Eigen::Vector3d x2 = r * x + t;
  return x2.z() > 0.0;
}

}  // namespace

Pose pose_from_essential(const EssentialMatrix& e,
                         const CorrespondenceSet& inliers) {
  if (inliers.size() < 2)
    throw PreconditionError("pose_from_essential: need at least 2 inliers");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      e.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;

  Eigen::Matrix3d r1 = u * w * v.transpose();
  Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  if (r1.determinant() < 0) r1 = -r1;
  if (r2.determinant() < 0) r2 = -r2;
  const Eigen::Vector3d tvec = u.col(2).normalized();

  const std::array<Pose, 4> candidates = {
      Pose{r1, tvec}, Pose{r1, -tvec}, Pose{r2, tvec}, Pose{r2, -tvec}};

  int best = -1;
  int best_count = -1;
  double best_dist = 0.0;
  for (int k = 0; k < 4; ++k) {
    int count = 0;
    for (int i = 0; i < inliers.size(); ++i)
      if (positive_depths(candidates[k].rotation, candidates[k].translation,
                          inliers.coords.row(i)))
        ++count;
    double mean_dist = 0.0;
    if (count == best_count && best >= 0) {
      const Eigen::Matrix3d ec = essential_from_pose(candidates[k]).m;
      for (int i = 0; i < inliers.size(); ++i)
        mean_dist += symmetric_epipolar_distance(ec, inliers.coords.row(i));
      mean_dist /= inliers.size();
    }
    if (count > best_count ||
        (count == best_count && mean_dist < best_dist)) {
      best = k;
      best_count = count;
      const Eigen::Matrix3d ec = essential_from_pose(candidates[k]).m;
      best_dist = 0.0;
      for (int i = 0; i < inliers.size(); ++i)
        best_dist += symmetric_epipolar_distance(ec, inliers.coords.row(i));
      best_dist /= inliers.size();
    }
  }
  if (best_count <= 0)
    throw DegenerateInputError(
        "pose_from_essential: no candidate passes the cheirality test");
  return candidates[best];
}

std::vector<double> pose_auc(std::vector<double> errors_deg,
                             const std::vector<double>& thresholds_deg) {
  if (errors_deg.empty())
    throw PreconditionError("pose_auc: empty error list");
  for (double e : errors_deg)
    if (!(e >= 0.0) || !std::isfinite(e))
      throw PreconditionError("pose_auc: errors must be finite and >= 0");
  std::sort(errors_deg.begin(), errors_deg.end());
  const int m = static_cast<int>(errors_deg.size());

  // cumulative curve knots: (0, 0) then (e_i, (i+1)/m)
  std::vector<double> xs(m + 1), ys(m + 1);
  xs[0] = 0.0;
  ys[0] = 0.0;
  for (int i = 0; i < m; ++i) {
    xs[i + 1] = errors_deg[i];
    ys[i + 1] = static_cast<double>(i + 1) / m;
  }

  std::vector<double> aucs;
  aucs.reserve(thresholds_deg.size());
  for (double tau : thresholds_deg) {
    if (!(tau > 0.0)) throw PreconditionError("pose_auc: threshold <= 0");
    // knots strictly below tau, then clamp the curve at tau
    int pos = static_cast<int>(
        std::lower_bound(xs.begin(), xs.end(), tau) - xs.begin());
    double area = 0.0;
    for (int i = 0; i + 1 < pos; ++i)
      area += (xs[i + 1] - xs[i]) * 0.5 * (ys[i] + ys[i + 1]);
    area += (tau - xs[pos - 1]) * ys[pos - 1];
    aucs.push_back(area / tau);
  }
  return aucs;
}

double rotation_angle_deg(const Eigen::Matrix3d& r_est,
                          const Eigen::Matrix3d& r_gt) {
  const double c = ((r_est.transpose() * r_gt).trace() - 1.0) * 0.5;
  return std::acos(std::clamp(c, -1.0, 1.0)) * kRad2Deg;
}

double translation_angle_deg(const Eigen::Vector3d& t_est,
                             const Eigen::Vector3d& t_gt) {
  const double c =
      std::abs(t_est.normalized().dot(t_gt.normalized()));
  return std::acos(std::clamp(c, 0.0, 1.0)) * kRad2Deg;
}

double pose_error_deg(const Pose& est, const Pose& gt) {
  return std::max(rotation_angle_deg(est.rotation, gt.rotation),
                  translation_angle_deg(est.translation, gt.translation));
}

}  // namespace corrmoe::geom
