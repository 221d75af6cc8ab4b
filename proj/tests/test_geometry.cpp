#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "corrmoe/geometry.hpp"
#include "corrmoe/rng.hpp"

using namespace corrmoe;
using namespace corrmoe::geom;

namespace {

// ---- independent scene/projection oracle ------------------------------
// Samples a pose and 3D points, projects into both normalized image
// planes, and keeps doubly visible points. Used as ground truth for the
// estimators under test; deliberately has no code in common with them.

Pose random_pose(RngStream& rng, double max_angle_deg = 30.0) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const double angle = rng.uniform(5.0, max_angle_deg) * M_PI / 180.0;
  Eigen::Vector3d t(rng.normal(), rng.normal(), rng.normal());
  t.normalize();
  return Pose{Eigen::AngleAxisd(angle, axis).toRotationMatrix(), t};
}

CorrespondenceSet project_scene(const Pose& pose, int n, RngStream& rng) {
  CorrespondenceSet out;
  out.coords.resize(n, 4);
  int got = 0;
  while (got < n) {
    const double z = rng.uniform(4.0, 8.0);
    const Eigen::Vector3d x1(rng.uniform(-0.6, 0.6) * z,
                             rng.uniform(-0.6, 0.6) * z, z);
    const Eigen::Vector3d x2 = pose.rotation * x1 + pose.translation;
    if (x2.z() < 0.2) continue;
    const double u2 = x2.x() / x2.z();
    const double v2 = x2.y() / x2.z();
    if (std::abs(u2) > 1.5 || std::abs(v2) > 1.5) continue;
    out.coords.row(got) << x1.x() / z, x1.y() / z, u2, v2;
    ++got;
  }
  return out;
}

// one-shot transcription of the symmetric epipolar quotient
double epipolar_oracle(const Eigen::Matrix3d& e, double x, double y,
                       double xp, double yp) {
  const double ep0 = e(0, 0) * x + e(0, 1) * y + e(0, 2);
  const double ep1 = e(1, 0) * x + e(1, 1) * y + e(1, 2);
  const double ep2 = e(2, 0) * x + e(2, 1) * y + e(2, 2);
  const double num = xp * ep0 + yp * ep1 + ep2;
  const double et0 = e(0, 0) * xp + e(1, 0) * yp + e(2, 0);
  const double et1 = e(0, 1) * xp + e(1, 1) * yp + e(2, 1);
  return num * num / (ep0 * ep0 + ep1 * ep1 + et0 * et0 + et1 * et1);
}

double frob_err_sign_aligned(const Eigen::Matrix3d& a,
                             const Eigen::Matrix3d& b) {
  const Eigen::Matrix3d an = a / a.norm();
  const Eigen::Matrix3d bn = b / b.norm();
  return std::min((an - bn).norm(), (an + bn).norm());
}

}  // namespace

TEST_CASE("essential_from_pose axis-aligned closed forms") {
  Eigen::Matrix3d ex;  // cross matrix of (1,0,0), normalized
  ex << 0, 0, 0, 0, 0, -1, 0, 1, 0;
  const auto e1 =
      essential_from_pose({Eigen::Matrix3d::Identity(), {1, 0, 0}});
  CHECK(frob_err_sign_aligned(e1.m, ex) < 1e-12);

  Eigen::Matrix3d ez;
  ez << 0, -1, 0, 1, 0, 0, 0, 0, 0;
  const auto e2 =
      essential_from_pose({Eigen::Matrix3d::Identity(), {0, 0, 1}});
  CHECK(frob_err_sign_aligned(e2.m, ez) < 1e-12);

  CHECK(std::abs(e1.m.norm() - 1.0) < 1e-12);
  CHECK(e1.satisfies_invariants());
}

TEST_CASE("essential_from_pose rejects pure rotation") {
  CHECK_THROWS_AS(
      essential_from_pose({Eigen::Matrix3d::Identity(), {0, 0, 0}}),
      DegenerateInputError);
}

TEST_CASE("epipolar constraint holds on projected scenes") {
  RngStream rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Pose pose = random_pose(rng);
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 50, rng);
    for (int i = 0; i < corr.size(); ++i) {
      const Eigen::Vector3d p(corr.coords(i, 0), corr.coords(i, 1), 1.0);
      const Eigen::Vector3d pp(corr.coords(i, 2), corr.coords(i, 3), 1.0);
      CHECK(std::abs(pp.dot(e.m * p)) < 1e-10);
      CHECK(symmetric_epipolar_distance(e.m, corr.coords.row(i)) < 1e-12);
    }
  }
}

TEST_CASE("symmetric epipolar distance: scale invariance and oracle") {
  RngStream rng(11);
  const Pose pose = random_pose(rng);
  const auto e = essential_from_pose(pose);
  auto corr = project_scene(pose, 20, rng);
  // perturb so distances are nonzero
  for (int i = 0; i < corr.size(); ++i)
    for (int c = 2; c < 4; ++c) corr.coords(i, c) += 0.01 * rng.normal();

  for (int i = 0; i < corr.size(); ++i) {
    const Eigen::RowVector4d c = corr.coords.row(i);
    const double d = symmetric_epipolar_distance(e.m, c);
    for (double s : {0.5, 3.0}) {
      const double ds =
          symmetric_epipolar_distance(Eigen::Matrix3d(s * e.m), c);
      CHECK(std::abs(ds - d) <= 1e-10 * std::max(1.0, d));
    }
    const double ref = epipolar_oracle(e.m, c(0), c(1), c(2), c(3));
    CHECK(std::abs(d - ref) <= 1e-12 * std::max(1.0, ref));
  }
}

TEST_CASE("epipole denominator underflow returns the sentinel") {
  // forward motion: both epipoles sit at the image origin
  const auto e =
      essential_from_pose({Eigen::Matrix3d::Identity(), {0, 0, 1}});
  const Eigen::RowVector4d at_epipole(0, 0, 0, 0);
  CHECK(symmetric_epipolar_distance(e.m, at_epipole) ==
        doctest::Approx(kEpipoleSentinel));
}

TEST_CASE("weighted eight point recovers ground truth") {
  RngStream rng(23);
  const Pose pose = random_pose(rng);
  const auto e_gt = essential_from_pose(pose);
  const auto corr = project_scene(pose, 200, rng);
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(200);

  const auto e_hat = weighted_eight_point(corr, w);
  CHECK(e_hat.satisfies_invariants());
  CHECK(frob_err_sign_aligned(e_hat.m, e_gt.m) < 1e-6);

  SUBCASE("weight scaling changes nothing") {
    const auto e_scaled = weighted_eight_point(corr, 2.7 * w);
    CHECK(frob_err_sign_aligned(e_scaled.m, e_hat.m) < 1e-9);
  }
}

TEST_CASE("weighted eight point ignores zero-weight outliers") {
  RngStream rng(31);
  const Pose pose = random_pose(rng);
  const auto e_gt = essential_from_pose(pose);
  auto corr = project_scene(pose, 200, rng);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(200);
  for (int i = 100; i < 200; ++i) {  // 50% outliers, zero weight
    corr.coords(i, 2) = rng.uniform(-1.0, 1.0);
    corr.coords(i, 3) = rng.uniform(-1.0, 1.0);
    w(i) = 0.0;
  }
  const auto e_hat = weighted_eight_point(corr, w);
  CHECK(frob_err_sign_aligned(e_hat.m, e_gt.m) < 1e-6);
}

TEST_CASE("weighted eight point preconditions") {
  RngStream rng(37);
  const Pose pose = random_pose(rng);
  const auto corr = project_scene(pose, 20, rng);

  CHECK_THROWS_AS(weighted_eight_point(corr.subset({0, 1, 2, 3, 4, 5, 6}),
                                       Eigen::VectorXd::Ones(7)),
                  PreconditionError);
  CHECK_THROWS_AS(weighted_eight_point(corr, Eigen::VectorXd::Ones(19)),
                  PreconditionError);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(20);
  w.head(7).setOnes();
  CHECK_THROWS_AS(weighted_eight_point(corr, w), PreconditionError);
  w(0) = -1.0;
  CHECK_THROWS_AS(weighted_eight_point(corr, w), PreconditionError);
}

TEST_CASE("weighted eight point detects degenerate configurations") {
  // every row identical: rank-1 design matrix
  CorrespondenceSet corr;
  corr.coords.resize(20, 4);
  for (int i = 0; i < 20; ++i) corr.coords.row(i) << 0.1, 0.2, 0.3, 0.4;
  CHECK_THROWS_AS(weighted_eight_point(corr, Eigen::VectorXd::Ones(20)),
                  DegenerateInputError);
}

TEST_CASE("full size verification") {
  RngStream rng(41);
  const Pose pose = random_pose(rng);
  const auto e_gt = essential_from_pose(pose);

  // 30% clean inliers, 70% resampled outliers with distance >= 1e-4
  const int n = 200, n_in = 60;
  auto corr = project_scene(pose, n, rng);
  corr.labels = Eigen::VectorXd::Zero(n);
  corr.labels.head(n_in).setOnes();
  for (int i = n_in; i < n; ++i) {
    do {
      corr.coords(i, 2) = rng.uniform(-1.0, 1.0);
      corr.coords(i, 3) = rng.uniform(-1.0, 1.0);
    } while (symmetric_epipolar_distance(e_gt.m, corr.coords.row(i)) < 1e-4);
  }

  const auto res = full_size_verification(e_gt, corr, 1e-4);
  REQUIRE(static_cast<int>(res.inlier_mask.size()) == n);
  for (int i = 0; i < n; ++i)
    CHECK(res.inlier_mask[i] == (corr.labels(i) > 0.5));

  SUBCASE("threshold zero keeps nothing") {
    auto noisy = corr;
    for (int i = 0; i < n; ++i) noisy.coords(i, 2) += 1e-3 * rng.normal();
    const auto none = full_size_verification(e_gt, noisy, 0.0);
    for (bool b : none.inlier_mask) CHECK_FALSE(b);
  }
  SUBCASE("threshold above the sentinel keeps everything") {
    const auto all = full_size_verification(e_gt, corr, 1e9);
    for (bool b : all.inlier_mask) CHECK(b);
  }
  SUBCASE("empty set is rejected") {
    CHECK_THROWS_AS(full_size_verification(e_gt, CorrespondenceSet{}, 1e-4),
                    PreconditionError);
  }
}

TEST_CASE("pose recovery round trip") {
  RngStream rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const Pose pose = random_pose(rng);
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 30, rng);
    const Pose rec = pose_from_essential(e, corr);
    rec.validate();
    CHECK(rotation_angle_deg(rec.rotation, pose.rotation) < 1e-3);
    CHECK(translation_angle_deg(rec.translation, pose.translation) < 1e-3);
  }
}

TEST_CASE("pose recovery details") {
  RngStream rng(47);
  SUBCASE("tight tolerance on one scene") {
    const Pose pose = random_pose(rng);
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 50, rng);
    const Pose rec = pose_from_essential(e, corr);
    CHECK(rotation_angle_deg(rec.rotation, pose.rotation) < 1e-4);
    CHECK(translation_angle_deg(rec.translation, pose.translation) < 1e-4);
  }
  SUBCASE("pure lateral motion") {
    const Pose pose{Eigen::Matrix3d::Identity(), {1, 0, 0}};
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 30, rng);
    const Pose rec = pose_from_essential(e, corr);
    CHECK(rotation_angle_deg(rec.rotation, pose.rotation) < 1e-4);
    CHECK(translation_angle_deg(rec.translation, pose.translation) < 1e-4);
  }
  SUBCASE("negated essential matrix gives the same pose") {
    const Pose pose = random_pose(rng);
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 30, rng);
    EssentialMatrix neg;
    neg.m = -e.m;
    const Pose a = pose_from_essential(e, corr);
    const Pose b = pose_from_essential(neg, corr);
    CHECK((a.rotation - b.rotation).norm() < 1e-12);
    CHECK((a.translation - b.translation).norm() < 1e-12);
  }
  SUBCASE("too few inliers") {
    const Pose pose = random_pose(rng);
    const auto e = essential_from_pose(pose);
    const auto corr = project_scene(pose, 30, rng);
    CHECK_THROWS_AS(pose_from_essential(e, corr.subset({0})),
                    PreconditionError);
  }
}

TEST_CASE("pose auc") {
  SUBCASE("all zero errors give full area") {
    const auto a = pose_auc({0, 0, 0}, {5, 10, 20});
    for (double v : a) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("errors at or beyond the largest threshold give zero") {
    const auto a = pose_auc({20, 25, 30}, {5, 10, 20});
    for (double v : a) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("two-point hand integration") {
    // sorted errors {0, 10}: recall steps to 1/2 at 0 and to 1 at 10.
    // The curve integrated on [0, 10] holds recall 1/2 across the whole
    // interval (the final knot only closes the curve), so the area is
    // 10 * 1/2 = 5 and the normalized value 5/10 = 1/2.
    const auto a = pose_auc({0.0, 10.0}, {10.0});
    CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("interior errors integrate trapezoidally") {
    // knots (0,0) -> (2,1/2) -> clamp at 10 with recall 1/2:
    // area = 2*(1/4) + 8*(1/2) = 4.5, normalized 0.45
    const auto a = pose_auc({2.0, 10.0}, {10.0});
    CHECK(a[0] == doctest::Approx(0.45).epsilon(1e-12));
  }
  SUBCASE("monotone in threshold") {
    RngStream rng(53);
    std::vector<double> errs(40);
    for (auto& e : errs) e = rng.uniform(0.0, 30.0);
    const auto a = pose_auc(errs, {5, 10, 20});
    CHECK(a[0] <= a[1] + 1e-12);
    CHECK(a[1] <= a[2] + 1e-12);
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(pose_auc({}, {5.0}), PreconditionError);
    CHECK_THROWS_AS(pose_auc({1.0, -2.0}, {5.0}), PreconditionError);
  }
}

TEST_CASE("angle metrics") {
  const Eigen::Matrix3d r =
      Eigen::AngleAxisd(10.0 * M_PI / 180.0, Eigen::Vector3d::UnitY())
          .toRotationMatrix();
  CHECK(rotation_angle_deg(r, Eigen::Matrix3d::Identity()) ==
        doctest::Approx(10.0));
  CHECK(translation_angle_deg({1, 0, 0}, {-1, 0, 0}) ==
        doctest::Approx(0.0));
  CHECK(translation_angle_deg({1, 0, 0}, {0, 1, 0}) ==
        doctest::Approx(90.0));
  const Pose a{r, {1, 0, 0}};
  const Pose b{Eigen::Matrix3d::Identity(), {0, 1, 0}};
  CHECK(pose_error_deg(a, b) == doctest::Approx(90.0));
}

TEST_CASE("pose validation") {
  Pose p;
  p.validate();
  Pose bad_t{Eigen::Matrix3d::Identity(), {1, 1, 0}};
  CHECK_THROWS_AS(bad_t.validate(), PreconditionError);
  Pose bad_r{2.0 * Eigen::Matrix3d::Identity(), {1, 0, 0}};
  CHECK_THROWS_AS(bad_r.validate(), PreconditionError);
}
