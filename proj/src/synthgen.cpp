#include "corrmoe/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "corrmoe/errors.hpp"
#include "json.hpp"

namespace corrmoe::synth {

namespace {

constexpr double kView1Window = 0.75;   // first-view sampling half-width
constexpr double kView2Window = 1.1;    // second-view visibility half-width
constexpr double kOutlierWindow = 0.9;  // uniform-random outlier half-width
constexpr double kMinDepth2 = 0.2;
constexpr double kPlanarSlab = 0.06;  // relative slab thickness; a strictly
                                      // flat scene is degenerate for the
                                      // eight-point estimator
constexpr int kClusterCount = 5;
constexpr double kClusterSpread = 0.06;
constexpr double kClusterDepthSpread = 0.08;
constexpr int kMaxAttempts = 10;

template <typename T>
T parse_enum(const std::string& s,
             std::initializer_list<std::pair<const char*, T>> table,
             const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string("unknown ") + what + ": " + s);
}

}  // namespace

std::string to_string(PointLayout v) {
  switch (v) {
    case PointLayout::kUniformBox: return "uniform-box";
    case PointLayout::kPlanar: return "planar";
    case PointLayout::kClustered: return "clustered";
  }
  return "?";
}
std::string to_string(Motion v) {
  switch (v) {
    case Motion::kSideways: return "sideways";
    case Motion::kForward: return "forward";
    case Motion::kMixed: return "mixed";
  }
  return "?";
}
std::string to_string(NoiseFamily v) {
  switch (v) {
    case NoiseFamily::kGaussian: return "gaussian";
    case NoiseFamily::kLaplacian: return "laplacian";
    case NoiseFamily::kUniform: return "uniform";
  }
  return "?";
}
std::string to_string(Density v) {
  switch (v) {
    case Density::kUniform: return "uniform";
    case Density::kCenterBiased: return "center-biased";
    case Density::kBorderBiased: return "border-biased";
  }
  return "?";
}
std::string to_string(OutlierModel v) {
  switch (v) {
    case OutlierModel::kUniformRandom: return "uniform-random";
    case OutlierModel::kShuffledInlier: return "shuffled-inlier";
    case OutlierModel::kEpipolarConfuser: return "epipolar-confuser";
  }
  return "?";
}

PointLayout point_layout_from_string(const std::string& s) {
  return parse_enum<PointLayout>(s,
                                 {{"uniform-box", PointLayout::kUniformBox},
                                  {"planar", PointLayout::kPlanar},
                                  {"clustered", PointLayout::kClustered}},
                                 "point layout");
}
Motion motion_from_string(const std::string& s) {
  return parse_enum<Motion>(s,
                            {{"sideways", Motion::kSideways},
                             {"forward", Motion::kForward},
                             {"mixed", Motion::kMixed}},
                            "motion");
}
NoiseFamily noise_family_from_string(const std::string& s) {
  return parse_enum<NoiseFamily>(s,
                                 {{"gaussian", NoiseFamily::kGaussian},
                                  {"laplacian", NoiseFamily::kLaplacian},
                                  {"uniform", NoiseFamily::kUniform}},
                                 "noise family");
}
Density density_from_string(const std::string& s) {
  return parse_enum<Density>(s,
                             {{"uniform", Density::kUniform},
                              {"center-biased", Density::kCenterBiased},
                              {"border-biased", Density::kBorderBiased}},
                             "keypoint density");
}
OutlierModel outlier_model_from_string(const std::string& s) {
  return parse_enum<OutlierModel>(
      s,
      {{"uniform-random", OutlierModel::kUniformRandom},
       {"shuffled-inlier", OutlierModel::kShuffledInlier},
       {"epipolar-confuser", OutlierModel::kEpipolarConfuser}},
      "outlier model");
}

void SceneSpec::validate() const {
  if (scene_id.empty()) throw ConfigError("scene: empty id");
  if (!(depth_near > 0.0))
    throw ConfigError("scene " + scene_id + ": depth_near must be positive");
  if (!(depth_far > depth_near))
    throw ConfigError("scene " + scene_id + ": depth_far must exceed near");
  if (!(rotation_bound_deg > 0.0 && rotation_bound_deg <= 60.0))
    throw ConfigError("scene " + scene_id +
                      ": rotation bound must be in (0, 60] degrees");
}

void DomainSpec::validate() const {
  if (domain_id.empty()) throw ConfigError("domain: empty id");
  if (!(sigma >= 0.0 && sigma <= 0.02))
    throw ConfigError("domain " + domain_id + ": sigma must be in [0, 0.02]");
  if (!(coordinate_warp >= 0.0 && coordinate_warp <= 0.05))
    throw ConfigError("domain " + domain_id +
                      ": coordinate_warp must be in [0, 0.05]");
  if (!(confuser_mix >= 0.0 && confuser_mix <= 1.0))
    throw ConfigError("domain " + domain_id +
                      ": confuser_mix must be in [0, 1]");
}

namespace {

Eigen::Vector3d unit_vector(RngStream& rng) {
  Eigen::Vector3d v;
  do {
    v << rng.normal(), rng.normal(), rng.normal();
  } while (v.norm() < 1e-6);
  return v.normalized();
}

geom::Pose sample_pose(const SceneSpec& scene, RngStream& rng) {
  const double angle_deg =
      rng.uniform(0.1 * scene.rotation_bound_deg, scene.rotation_bound_deg);
  const Eigen::Matrix3d r =
      Eigen::AngleAxisd(angle_deg * std::numbers::pi / 180.0, unit_vector(rng))
          .toRotationMatrix();
  Eigen::Vector3d t;
  switch (scene.motion) {
    case Motion::kSideways: {
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      t << std::cos(theta), std::sin(theta), rng.uniform(-0.15, 0.15);
      break;
    }
    case Motion::kForward: {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      t << rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), sign;
      break;
    }
    case Motion::kMixed:
      t = unit_vector(rng);
      break;
  }
  return geom::Pose{r, t.normalized()};
}

double sample_axis_coord(Density density, RngStream& rng) {
  switch (density) {
    case Density::kUniform:
      return rng.uniform(-kView1Window, kView1Window);
    case Density::kCenterBiased:
      return kView1Window * (2.0 * rng.beta(4.0, 4.0) - 1.0);
    case Density::kBorderBiased:
      return kView1Window * (2.0 * rng.beta(0.35, 0.35) - 1.0);
  }
  return 0.0;
}

// Per-attempt scene structure: plane parameters or cluster centers.
struct LayoutState {
  Eigen::Vector3d plane_normal = -Eigen::Vector3d::UnitZ();
  double plane_zmid = 0.0;
  std::vector<Eigen::Vector3d> clusters;  // (u, v, z)
};

LayoutState make_layout(const SceneSpec& scene, Density density,
                        RngStream& rng) {
  LayoutState st;
  if (scene.point_layout == PointLayout::kPlanar) {
    const double tilt = rng.uniform(0.0, 25.0 * std::numbers::pi / 180.0);
    const double psi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    st.plane_normal << std::tan(tilt) * std::cos(psi),
        std::tan(tilt) * std::sin(psi), -1.0;
    st.plane_zmid = 0.5 * (scene.depth_near + scene.depth_far);
  } else if (scene.point_layout == PointLayout::kClustered) {
    for (int c = 0; c < kClusterCount; ++c)
      st.clusters.emplace_back(sample_axis_coord(density, rng),
                               sample_axis_coord(density, rng),
                               rng.uniform(scene.depth_near, scene.depth_far));
  }
  return st;
}

// Samples a 3D point in the first camera frame; (u, v) follow the
// domain's keypoint density, depth follows the scene layout.
Eigen::Vector3d sample_point(const SceneSpec& scene, Density density,
                             const LayoutState& st, RngStream& rng) {
  double u = 0.0, v = 0.0, z = 0.0;
  switch (scene.point_layout) {
    case PointLayout::kUniformBox:
      u = sample_axis_coord(density, rng);
      v = sample_axis_coord(density, rng);
      z = rng.uniform(scene.depth_near, scene.depth_far);
      break;
    case PointLayout::kPlanar: {
      for (int tries = 0; tries < 100; ++tries) {
        u = sample_axis_coord(density, rng);
        v = sample_axis_coord(density, rng);
        const Eigen::Vector3d& n = st.plane_normal;
        const double denom = n.x() * u + n.y() * v + n.z();
        if (std::abs(denom) < 0.3) continue;
        z = n.z() * st.plane_zmid / denom;
        z *= 1.0 + kPlanarSlab * rng.uniform(-1.0, 1.0);
        if (z >= 0.5 * scene.depth_near && z <= 2.0 * scene.depth_far) break;
        z = 0.0;
      }
      if (z == 0.0) {  // pathological plane; fall back to box sampling
        u = sample_axis_coord(density, rng);
        v = sample_axis_coord(density, rng);
        z = rng.uniform(scene.depth_near, scene.depth_far);
      }
      break;
    }
    case PointLayout::kClustered: {
      const auto& c = st.clusters[static_cast<int>(
          rng.below(static_cast<std::uint64_t>(st.clusters.size())))];
      for (int tries = 0; tries < 100; ++tries) {
        u = c.x() + kClusterSpread * rng.normal();
        v = c.y() + kClusterSpread * rng.normal();
        if (std::abs(u) <= kView1Window && std::abs(v) <= kView1Window) break;
        u = std::clamp(u, -kView1Window, kView1Window);
        v = std::clamp(v, -kView1Window, kView1Window);
      }
      z = std::clamp(c.z() * (1.0 + kClusterDepthSpread * rng.normal()),
                     scene.depth_near, scene.depth_far);
      break;
    }
  }
  return {u * z, v * z, z};
}

// Projects a first-frame point into both views; returns false when the
// second view cannot see it.
bool project_pair(const geom::Pose& pose, const Eigen::Vector3d& x1,
                  Eigen::RowVector4d& out) {
  const Eigen::Vector3d x2 = pose.rotation * x1 + pose.translation;
  if (x2.z() < kMinDepth2) return false;
  const double u2 = x2.x() / x2.z();
  const double v2 = x2.y() / x2.z();
  if (std::abs(u2) > kView2Window || std::abs(v2) > kView2Window) return false;
  out << x1.x() / x1.z(), x1.y() / x1.z(), u2, v2;
  return true;
}

double draw_noise(NoiseFamily family, double sigma, RngStream& rng) {
  switch (family) {
    case NoiseFamily::kGaussian: return rng.normal(0.0, sigma);
    case NoiseFamily::kLaplacian: return rng.laplace_std(sigma);
    case NoiseFamily::kUniform: return rng.uniform_std(sigma);
  }
  return 0.0;
}

double dist_to_gt(const geom::EssentialMatrix& e, const Eigen::RowVector4d& c) {
  return geom::symmetric_epipolar_distance(e.m, c);
}

}  // namespace

PairRecord generate_pair(const SceneSpec& scene, const DomainSpec& domain,
                         int n, double outlier_ratio, std::uint64_t seed) {
  scene.validate();
  domain.validate();
  if (n < 16) throw PreconditionError("generate_pair: n must be >= 16");
  if (!(outlier_ratio >= 0.0 && outlier_ratio <= 0.95))
    throw PreconditionError("generate_pair: outlier_ratio outside [0, 0.95]");

  const int n_out = static_cast<int>(std::ceil(outlier_ratio * n));
  const int n_in = n - n_out;
  const RngStream root(seed);

  // attempt loop: fresh pose and points each time
  geom::Pose pose;
  geom::EssentialMatrix e_gt;
  Eigen::Matrix<double, Eigen::Dynamic, 4> inliers(n_in, 4);
  bool ok = false;
  for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
    RngStream rng_pose = root.fork("pose").fork(attempt);
    pose = sample_pose(scene, rng_pose);
    e_gt = geom::essential_from_pose(pose);
    RngStream rng_pts = root.fork("points").fork(attempt);
    const LayoutState layout =
        make_layout(scene, domain.keypoint_density, rng_pts);
    int got = 0;
    const long budget = 60L * std::max(n_in, 1);
    for (long draw = 0; draw < budget && got < n_in; ++draw) {
      const Eigen::Vector3d x1 =
          sample_point(scene, domain.keypoint_density, layout, rng_pts);
      Eigen::RowVector4d row;
      if (project_pair(pose, x1, row)) inliers.row(got++) = row;
    }
    ok = got == n_in;
  }
  if (!ok)
    throw GenerationError("generate_pair: scene '" + scene.scene_id +
                          "' yielded too few doubly visible points after " +
                          std::to_string(kMaxAttempts) + " attempts");

  // outliers: confuser fraction plus the domain's base model
  Eigen::Matrix<double, Eigen::Dynamic, 4> outliers(n_out, 4);
  RngStream rng_out = root.fork("outliers");
  const int n_conf =
      domain.outlier_model == OutlierModel::kEpipolarConfuser
          ? n_out
          : std::min(n_out, static_cast<int>(std::lround(domain.confuser_mix *
                                                         n_out)));

  geom::Pose wrong_pose;
  LayoutState wrong_layout;
  RngStream rng_conf = root.fork("confuser");
  if (n_conf > 0) {
    do {
      wrong_pose = sample_pose(scene, rng_conf);
    } while (geom::pose_error_deg(wrong_pose, pose) < 10.0);
    wrong_layout = make_layout(scene, domain.keypoint_density, rng_conf);
  }

  auto make_uniform_random = [&](Eigen::RowVector4d& row) {
    do {
      row << sample_axis_coord(domain.keypoint_density, rng_out),
          sample_axis_coord(domain.keypoint_density, rng_out),
          rng_out.uniform(-kOutlierWindow, kOutlierWindow),
          rng_out.uniform(-kOutlierWindow, kOutlierWindow);
    } while (dist_to_gt(e_gt, row) < kLabelThreshold);
  };

  for (int i = 0; i < n_out; ++i) {
    Eigen::RowVector4d row;
    if (i < n_conf) {
      // a second rigid motion: points consistent with a wrong pose
      bool made = false;
      for (int tries = 0; tries < 200 && !made; ++tries) {
        const Eigen::Vector3d x1 = sample_point(
            scene, domain.keypoint_density, wrong_layout, rng_conf);
        made = project_pair(wrong_pose, x1, row) &&
               dist_to_gt(e_gt, row) >= kLabelThreshold;
      }
      if (!made) make_uniform_random(row);
    } else if (domain.outlier_model == OutlierModel::kShuffledInlier &&
               n_in >= 2) {
      bool made = false;
      for (int tries = 0; tries < 100 && !made; ++tries) {
        const int a = static_cast<int>(rng_out.below(n_in));
        int b = static_cast<int>(rng_out.below(n_in));
        if (a == b) continue;
        row << inliers(a, 0), inliers(a, 1), inliers(b, 2), inliers(b, 3);
        made = dist_to_gt(e_gt, row) >= kLabelThreshold;
      }
      if (!made) make_uniform_random(row);
    } else {
      make_uniform_random(row);
    }
    outliers.row(i) = row;
  }

  // assemble pre-images and labels, inliers first
  PairRecord rec;
  rec.preimage.resize(n, 4);
  rec.preimage.topRows(n_in) = inliers;
  rec.preimage.bottomRows(n_out) = outliers;
  Eigen::VectorXd labels = Eigen::VectorXd::Zero(n);
  labels.head(n_in).setOnes();

  // measurement noise on inlier second-view coordinates
  Eigen::Matrix<double, Eigen::Dynamic, 4> noisy = rec.preimage;
  RngStream rng_noise = root.fork("noise");
  rec.noise_samples.reserve(2 * n_in);
  for (int i = 0; i < n_in; ++i) {
    const double dx = draw_noise(domain.inlier_noise, domain.sigma, rng_noise);
    const double dy = draw_noise(domain.inlier_noise, domain.sigma, rng_noise);
    noisy(i, 2) += dx;
    noisy(i, 3) += dy;
    rec.noise_samples.push_back(dx);
    rec.noise_samples.push_back(dy);
    if (dist_to_gt(e_gt, noisy.row(i)) >= kLabelThreshold)
      ++rec.noisy_overflow;
  }

  // smooth per-view coordinate warp (style distortion, both views)
  Eigen::Matrix<double, Eigen::Dynamic, 4> final_coords = noisy;
  RngStream rng_warp = root.fork("warp");
  if (domain.coordinate_warp > 0.0) {
    for (int view = 0; view < 2; ++view) {
      const double w1 = rng_warp.uniform(2.0, 5.0);
      const double w2 = rng_warp.uniform(2.0, 5.0);
      const double p1 = rng_warp.uniform(0.0, 2.0 * std::numbers::pi);
      const double p2 = rng_warp.uniform(0.0, 2.0 * std::numbers::pi);
      const int cx = 2 * view, cy = 2 * view + 1;
      for (int i = 0; i < n; ++i) {
        const double x = noisy(i, cx), y = noisy(i, cy);
        final_coords(i, cx) = x + domain.coordinate_warp * std::sin(w1 * y + p1);
        final_coords(i, cy) = y + domain.coordinate_warp * std::sin(w2 * x + p2);
      }
    }
  }

  // shuffle item order
  const std::vector<int> perm = root.fork("shuffle").permutation(n);
  rec.corr.coords.resize(n, 4);
  rec.corr.labels.resize(n);
  Eigen::Matrix<double, Eigen::Dynamic, 4> pre_shuffled(n, 4);
  for (int i = 0; i < n; ++i) {
    rec.corr.coords.row(i) = final_coords.row(perm[i]);
    rec.corr.labels(i) = labels(perm[i]);
    pre_shuffled.row(i) = rec.preimage.row(perm[i]);
  }
  rec.preimage = pre_shuffled;

  rec.pose_gt = pose;
  rec.e_gt = e_gt;
  rec.scene_id = scene.scene_id;
  rec.domain_id = domain.domain_id;
  rec.outlier_ratio = outlier_ratio;
  rec.seed = seed;
  return rec;
}

geom::CorrespondenceSet virtual_pairs(const geom::Pose& pose, int count) {
  if (count < 1) throw PreconditionError("virtual_pairs: count must be >= 1");
  std::vector<Eigen::RowVector4d> rows;
  double span = 0.6;
  for (int expand = 0; expand < 6; ++expand) {
    rows.clear();
    const int g = static_cast<int>(std::ceil(std::sqrt(count / 3.0))) + 2 +
                  2 * expand;
    for (double z : {4.0, 5.5, 7.0}) {
      for (int a = 0; a < g; ++a) {
        for (int b = 0; b < g; ++b) {
          const double u = -span + 2.0 * span * a / (g - 1);
          const double v = -span + 2.0 * span * b / (g - 1);
          const Eigen::Vector3d x1(u * z, v * z, z);
          const Eigen::Vector3d x2 = pose.rotation * x1 + pose.translation;
          if (x2.z() < 0.1) continue;
          rows.emplace_back(u, v, x2.x() / x2.z(), x2.y() / x2.z());
        }
      }
    }
    if (static_cast<int>(rows.size()) >= count) break;
    span *= 1.5;
  }
  if (static_cast<int>(rows.size()) < count)
    throw DegenerateInputError(
        "virtual_pairs: pose leaves the virtual grid invisible");
  geom::CorrespondenceSet out;
  out.coords.resize(static_cast<int>(rows.size()), 4);
  for (int i = 0; i < static_cast<int>(rows.size()); ++i)
    out.coords.row(i) = rows[i];
  return out;
}

// ---- binary codec ------------------------------------------------------

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
void put_f32(std::vector<std::uint8_t>& b, double x) {
  const float f = static_cast<float>(x);
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}
std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}
double get_f32(const std::uint8_t* p) {
  const std::uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return static_cast<double>(f);
}

constexpr std::uint16_t kBlobVersion = 1;
constexpr char kMagic[4] = {'C', 'M', 'P', 'R'};

}  // namespace

std::vector<std::uint8_t> encode_record(const PairRecord& rec) {
  const int n = rec.corr.size();
  if (rec.corr.labels.size() != n)
    throw PreconditionError("encode_record: labels missing");
  std::vector<std::uint8_t> b;
  b.reserve(16 + 4 * (5 * n + 21));
  for (char c : kMagic) b.push_back(static_cast<std::uint8_t>(c));
  put_u16(b, kBlobVersion);
  put_u32(b, static_cast<std::uint32_t>(n));
  for (int i = 0; i < 6; ++i) b.push_back(0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) put_f32(b, rec.corr.coords(i, c));
  for (int i = 0; i < n; ++i) put_f32(b, rec.corr.labels(i));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) put_f32(b, rec.e_gt.m(r, c));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) put_f32(b, rec.pose_gt.rotation(r, c));
  for (int r = 0; r < 3; ++r) put_f32(b, rec.pose_gt.translation(r));
  return b;
}

PairRecord decode_record(const std::uint8_t* data, std::size_t size) {
  if (size < 16 || std::memcmp(data, kMagic, 4) != 0)
    throw IoError("decode_record: bad header");
  if (get_u16(data + 4) != kBlobVersion)
    throw IoError("decode_record: unsupported version");
  const std::uint32_t n = get_u32(data + 6);
  const std::size_t expect = 16 + 4 * (5 * static_cast<std::size_t>(n) + 21);
  if (size != expect)
    throw IoError("decode_record: size mismatch for N=" + std::to_string(n));

  PairRecord rec;
  const std::uint8_t* p = data + 16;
  rec.corr.coords.resize(n, 4);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c, p += 4) rec.corr.coords(i, c) = get_f32(p);
  rec.corr.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i, p += 4)
    rec.corr.labels(i) = get_f32(p) >= 0.5 ? 1.0 : 0.0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c, p += 4) rec.e_gt.m(r, c) = get_f32(p);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c, p += 4) rec.pose_gt.rotation(r, c) = get_f32(p);
  for (int r = 0; r < 3; ++r, p += 4) rec.pose_gt.translation(r) = get_f32(p);

  // undo the f32 rounding drift on the ground-truth invariants
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      rec.pose_gt.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  rec.pose_gt.rotation = r;
  if (rec.pose_gt.translation.norm() > 1e-12)
    rec.pose_gt.translation.normalize();
  if (rec.e_gt.m.norm() > 1e-12) rec.e_gt.m /= rec.e_gt.m.norm();
  return rec;
}

// ---- dataset building --------------------------------------------------

void DatasetConfig::validate() const {
  if (scenes.empty() || domains.empty())
    throw ConfigError("dataset: scenes and domains must be nonempty");
  for (const auto& s : scenes) s.validate();
  for (const auto& d : domains) d.validate();

  auto scene_known = [&](const std::string& id) {
    return std::any_of(scenes.begin(), scenes.end(),
                       [&](const SceneSpec& s) { return s.scene_id == id; });
  };
  auto domain_known = [&](const std::string& id) {
    return std::any_of(domains.begin(), domains.end(),
                       [&](const DomainSpec& d) { return d.domain_id == id; });
  };
  for (const auto& id : train_scenes)
    if (!scene_known(id)) throw ConfigError("dataset: unknown scene '" + id + "'");
  for (const auto& id : holdout_scenes)
    if (!scene_known(id)) throw ConfigError("dataset: unknown scene '" + id + "'");
  for (const auto& id : train_domains)
    if (!domain_known(id))
      throw ConfigError("dataset: unknown domain '" + id + "'");
  for (const auto& id : holdout_domains)
    if (!domain_known(id))
      throw ConfigError("dataset: unknown domain '" + id + "'");

  for (const auto& id : holdout_scenes)
    if (std::find(train_scenes.begin(), train_scenes.end(), id) !=
        train_scenes.end())
      throw ConfigError("dataset: scene '" + id +
                        "' is both trained on and held out");
  for (const auto& id : holdout_domains)
    if (std::find(train_domains.begin(), train_domains.end(), id) !=
        train_domains.end())
      throw ConfigError("dataset: domain '" + id +
                        "' is both trained on and held out");

  if (train_scenes.empty() || train_domains.empty())
    throw ConfigError("dataset: training scene/domain pools are empty");
  if (counts.cross_domain > 0 && holdout_domains.empty())
    throw ConfigError("dataset: cross-domain split needs holdout domains");
  if (counts.cross_scene > 0 && holdout_scenes.empty())
    throw ConfigError("dataset: cross-scene split needs holdout scenes");
  if (pair_size < 16) throw ConfigError("dataset: pair_size must be >= 16");
  if (!(outlier_ratio >= 0.0 && outlier_ratio <= 0.95))
    throw ConfigError("dataset: outlier_ratio outside [0, 0.95]");
  if (counts.train < 0 || counts.val < 0 || counts.test < 0 ||
      counts.cross_domain < 0 || counts.cross_scene < 0)
    throw ConfigError("dataset: negative split count");
}

DatasetConfig default_dataset_config() {
  DatasetConfig c;
  c.scenes = {
      {"box-sideways", 4.0, 8.0, PointLayout::kUniformBox, Motion::kSideways,
       30.0},
      {"box-forward", 4.0, 8.0, PointLayout::kUniformBox, Motion::kForward,
       20.0},
      {"cluster-mixed", 3.0, 9.0, PointLayout::kClustered, Motion::kMixed,
       40.0},
      {"plane-sideways", 5.0, 7.0, PointLayout::kPlanar, Motion::kSideways,
       25.0},
      {"plane-forward", 5.0, 10.0, PointLayout::kPlanar, Motion::kForward,
       20.0},
      {"cluster-sideways", 2.0, 6.0, PointLayout::kClustered,
       Motion::kSideways, 35.0},
  };
  // Planar layouts are held out of training: coplanar points make the
  // eight-point problem near-degenerate, so they form the hard cross-scene
  // split while the trained splits keep well-conditioned geometry.
  c.train_scenes = {"box-sideways", "box-forward", "cluster-mixed",
                    "cluster-sideways"};
  c.holdout_scenes = {"plane-sideways", "plane-forward"};
  // Training-domain noise is kept small enough that label-weighted
  // estimation recovers pose to a fraction of a degree; holdout domains
  // add heavier noise plus a systematic coordinate warp as the style shift.
  c.domains = {
      {"wide-gauss", NoiseFamily::kGaussian, 0.00005, Density::kUniform,
       OutlierModel::kUniformRandom, 0.0, 0.25},
      {"center-gauss", NoiseFamily::kGaussian, 0.00008, Density::kCenterBiased,
       OutlierModel::kShuffledInlier, 0.0, 0.25},
      {"wide-laplace", NoiseFamily::kLaplacian, 0.00008, Density::kUniform,
       OutlierModel::kEpipolarConfuser, 0.0, 0.25},
      {"center-laplace-warp", NoiseFamily::kLaplacian, 0.0004,
       Density::kCenterBiased, OutlierModel::kUniformRandom, 0.003, 0.25},
      {"border-uniform-warp", NoiseFamily::kUniform, 0.0006,
       Density::kBorderBiased, OutlierModel::kShuffledInlier, 0.005, 0.25},
  };
  c.train_domains = {"wide-gauss", "center-gauss", "wide-laplace"};
  c.holdout_domains = {"center-laplace-warp", "border-uniform-warp"};
  c.counts = {2000, 200, 200, 200, 200};
  c.pair_size = 512;
  c.outlier_ratio = 0.7;
  return c;
}

namespace {

const SceneSpec& find_scene(const DatasetConfig& cfg, const std::string& id) {
  for (const auto& s : cfg.scenes)
    if (s.scene_id == id) return s;
  throw ConfigError("dataset: unknown scene '" + id + "'");
}
const DomainSpec& find_domain(const DatasetConfig& cfg, const std::string& id) {
  for (const auto& d : cfg.domains)
    if (d.domain_id == id) return d;
  throw ConfigError("dataset: unknown domain '" + id + "'");
}

nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"scene_id", s.scene_id},
          {"depth_near", s.depth_near},
          {"depth_far", s.depth_far},
          {"point_layout", to_string(s.point_layout)},
          {"motion", to_string(s.motion)},
          {"rotation_bound_deg", s.rotation_bound_deg}};
}
nlohmann::json domain_to_json(const DomainSpec& d) {
  return {{"domain_id", d.domain_id},
          {"inlier_noise", to_string(d.inlier_noise)},
          {"sigma", d.sigma},
          {"keypoint_density", to_string(d.keypoint_density)},
          {"outlier_model", to_string(d.outlier_model)},
          {"coordinate_warp", d.coordinate_warp},
          {"confuser_mix", d.confuser_mix}};
}

std::string record_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05d", split.c_str(), index);
  return buf;
}

}  // namespace

void build_dataset(const DatasetConfig& config,
                   const std::filesystem::path& out_dir, std::uint64_t seed) {
  config.validate();
  std::filesystem::create_directories(out_dir);

  using Combo = std::pair<std::string, std::string>;  // (scene, domain)
  auto cross = [](const std::vector<std::string>& ss,
                  const std::vector<std::string>& ds) {
    std::vector<Combo> out;
    for (const auto& s : ss)
      for (const auto& d : ds) out.emplace_back(s, d);
    return out;
  };
  const std::vector<Combo> train_pool =
      cross(config.train_scenes, config.train_domains);
  const std::vector<Combo> cross_domain_pool =
      cross(config.train_scenes, config.holdout_domains);
  const std::vector<Combo> cross_scene_pool =
      cross(config.holdout_scenes, config.train_domains);

  struct SplitPlan {
    std::string name;
    int count;
    const std::vector<Combo>* pool;
  };
  const std::vector<SplitPlan> plan = {
      {"train", config.counts.train, &train_pool},
      {"val", config.counts.val, &train_pool},
      {"test", config.counts.test, &train_pool},
      {"cross_domain", config.counts.cross_domain, &cross_domain_pool},
      {"cross_scene", config.counts.cross_scene, &cross_scene_pool},
  };

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["pair_size"] = config.pair_size;
  manifest["outlier_ratio"] = config.outlier_ratio;
  manifest["scenes"] = nlohmann::json::array();
  for (const auto& s : config.scenes)
    manifest["scenes"].push_back(scene_to_json(s));
  manifest["domains"] = nlohmann::json::array();
  for (const auto& d : config.domains)
    manifest["domains"].push_back(domain_to_json(d));
  manifest["train_scenes"] = config.train_scenes;
  manifest["holdout_scenes"] = config.holdout_scenes;
  manifest["train_domains"] = config.train_domains;
  manifest["holdout_domains"] = config.holdout_domains;
  manifest["splits"] = nlohmann::json::array();
  manifest["records"] = nlohmann::json::array();

  for (const auto& split : plan) {
    manifest["splits"].push_back(split.name);
    const std::string file_name = split.name + ".bin";
    std::ofstream bin(out_dir / file_name, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("build_dataset: cannot write " + file_name);
    std::uint64_t offset = 0;
    for (int i = 0; i < split.count; ++i) {
      const std::string id = record_id(split.name, i);
      const std::uint64_t base_seed = mix_seed(seed, hash_tag(id));
      RngStream assign(mix_seed(base_seed, hash_tag("assign")));
      const Combo& combo =
          (*split.pool)[assign.below(split.pool->size())];
      const SceneSpec& scene = find_scene(config, combo.first);
      const DomainSpec& domain = find_domain(config, combo.second);

      PairRecord rec;
      bool made = false;
      std::uint64_t rec_seed = base_seed;
      for (int retry = 0; retry < 5 && !made; ++retry) {
        rec_seed = retry == 0 ? base_seed : mix_seed(base_seed, retry);
        try {
          rec = generate_pair(scene, domain, config.pair_size,
                              config.outlier_ratio, rec_seed);
          made = true;
        } catch (const GenerationError&) {
        }
      }
      if (!made)
        throw GenerationError("build_dataset: record " + id +
                              " failed repeatedly");

      const std::vector<std::uint8_t> bytes = encode_record(rec);
      bin.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      manifest["records"].push_back({{"id", id},
                                     {"split", split.name},
                                     {"scene_id", rec.scene_id},
                                     {"domain_id", rec.domain_id},
                                     {"seed", rec_seed},
                                     {"file", file_name},
                                     {"offset", offset},
                                     {"length", bytes.size()},
                                     {"n", config.pair_size},
                                     {"outlier_ratio", config.outlier_ratio},
                                     {"noisy_overflow", rec.noisy_overflow}});
      offset += bytes.size();
    }
    if (!bin) throw IoError("build_dataset: write failure on " + file_name);
  }

  std::ofstream mf(out_dir / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("build_dataset: cannot write manifest.json");
  mf << manifest.dump(2) << '\n';
  if (!mf) throw IoError("build_dataset: manifest write failure");
}

Dataset Dataset::open(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("Dataset: missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("Dataset: bad manifest: ") + e.what());
  }

  Dataset ds;
  ds.dir_ = dir;
  for (const auto& name : manifest.at("splits")) {
    ds.split_order_.push_back(name.get<std::string>());
    ds.by_split_.emplace_back(name.get<std::string>(),
                              std::vector<ManifestEntry>{});
  }
  for (const auto& r : manifest.at("records")) {
    ManifestEntry e;
    e.id = r.at("id").get<std::string>();
    e.split = r.at("split").get<std::string>();
    e.scene_id = r.at("scene_id").get<std::string>();
    e.domain_id = r.at("domain_id").get<std::string>();
    e.seed = r.at("seed").get<std::uint64_t>();
    e.file = r.at("file").get<std::string>();
    e.offset = r.at("offset").get<std::uint64_t>();
    e.length = r.at("length").get<std::uint64_t>();
    e.n = r.at("n").get<int>();
    e.outlier_ratio = r.at("outlier_ratio").get<double>();
    e.noisy_overflow = r.at("noisy_overflow").get<int>();
    bool placed = false;
    for (auto& [name, list] : ds.by_split_)
      if (name == e.split) {
        list.push_back(std::move(e));
        placed = true;
        break;
      }
    if (!placed)
      throw IoError("Dataset: record in undeclared split '" + e.split + "'");
  }
  return ds;
}

const std::vector<ManifestEntry>& Dataset::entries(
    const std::string& split) const {
  for (const auto& [name, list] : by_split_)
    if (name == split) return list;
  throw IoError("Dataset: unknown split '" + split + "'");
}

std::vector<std::string> Dataset::splits() const { return split_order_; }

PairRecord Dataset::load(const ManifestEntry& entry) const {
  std::ifstream in(dir_ / entry.file, std::ios::binary);
  if (!in) throw IoError("Dataset: cannot open " + entry.file);
  in.seekg(static_cast<std::streamoff>(entry.offset));
  std::vector<std::uint8_t> bytes(entry.length);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::uint64_t>(in.gcount()) != entry.length)
    throw IoError("Dataset: short read on " + entry.id);
  PairRecord rec = decode_record(bytes.data(), bytes.size());
  rec.scene_id = entry.scene_id;
  rec.domain_id = entry.domain_id;
  rec.seed = entry.seed;
  rec.outlier_ratio = entry.outlier_ratio;
  rec.noisy_overflow = entry.noisy_overflow;
  return rec;
}

DomainStats pair_domain_stats(const PairRecord& rec) {
  DomainStats st;
  const int n = rec.corr.size();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = rec.corr.coords(i, 0) - rec.corr.coords(j, 0);
      const double dy = rec.corr.coords(i, 1) - rec.corr.coords(j, 1);
      best = std::min(best, dx * dx + dy * dy);
    }
    total += std::sqrt(best);
  }
  st.mean_nn_spacing = n > 0 ? total / n : 0.0;

  const auto& s = rec.noise_samples;
  if (s.size() >= 8) {
    double mu = 0.0;
    for (double x : s) mu += x;
    mu /= static_cast<double>(s.size());
    double m2 = 0.0, m4 = 0.0;
    for (double x : s) {
      const double d = x - mu;
      m2 += d * d;
      m4 += d * d * d * d;
    }
    m2 /= static_cast<double>(s.size());
    m4 /= static_cast<double>(s.size());
    if (m2 > 0.0) st.noise_kurtosis = m4 / (m2 * m2) - 3.0;
  }
  return st;
}

}  // namespace corrmoe::synth
