#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "corrmoe/geometry.hpp"
#include "corrmoe/rng.hpp"

namespace corrmoe::synth {

enum class PointLayout { kUniformBox, kPlanar, kClustered };
enum class Motion { kSideways, kForward, kMixed };
enum class NoiseFamily { kGaussian, kLaplacian, kUniform };
enum class Density { kUniform, kCenterBiased, kBorderBiased };
enum class OutlierModel { kUniformRandom, kShuffledInlier, kEpipolarConfuser };

std::string to_string(PointLayout v);
std::string to_string(Motion v);
std::string to_string(NoiseFamily v);
std::string to_string(Density v);
std::string to_string(OutlierModel v);
PointLayout point_layout_from_string(const std::string& s);
Motion motion_from_string(const std::string& s);
NoiseFamily noise_family_from_string(const std::string& s);
Density density_from_string(const std::string& s);
OutlierModel outlier_model_from_string(const std::string& s);

/// Geometry family of a synthetic scene: where points live and how the
/// second camera moves.
struct SceneSpec {
  std::string scene_id;
  double depth_near = 4.0;
  double depth_far = 8.0;
  PointLayout point_layout = PointLayout::kUniformBox;
  Motion motion = Motion::kMixed;
  double rotation_bound_deg = 30.0;

  /// Throws ConfigError unless near > 0, far > near and
  /// rotation_bound_deg is in (0, 60].
  void validate() const;
};

/// Style family of a synthetic capture: keypoint density, measurement
/// noise, outlier flavor and a mild smooth coordinate warp.
struct DomainSpec {
  std::string domain_id;
  NoiseFamily inlier_noise = NoiseFamily::kGaussian;
  double sigma = 0.001;  // noise std in normalized coordinates
  Density keypoint_density = Density::kUniform;
  OutlierModel outlier_model = OutlierModel::kUniformRandom;
  double coordinate_warp = 0.0;  // warp amplitude
  /// Fraction of outliers generated as epipolar confusers regardless of
  /// outlier_model (all of them when the model itself is the confuser).
  double confuser_mix = 0.25;

  /// Throws ConfigError unless sigma is in [0, 0.02], warp in [0, 0.05]
  /// and confuser_mix in [0, 1].
  void validate() const;
};

/// One synthetic image pair with ground truth.
struct PairRecord {
  geom::CorrespondenceSet corr;  // final coords (noise + warp) with labels
  /// Noise-free, warp-free coordinates that define the labels: inlier
  /// rows satisfy E_gt exactly, outlier rows sit >= 1e-4 away.
  Eigen::Matrix<double, Eigen::Dynamic, 4> preimage;
  geom::Pose pose_gt;
  geom::EssentialMatrix e_gt;
  std::string scene_id;
  std::string domain_id;
  double outlier_ratio = 0.0;
  std::uint64_t seed = 0;
  /// The raw inlier noise draws (2 per inlier), for domain diagnostics.
  std::vector<double> noise_samples;
  /// Labeled inliers whose noisy (pre-warp) distance exceeds 1e-4.
  int noisy_overflow = 0;
};

/// Labeling threshold tying labels to the ground-truth essential matrix.
inline constexpr double kLabelThreshold = 1e-4;

/// Generates one pair: samples a pose within scene bounds, projects
/// doubly visible 3D points, perturbs inlier second-view coordinates,
/// fills ceil(outlier_ratio * n) rows per the domain's outlier model and
/// shuffles. Deterministic in (specs, n, outlier_ratio, seed).
///
/// Throws GenerationError when 10 attempts cannot produce the required
/// (1 - outlier_ratio) * n doubly visible points.
PairRecord generate_pair(const SceneSpec& scene, const DomainSpec& domain,
                         int n, double outlier_ratio, std::uint64_t seed);

/// Noise-free correspondences exactly satisfying the pose's essential
/// matrix, from a fixed deterministic 3D grid; used as geometry-loss
/// targets. Returns at least `count` rows.
geom::CorrespondenceSet virtual_pairs(const geom::Pose& pose, int count);

// ---- binary blob codec -------------------------------------------------
// 16-byte header: magic "CMPR", u16 version (= 1), u32 N, 6 reserved
// zero bytes; then little-endian f32: [N*4 coords][N labels][9 E][9 R][3 t].

std::vector<std::uint8_t> encode_record(const PairRecord& rec);
/// Inverse of encode_record. The preimage and noise diagnostics are not
/// stored; the decoded pose/E are re-normalized after the f32 round trip.
PairRecord decode_record(const std::uint8_t* data, std::size_t size);

// ---- dataset building --------------------------------------------------

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
  int cross_domain = 0;
  int cross_scene = 0;
};

struct DatasetConfig {
  std::vector<SceneSpec> scenes;
  std::vector<DomainSpec> domains;
  std::vector<std::string> train_scenes, holdout_scenes;
  std::vector<std::string> train_domains, holdout_domains;
  SplitCounts counts;
  int pair_size = 512;
  double outlier_ratio = 0.7;

  /// Throws ConfigError on unknown ids, train/holdout overlap, empty
  /// pools, or out-of-range generation parameters.
  void validate() const;
};

/// Desk-scale default: 4 + 2 scenes, 3 + 2 domains, 512 correspondences
/// per pair at outlier ratio 0.7.
DatasetConfig default_dataset_config();

struct ManifestEntry {
  std::string id, split, scene_id, domain_id, file;
  std::uint64_t seed = 0;
  std::uint64_t offset = 0, length = 0;
  int n = 0;
  double outlier_ratio = 0.0;
  int noisy_overflow = 0;
};

/// Writes one packed binary file per split plus manifest.json into
/// out_dir. Train/val/test draw from train scenes x train domains; the
/// cross-domain split from holdout domains x train scenes; the
/// cross-scene split from holdout scenes x train domains.
void build_dataset(const DatasetConfig& config,
                   const std::filesystem::path& out_dir, std::uint64_t seed);

/// Read-side view of a built dataset directory.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& dir);

  const std::vector<ManifestEntry>& entries(const std::string& split) const;
  std::vector<std::string> splits() const;
  PairRecord load(const ManifestEntry& entry) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> split_order_;
  // split -> entries, in manifest order
  std::vector<std::pair<std::string, std::vector<ManifestEntry>>> by_split_;
};

// ---- domain diagnostics ------------------------------------------------

/// Per-pair summary statistics used to verify that configured domains
/// are genuinely distinct styles.
struct DomainStats {
  double mean_nn_spacing = 0.0;  // first-view mean nearest-neighbor gap
  double noise_kurtosis = 0.0;   // excess kurtosis of the inlier noise
};

DomainStats pair_domain_stats(const PairRecord& rec);

}  // namespace corrmoe::synth
