#pragma once

// Experiment orchestration: seen/unseen splits, pseudo-depth providers, the
// self-supervised depth trainer, the click segmentor trainer, evaluation
// and the experiment matrix with its report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdseg/clickenc.hpp"
#include "pdseg/dataset.hpp"
#include "pdseg/models.hpp"
#include "pdseg/optim.hpp"
#include "pdseg/photometric.hpp"
#include "pdseg/synthworld.hpp"

namespace pdseg::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- splits -------------------------------------------------------------------

struct SplitSpec {
  std::vector<int> seen;    ///< ascending class ids
  std::vector<int> unseen;  ///< ascending class ids

  bool is_seen(int class_id) const;
  std::size_t k() const { return seen.size(); }
};

/// The k classes with the fewest annotated pixels are seen (ties by lower
/// class id). Throws ConfigError unless 0 < k < number of classes.
SplitSpec make_split(std::span<const std::uint64_t> pixel_counts, std::size_t k);

// ---- depth providers ------------------------------------------------------------

enum class ProviderKind { oracle_noisy, trained_mono, external };

std::string provider_name(ProviderKind kind);
ProviderKind provider_from_name(const std::string& name);

struct ProviderConfig {
  ProviderKind kind = ProviderKind::oracle_noisy;
  /// oracle_noisy: std of the log-depth noise field and the side of the
  /// coarse grid it is interpolated from.
  double sigma = 0.1;
  std::size_t noise_grid = 4;
  bool affine_jitter = true;
  std::uint64_t seed = 0;
  /// trained_mono: monodepth checkpoint.
  std::string checkpoint;
  /// external: path with "{id}" replaced by the sample id, relative to the
  /// dataset root unless absolute; files are PFM depth maps.
  std::string pattern;

  void validate() const;
};

/// Per-image min-max normalization to [0,1]. A constant map gives 0.5
/// everywhere and records a numeric warning.
Tensor normalize_depth(const Tensor& raw);

/// gt * exp(n) with n a smooth field of std `sigma`, then (when
/// `affine_jitter`) a random increasing affine map. Strictly positive.
Tensor oracle_noisy_depth(const Tensor& gt, double sigma, std::size_t grid, bool affine_jitter,
                          std::uint64_t seed);

class DepthProvider {
 public:
  /// Loads a checkpoint for trained_mono. Throws ConfigError, IoError,
  /// FormatError.
  DepthProvider(ProviderConfig cfg, fs::path dataset_root);

  /// Raw positive depth [H,W] for a sample.
  Tensor raw(const data::LoadedSample& sample) const;
  /// normalize_depth(raw(sample)).
  Tensor provide(const data::LoadedSample& sample) const;

  const ProviderConfig& config() const { return cfg_; }

 private:
  ProviderConfig cfg_;
  fs::path root_;
  std::optional<models::DepthNet> net_;
};

// ---- self-supervised depth -------------------------------------------------------

inline synth::SceneConfig textured_scenes() {
  synth::SceneConfig s;
  s.textured = true;
  return s;
}

inline models::DepthNetConfig small_depth_net() {
  models::DepthNetConfig d;
  d.widths = {8, 16, 32, 64};
  d.decoder_width = 8;
  return d;
}

inline models::PoseNetConfig small_pose_net() {
  models::PoseNetConfig p;
  p.widths = {8, 16, 32, 64};
  return p;
}

struct MonodepthConfig {
  models::DepthNetConfig depth = small_depth_net();
  models::PoseNetConfig pose = small_pose_net();
  photo::PhotometricConfig photometric;
  AdamConfig adam;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  /// Sequence corpus rendered in memory.
  std::size_t sequences = 96;
  std::size_t frames = 10;
  std::size_t stride = 3;
  /// Camera motion per raw frame, translation in scene units.
  double step_translation = 0.06;
  double step_rotation = 0.0;
  synth::CameraMotion motion = synth::CameraMotion::sideways;
  synth::SceneConfig scene = textured_scenes();
  std::uint64_t seed = 1;

  void validate() const;
};

/// Renders `count` static-scene sequences, each with its own derived scene
/// and camera seeds.
std::vector<synth::Sequence> make_sequence_corpus(const MonodepthConfig& cfg, std::uint64_t seed,
                                                  std::size_t count);

struct MonodepthResult {
  models::Checkpoint checkpoint;  ///< kind "monodepth", params "depth.*", "pose.*"
  std::vector<double> loss;             ///< total per step
  std::vector<double> photometric_loss; ///< photometric term per step
};

using StepLogger = std::function<void(std::size_t step, double loss)>;

/// Jointly trains depth and pose networks by inverse-warping neighbouring
/// kept frames. Throws ConfigError (fewer than 2 kept frames),
/// DegenerateBatchError, NumericError.
MonodepthResult train_monodepth(const MonodepthConfig& cfg,
                                const std::vector<synth::Sequence>& sequences,
                                const StepLogger& log = {});

models::DepthNet depth_net_from(const models::Checkpoint& ckpt);
models::PoseNet pose_net_from(const models::Checkpoint& ckpt);

/// Mean of the trailing `window` values ending at 1-based `step`.
double smoothed_loss(const std::vector<double>& history, std::size_t step,
                     std::size_t window = 50);

/// Spearman rank correlation with average ranks for ties. Throws
/// DegenerateMetricError when either input is constant.
double spearman(std::span<const double> a, std::span<const double> b);

// ---- segmentation ---------------------------------------------------------------

enum class Scenario { rgb_only, depth_only, rgb_d, rgb_rgb_control };

std::string scenario_name(Scenario s);
Scenario scenario_from_name(const std::string& name);
bool uses_depth(Scenario s);
bool dual_stream(Scenario s);

struct OptimConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch = 8;
  std::size_t iterations = 5000;
};

struct ExperimentConfig {
  std::string name;
  Scenario scenario = Scenario::rgb_only;
  ProviderConfig provider;
  std::size_t split_k = 4;
  OptimConfig optim;
  std::vector<std::uint64_t> seeds{1};
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t decoder_width = 8;
  click::ClickMode eval_click = click::ClickMode::center;

  void validate() const;
};

/// An image prepared for one scenario: modality tensors and object masks.
struct PreparedSample {
  std::string id;
  Tensor rgb;    ///< [3,H,W]
  Tensor depth;  ///< [1,H,W] normalized provider depth, undefined if unused
  std::vector<data::LoadedObject> objects;
};

std::vector<PreparedSample> prepare(const std::vector<data::LoadedSample>& samples,
                                    Scenario scenario, const DepthProvider* provider);

/// Single- or dual-stream network chosen by scenario.
class Segmentor {
 public:
  Segmentor(Scenario scenario, const std::vector<std::size_t>& widths, std::size_t decoder_width,
            std::uint64_t seed);
  explicit Segmentor(const models::Checkpoint& ckpt);

  /// rgb [N,3,H,W] (or undefined for depth_only), depth [N,1,H,W] (or
  /// undefined when unused), click [N,1,H,W] -> logits [N,1,H,W].
  Tensor forward(const Tensor& rgb, const Tensor& depth, const Tensor& click) const;

  Scenario scenario() const { return scenario_; }
  models::ParamStore& params();
  const models::ParamStore& params() const;
  models::Checkpoint checkpoint() const;

 private:
  Scenario scenario_;
  std::optional<models::SegNet> single_;
  std::optional<models::FusedNet> fused_;
};

struct SegTrainResult {
  Segmentor model;
  std::vector<double> loss;
  /// Class ids of every object that appeared as a training target.
  std::set<int> classes_in_batches;
};

/// Trains on objects of seen classes only, uniform clicks, balanced BCE.
/// Throws ConfigError when the training set has no seen-class object,
/// NumericError on divergence.
SegTrainResult train_segmentor(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::vector<PreparedSample>& train, const SplitSpec& split,
                               const StepLogger& log = {});

/// 4-connected component of `mask` [H,W] containing the click; empty when
/// the click pixel is background.
Tensor component_at(const Tensor& mask, click::Click p);

struct ObjectResult {
  std::string image_id;
  std::size_t object_index = 0;
  int class_id = 0;
  bool seen = false;
  click::Click click;
  double iou = 0;      ///< component around the click
  double iou_raw = 0;  ///< whole binarized prediction
};

struct EvalResult {
  std::optional<double> iou_seen;
  std::optional<double> iou_unseen;
  std::optional<double> delta_percent;
  std::optional<double> iou_seen_raw;
  std::optional<double> iou_unseen_raw;
  std::vector<ObjectResult> objects;
};

/// One object to segment from one click.
struct EvalItem {
  const PreparedSample* sample = nullptr;
  std::size_t object = 0;
  click::Click click;
};

/// Logits [n,1,H,W] for a chunk of items.
using Predictor = std::function<Tensor(const std::vector<EvalItem>&)>;

/// Predicts every object of `val` from one click, binarizes at logit 0 and
/// keeps the component around the click. Uniform clicks draw from `seed`.
/// Groups without objects stay empty and suppress Delta%.
EvalResult evaluate(const Predictor& predict, const std::vector<PreparedSample>& val,
                    const SplitSpec& split, click::ClickMode mode, std::uint64_t seed = 0);
EvalResult evaluate(const Segmentor& model, const std::vector<PreparedSample>& val,
                    const SplitSpec& split, click::ClickMode mode, std::uint64_t seed = 0);

// ---- matrix and reports ------------------------------------------------------------

inline constexpr int kReportVersion = 1;

struct MatrixOptions {
  /// Written to after every run; used for progress only.
  StepLogger progress;
  std::function<void(const std::string&)> note;
};

/// Runs every experiment over its seeds in order on the dataset at `root`.
/// A failing run marks its row failed and the matrix continues. Returns
/// the machine-readable report.
json run_matrix(const std::vector<ExperimentConfig>& experiments,
                const data::DatasetManifest& manifest, const fs::path& root,
                const MatrixOptions& options = {});

/// Aligned text table of a report, grouped by split k. Depends only on
/// the report JSON.
std::string render_table(const json& report);

/// 16 hex digits of the FNV-1a hash of a JSON document's compact dump.
std::string config_hash(const json& j);

}  // namespace pdseg::harness
