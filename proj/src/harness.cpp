#include "pdseg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <random>
#include <sstream>

#include "pdseg/config.hpp"
#include "pdseg/errors.hpp"
#include "pdseg/io.hpp"
#include "pdseg/objectives.hpp"

namespace pdseg::harness {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64 stream; platform-independent unlike std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::uint64_t s_;
};

void check_finite(const Tensor& loss, const char* what, std::size_t step) {
  if (!std::isfinite(loss.item()))
    throw NumericError(std::string(what) + ": non-finite loss at step " + std::to_string(step));
}

// Copies [C,H,W] tensors into one [N,C,H,W] batch (detached).
Tensor stack(const std::vector<const Tensor*>& items) {
  const Shape& s = items.front()->shape();
  const std::size_t each = items.front()->numel();
  std::vector<double> v;
  v.reserve(each * items.size());
  for (const Tensor* t : items) {
    if (t->shape() != s) throw ShapeError("batch items differ in shape");
    const auto d = t->data();
    v.insert(v.end(), d.begin(), d.end());
  }
  Shape out{items.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor(std::move(out), std::move(v));
}

Tensor as_channel(const Tensor& hw) { return reshape(hw, Shape{1, hw.size(0), hw.size(1)}); }

}  // namespace

// ---- splits -------------------------------------------------------------------

bool SplitSpec::is_seen(int class_id) const {
  return std::binary_search(seen.begin(), seen.end(), class_id);
}

SplitSpec make_split(std::span<const std::uint64_t> pixel_counts, std::size_t k) {
  const std::size_t n = pixel_counts.size();
  if (k == 0 || k >= n)
    throw ConfigError("split k must lie in [1, " + std::to_string(n - 1) + "], got " +
                      std::to_string(k));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pixel_counts[static_cast<std::size_t>(a)] < pixel_counts[static_cast<std::size_t>(b)];
  });
  SplitSpec s;
  s.seen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  s.unseen.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(s.seen.begin(), s.seen.end());
  std::sort(s.unseen.begin(), s.unseen.end());
  return s;
}

// ---- depth providers ------------------------------------------------------------

std::string provider_name(ProviderKind kind) {
  switch (kind) {
    case ProviderKind::oracle_noisy: return "oracle_noisy";
    case ProviderKind::trained_mono: return "trained_mono";
    case ProviderKind::external: return "external";
  }
  return "?";
}

ProviderKind provider_from_name(const std::string& name) {
  if (name == "oracle_noisy" || name == "oracle") return ProviderKind::oracle_noisy;
  if (name == "trained_mono" || name == "mono") return ProviderKind::trained_mono;
  if (name == "external") return ProviderKind::external;
  throw ConfigError("unknown depth provider '" + name + "'");
}

void ProviderConfig::validate() const {
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw ConfigError("provider sigma must be >= 0");
  if (noise_grid < 2) throw ConfigError("provider noise_grid must be at least 2");
  if (kind == ProviderKind::trained_mono && checkpoint.empty())
    throw ConfigError("trained_mono provider needs a checkpoint");
  if (kind == ProviderKind::external && pattern.find("{id}") == std::string::npos)
    throw ConfigError("external provider pattern must contain {id}");
}

Tensor normalize_depth(const Tensor& raw) {
  const auto d = raw.data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  std::vector<double> out(d.size(), 0.5);
  if (*hi == *lo) {
    record_numeric_warning("normalize_depth: constant depth map, returning 0.5");
  } else {
    const double range = *hi - *lo;
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = (d[i] - *lo) / range;
  }
  return Tensor(raw.shape(), std::move(out));
}

Tensor oracle_noisy_depth(const Tensor& gt, double sigma, std::size_t grid, bool affine_jitter,
                          std::uint64_t seed) {
  if (gt.dim() != 2) throw ShapeError("oracle depth expects [H,W], got " + shape_str(gt.shape()));
  const std::size_t h = gt.size(0), w = gt.size(1);
  Rng rng(seed);
  std::vector<double> coarse(grid * grid);
  for (double& c : coarse) c = rng.normal();
  // Bilinear interpolation of the coarse grid across the image.
  std::vector<double> field(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double y = (i + 0.5) / h * (grid - 1), x = (j + 0.5) / w * (grid - 1);
      const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), grid - 2);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), grid - 2);
      const double fy = y - y0, fx = x - x0;
      const auto at = [&](std::size_t a, std::size_t b) { return coarse[a * grid + b]; };
      field[i * w + j] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
    }
  const double mu = std::accumulate(field.begin(), field.end(), 0.0) / field.size();
  double var = 0;
  for (double f : field) var += (f - mu) * (f - mu);
  const double sd = std::sqrt(var / field.size());
  const double a = affine_jitter ? rng.uniform(0.5, 2.0) : 1.0;
  const double b = affine_jitter ? rng.uniform(0.0, 1.0) : 0.0;
  const auto g = gt.data();
  std::vector<double> out(h * w);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double n = sd > 0 ? sigma * (field[k] - mu) / sd : 0.0;
    out[k] = a * g[k] * std::exp(n) + b;
  }
  return Tensor(Shape{h, w}, std::move(out));
}

DepthProvider::DepthProvider(ProviderConfig cfg, fs::path dataset_root)
    : cfg_(std::move(cfg)), root_(std::move(dataset_root)) {
  cfg_.validate();
  if (cfg_.kind == ProviderKind::trained_mono) {
    fs::path p = cfg_.checkpoint;
    net_.emplace(depth_net_from(models::load_checkpoint(p)));
  }
}

Tensor DepthProvider::raw(const data::LoadedSample& sample) const {
  switch (cfg_.kind) {
    case ProviderKind::oracle_noisy:
      return oracle_noisy_depth(sample.depth, cfg_.sigma, cfg_.noise_grid, cfg_.affine_jitter,
                                synth::derive_seed(cfg_.seed, fnv1a(sample.id)));
    case ProviderKind::trained_mono: {
      const std::size_t h = sample.rgb.size(1), w = sample.rgb.size(2);
      return reshape(net_->depth(reshape(sample.rgb, Shape{1, 3, h, w})), Shape{h, w}).detach();
    }
    case ProviderKind::external: {
      std::string rel = cfg_.pattern;
      rel.replace(rel.find("{id}"), 4, sample.id);
      fs::path p = rel;
      if (p.is_relative()) p = root_ / p;
      Tensor d = io::load_pfm(p);
      if (d.shape() != sample.depth.shape())
        throw DataError(p.string() + ": depth size " + shape_str(d.shape()) +
                        " differs from the image");
      for (double v : d.data())
        if (!(v > 0)) throw DataError(p.string() + ": depth must be strictly positive");
      return d;
    }
  }
  throw ConfigError("unknown provider");
}

Tensor DepthProvider::provide(const data::LoadedSample& sample) const {
  return normalize_depth(raw(sample));
}

// ---- self-supervised depth -------------------------------------------------------

void MonodepthConfig::validate() const {
  depth.validate();
  pose.validate();
  photometric.validate();
  scene.validate();
  if (steps == 0 || batch == 0) throw ConfigError("monodepth steps and batch must be positive");
  if (height % 16 != 0 || width % 16 != 0 || height < 16 || width < 16)
    throw ConfigError("monodepth resolution must be a positive multiple of 16");
  if (sequences == 0) throw ConfigError("monodepth needs at least one sequence");
  if (stride == 0 || frames < 2 * stride + 1)
    throw ConfigError("monodepth sequences need at least 2 kept frames");
  if (!(adam.lr > 0)) throw ConfigError("learning rate must be positive");
}

std::vector<synth::Sequence> make_sequence_corpus(const MonodepthConfig& cfg, std::uint64_t seed,
                                                  std::size_t count) {
  std::vector<synth::Sequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    synth::SequenceSpec spec;
    spec.scene = synth::random_scene(cfg.scene, synth::derive_seed(seed, 2 * i));
    spec.seed = synth::derive_seed(seed, 2 * i + 1);
    spec.frames = cfg.frames;
    spec.stride = cfg.stride;
    spec.step_translation = cfg.step_translation;
    spec.step_rotation = cfg.step_rotation;
    spec.motion = cfg.motion;
    if (cfg.step_translation == 0 && cfg.step_rotation == 0) spec.min_displacement = 0;
    out.push_back(synth::render_sequence(spec, cfg.height, cfg.width));
  }
  return out;
}

models::DepthNet depth_net_from(const models::Checkpoint& ckpt) {
  if (ckpt.kind != "monodepth")
    throw ConfigError("expected a monodepth checkpoint, got '" + ckpt.kind + "'");
  models::ParamStore p;
  for (std::size_t i = 0; i < ckpt.params.names().size(); ++i) {
    const std::string& n = ckpt.params.names()[i];
    if (n.rfind("depth.", 0) == 0) p.add(n.substr(6), ckpt.params.tensors()[i]);
  }
  if (!ckpt.config.contains("depth")) throw FormatError(0, "monodepth checkpoint lacks depth config");
  return models::DepthNet(models::DepthNetConfig::from_json(ckpt.config.at("depth")), std::move(p));
}

models::PoseNet pose_net_from(const models::Checkpoint& ckpt) {
  if (ckpt.kind != "monodepth")
    throw ConfigError("expected a monodepth checkpoint, got '" + ckpt.kind + "'");
  models::ParamStore p;
  for (std::size_t i = 0; i < ckpt.params.names().size(); ++i) {
    const std::string& n = ckpt.params.names()[i];
    if (n.rfind("pose.", 0) == 0) p.add(n.substr(5), ckpt.params.tensors()[i]);
  }
  if (!ckpt.config.contains("pose")) throw FormatError(0, "monodepth checkpoint lacks pose config");
  return models::PoseNet(models::PoseNetConfig::from_json(ckpt.config.at("pose")), std::move(p));
}

MonodepthResult train_monodepth(const MonodepthConfig& cfg,
                                const std::vector<synth::Sequence>& sequences,
                                const StepLogger& log) {
  cfg.validate();
  struct Pair {
    std::size_t seq, target, source;
  };
  std::vector<Pair> pairs;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const std::size_t n = sequences[s].frames.size();
    for (std::size_t t = 0; t < n; ++t) {
      if (t > 0) pairs.push_back({s, t, t - 1});
      if (t + 1 < n) pairs.push_back({s, t, t + 1});
    }
  }
  if (pairs.empty()) throw ConfigError("monodepth training needs sequences with >= 2 kept frames");
  const synth::CameraIntrinsics K = sequences.front().frames.front().intrinsics;

  models::DepthNet dnet(cfg.depth, synth::derive_seed(cfg.seed, 1));
  models::PoseNet pnet(cfg.pose, synth::derive_seed(cfg.seed, 2));
  std::vector<Tensor> params = dnet.params().tensors();
  for (const Tensor& t : pnet.params().tensors()) params.push_back(t);
  AdamState state;
  Rng rng(synth::derive_seed(cfg.seed, 3));

  MonodepthResult out;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<const Tensor*> tgt, src;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Pair& p = pairs[rng.index(pairs.size())];
      tgt.push_back(&sequences[p.seq].frames[p.target].rgb);
      src.push_back(&sequences[p.seq].frames[p.source].rgb);
    }
    const Tensor target = stack(tgt), source = stack(src);
    const Tensor disp = dnet.disparity(target);
    const Tensor depth = div(Tensor::ones(disp.shape()), disp);
    const Tensor pose = pnet.forward(target, source);
    const photo::WarpResult w = photo::warp(source, depth, pose, K);
    const Tensor pl = photo::photometric_loss(target, w.image, w.valid, cfg.photometric);
    const Tensor sl = photo::smoothness_loss(disp, target);
    const Tensor loss = pl + sl * cfg.photometric.smoothness_weight;
    check_finite(loss, "train_monodepth", step);
    backward(loss);
    adam_step(params, state, cfg.adam);
    out.loss.push_back(loss.item());
    out.photometric_loss.push_back(pl.item());
    if (log) log(step, loss.item());
  }

  out.checkpoint.kind = "monodepth";
  out.checkpoint.config = {{"depth", cfg.depth.to_json()}, {"pose", cfg.pose.to_json()}};
  for (std::size_t i = 0; i < dnet.params().names().size(); ++i)
    out.checkpoint.params.add("depth." + dnet.params().names()[i], dnet.params().tensors()[i].detach());
  for (std::size_t i = 0; i < pnet.params().names().size(); ++i)
    out.checkpoint.params.add("pose." + pnet.params().names()[i], pnet.params().tensors()[i].detach());
  for (Tensor& t : out.checkpoint.params.tensors())
    for (double v : t.data())
      if (!std::isfinite(v)) throw NumericError("train_monodepth: non-finite parameter");
  return out;
}

double smoothed_loss(const std::vector<double>& history, std::size_t step, std::size_t window) {
  if (step == 0 || step > history.size() || window == 0)
    throw ConfigError("smoothed_loss: step out of range");
  const std::size_t begin = step > window ? step - window : 0;
  double s = 0;
  for (std::size_t i = begin; i < step; ++i) s += history[i];
  return s / static_cast<double>(step - begin);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ShapeError("spearman needs two equal-length inputs of size >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(ra.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw DegenerateMetricError("spearman of a constant input");
  return sab / std::sqrt(saa * sbb);
}

// ---- segmentation ---------------------------------------------------------------

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::rgb_only: return "rgb_only";
    case Scenario::depth_only: return "depth_only";
    case Scenario::rgb_d: return "rgb_d";
    case Scenario::rgb_rgb_control: return "rgb_rgb_control";
  }
  return "?";
}

Scenario scenario_from_name(const std::string& name) {
  if (name == "rgb_only" || name == "rgb") return Scenario::rgb_only;
  if (name == "depth_only" || name == "depth") return Scenario::depth_only;
  if (name == "rgb_d" || name == "rgbd") return Scenario::rgb_d;
  if (name == "rgb_rgb_control" || name == "rgb-control") return Scenario::rgb_rgb_control;
  throw ConfigError("unknown scenario '" + name + "'");
}

bool uses_depth(Scenario s) { return s == Scenario::depth_only || s == Scenario::rgb_d; }
bool dual_stream(Scenario s) { return s == Scenario::rgb_d || s == Scenario::rgb_rgb_control; }

void ExperimentConfig::validate() const {
  if (uses_depth(scenario)) provider.validate();
  if (split_k == 0 || split_k >= static_cast<std::size_t>(synth::kNumClasses))
    throw ConfigError("split_k must lie in [1, 11]");
  if (optim.batch == 0 || optim.iterations == 0)
    throw ConfigError("batch and iterations must be positive");
  if (!(optim.lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0)
    throw ConfigError("resolution must be a positive multiple of 16");
  models::EncoderConfig e;
  e.widths = widths;
  e.decoder_width = decoder_width;
  e.validate();
}

std::vector<PreparedSample> prepare(const std::vector<data::LoadedSample>& samples,
                                    Scenario scenario, const DepthProvider* provider) {
  if (uses_depth(scenario) && provider == nullptr)
    throw ConfigError(scenario_name(scenario) + " needs a depth provider");
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const data::LoadedSample& s : samples) {
    PreparedSample p;
    p.id = s.id;
    p.rgb = s.rgb;
    if (uses_depth(scenario)) p.depth = as_channel(provider->provide(s));
    p.objects = s.objects;
    out.push_back(std::move(p));
  }
  return out;
}

Segmentor::Segmentor(Scenario scenario, const std::vector<std::size_t>& widths,
                     std::size_t decoder_width, std::uint64_t seed)
    : scenario_(scenario) {
  if (dual_stream(scenario)) {
    models::FusedConfig c;
    c.rgb_channels = 4;
    c.depth_channels = scenario == Scenario::rgb_d ? 2 : 4;
    c.widths = widths;
    c.decoder_width = decoder_width;
    fused_.emplace(c, seed);
  } else {
    models::EncoderConfig c;
    c.in_channels = scenario == Scenario::rgb_only ? 4 : 2;
    c.widths = widths;
    c.decoder_width = decoder_width;
    single_.emplace(c, seed);
  }
}

Segmentor::Segmentor(const models::Checkpoint& ckpt) {
  if (ckpt.kind != "segmentor")
    throw ConfigError("expected a segmentor checkpoint, got '" + ckpt.kind + "'");
  try {
    scenario_ = scenario_from_name(ckpt.config.at("scenario").get<std::string>());
    if (dual_stream(scenario_))
      fused_.emplace(models::FusedConfig::from_json(ckpt.config.at("net")), ckpt.params);
    else
      single_.emplace(models::EncoderConfig::from_json(ckpt.config.at("net")), ckpt.params);
  } catch (const json::exception& e) {
    throw FormatError(0, std::string("segmentor checkpoint config: ") + e.what());
  }
}

models::ParamStore& Segmentor::params() { return single_ ? single_->params() : fused_->params(); }
const models::ParamStore& Segmentor::params() const {
  return single_ ? single_->params() : fused_->params();
}

models::Checkpoint Segmentor::checkpoint() const {
  models::Checkpoint c;
  c.kind = "segmentor";
  c.config = {{"scenario", scenario_name(scenario_)},
              {"net", single_ ? single_->config().to_json() : fused_->config().to_json()}};
  const models::ParamStore& p = params();
  for (std::size_t i = 0; i < p.names().size(); ++i) c.params.add(p.names()[i], p.tensors()[i].detach());
  return c;
}

Tensor Segmentor::forward(const Tensor& rgb, const Tensor& depth, const Tensor& click) const {
  switch (scenario_) {
    case Scenario::rgb_only: return single_->forward(concat({rgb, click}, 1));
    case Scenario::depth_only: return single_->forward(concat({depth, click}, 1));
    case Scenario::rgb_d:
      return fused_->forward(concat({rgb, click}, 1), concat({depth, click}, 1));
    case Scenario::rgb_rgb_control: {
      const Tensor x = concat({rgb, click}, 1);
      return fused_->forward(x, x);
    }
  }
  throw ConfigError("unknown scenario");
}

namespace {

struct Batch {
  Tensor rgb, depth, click, gt;
};

Batch make_batch(const std::vector<EvalItem>& targets, Scenario scenario) {
  std::vector<const Tensor*> rgb, depth, masks;
  std::vector<Tensor> clicks, gts;
  for (const EvalItem& t : targets) {
    const Tensor& m = t.sample->objects[t.object].mask;
    clicks.push_back(as_channel(click::click_distance_map(t.click, m.size(0), m.size(1))));
    gts.push_back(as_channel(m));
    rgb.push_back(&t.sample->rgb);
    if (uses_depth(scenario)) depth.push_back(&t.sample->depth);
  }
  std::vector<const Tensor*> cp, gp;
  for (const Tensor& c : clicks) cp.push_back(&c);
  for (const Tensor& g : gts) gp.push_back(&g);
  Batch b;
  if (scenario != Scenario::depth_only) b.rgb = stack(rgb);
  if (uses_depth(scenario)) b.depth = stack(depth);
  b.click = stack(cp);
  b.gt = stack(gp);
  return b;
}

}  // namespace

SegTrainResult train_segmentor(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::vector<PreparedSample>& train, const SplitSpec& split,
                               const StepLogger& log) {
  cfg.validate();
  std::vector<std::pair<std::size_t, std::size_t>> records;
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t k = 0; k < train[i].objects.size(); ++k)
      if (split.is_seen(train[i].objects[k].class_id)) records.emplace_back(i, k);
  if (records.empty()) throw ConfigError("training set has no object of a seen class");
  const Shape& shape = train.front().rgb.shape();
  if (shape[1] != cfg.height || shape[2] != cfg.width)
    throw ConfigError("dataset resolution " + shape_str(shape) + " differs from the experiment's " +
                      std::to_string(cfg.height) + "x" + std::to_string(cfg.width));

  SegTrainResult out{Segmentor(cfg.scenario, cfg.widths, cfg.decoder_width,
                               synth::derive_seed(seed, 1)),
                     {},
                     {}};
  AdamConfig adam{cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2};
  AdamState state;
  Rng rng(synth::derive_seed(seed, 2));
  for (std::size_t step = 1; step <= cfg.optim.iterations; ++step) {
    std::vector<EvalItem> targets;
    for (std::size_t b = 0; b < cfg.optim.batch; ++b) {
      const auto [i, k] = records[rng.index(records.size())];
      const data::LoadedObject& o = train[i].objects[k];
      if (!split.is_seen(o.class_id)) throw std::logic_error("unseen class in a training batch");
      out.classes_in_batches.insert(o.class_id);
      targets.push_back({&train[i], k, click::sample_click(o.mask, click::ClickMode::uniform, rng.next())});
    }
    const Batch batch = make_batch(targets, cfg.scenario);
    const Tensor logits = out.model.forward(batch.rgb, batch.depth, batch.click);
    const Tensor loss = objectives::balanced_bce_with_logits(logits, batch.gt);
    check_finite(loss, "train_segmentor", step);
    backward(loss);
    adam_step(out.model.params().tensors(), state, adam);
    out.loss.push_back(loss.item());
    if (log) log(step, loss.item());
  }
  return out;
}

Tensor component_at(const Tensor& mask, click::Click p) {
  const std::size_t h = mask.size(0), w = mask.size(1);
  if (p.row >= h || p.col >= w) throw BoundsError("click outside the mask");
  const auto m = mask.data();
  std::vector<double> out(h * w, 0.0);
  if (m[p.row * w + p.col] > 0.5) {
    std::deque<std::size_t> queue{p.row * w + p.col};
    out[queue.front()] = 1.0;
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      const std::size_t r = q / w, c = q % w;
      const std::size_t nb[4] = {r > 0 ? q - w : q, r + 1 < h ? q + w : q, c > 0 ? q - 1 : q,
                                 c + 1 < w ? q + 1 : q};
      for (std::size_t n : nb)
        if (out[n] == 0.0 && m[n] > 0.5) {
          out[n] = 1.0;
          queue.push_back(n);
        }
    }
  }
  return Tensor(mask.shape(), std::move(out));
}

EvalResult evaluate(const Segmentor& model, const std::vector<PreparedSample>& val,
                    const SplitSpec& split, click::ClickMode mode, std::uint64_t seed) {
  const Predictor predict = [&](const std::vector<EvalItem>& items) {
    const Batch batch = make_batch(items, model.scenario());
    return model.forward(batch.rgb, batch.depth, batch.click);
  };
  return evaluate(predict, val, split, mode, seed);
}

EvalResult evaluate(const Predictor& predict, const std::vector<PreparedSample>& val,
                    const SplitSpec& split, click::ClickMode mode, std::uint64_t seed) {
  EvalResult r;
  std::vector<EvalItem> all;
  std::uint64_t counter = 0;
  for (const PreparedSample& s : val)
    for (std::size_t k = 0; k < s.objects.size(); ++k)
      all.push_back({&s, k, click::sample_click(s.objects[k].mask, mode,
                                                synth::derive_seed(seed, counter++))});
  constexpr std::size_t kChunk = 16;
  double sum_seen = 0, sum_unseen = 0, raw_seen = 0, raw_unseen = 0;
  std::size_t n_seen = 0, n_unseen = 0;
  for (std::size_t begin = 0; begin < all.size(); begin += kChunk) {
    const std::vector<EvalItem> chunk(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                    all.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(all.size(), begin + kChunk)));
    const Tensor logits = predict(chunk);
    if (logits.dim() != 4 || logits.size(0) != chunk.size() || logits.size(1) != 1)
      throw ShapeError("predictor returned " + shape_str(logits.shape()));
    const std::size_t h = logits.size(2), w = logits.size(3);
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      std::vector<double> pred(h * w);
      for (std::size_t q = 0; q < h * w; ++q) pred[q] = logits.data()[n * h * w + q] > 0 ? 1.0 : 0.0;
      const Tensor raw(Shape{h, w}, std::move(pred));
      const EvalItem& t = chunk[n];
      const data::LoadedObject& o = t.sample->objects[t.object];
      ObjectResult res;
      res.image_id = t.sample->id;
      res.object_index = t.object;
      res.class_id = o.class_id;
      res.seen = split.is_seen(o.class_id);
      res.click = t.click;
      res.iou_raw = objectives::iou(raw, o.mask);
      res.iou = objectives::iou(component_at(raw, t.click), o.mask);
      (res.seen ? sum_seen : sum_unseen) += res.iou;
      (res.seen ? raw_seen : raw_unseen) += res.iou_raw;
      ++(res.seen ? n_seen : n_unseen);
      r.objects.push_back(res);
    }
  }
  if (n_seen) {
    r.iou_seen = sum_seen / static_cast<double>(n_seen);
    r.iou_seen_raw = raw_seen / static_cast<double>(n_seen);
  }
  if (n_unseen) {
    r.iou_unseen = sum_unseen / static_cast<double>(n_unseen);
    r.iou_unseen_raw = raw_unseen / static_cast<double>(n_unseen);
  }
  if (r.iou_seen && r.iou_unseen && *r.iou_seen > 0)
    r.delta_percent = objectives::delta_percent(*r.iou_seen, *r.iou_unseen);
  return r;
}

// ---- matrix and reports ------------------------------------------------------------

std::string config_hash(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string depth_origin(const ExperimentConfig& e) {
  if (e.scenario == Scenario::rgb_rgb_control) return "rgb copy";
  if (!uses_depth(e.scenario)) return "-";
  return provider_name(e.provider.kind);
}

json object_json(const ObjectResult& o) {
  return {{"image", o.image_id},      {"object", o.object_index}, {"class_id", o.class_id},
          {"seen", o.seen},           {"click", {o.click.row, o.click.col}},
          {"iou", o.iou},             {"iou_raw", o.iou_raw}};
}

}  // namespace

json run_matrix(const std::vector<ExperimentConfig>& experiments,
                const data::DatasetManifest& manifest, const fs::path& root,
                const MatrixOptions& options) {
  if (experiments.empty()) throw ConfigError("matrix needs at least one experiment");
  const auto note = [&](const std::string& s) {
    if (options.note) options.note(s);
  };
  const std::vector<data::LoadedSample> train = data::load_split(root, manifest.train);
  const std::vector<data::LoadedSample> val = data::load_split(root, manifest.val);
  if (train.empty()) throw DataError("dataset has no training samples");

  json rows = json::array();
  for (std::size_t e = 0; e < experiments.size(); ++e) {
    const ExperimentConfig& cfg = experiments[e];
    const json cfg_json = config::to_json(cfg);
    json row = {{"name", cfg.name.empty() ? scenario_name(cfg.scenario) : cfg.name},
                {"scenario", scenario_name(cfg.scenario)},
                {"depth_origin", depth_origin(cfg)},
                {"rgb", cfg.scenario != Scenario::depth_only},
                {"depth", uses_depth(cfg.scenario)},
                {"split_k", cfg.split_k},
                {"click_mode", cfg.eval_click == click::ClickMode::center ? "center" : "uniform"},
                {"config", cfg_json},
                {"config_hash", config_hash(cfg_json)},
                {"status", "ok"},
                {"runs", json::array()}};
    try {
      cfg.validate();
      const SplitSpec split = make_split(manifest.train_pixels, cfg.split_k);
      row["seen"] = split.seen;
      row["unseen"] = split.unseen;
      std::optional<DepthProvider> provider;
      if (uses_depth(cfg.scenario)) provider.emplace(cfg.provider, root);
      const auto ptrain = prepare(train, cfg.scenario, provider ? &*provider : nullptr);
      const auto pval = prepare(val, cfg.scenario, provider ? &*provider : nullptr);
      double s_seen = 0, s_unseen = 0;
      bool have_seen = true, have_unseen = true;
      for (std::uint64_t seed : cfg.seeds) {
        note("[" + std::to_string(e + 1) + "/" + std::to_string(experiments.size()) + "] " +
             row["name"].get<std::string>() + " k=" + std::to_string(cfg.split_k) + " seed " +
             std::to_string(seed));
        SegTrainResult trained = train_segmentor(cfg, seed, ptrain, split, options.progress);
        for (int c : trained.classes_in_batches)
          if (!split.is_seen(c)) throw std::logic_error("training isolation violated");
        // Evaluate the checkpointed (float32) parameters.
        trained.model.params().round_to_f32();
        const EvalResult ev = evaluate(trained.model, pval, split, cfg.eval_click, seed);
        json objs = json::array();
        for (const ObjectResult& o : ev.objects) objs.push_back(object_json(o));
        std::vector<int> classes(trained.classes_in_batches.begin(), trained.classes_in_batches.end());
        row["runs"].push_back({{"seed", seed},
                               {"iou_seen", opt(ev.iou_seen)},
                               {"iou_unseen", opt(ev.iou_unseen)},
                               {"delta_percent", opt(ev.delta_percent)},
                               {"iou_seen_raw", opt(ev.iou_seen_raw)},
                               {"iou_unseen_raw", opt(ev.iou_unseen_raw)},
                               {"first_loss", trained.loss.front()},
                               {"final_loss", smoothed_loss(trained.loss, trained.loss.size())},
                               {"train_classes", classes},
                               {"objects", objs}});
        have_seen = have_seen && ev.iou_seen.has_value();
        have_unseen = have_unseen && ev.iou_unseen.has_value();
        if (ev.iou_seen) s_seen += *ev.iou_seen;
        if (ev.iou_unseen) s_unseen += *ev.iou_unseen;
      }
      const double n = static_cast<double>(cfg.seeds.size());
      std::optional<double> seen, unseen, delta;
      if (have_seen) seen = s_seen / n;
      if (have_unseen) unseen = s_unseen / n;
      if (seen && unseen && *seen > 0) delta = objectives::delta_percent(*seen, *unseen);
      row["iou_seen"] = opt(seen);
      row["iou_unseen"] = opt(unseen);
      row["delta_percent"] = opt(delta);
    } catch (const Error& err) {
      row["status"] = "failed";
      row["error"] = err.kind() + ": " + err.what();
      row["iou_seen"] = nullptr;
      row["iou_unseen"] = nullptr;
      row["delta_percent"] = nullptr;
      note("row " + row["name"].get<std::string>() + " failed: " + err.what());
    }
    rows.push_back(row);
  }
  return {{"format", "pdseg-report"},
          {"version", kReportVersion},
          {"dataset",
           {{"master_seed", manifest.master_seed},
            {"height", manifest.height},
            {"width", manifest.width},
            {"train", manifest.train.size()},
            {"val", manifest.val.size()}}},
          {"rows", rows}};
}

namespace {

std::string fixed(const json& v, double scale) {
  if (v.is_null()) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v.get<double>() * scale);
  return buf;
}

}  // namespace

std::string render_table(const json& report) {
  if (!report.is_object() || report.value("format", "") != "pdseg-report")
    throw FormatError(0, "not a pdseg report");
  const json& rows = report.at("rows");
  std::vector<std::size_t> ks;
  for (const json& r : rows) ks.push_back(r.at("split_k").get<std::size_t>());
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  const std::vector<std::string> header{"name", "depth origin", "RGB", "D",
                                        "IoU_seen", "IoU_unseen", "Delta%"};
  std::ostringstream out;
  for (std::size_t g = 0; g < ks.size(); ++g) {
    const std::size_t k = ks[g];
    std::vector<std::vector<std::string>> cells{header};
    std::string click_modes;
    for (const json& r : rows) {
      if (r.at("split_k").get<std::size_t>() != k) continue;
      const std::string mode = r.at("click_mode").get<std::string>();
      if (click_modes.find(mode) == std::string::npos)
        click_modes += (click_modes.empty() ? "" : ", ") + mode;
      const bool failed = r.at("status").get<std::string>() != "ok";
      cells.push_back({r.at("name").get<std::string>(), r.at("depth_origin").get<std::string>(),
                       r.at("rgb").get<bool>() ? "x" : "", r.at("depth").get<bool>() ? "x" : "",
                       failed ? "failed" : fixed(r.at("iou_seen"), 100),
                       failed ? "failed" : fixed(r.at("iou_unseen"), 100),
                       failed ? "failed" : fixed(r.at("delta_percent"), 1)});
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : cells)
      for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    if (g) out << "\n";
    out << "split k=" << k << " (" << k << " seen / " << synth::kNumClasses - static_cast<int>(k)
        << " unseen), clicks: " << click_modes << "\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
      std::string line;
      for (std::size_t c = 0; c < cells[i].size(); ++c) {
        const std::string& s = cells[i][c];
        const std::string pad(width[c] - s.size(), ' ');
        // Text columns left-aligned, numbers right-aligned.
        line += c < 4 ? s + pad : pad + s;
        if (c + 1 < cells[i].size()) line += "  ";
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      out << line << "\n";
      if (i == 0) {
        std::size_t total = 0;
        for (std::size_t w : width) total += w;
        out << std::string(total + 2 * (width.size() - 1), '-') << "\n";
      }
    }
  }
  return out.str();
}

}  // namespace pdseg::harness
