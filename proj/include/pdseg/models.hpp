#pragma once

// Small from-scratch networks: a single-stream click segmentor, a dual-stream
// RGB-D segmentor with gated cross-exchange and squeeze-excitation fusion, a
// monocular disparity network and a relative pose network.
//
// All convolutions are 3x3 or 1x1 with stride 1; stages downsample with 2x2
// average pooling. There are no normalization layers, so every forward pass
// is a pure function of (parameters, input).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pdseg/tensor.hpp"

namespace pdseg::models {

using json = nlohmann::json;

/// Named parameters in creation order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  /// Total number of scalars.
  std::size_t count() const;
  /// Round every value to float32, as a checkpoint would.
  void round_to_f32();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Kaiming-uniform fan-in weights (bound sqrt(6 / fan_in)), zero biases.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : state_(seed) {}
  /// Adds "<prefix>.w" [out,in,k,k] and, when `bias`, "<prefix>.b" [out].
  void conv(ParamStore& p, const std::string& prefix, std::size_t in, std::size_t out,
            std::size_t k, bool bias = true);

 private:
  double uniform();
  std::uint64_t state_;
};

struct EncoderConfig {
  std::size_t in_channels = 4;
  /// Stem width followed by the four stage widths are widths[0..3]; the stem
  /// shares widths[0].
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t decoder_width = 16;

  void validate() const;
  json to_json() const;
  static EncoderConfig from_json(const json& j);
};

/// Encoder features: the full-resolution stem map then one map per stage at
/// 1/2, 1/4, 1/8 and 1/16 resolution.
using Features = std::vector<Tensor>;

/// Single-stream segmentor. Input [N,Cin,H,W] with H, W divisible by 16;
/// output [N,1,H,W] logits.
class SegNet {
 public:
  explicit SegNet(EncoderConfig cfg, std::uint64_t seed = 0);
  SegNet(EncoderConfig cfg, ParamStore params);

  Tensor forward(const Tensor& input) const;
  Features encode(const Tensor& input) const;

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  EncoderConfig cfg_;
  ParamStore params_;
};

struct FusedConfig {
  std::size_t rgb_channels = 4;
  std::size_t depth_channels = 2;
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t decoder_width = 16;

  void validate() const;
  json to_json() const;
  static FusedConfig from_json(const json& j);
};

/// Dual-stream segmentor. After the stem and after every stage each stream
/// receives a 1x1 projection of the other (additive exchange), then the two
/// streams are fused by concat, 1x1 conv, channel SE and spatial SE. The
/// decoder sees only fused features. Parameter names of the first stream
/// are "rgb." + the SegNet names, the second stream uses "depth.".
class FusedNet {
 public:
  explicit FusedNet(FusedConfig cfg, std::uint64_t seed = 0);
  FusedNet(FusedConfig cfg, ParamStore params);

  /// rgb_in [N,Crgb,H,W], depth_in [N,Cdepth,H,W] -> [N,1,H,W] logits.
  Tensor forward(const Tensor& rgb_in, const Tensor& depth_in) const;

  struct StreamFeatures {
    Features rgb;    ///< after exchange
    Features depth;  ///< after exchange
    Features fused;
  };
  StreamFeatures encode(const Tensor& rgb_in, const Tensor& depth_in) const;

  const FusedConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  FusedConfig cfg_;
  ParamStore params_;
};

/// Fusion of two same-shape stream maps with the parameters under `prefix`:
/// concat -> 1x1 conv -> ReLU -> channel SE -> spatial SE.
Tensor fusion_block(const ParamStore& p, const std::string& prefix, const Tensor& a,
                    const Tensor& b);
void init_fusion_block(ParamStore& p, Initializer& init, const std::string& prefix,
                       std::size_t channels);

struct DepthNetConfig {
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t decoder_width = 16;
  double min_disparity = 0.01;
  double max_disparity = 10.0;

  void validate() const;
  json to_json() const;
  static DepthNetConfig from_json(const json& j);
};

/// Monocular disparity: images [N,3,H,W] in [0,1] -> [N,H,W] disparity
/// min + (max - min) * sigmoid(logit). Depth is its reciprocal.
class DepthNet {
 public:
  explicit DepthNet(DepthNetConfig cfg, std::uint64_t seed = 0);
  DepthNet(DepthNetConfig cfg, ParamStore params);

  Tensor disparity(const Tensor& images) const;
  Tensor depth(const Tensor& images) const;

  const DepthNetConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  DepthNetConfig cfg_;
  ParamStore params_;
};

struct PoseNetConfig {
  std::vector<std::size_t> widths{16, 32, 64, 128};
  double output_scale = 0.01;

  void validate() const;
  json to_json() const;
  static PoseNetConfig from_json(const json& j);
};

/// Relative pose of frame b seen from frame a: [N,3,H,W] x 2 -> [N,6]
/// (axis-angle, translation), scaled by output_scale.
class PoseNet {
 public:
  explicit PoseNet(PoseNetConfig cfg, std::uint64_t seed = 0);
  PoseNet(PoseNetConfig cfg, ParamStore params);

  Tensor forward(const Tensor& a, const Tensor& b) const;

  const PoseNetConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  PoseNetConfig cfg_;
  ParamStore params_;
};

// ---- checkpoints ----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A model kind tag ("segnet", "fusednet", "monodepth", ...), its config and
/// its parameters. Layout in docs/FORMATS.md.
struct Checkpoint {
  std::string kind;
  json config = json::object();
  ParamStore params;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError.
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError or FormatError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pdseg::models
