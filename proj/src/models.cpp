#include "pdseg/models.hpp"

#include <bit>
#include <cmath>

#include "pdseg/errors.hpp"
#include "pdseg/io.hpp"

namespace pdseg::models {

// ---- parameters -------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  value.requires_grad_(true);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(value));
  return tensors_.back();
}

const Tensor& ParamStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return tensors_[it->second];
}

Tensor& ParamStore::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return tensors_[it->second];
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

void ParamStore::round_to_f32() {
  for (Tensor& t : tensors_)
    for (double& v : t.data_mut()) v = static_cast<float>(v);
}

double Initializer::uniform() {
  // splitmix64
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

void Initializer::conv(ParamStore& p, const std::string& prefix, std::size_t in, std::size_t out,
                       std::size_t k, bool bias) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  std::vector<double> w(out * in * k * k);
  for (double& v : w) v = (2.0 * uniform() - 1.0) * bound;
  p.add(prefix + ".w", Tensor(Shape{out, in, k, k}, std::move(w)));
  if (bias) p.add(prefix + ".b", Tensor(Shape{out}, 0.0));
}

// ---- shared layers ------------------------------------------------------------

namespace {

Tensor conv(const ParamStore& p, const std::string& name, const Tensor& x) {
  const Tensor& w = p.get(name + ".w");
  const std::string bname = name + ".b";
  const Tensor b = p.contains(bname) ? p.get(bname) : Tensor();
  return conv2d(x, w, b, 1, w.size(2) / 2);
}

void check_widths(const std::vector<std::size_t>& widths, std::size_t decoder_width) {
  if (widths.size() != 4) throw ConfigError("networks need exactly 4 stage widths");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("stage widths must be positive");
  if (decoder_width == 0) throw ConfigError("decoder width must be positive");
}

void check_input(const Tensor& x, std::size_t channels, const char* what) {
  if (x.dim() != 4 || x.size(1) != channels)
    throw ShapeError(std::string(what) + " expects [N," + std::to_string(channels) +
                     ",H,W], got " + shape_str(x.shape()));
  if (x.size(2) % 16 != 0 || x.size(3) % 16 != 0 || x.size(2) == 0 || x.size(3) == 0)
    throw ShapeError(std::string(what) + " needs H and W divisible by 16, got " +
                     shape_str(x.shape()));
}

std::vector<std::size_t> widths_from(const json& j) {
  return j.at("widths").get<std::vector<std::size_t>>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw FormatError(0, std::string(what) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw FormatError(0, std::string(what) + ": unknown key '" + it.key() + "'");
  }
}

template <typename Fn>
auto parse_config(const char* what, Fn fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(0, std::string(what) + ": " + e.what());
  }
}

void init_encoder(ParamStore& p, Initializer& init, const std::string& pre, std::size_t in,
                  const std::vector<std::size_t>& widths) {
  init.conv(p, pre + "stem", in, widths[0], 3);
  std::size_t c = widths[0];
  for (std::size_t s = 1; s <= 4; ++s) {
    const std::size_t w = widths[s - 1];
    init.conv(p, pre + "stage" + std::to_string(s) + ".conv1", c, w, 3);
    init.conv(p, pre + "stage" + std::to_string(s) + ".conv2", w, w, 3);
    c = w;
  }
}

Tensor encoder_stem(const ParamStore& p, const std::string& pre, const Tensor& x) {
  return relu(conv(p, pre + "stem", x));
}

Tensor encoder_stage(const ParamStore& p, const std::string& pre, std::size_t s, const Tensor& x) {
  const std::string name = pre + "stage" + std::to_string(s);
  Tensor h = avg_pool2d(x, 2, 2);
  h = relu(conv(p, name + ".conv1", h));
  return relu(conv(p, name + ".conv2", h));
}

void init_decoder(ParamStore& p, Initializer& init, const std::vector<std::size_t>& widths,
                  std::size_t d) {
  for (std::size_t s = 1; s <= 4; ++s) init.conv(p, "dec.proj" + std::to_string(s), widths[s - 1], d, 1);
  init.conv(p, "dec.fuse", 4 * d, d, 1);
  init.conv(p, "dec.refine", d + widths[0], d, 1);
  init.conv(p, "dec.head", d, 1, 3);
}

// Projects every stage to a common width at 1/2 resolution, mixes them, then
// refines at full resolution with the stem map.
Tensor decode(const ParamStore& p, const Features& f) {
  std::vector<Tensor> parts;
  for (std::size_t s = 1; s <= 4; ++s) {
    Tensor h = conv(p, "dec.proj" + std::to_string(s), f[s]);
    if (s > 1) h = upsample_bilinear(h, std::size_t{1} << (s - 1));
    parts.push_back(h);
  }
  Tensor h = relu(conv(p, "dec.fuse", concat(parts, 1)));
  h = upsample_bilinear(h, 2);
  h = relu(conv(p, "dec.refine", concat({h, f[0]}, 1)));
  return conv(p, "dec.head", h);
}

}  // namespace

// ---- SegNet -------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  check_widths(widths, decoder_width);
}

json EncoderConfig::to_json() const {
  return {{"in_channels", in_channels}, {"widths", widths}, {"decoder_width", decoder_width}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  return parse_config("segnet config", [&] {
    reject_unknown(j, {"in_channels", "widths", "decoder_width"}, "segnet config");
    EncoderConfig c;
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.widths = widths_from(j);
    c.decoder_width = j.at("decoder_width").get<std::size_t>();
    return c;
  });
}

SegNet::SegNet(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(seed);
  init_encoder(params_, init, "", cfg_.in_channels, cfg_.widths);
  init_decoder(params_, init, cfg_.widths, cfg_.decoder_width);
}

SegNet::SegNet(EncoderConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

Features SegNet::encode(const Tensor& input) const {
  check_input(input, cfg_.in_channels, "SegNet");
  Features f{encoder_stem(params_, "", input)};
  for (std::size_t s = 1; s <= 4; ++s) f.push_back(encoder_stage(params_, "", s, f.back()));
  return f;
}

Tensor SegNet::forward(const Tensor& input) const { return decode(params_, encode(input)); }

// ---- FusedNet -----------------------------------------------------------------

void init_fusion_block(ParamStore& p, Initializer& init, const std::string& prefix,
                       std::size_t c) {
  const std::size_t squeeze = std::max<std::size_t>(c / 4, 2);
  init.conv(p, prefix + ".mix", 2 * c, c, 1);
  init.conv(p, prefix + ".se_c1", c, squeeze, 1);
  init.conv(p, prefix + ".se_c2", squeeze, c, 1);
  init.conv(p, prefix + ".se_s", c, 1, 3);
}

Tensor fusion_block(const ParamStore& p, const std::string& prefix, const Tensor& a,
                    const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("fusion of " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  Tensor z = relu(conv(p, prefix + ".mix", concat({a, b}, 1)));
  Tensor s = mean(z, {2, 3}, true);
  s = sigmoid(conv(p, prefix + ".se_c2", relu(conv(p, prefix + ".se_c1", s))));
  z = z * s;
  const Tensor m = sigmoid(conv(p, prefix + ".se_s", z));
  return z * m;
}

void FusedConfig::validate() const {
  if (rgb_channels == 0 || depth_channels == 0) throw ConfigError("stream channels must be positive");
  check_widths(widths, decoder_width);
}

json FusedConfig::to_json() const {
  return {{"rgb_channels", rgb_channels},
          {"depth_channels", depth_channels},
          {"widths", widths},
          {"decoder_width", decoder_width}};
}

FusedConfig FusedConfig::from_json(const json& j) {
  return parse_config("fusednet config", [&] {
    reject_unknown(j, {"rgb_channels", "depth_channels", "widths", "decoder_width"},
                   "fusednet config");
    FusedConfig c;
    c.rgb_channels = j.at("rgb_channels").get<std::size_t>();
    c.depth_channels = j.at("depth_channels").get<std::size_t>();
    c.widths = widths_from(j);
    c.decoder_width = j.at("decoder_width").get<std::size_t>();
    return c;
  });
}

FusedNet::FusedNet(FusedConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(seed);
  init_encoder(params_, init, "rgb.", cfg_.rgb_channels, cfg_.widths);
  init_encoder(params_, init, "depth.", cfg_.depth_channels, cfg_.widths);
  for (std::size_t s = 0; s <= 4; ++s) {
    const std::size_t c = cfg_.widths[s == 0 ? 0 : s - 1];
    const std::string x = "xchg" + std::to_string(s);
    init.conv(params_, x + ".d2r", c, c, 1, false);
    init.conv(params_, x + ".r2d", c, c, 1, false);
    init_fusion_block(params_, init, "fuse" + std::to_string(s), c);
  }
  init_decoder(params_, init, cfg_.widths, cfg_.decoder_width);
}

FusedNet::FusedNet(FusedConfig cfg, ParamStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

FusedNet::StreamFeatures FusedNet::encode(const Tensor& rgb_in, const Tensor& depth_in) const {
  check_input(rgb_in, cfg_.rgb_channels, "FusedNet rgb stream");
  check_input(depth_in, cfg_.depth_channels, "FusedNet depth stream");
  if (rgb_in.size(0) != depth_in.size(0) || rgb_in.size(2) != depth_in.size(2) ||
      rgb_in.size(3) != depth_in.size(3))
    throw ShapeError("FusedNet streams differ: " + shape_str(rgb_in.shape()) + " vs " +
                     shape_str(depth_in.shape()));
  StreamFeatures out;
  Tensor r = encoder_stem(params_, "rgb.", rgb_in);
  Tensor d = encoder_stem(params_, "depth.", depth_in);
  for (std::size_t s = 0; s <= 4; ++s) {
    if (s > 0) {
      r = encoder_stage(params_, "rgb.", s, r);
      d = encoder_stage(params_, "depth.", s, d);
    }
    const std::string x = "xchg" + std::to_string(s);
    const Tensor r2 = r + conv(params_, x + ".d2r", d);
    const Tensor d2 = d + conv(params_, x + ".r2d", r);
    r = r2;
    d = d2;
    out.rgb.push_back(r);
    out.depth.push_back(d);
    out.fused.push_back(fusion_block(params_, "fuse" + std::to_string(s), r, d));
  }
  return out;
}

Tensor FusedNet::forward(const Tensor& rgb_in, const Tensor& depth_in) const {
  return decode(params_, encode(rgb_in, depth_in).fused);
}

// ---- DepthNet -----------------------------------------------------------------

void DepthNetConfig::validate() const {
  check_widths(widths, decoder_width);
  if (!(min_disparity > 0 && max_disparity > min_disparity))
    throw ConfigError("disparity bounds must satisfy 0 < min < max");
}

json DepthNetConfig::to_json() const {
  return {{"widths", widths},
          {"decoder_width", decoder_width},
          {"min_disparity", min_disparity},
          {"max_disparity", max_disparity}};
}

DepthNetConfig DepthNetConfig::from_json(const json& j) {
  return parse_config("depthnet config", [&] {
    reject_unknown(j, {"widths", "decoder_width", "min_disparity", "max_disparity"},
                   "depthnet config");
    DepthNetConfig c;
    c.widths = widths_from(j);
    c.decoder_width = j.at("decoder_width").get<std::size_t>();
    c.min_disparity = j.at("min_disparity").get<double>();
    c.max_disparity = j.at("max_disparity").get<double>();
    return c;
  });
}

DepthNet::DepthNet(DepthNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(seed);
  init_encoder(params_, init, "", 3, cfg_.widths);
  init_decoder(params_, init, cfg_.widths, cfg_.decoder_width);
}

DepthNet::DepthNet(DepthNetConfig cfg, ParamStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

Tensor DepthNet::disparity(const Tensor& images) const {
  check_input(images, 3, "DepthNet");
  Features f{encoder_stem(params_, "", images)};
  for (std::size_t s = 1; s <= 4; ++s) f.push_back(encoder_stage(params_, "", s, f.back()));
  const Tensor logit = decode(params_, f);
  const Tensor disp =
      sigmoid(logit) * (cfg_.max_disparity - cfg_.min_disparity) + cfg_.min_disparity;
  return reshape(disp, Shape{images.size(0), images.size(2), images.size(3)});
}

Tensor DepthNet::depth(const Tensor& images) const {
  const Tensor d = disparity(images);
  return div(Tensor::ones(d.shape()), d);
}

// ---- PoseNet ------------------------------------------------------------------

void PoseNetConfig::validate() const {
  check_widths(widths, 1);
  if (!(output_scale > 0)) throw ConfigError("pose output scale must be positive");
}

json PoseNetConfig::to_json() const { return {{"widths", widths}, {"output_scale", output_scale}}; }

PoseNetConfig PoseNetConfig::from_json(const json& j) {
  return parse_config("posenet config", [&] {
    reject_unknown(j, {"widths", "output_scale"}, "posenet config");
    PoseNetConfig c;
    c.widths = widths_from(j);
    c.output_scale = j.at("output_scale").get<double>();
    return c;
  });
}

PoseNet::PoseNet(PoseNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(seed);
  init.conv(params_, "stem", 6, cfg_.widths[0], 3);
  std::size_t c = cfg_.widths[0];
  for (std::size_t s = 1; s <= 4; ++s) {
    init.conv(params_, "stage" + std::to_string(s), c, cfg_.widths[s - 1], 3);
    c = cfg_.widths[s - 1];
  }
  init.conv(params_, "head", c, 6, 1);
}

PoseNet::PoseNet(PoseNetConfig cfg, ParamStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

Tensor PoseNet::forward(const Tensor& a, const Tensor& b) const {
  check_input(a, 3, "PoseNet");
  if (b.shape() != a.shape())
    throw ShapeError("PoseNet frames differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor h = relu(conv(params_, "stem", concat({a, b}, 1)));
  for (std::size_t s = 1; s <= 4; ++s)
    h = relu(conv(params_, "stage" + std::to_string(s), avg_pool2d(h, 2, 2)));
  h = mean(conv(params_, "head", h), {2, 3});
  return h * cfg_.output_scale;
}

// ---- checkpoints --------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'D', 'S', 'G', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw FormatError(b_.size(), std::string("truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    const std::string_view v = b_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.kind);
  put_string(out, ckpt.config.dump());
  const auto& names = ckpt.params.names();
  put_u32(out, static_cast<std::uint32_t>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& t = ckpt.params.tensors()[i];
    put_string(out, names[i]);
    put_u32(out, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.raw(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic))
    throw FormatError(0, "not a checkpoint (bad magic)");
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(version_at, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.kind = r.str("kind");
  const std::size_t config_at = r.pos() + 4;
  const std::string cfg = r.str("config");
  try {
    c.config = json::parse(cfg);
  } catch (const json::parse_error& e) {
    throw FormatError(config_at + e.byte, "malformed checkpoint config JSON");
  }
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const std::string name = r.str("tensor name");
    const std::uint32_t nd = r.u32("rank");
    if (nd > 8) throw FormatError(at, "tensor rank too large");
    Shape shape(nd);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32("extent");
      n *= d;
      if (n > (std::size_t{1} << 32)) throw FormatError(at, "tensor too large");
    }
    const std::string_view raw = r.raw(4 * n, "tensor data");
    std::vector<double> v(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[4 * k + b])) << (8 * b);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) throw FormatError(r.pos() - 4 * n + 4 * k, "non-finite parameter");
      v[k] = f;
    }
    try {
      c.params.add(name, Tensor(std::move(shape), std::move(v)));
    } catch (const ConfigError&) {
      throw FormatError(at, "duplicate tensor " + name);
    }
  }
  if (!r.done()) throw FormatError(r.pos(), "trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.offset(), path.string() + ": " + e.reason());
  }
}

}  // namespace pdseg::models
