#include "pdseg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstring>
#include <fstream>
#include <locale>
#include <sstream>
#include <vector>

#include "pdseg/errors.hpp"

namespace pdseg::io {

namespace {

// Cursor over a Netpbm/PFM header that reports byte offsets in errors.
class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : b_(bytes) {}

  std::string_view magic() {
    if (b_.size() < 2) throw FormatError(0, "file too short for a magic number");
    pos_ = 2;
    return b_.substr(0, 2);
  }

  // Netpbm whitespace and '#' comments.
  void skip_space(bool comments) {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#' && comments) {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t unsigned_field(const char* what, bool comments = true) {
    skip_space(comments);
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(start, std::string(what) + " too large");
      ++pos_;
    }
    if (pos_ == start) throw FormatError(start, std::string("expected ") + what);
    return v;
  }

  double real_field(const char* what) {
    skip_space(false);
    const std::size_t start = pos_;
    while (pos_ < b_.size() && !std::isspace(static_cast<unsigned char>(b_[pos_]))) ++pos_;
    const std::string tok(b_.substr(start, pos_ - start));
    if (tok.empty()) throw FormatError(start, std::string("expected ") + what);
    std::istringstream is(tok);
    is.imbue(std::locale::classic());
    double v;
    if (!(is >> v) || !is.eof()) throw FormatError(start, std::string("malformed ") + what);
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  void single_space() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
      throw FormatError(pos_, "expected a single whitespace before the raster");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

void require_raster(std::string_view bytes, std::size_t offset, std::size_t need) {
  if (bytes.size() - offset < need)
    throw FormatError(bytes.size(), "raster truncated: need " + std::to_string(need) +
                                        " bytes, have " + std::to_string(bytes.size() - offset));
  if (bytes.size() - offset > need)
    throw FormatError(offset + need, "trailing bytes after raster");
}

void check_dims(std::size_t w, std::size_t h, std::size_t offset) {
  if (w == 0 || h == 0) throw FormatError(offset, "zero image dimension");
}

std::string netpbm_header(const char* magic, std::size_t w, std::size_t h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

std::uint8_t quantize(double v) {
  if (!std::isfinite(v)) throw FormatError(0, "non-finite pixel value");
  const double q = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(q);
}

}  // namespace

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path().string(), "cannot create directory: " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(tmp.string(), "write failed");
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(path.string(), "rename failed");
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(path.string(), "read failed");
  return ss.str();
}

std::string encode_ppm(const Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.size(0) != 3)
    throw ShapeError("PPM needs a [3,H,W] tensor, got " + shape_str(rgb.shape()));
  const std::size_t h = rgb.size(1), w = rgb.size(2), hw = h * w;
  std::string out = netpbm_header("P6", w, h);
  const auto d = rgb.data();
  out.reserve(out.size() + 3 * hw);
  for (std::size_t k = 0; k < hw; ++k)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(d[c * hw + k])));
  return out;
}

Tensor decode_ppm(std::string_view bytes) {
  HeaderReader r(bytes);
  if (r.magic() != "P6") throw FormatError(0, "not a binary PPM (P6)");
  const std::size_t w = r.unsigned_field("width");
  const std::size_t h = r.unsigned_field("height");
  check_dims(w, h, r.pos());
  const std::size_t maxval_at = r.pos();
  if (r.unsigned_field("maxval") != 255) throw FormatError(maxval_at, "maxval must be 255");
  r.single_space();
  const std::size_t off = r.pos(), hw = h * w;
  require_raster(bytes, off, 3 * hw);
  std::vector<double> v(3 * hw);
  for (std::size_t k = 0; k < hw; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      v[c * hw + k] = static_cast<std::uint8_t>(bytes[off + 3 * k + c]) / 255.0;
  return Tensor(Shape{3, h, w}, std::move(v));
}

std::string encode_pgm_mask(const Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("PGM mask needs [H,W], got " + shape_str(mask.shape()));
  const std::size_t h = mask.size(0), w = mask.size(1);
  std::string out = netpbm_header("P5", w, h);
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw FormatError(0, "mask values must be 0 or 1");
    out.push_back(static_cast<char>(v == 1.0 ? 255 : 0));
  }
  return out;
}

Tensor decode_pgm_mask(std::string_view bytes) {
  HeaderReader r(bytes);
  if (r.magic() != "P5") throw FormatError(0, "not a binary PGM (P5)");
  const std::size_t w = r.unsigned_field("width");
  const std::size_t h = r.unsigned_field("height");
  check_dims(w, h, r.pos());
  const std::size_t maxval_at = r.pos();
  if (r.unsigned_field("maxval") != 255) throw FormatError(maxval_at, "maxval must be 255");
  r.single_space();
  const std::size_t off = r.pos();
  require_raster(bytes, off, h * w);
  std::vector<double> v(h * w);
  for (std::size_t k = 0; k < h * w; ++k) {
    const auto q = static_cast<std::uint8_t>(bytes[off + k]);
    if (q != 0 && q != 255) throw FormatError(off + k, "mask sample must be 0 or 255");
    v[k] = q == 255 ? 1.0 : 0.0;
  }
  return Tensor(Shape{h, w}, std::move(v));
}

std::string encode_pfm(const Tensor& map) {
  std::size_t c, h, w;
  if (map.dim() == 2) {
    c = 1, h = map.size(0), w = map.size(1);
  } else if (map.dim() == 3 && map.size(0) == 3) {
    c = 3, h = map.size(1), w = map.size(2);
  } else {
    throw ShapeError("PFM needs [H,W] or [3,H,W], got " + shape_str(map.shape()));
  }
  std::string out = std::string(c == 1 ? "Pf" : "PF") + "\n" + std::to_string(w) + " " +
                    std::to_string(h) + "\n-1.0\n";
  const std::size_t hw = h * w;
  const auto d = map.data();
  out.reserve(out.size() + 4 * c * hw);
  for (std::size_t row = h; row-- > 0;)
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(d[ch * hw + row * w + col]));
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
      }
  return out;
}

Tensor decode_pfm(std::string_view bytes) {
  HeaderReader r(bytes);
  const std::string_view magic = r.magic();
  std::size_t c;
  if (magic == "Pf") {
    c = 1;
  } else if (magic == "PF") {
    c = 3;
  } else {
    throw FormatError(0, "not a PFM file");
  }
  const std::size_t w = r.unsigned_field("width", false);
  const std::size_t h = r.unsigned_field("height", false);
  check_dims(w, h, r.pos());
  const std::size_t scale_at = r.pos();
  const double scale = r.real_field("scale");
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError(scale_at, "scale must be nonzero");
  const bool little = scale < 0;
  r.single_space();
  const std::size_t off = r.pos(), hw = h * w;
  require_raster(bytes, off, 4 * c * hw);
  std::vector<double> v(c * hw);
  std::size_t at = off;
  for (std::size_t row = h; row-- > 0;)
    for (std::size_t col = 0; col < w; ++col)
      for (std::size_t ch = 0; ch < c; ++ch, at += 4) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          const auto byte = static_cast<std::uint8_t>(bytes[at + static_cast<std::size_t>(b)]);
          const int shift = little ? 8 * b : 8 * (3 - b);
          bits |= static_cast<std::uint32_t>(byte) << shift;
        }
        const float f = std::bit_cast<float>(bits);
        if (!std::isfinite(f)) throw FormatError(at, "non-finite sample in PFM");
        v[ch * hw + row * w + col] = f;
      }
  return c == 1 ? Tensor(Shape{h, w}, std::move(v)) : Tensor(Shape{3, h, w}, std::move(v));
}

namespace {

template <typename Decode>
Tensor load_with(const fs::path& p, Decode decode) {
  const std::string bytes = read_file(p);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.offset(), p.string() + ": " + e.reason());
  }
}

}  // namespace

Tensor load_ppm(const fs::path& p) { return load_with(p, decode_ppm); }
Tensor load_pgm_mask(const fs::path& p) { return load_with(p, decode_pgm_mask); }
Tensor load_pfm(const fs::path& p) { return load_with(p, decode_pfm); }

}  // namespace pdseg::io
