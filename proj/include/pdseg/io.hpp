#pragma once

// Image and file I/O: binary PPM (P6) for RGB, binary PGM (P5) for masks,
// little-endian PFM for float maps. Grammar details live in docs/FORMATS.md.

#include <filesystem>
#include <string>
#include <string_view>

#include "pdseg/tensor.hpp"

namespace pdseg::io {

namespace fs = std::filesystem;

/// Writes to a sibling temp file, then renames over `path`. Parent
/// directories are created. Throws IoError.
void write_file_atomic(const fs::path& path, std::string_view bytes);
/// Throws IoError when the file cannot be read.
std::string read_file(const fs::path& path);

/// [3,H,W] in [0,1] -> P6, maxval 255, round-to-nearest. Throws ShapeError.
std::string encode_ppm(const Tensor& rgb);
/// P6 -> [3,H,W] with values q / 255. Throws FormatError.
Tensor decode_ppm(std::string_view bytes);

/// [H,W] with values in {0,1} -> P5 with values {0,255}. Throws ShapeError
/// or FormatError for non-binary values.
std::string encode_pgm_mask(const Tensor& mask);
/// P5 mask -> [H,W] in {0,1}. Any sample other than 0 or 255 is a FormatError.
Tensor decode_pgm_mask(std::string_view bytes);

/// [H,W] -> "Pf", [3,H,W] -> "PF". Scale -1.0 (little-endian), rows stored
/// bottom to top, values as float32. Throws ShapeError.
std::string encode_pfm(const Tensor& map);
/// Reads either byte order; non-finite samples are a FormatError.
Tensor decode_pfm(std::string_view bytes);

inline void save_ppm(const fs::path& p, const Tensor& t) { write_file_atomic(p, encode_ppm(t)); }
inline void save_pgm_mask(const fs::path& p, const Tensor& t) {
  write_file_atomic(p, encode_pgm_mask(t));
}
inline void save_pfm(const fs::path& p, const Tensor& t) { write_file_atomic(p, encode_pfm(t)); }
Tensor load_ppm(const fs::path& p);
Tensor load_pgm_mask(const fs::path& p);
Tensor load_pfm(const fs::path& p);

}  // namespace pdseg::io
