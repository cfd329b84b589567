#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdseg {

/// Root of every error raised by the library. `kind()` is the stable,
/// machine-parsable class name printed by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define PDSEG_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(#Name, what) {}      \
  };

PDSEG_DEFINE_ERROR(ShapeError)
PDSEG_DEFINE_ERROR(BroadcastError)
PDSEG_DEFINE_ERROR(BoundsError)
PDSEG_DEFINE_ERROR(EmptyMaskError)
PDSEG_DEFINE_ERROR(SceneError)
PDSEG_DEFINE_ERROR(ConfigError)
PDSEG_DEFINE_ERROR(DegenerateBatchError)
PDSEG_DEFINE_ERROR(DegenerateMaskError)
PDSEG_DEFINE_ERROR(DegenerateMetricError)
/// Dataset content inconsistent with its manifest (missing files, bad counts).
PDSEG_DEFINE_ERROR(DataError)
/// Training produced a non-finite loss or parameter.
PDSEG_DEFINE_ERROR(NumericError)

#undef PDSEG_DEFINE_ERROR

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error("IoError", path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed file content. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error("FormatError", what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset),
        reason_(what) {}
  std::size_t offset() const noexcept { return offset_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t offset_;
  std::string reason_;
};

// Numeric warnings are non-fatal; they accumulate per thread until taken.
void record_numeric_warning(std::string message);
std::vector<std::string> take_numeric_warnings();
std::size_t numeric_warning_count();

}  // namespace pdseg
