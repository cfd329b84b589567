#include "pdseg/errors.hpp"

namespace pdseg {

namespace {
thread_local std::vector<std::string> t_warnings;
}

void record_numeric_warning(std::string message) { t_warnings.push_back(std::move(message)); }

std::vector<std::string> take_numeric_warnings() {
  std::vector<std::string> out;
  out.swap(t_warnings);
  return out;
}

std::size_t numeric_warning_count() { return t_warnings.size(); }

}  // namespace pdseg
