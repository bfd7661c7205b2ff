#pragma once

#include <stdexcept>
#include <string>

namespace fpcnn {

enum class ErrorCode {
  file_not_found,
  malformed_header,
  data_length_mismatch,
  io_failure,
  invalid_argument,
  empty_mask,
  geometry_mismatch,
  degenerate_stats,
  fingerprint_mismatch,
  empty_dataset,
  pipeline_error,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace fpcnn
