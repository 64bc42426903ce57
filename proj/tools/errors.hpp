#pragma once

#include <stdexcept>

namespace tpmcf::cli {

// Bad flags or flag values; reported with exit status 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tpmcf::cli
