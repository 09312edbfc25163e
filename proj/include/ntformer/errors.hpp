#pragma once

#include <stdexcept>
#include <string>

namespace ntformer {

// Bad input from the outside world: missing files, malformed data, rejected
// configuration. The CLI maps it to exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ntformer
