#pragma once

#include <stdexcept>
#include <string>

namespace diffuse {

/// Base error for every contract violation raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace diffuse
