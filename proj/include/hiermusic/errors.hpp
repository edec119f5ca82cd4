#pragma once

#include <stdexcept>
#include <string>

namespace hiermusic {

/// Raised when inference is requested from a component that was never trained.
class UntrainedError : public std::logic_error {
 public:
  explicit UntrainedError(const std::string& what) : std::logic_error(what + ": untrained") {}
};

/// A checked property of an artifact does not hold (bounded metric out of
/// range, malformed report). The command line tool exits with status 1.
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hiermusic
