#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tpnt {

enum class Errc {
  InvalidShape,
  NonFinite,
  ShapeMismatch,
  CacheRequired,
  MissingXRand,
  UnsupportedLayer,
  InvalidScale,
  NotConnected,
  CorruptModel,
  DegenerateStats,
  InsufficientData,
  AlreadyExists,
  AlreadyConnected,
  InvalidParams,
  ParseError,
  EmptyEval,
  ConfigError,
  IoError,
  FrozenModule,
  InvalidConfig,
  WeakTeacher,
};

std::string_view errc_name(Errc code);

// Every failure raised by the library carries one of the codes above so the
// CLI can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what);
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] void fail(Errc code, const std::string& what);

}  // namespace tpnt
