#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dera {

enum class Errc {
  InvalidArgument,
  EmptySupport,
  BadControl,
  BadSmoothing,
  BadLambda,
  BadBeta,
  BadReward,
  TooLarge,
  SupportMismatch,
  Incompatible,
  Provider,
  ProviderTimeout,
  Protocol,
  EmptyDataset,
  EmptyCorpus,
  Judge,
  Io,
  Parse,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code), cause_(code) {}
  // Wraps an underlying failure, e.g. Provider caused by ProviderTimeout.
  Error(Errc code, const std::string& what, Errc cause)
      : std::runtime_error(what), code_(code), cause_(cause) {}

  Errc code() const noexcept { return code_; }
  Errc cause() const noexcept { return cause_; }

 private:
  Errc code_;
  Errc cause_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

// Sink for soft warnings (e.g. lambda above 10). Defaults to stderr.
using WarningSink = void (*)(std::string_view);
void set_warning_sink(WarningSink sink) noexcept;
void warn(std::string_view message);

}  // namespace dera
