/**
 * @file error.hpp
 * @brief Exception types shared by every barstyle module.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace barstyle {

/// Base of all library errors. `kind()` is a stable machine-readable tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define BARSTYLE_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name, what) {}    \
  };

// midi_io
BARSTYLE_DEFINE_ERROR(MalformedFile)
BARSTYLE_DEFINE_ERROR(UnsupportedFormat)
BARSTYLE_DEFINE_ERROR(UnsupportedMeter)
// remi
BARSTYLE_DEFINE_ERROR(VocabMiss)
BARSTYLE_DEFINE_ERROR(NoBars)
// attributes
BARSTYLE_DEFINE_ERROR(DegenerateDistribution)
// autodiff / transformer
BARSTYLE_DEFINE_ERROR(ShapeMismatch)
BARSTYLE_DEFINE_ERROR(NotScalarLoss)
BARSTYLE_DEFINE_ERROR(EmptyBar)
BARSTYLE_DEFINE_ERROR(BadPartition)
BARSTYLE_DEFINE_ERROR(ModeDimensionError)
// vae / decode
BARSTYLE_DEFINE_ERROR(OOMGuard)
BARSTYLE_DEFINE_ERROR(NonTerminatingBar)
// metrics
BARSTYLE_DEFINE_ERROR(LengthMismatch)
BARSTYLE_DEFINE_ERROR(EmptySet)
BARSTYLE_DEFINE_ERROR(DegenerateInput)
BARSTYLE_DEFINE_ERROR(ZeroProbability)
// corpus / io
BARSTYLE_DEFINE_ERROR(EmptyCorpus)
BARSTYLE_DEFINE_ERROR(IoError)
BARSTYLE_DEFINE_ERROR(ConfigError)

#undef BARSTYLE_DEFINE_ERROR

}  // namespace barstyle
