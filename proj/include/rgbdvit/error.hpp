#pragma once

#include <stdexcept>
#include <string>

namespace rgbdvit {

// Base error. `code()` is a stable machine-readable identifier that the
// teaching service forwards verbatim in its error envelope.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define RGBDVIT_DEFINE_ERROR(Name, code_str)                           \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(code_str, what) {}  \
  };

RGBDVIT_DEFINE_ERROR(InvalidArgument, "invalid_argument")
RGBDVIT_DEFINE_ERROR(EmptyInput, "empty_input")
RGBDVIT_DEFINE_ERROR(StateError, "state_error")
RGBDVIT_DEFINE_ERROR(TrainingError, "training_error")
RGBDVIT_DEFINE_ERROR(IncompatibleCheckpoint, "incompatible_checkpoint")
RGBDVIT_DEFINE_ERROR(InvalidCheckpoint, "invalid_checkpoint")
RGBDVIT_DEFINE_ERROR(IoError, "io_error")
RGBDVIT_DEFINE_ERROR(IndexingError, "indexing_error")
RGBDVIT_DEFINE_ERROR(SplitError, "split_error")
RGBDVIT_DEFINE_ERROR(UnsupportedRegime, "unsupported_regime")
RGBDVIT_DEFINE_ERROR(ProtocolError, "protocol_error")
RGBDVIT_DEFINE_ERROR(PayloadError, "payload_error")
RGBDVIT_DEFINE_ERROR(NotFound, "not_found")
RGBDVIT_DEFINE_ERROR(Conflict, "conflict")

#undef RGBDVIT_DEFINE_ERROR

}  // namespace rgbdvit
