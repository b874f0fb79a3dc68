#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace libctx {

/// Error categories shared by the library, the control channel (as the
/// numeric ack code) and the CLI (mapped onto exit codes).
enum class Errc : std::uint32_t {
  kOk = 0,
  kParse = 1,
  kInvalidArgument = 2,
  kEmptyCpuSet = 3,
  kNotOnline = 4,
  kUnknownContext = 5,
  kAlreadyBound = 6,
  kNestingTooDeep = 7,
  kNotBound = 8,
  kNamespaceCap = 9,
  kLoader = 10,
  kUnresolvedSymbol = 11,
  kMissingSlot = 12,
  kEncoding = 13,
  kTraceeMemory = 14,
  kSpawn = 15,
  kPtraceDenied = 16,
  kFilter = 17,
  kAlreadyInitialized = 18,
  kNotInitialized = 19,
  kIo = 20,
  kProtocol = 21,
  kUnsupportedArch = 22,
  kConfig = 23,
  kForge = 24,
};

const char* errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Throws Error(code, message + ": " + strerror(err)).
[[noreturn]] void throw_errno(Errc code, const std::string& message, int err);

}  // namespace libctx
