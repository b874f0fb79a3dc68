#include "libctx/error.hpp"

#include <cstring>

namespace libctx {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::kOk: return "ok";
    case Errc::kParse: return "parse";
    case Errc::kInvalidArgument: return "invalid-argument";
    case Errc::kEmptyCpuSet: return "empty-cpu-set";
    case Errc::kNotOnline: return "not-online";
    case Errc::kUnknownContext: return "unknown-context";
    case Errc::kAlreadyBound: return "already-bound";
    case Errc::kNestingTooDeep: return "nesting-too-deep";
    case Errc::kNotBound: return "not-bound";
    case Errc::kNamespaceCap: return "namespace-cap";
    case Errc::kLoader: return "loader";
    case Errc::kUnresolvedSymbol: return "unresolved-symbol";
    case Errc::kMissingSlot: return "missing-slot";
    case Errc::kEncoding: return "encoding";
    case Errc::kTraceeMemory: return "tracee-memory";
    case Errc::kSpawn: return "spawn";
    case Errc::kPtraceDenied: return "ptrace-denied";
    case Errc::kFilter: return "filter";
    case Errc::kAlreadyInitialized: return "already-initialized";
    case Errc::kNotInitialized: return "not-initialized";
    case Errc::kIo: return "io";
    case Errc::kProtocol: return "protocol";
    case Errc::kUnsupportedArch: return "unsupported-arch";
    case Errc::kConfig: return "config";
    case Errc::kForge: return "forge";
  }
  return "unknown";
}

void throw_errno(Errc code, const std::string& message, int err) {
  throw Error(code, message + ": " + std::strerror(err));
}

}  // namespace libctx
