#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "libctx/elf_symbols.hpp"

namespace libctx {

enum class ShimKind {
  /// Trampolines dispatch through the calling thread's context slots.
  kContext,
  /// Trampolines read the service page by fixed index.
  kService,
};

struct ShimRequest {
  std::filesystem::path library;
  std::vector<std::string> symbols;
  ShimKind kind = ShimKind::kContext;
  /// Suffix of the shim's entry points; derived from the file name if empty.
  std::string tag;
  /// Defaults to the library's own machine type.
  std::optional<Arch> arch;
};

/// "libfoo-bar.so.1" → "foo_bar".
std::string shim_tag_for(const std::filesystem::path& library);

/// Emits C source with one tail-jump trampoline per symbol after checking
/// that the library exports every symbol. Throws Error(kInvalidArgument)
/// for an empty or duplicated list, Error(kUnresolvedSymbol) naming the
/// symbols the library lacks, and Error(kUnsupportedArch).
std::string generate_shim(const ShimRequest& request);

/// Source emission without reading the library.
std::string render_shim(const std::string& tag, const std::vector<std::string>& symbols, ShimKind kind, Arch arch,
                        const std::string& library_label);

}  // namespace libctx
