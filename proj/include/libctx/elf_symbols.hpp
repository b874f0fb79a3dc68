#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

namespace libctx {

enum class Arch { kX86_64, kAarch64 };

const char* arch_name(Arch a) noexcept;
/// Architecture this binary was built for.
Arch host_arch() noexcept;

/// Defined, globally visible function symbols of an ELF64 shared object.
struct ElfExports {
  Arch arch = Arch::kX86_64;
  std::set<std::string> functions;
};

/// Reads the dynamic symbol table. Throws Error(kIo) for unreadable or
/// malformed files and Error(kUnsupportedArch) for other machines.
ElfExports read_elf_exports(const std::filesystem::path& path);

}  // namespace libctx
