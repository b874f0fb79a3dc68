#include "libctx/elf_symbols.hpp"

#include <elf.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "libctx/error.hpp"

namespace libctx {

namespace {

[[noreturn]] void malformed(const std::filesystem::path& path, const std::string& what) {
  throw Error(Errc::kIo, path.string() + ": malformed ELF file (" + what + ")");
}

template <typename T>
T read_at(const std::vector<char>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset > bytes.size() || bytes.size() - offset < sizeof(T)) malformed(path, "truncated");
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

}  // namespace

const char* arch_name(Arch a) noexcept { return a == Arch::kX86_64 ? "x86_64" : "aarch64"; }

Arch host_arch() noexcept {
#if defined(__x86_64__)
  return Arch::kX86_64;
#elif defined(__aarch64__)
  return Arch::kAarch64;
#else
#error "unsupported architecture"
#endif
}

ElfExports read_elf_exports(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot open " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto eh = read_at<Elf64_Ehdr>(bytes, 0, path);
  if (std::memcmp(eh.e_ident, ELFMAG, SELFMAG) != 0) malformed(path, "bad magic");
  if (eh.e_ident[EI_CLASS] != ELFCLASS64 || eh.e_ident[EI_DATA] != ELFDATA2LSB) {
    throw Error(Errc::kUnsupportedArch, path.string() + ": only little-endian ELF64 is supported");
  }
  ElfExports out;
  switch (eh.e_machine) {
    case EM_X86_64: out.arch = Arch::kX86_64; break;
    case EM_AARCH64: out.arch = Arch::kAarch64; break;
    default:
      throw Error(Errc::kUnsupportedArch,
                  path.string() + ": unsupported machine type " + std::to_string(eh.e_machine));
  }
  if (eh.e_shentsize != sizeof(Elf64_Shdr)) malformed(path, "section header size");

  std::vector<Elf64_Shdr> sections(eh.e_shnum);
  for (std::size_t i = 0; i < sections.size(); ++i) {
    sections[i] = read_at<Elf64_Shdr>(bytes, eh.e_shoff + i * sizeof(Elf64_Shdr), path);
  }
  for (const auto& sh : sections) {
    if (sh.sh_type != SHT_DYNSYM) continue;
    if (sh.sh_link >= sections.size() || sh.sh_entsize != sizeof(Elf64_Sym)) malformed(path, "dynsym header");
    const auto& strtab = sections[sh.sh_link];
    if (strtab.sh_offset > bytes.size() || bytes.size() - strtab.sh_offset < strtab.sh_size) {
      malformed(path, "string table");
    }
    for (std::size_t off = 0; off + sizeof(Elf64_Sym) <= sh.sh_size; off += sizeof(Elf64_Sym)) {
      const auto sym = read_at<Elf64_Sym>(bytes, sh.sh_offset + off, path);
      const unsigned bind = ELF64_ST_BIND(sym.st_info);
      const unsigned type = ELF64_ST_TYPE(sym.st_info);
      const unsigned vis = ELF64_ST_VISIBILITY(sym.st_other);
      if (sym.st_shndx == SHN_UNDEF || (bind != STB_GLOBAL && bind != STB_WEAK)) continue;
      if (type != STT_FUNC && type != STT_GNU_IFUNC) continue;
      if (vis == STV_HIDDEN || vis == STV_INTERNAL) continue;
      if (sym.st_name >= strtab.sh_size) malformed(path, "symbol name offset");
      const char* name = bytes.data() + strtab.sh_offset + sym.st_name;
      const std::size_t max = strtab.sh_size - sym.st_name;
      out.functions.emplace(name, strnlen(name, max));
    }
  }
  return out;
}

}  // namespace libctx
