#include "libctx/shim_gen.hpp"

#include <cctype>
#include <set>

#include "libctx/error.hpp"
#include "libctx/jump_table.hpp"

namespace libctx {

namespace {

bool is_identifier(const std::string& s) {
  if (s.empty() || std::isdigit(static_cast<unsigned char>(s[0]))) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

/// One line of a top-level asm block, as a C string literal.
std::string asm_line(const std::string& text) { return "  \"" + text + "\\n\"\n"; }

std::string x86_context_body(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line("  movq libctx_slots__" + tag + "@gottpoff(%rip), %r11");
  s += asm_line("  movq %fs:(%r11), %r11");
  s += asm_line("  testq %r11, %r11");
  s += asm_line("  jz .Lunbound_" + std::to_string(i));
  s += asm_line("  jmpq *" + std::to_string(8 * i) + "(%r11)");
  return s;
}

std::string x86_service_body(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line("  movq libctx_page__" + tag + "(%rip), %r11");
  s += asm_line("  testq %r11, %r11");
  s += asm_line("  jz .Lunbound_" + std::to_string(i));
  s += asm_line("  jmpq *" + std::to_string(8 * i) + "(%r11)");
  return s;
}

std::string x86_unbound(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line(".Lunbound_" + std::to_string(i) + ":");
  s += asm_line("  leaq .Lname_" + std::to_string(i) + "(%rip), %rdi");
  s += asm_line("  jmp libctx_shim_unbound__" + tag);
  return s;
}

std::string arm_context_body(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line("  mrs x16, tpidr_el0");
  s += asm_line("  adrp x17, :gottprel:libctx_slots__" + tag);
  s += asm_line("  ldr x17, [x17, #:gottprel_lo12:libctx_slots__" + tag + "]");
  s += asm_line("  ldr x16, [x16, x17]");
  s += asm_line("  cbz x16, .Lunbound_" + std::to_string(i));
  s += asm_line("  ldr x16, [x16, #" + std::to_string(8 * i) + "]");
  s += asm_line("  br x16");
  return s;
}

std::string arm_service_body(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line("  adrp x16, libctx_page__" + tag);
  s += asm_line("  ldr x16, [x16, #:lo12:libctx_page__" + tag + "]");
  s += asm_line("  cbz x16, .Lunbound_" + std::to_string(i));
  s += asm_line("  ldr x16, [x16, #" + std::to_string(8 * i) + "]");
  s += asm_line("  br x16");
  return s;
}

std::string arm_unbound(const std::string& tag, std::size_t i) {
  std::string s;
  s += asm_line(".Lunbound_" + std::to_string(i) + ":");
  s += asm_line("  adrp x0, .Lname_" + std::to_string(i));
  s += asm_line("  add x0, x0, :lo12:.Lname_" + std::to_string(i));
  s += asm_line("  b libctx_shim_unbound__" + tag);
  return s;
}

void check_symbols(const std::vector<std::string>& symbols) {
  if (symbols.empty()) throw Error(Errc::kInvalidArgument, "a shim needs at least one symbol");
  if (symbols.size() > kMaxSlots) throw Error(Errc::kInvalidArgument, "too many symbols for one shim");
  std::set<std::string> seen;
  for (const auto& s : symbols) {
    if (!is_identifier(s)) throw Error(Errc::kInvalidArgument, "symbol '" + s + "' is not a C identifier");
    if (!seen.insert(s).second) throw Error(Errc::kInvalidArgument, "symbol '" + s + "' listed twice");
  }
}

}  // namespace

std::string shim_tag_for(const std::filesystem::path& library) {
  std::string name = library.filename().string();
  if (name.rfind("lib", 0) == 0) name.erase(0, 3);
  if (const auto so = name.find(".so"); so != std::string::npos) name.erase(so);
  for (char& c : name) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  if (name.empty() || std::isdigit(static_cast<unsigned char>(name[0]))) name = "lib_" + name;
  return name;
}

std::string render_shim(const std::string& tag, const std::vector<std::string>& symbols, ShimKind kind, Arch arch,
                        const std::string& library_label) {
  check_symbols(symbols);
  if (!is_identifier(tag)) throw Error(Errc::kInvalidArgument, "shim tag '" + tag + "' is not a C identifier");
  const bool service = kind == ShimKind::kService;
  const bool x86 = arch == Arch::kX86_64;

  std::string out;
  out += "/* Forwarding shim for " + library_label + " (" + arch_name(arch) + ", " +
         (service ? "service" : "context") + " dispatch).\n   Generated by libctx; do not edit. */\n\n";
  out += "#include <stddef.h>\n#include <stdio.h>\n#include <stdlib.h>\n\n";
  out += x86 ? "#if !defined(__x86_64__)\n#error \"this shim targets x86_64\"\n#endif\n"
             : "#if !defined(__aarch64__)\n#error \"this shim targets aarch64\"\n#endif\n";
  if (x86) {
    out += "#if defined(__CET__)\n#define LIBCTX_LANDING \"  endbr64\\n\"\n#else\n#define LIBCTX_LANDING \"\"\n#endif\n\n";
  } else {
    out += "#if defined(__ARM_FEATURE_BTI_DEFAULT)\n#define LIBCTX_LANDING \"  bti c\\n\"\n#else\n"
           "#define LIBCTX_LANDING \"\"\n#endif\n\n";
  }

  out += "const char* const libctx_shim_symbols__" + tag + "[] = {\n";
  for (const auto& s : symbols) out += "    \"" + s + "\",\n";
  out += "    NULL,\n};\n";
  out += "const int libctx_shim_kind__" + tag + " = " + (service ? "1" : "0") + ";\n\n";

  if (service) {
    out += "__attribute__((visibility(\"hidden\"), used)) void* const* libctx_page__" + tag + ";\n\n";
    out += "void libctx_shim_bind__" + tag + "(void* const* page) { __atomic_store_n(&libctx_page__" + tag +
           ", page, __ATOMIC_RELEASE); }\n\n";
  } else {
    out += "__attribute__((visibility(\"hidden\"), tls_model(\"initial-exec\"), used)) __thread void* const* "
           "libctx_slots__" +
           tag + ";\n\n";
    out += "void libctx_shim_bind__" + tag + "(void* const* slots) { libctx_slots__" + tag + " = slots; }\n\n";
  }
  out += "__attribute__((visibility(\"hidden\"), noreturn, used)) void libctx_shim_unbound__" + tag +
         "(const char* symbol) {\n";
  out += std::string("  fprintf(stderr, \"libctx shim ") + tag + ": %s called " +
         (service ? "before the service page was bound" : "outside any context") + "\\n\", symbol);\n";
  out += "  abort();\n}\n\n";

  out += "__asm__(\n";
  out += asm_line("  .section .rodata");
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    out += asm_line(".Lname_" + std::to_string(i) + ":");
    out += asm_line("  .asciz \\\"" + symbols[i] + "\\\"");
  }
  out += asm_line("  .text");
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const auto& name = symbols[i];
    out += asm_line("  .globl " + name);
    out += asm_line(x86 ? "  .type " + name + ", @function" : "  .type " + name + ", %function");
    out += asm_line(x86 ? "  .p2align 4" : "  .p2align 3");
    out += asm_line(name + ":");
    out += "  LIBCTX_LANDING\n";
    if (x86) {
      out += service ? x86_service_body(tag, i) : x86_context_body(tag, i);
      out += x86_unbound(tag, i);
    } else {
      out += service ? arm_service_body(tag, i) : arm_context_body(tag, i);
      out += arm_unbound(tag, i);
    }
    out += asm_line("  .size " + name + ", .-" + name);
  }
  out += ");\n";
  return out;
}

std::string generate_shim(const ShimRequest& request) {
  check_symbols(request.symbols);
  const ElfExports exports = read_elf_exports(request.library);
  std::string missing;
  for (const auto& s : request.symbols) {
    if (!exports.functions.count(s)) missing += (missing.empty() ? "" : ", ") + s;
  }
  if (!missing.empty()) {
    throw Error(Errc::kUnresolvedSymbol, request.library.string() + " does not export: " + missing);
  }
  const Arch arch = request.arch.value_or(exports.arch);
  if (arch != exports.arch) {
    throw Error(Errc::kUnsupportedArch, request.library.string() + " is " + arch_name(exports.arch) +
                                            ", not " + arch_name(arch));
  }
  const std::string tag = request.tag.empty() ? shim_tag_for(request.library) : request.tag;
  return render_shim(tag, request.symbols, request.kind, arch, request.library.filename().string());
}

}  // namespace libctx
