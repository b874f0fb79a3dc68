#include "libctx/cpu_set.hpp"

#include <algorithm>
#include <charconv>

#include "libctx/error.hpp"

namespace libctx {

namespace {

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

unsigned parse_id(std::string_view digits, std::string_view token) {
  digits = trim(digits);
  unsigned long value = 0;
  const auto* first = digits.data();
  const auto* last = digits.data() + digits.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (digits.empty() || ec != std::errc() || ptr != last) {
    throw Error(Errc::kParse, "malformed cpu list token '" + std::string(token) + "'");
  }
  if (value >= kMaxCpus) {
    throw Error(Errc::kParse, "cpu id out of range in token '" + std::string(token) + "' (max " +
                                  std::to_string(kMaxCpus - 1) + ")");
  }
  return static_cast<unsigned>(value);
}

}  // namespace

CpuSet CpuSet::range(unsigned first, unsigned last) {
  if (last < first || last >= kMaxCpus) {
    throw Error(Errc::kInvalidArgument,
                "invalid cpu range " + std::to_string(first) + "-" + std::to_string(last));
  }
  CpuSet s;
  for (unsigned i = first; i <= last; ++i) s.bits_.set(i);
  return s;
}

CpuSet CpuSet::of(std::initializer_list<unsigned> ids) {
  CpuSet s;
  for (unsigned id : ids) s.set(id);
  return s;
}

CpuSet CpuSet::lowest(const CpuSet& from, std::size_t n) {
  CpuSet s;
  for (unsigned i = 0; i < kMaxCpus && s.count() < n; ++i) {
    if (from.test(i)) s.bits_.set(i);
  }
  return s;
}

void CpuSet::set(unsigned cpu) {
  if (cpu >= kMaxCpus) {
    throw Error(Errc::kInvalidArgument, "cpu id " + std::to_string(cpu) + " out of range");
  }
  bits_.set(cpu);
}

void CpuSet::reset(unsigned cpu) {
  if (cpu < kMaxCpus) bits_.reset(cpu);
}

std::optional<unsigned> CpuSet::highest() const noexcept {
  for (unsigned i = kMaxCpus; i-- > 0;) {
    if (bits_.test(i)) return i;
  }
  return std::nullopt;
}

std::vector<unsigned> CpuSet::ids() const {
  std::vector<unsigned> out;
  out.reserve(count());
  for (unsigned i = 0; i < kMaxCpus; ++i) {
    if (bits_.test(i)) out.push_back(i);
  }
  return out;
}

CpuSet parse_cpu_list(std::string_view text) {
  CpuSet out;
  if (trim(text).empty()) return out;

  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string_view raw =
        text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    const std::string_view token = trim(raw);
    if (token.empty()) {
      throw Error(Errc::kParse, "empty token in cpu list '" + std::string(text) + "'");
    }

    const std::size_t dash = token.find('-');
    if (dash == std::string_view::npos) {
      out.set(parse_id(token, token));
    } else {
      const unsigned lo = parse_id(token.substr(0, dash), token);
      const unsigned hi = parse_id(token.substr(dash + 1), token);
      if (hi < lo) {
        throw Error(Errc::kParse, "reversed range in token '" + std::string(token) + "'");
      }
      for (unsigned i = lo; i <= hi; ++i) out.set(i);
    }

    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::string format_cpu_list(const CpuSet& s) {
  std::string out;
  const auto ids = s.ids();
  for (std::size_t i = 0; i < ids.size();) {
    std::size_t j = i;
    while (j + 1 < ids.size() && ids[j + 1] == ids[j] + 1) ++j;
    if (!out.empty()) out.push_back(',');
    out += std::to_string(ids[i]);
    if (j > i) {
      out.push_back('-');
      out += std::to_string(ids[j]);
    }
    i = j + 1;
  }
  return out;
}

std::size_t kernel_mask_min_bytes(const CpuSet& s) noexcept {
  constexpr std::size_t word = sizeof(unsigned long);
  const auto hi = s.highest();
  if (!hi) return word;
  const std::size_t bytes = (*hi + 8) / 8;
  return (bytes + word - 1) / word * word;
}

std::vector<std::uint8_t> encode_kernel_mask(const CpuSet& s, std::size_t buffer_len) {
  const std::size_t need = kernel_mask_min_bytes(s);
  if (buffer_len < need) {
    throw Error(Errc::kEncoding, "affinity buffer of " + std::to_string(buffer_len) +
                                     " bytes cannot hold cpu set " + format_cpu_list(s) + " (needs " +
                                     std::to_string(need) + ")");
  }
  std::vector<std::uint8_t> out(buffer_len, 0);
  for (unsigned cpu : s.ids()) {
    out[cpu / 8] |= static_cast<std::uint8_t>(1u << (cpu % 8));
  }
  return out;
}

CpuSet decode_kernel_mask(std::span<const std::uint8_t> bytes) {
  CpuSet out;
  const std::size_t limit = std::min<std::size_t>(bytes.size(), kMaxCpus / 8);
  for (std::size_t i = 0; i < limit; ++i) {
    for (unsigned b = 0; b < 8; ++b) {
      if (bytes[i] & (1u << b)) out.set(static_cast<unsigned>(i * 8 + b));
    }
  }
  return out;
}

}  // namespace libctx
