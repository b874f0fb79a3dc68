#pragma once

#include <bitset>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace libctx {

/// Capacity of every CpuSet, matching the usual kernel cpumask sizing.
inline constexpr unsigned kMaxCpus = 1024;

/// Fixed-capacity set of logical CPU ids. Value type; cheap to copy.
class CpuSet {
 public:
  CpuSet() = default;

  /// Inclusive range [first, last]. Throws Error(kInvalidArgument) if
  /// last < first or last >= kMaxCpus.
  static CpuSet range(unsigned first, unsigned last);
  static CpuSet of(std::initializer_list<unsigned> ids);
  /// Lowest `n` members of `from`, in ascending order.
  static CpuSet lowest(const CpuSet& from, std::size_t n);

  void set(unsigned cpu);
  void reset(unsigned cpu);
  bool test(unsigned cpu) const noexcept { return cpu < kMaxCpus && bits_.test(cpu); }

  std::size_t count() const noexcept { return bits_.count(); }
  bool empty() const noexcept { return bits_.none(); }
  std::optional<unsigned> highest() const noexcept;
  std::vector<unsigned> ids() const;

  bool is_subset_of(const CpuSet& other) const noexcept { return (bits_ & ~other.bits_).none(); }

  CpuSet operator&(const CpuSet& o) const noexcept { return CpuSet(bits_ & o.bits_); }
  CpuSet operator|(const CpuSet& o) const noexcept { return CpuSet(bits_ | o.bits_); }
  CpuSet operator-(const CpuSet& o) const noexcept { return CpuSet(bits_ & ~o.bits_); }
  bool operator==(const CpuSet& o) const noexcept { return bits_ == o.bits_; }

 private:
  explicit CpuSet(const std::bitset<kMaxCpus>& b) : bits_(b) {}

  std::bitset<kMaxCpus> bits_;
};

/// Parses the kernel list syntax: comma-separated "N" and "A-B" tokens,
/// whitespace tolerated around tokens. Blank input yields the empty set.
/// Throws Error(kParse) naming the offending token.
CpuSet parse_cpu_list(std::string_view text);

/// Canonical ascending list with maximal ranges ("0-2,5"); empty set → "".
std::string format_cpu_list(const CpuSet& s);

/// Smallest buffer (a whole number of machine words) that can carry `s`.
std::size_t kernel_mask_min_bytes(const CpuSet& s) noexcept;

/// Bit-per-CPU little-endian layout used by sched_{get,set}affinity,
/// zero-padded to `buffer_len`. Throws Error(kEncoding) if the buffer is
/// smaller than kernel_mask_min_bytes(s).
std::vector<std::uint8_t> encode_kernel_mask(const CpuSet& s, std::size_t buffer_len);

/// Inverse of encode_kernel_mask; bits at or beyond kMaxCpus are ignored.
CpuSet decode_kernel_mask(std::span<const std::uint8_t> bytes);

}  // namespace libctx
