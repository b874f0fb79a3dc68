#include <sched.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cstring>
#include <random>
#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "libctx/cpu_set.hpp"
#include "libctx/error.hpp"

namespace libctx {
namespace {

/// Independent decoder: bit i of byte j is CPU 8j+i.
std::set<unsigned> oracle_decode(const std::vector<std::uint8_t>& bytes) {
  std::set<unsigned> out;
  for (std::size_t j = 0; j < bytes.size(); ++j) {
    for (unsigned i = 0; i < 8; ++i) {
      if (bytes[j] & (1u << i)) out.insert(static_cast<unsigned>(8 * j + i));
    }
  }
  return out;
}

std::set<unsigned> members(const CpuSet& s, unsigned upto) {
  std::set<unsigned> out;
  for (unsigned i = 0; i < upto; ++i) {
    if (s.test(i)) out.insert(i);
  }
  return out;
}

CpuSet random_set(std::mt19937& rng, unsigned max_id, double density) {
  std::bernoulli_distribution pick(density);
  CpuSet s;
  for (unsigned i = 0; i < max_id; ++i) {
    if (pick(rng)) s.set(i);
  }
  return s;
}

TEST(CpuList, ParsesRange) {
  const CpuSet s = parse_cpu_list("0-11");
  EXPECT_EQ(s.count(), 12u);
  EXPECT_EQ(members(s, 64), (std::set<unsigned>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}));
}

TEST(CpuList, ParsesSingleId) { EXPECT_EQ(members(parse_cpu_list("0"), 64), std::set<unsigned>{0}); }

TEST(CpuList, MixedTokensMatchBruteForceMembership) {
  const CpuSet s = parse_cpu_list("0-2,5,7-8");
  // Expand each token by hand and scan 0..15.
  const std::set<unsigned> expected{0, 1, 2, 5, 7, 8};
  for (unsigned i = 0; i < 16; ++i) EXPECT_EQ(s.test(i), expected.count(i) == 1) << i;
  EXPECT_EQ(s.count(), expected.size());
}

TEST(CpuList, ToleratesWhitespace) { EXPECT_EQ(parse_cpu_list(" 1 - 3 , 7 \n"), parse_cpu_list("1-3,7")); }

TEST(CpuList, RejectsMalformedTokensByName) {
  for (const char* bad : {"5-2", "a", "1,,2", "3-", "-3", "1024", "0-1024", "1.5"}) {
    try {
      parse_cpu_list(bad);
      ADD_FAILURE() << "accepted " << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::kParse) << bad;
      EXPECT_NE(std::string(e.what()).find('\''), std::string::npos) << e.what();
    }
  }
}

TEST(CpuList, ReversedRangeNamesToken) {
  try {
    parse_cpu_list("1,5-2");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("5-2"), std::string::npos);
  }
}

TEST(CpuList, FormatsCanonicalRanges) {
  EXPECT_EQ(format_cpu_list(CpuSet::range(12, 23)), "12-23");
  EXPECT_EQ(format_cpu_list(CpuSet{}), "");
  EXPECT_EQ(format_cpu_list(CpuSet::of({0, 1, 2, 5})), "0-2,5");
  EXPECT_EQ(format_cpu_list(CpuSet::of({3})), "3");
  EXPECT_EQ(format_cpu_list(CpuSet::of({1, 3})), "1,3");
  EXPECT_EQ(format_cpu_list(CpuSet::of({1023})), "1023");
}

TEST(CpuList, RoundTripsRandomSets) {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 500; ++trial) {
    const CpuSet s = random_set(rng, kMaxCpus, trial % 2 ? 0.5 : 0.02);
    const std::string text = format_cpu_list(s);
    EXPECT_EQ(parse_cpu_list(text), s) << text;
    // Ascending, non-overlapping ranges.
    long last = -1;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto comma = text.find(',', pos);
      const std::string tok = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      const auto dash = tok.find('-');
      const long lo = std::stol(tok.substr(0, dash));
      const long hi = dash == std::string::npos ? lo : std::stol(tok.substr(dash + 1));
      if (last >= 0) EXPECT_GT(lo, last + 1) << text;
      EXPECT_LE(lo, hi);
      last = hi;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
}

TEST(KernelMask, EncodesLowBits) {
  EXPECT_EQ(encode_kernel_mask(CpuSet::of({0, 1}), 8), (std::vector<std::uint8_t>{0x03, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(KernelMask, EncodesTwelveCpusByPopcountAndPosition) {
  const auto bytes = encode_kernel_mask(CpuSet::range(0, 11), 16);
  ASSERT_EQ(bytes.size(), 16u);
  EXPECT_EQ(bytes[0], 0xFF);
  EXPECT_EQ(bytes[1], 0x0F);
  int pop = 0;
  for (std::size_t i = 2; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0) << i;
  for (auto b : bytes) pop += __builtin_popcount(b);
  EXPECT_EQ(pop, 12);
}

TEST(KernelMask, MatchesKernelLayoutForCpuEight) {
  const auto bytes = encode_kernel_mask(CpuSet::of({8}), 8);
  EXPECT_EQ(bytes, (std::vector<std::uint8_t>{0x00, 0x01, 0, 0, 0, 0, 0, 0}));
  // Cross-check the bit layout against the C library's cpu_set_t, which is
  // what the kernel reads.
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(8, &set);
  EXPECT_EQ(std::memcmp(&set, bytes.data(), bytes.size()), 0);
}

TEST(KernelMask, MatchesKernelReadBackOnThisHost) {
  cpu_set_t current;
  ASSERT_EQ(::sched_getaffinity(0, sizeof(current), &current), 0);
  unsigned first = 0;
  while (!CPU_ISSET(first, &current)) ++first;
  // Pin a helper thread to one real CPU and compare the kernel's reply.
  std::vector<std::uint8_t> kernel(128);
  std::thread([&] {
    const auto req = encode_kernel_mask(CpuSet::of({first}), 128);
    ASSERT_EQ(::syscall(SYS_sched_setaffinity, 0, req.size(), req.data()), 0);
    const long n = ::syscall(SYS_sched_getaffinity, 0, kernel.size(), kernel.data());
    ASSERT_GT(n, 0);
    kernel.resize(static_cast<std::size_t>(n));
  }).join();
  EXPECT_EQ(kernel, encode_kernel_mask(CpuSet::of({first}), kernel.size()));
}

TEST(KernelMask, DecodeInvertsEncodeAgainstOracle) {
  std::mt19937 rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const CpuSet s = random_set(rng, 200, 0.3);
    const std::size_t len = std::max<std::size_t>(kernel_mask_min_bytes(s), 32);
    const auto bytes = encode_kernel_mask(s, len);
    EXPECT_EQ(bytes.size(), len);
    EXPECT_EQ(oracle_decode(bytes), members(s, kMaxCpus));
    EXPECT_EQ(decode_kernel_mask(bytes), s);
  }
}

TEST(KernelMask, MinimumSizeIsWholeWords) {
  EXPECT_EQ(kernel_mask_min_bytes(CpuSet{}), sizeof(long));
  EXPECT_EQ(kernel_mask_min_bytes(CpuSet::of({0})), sizeof(long));
  EXPECT_EQ(kernel_mask_min_bytes(CpuSet::of({64})), 2 * sizeof(long));
  EXPECT_EQ(kernel_mask_min_bytes(CpuSet::of({1023})), 128u);
}

TEST(KernelMask, RejectsSmallBuffer) {
  try {
    encode_kernel_mask(CpuSet::of({100}), 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEncoding);
  }
}

TEST(CpuSetOps, SetAlgebra) {
  const CpuSet a = parse_cpu_list("0-5");
  const CpuSet b = parse_cpu_list("4-9");
  EXPECT_EQ(a & b, parse_cpu_list("4-5"));
  EXPECT_EQ(a | b, parse_cpu_list("0-9"));
  EXPECT_EQ(a - b, parse_cpu_list("0-3"));
  EXPECT_TRUE((a & b).is_subset_of(a));
  EXPECT_FALSE(a.is_subset_of(b));
  EXPECT_EQ(CpuSet::lowest(parse_cpu_list("2,4,6,8"), 2), parse_cpu_list("2,4"));
  EXPECT_EQ(a.highest(), 5u);
  EXPECT_FALSE(CpuSet{}.highest().has_value());
}

}  // namespace
}  // namespace libctx
