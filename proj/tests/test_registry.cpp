#include <thread>

#include <gtest/gtest.h>

#include "libctx/error.hpp"
#include "libctx/registry.hpp"
#include "libctx/thread_context.hpp"

namespace libctx {
namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::kOk;
}

TEST(Registry, CreatesContextsWithDistinctIds) {
  Registry reg(CpuSet::range(0, 7));
  const auto a = reg.create_context(CpuSet::range(0, 3));
  const auto b = reg.create_context(CpuSet::range(4, 7));
  EXPECT_NE(a, b);
  EXPECT_EQ(reg.require(a)->allowed, CpuSet::range(0, 3));
  EXPECT_EQ(reg.contexts().size(), 2u);
}

TEST(Registry, RejectsEmptyAndOfflineSets) {
  Registry reg(CpuSet::range(0, 3));
  EXPECT_EQ(code_of([&] { reg.create_context(CpuSet{}); }), Errc::kEmptyCpuSet);
  EXPECT_EQ(code_of([&] { reg.create_context(CpuSet::of({5})); }), Errc::kNotOnline);
  const auto a = reg.create_context(CpuSet::of({0}));
  EXPECT_EQ(code_of([&] { reg.set_allowed_cpus(a, CpuSet{}); }), Errc::kEmptyCpuSet);
  EXPECT_EQ(code_of([&] { reg.require(ContextId{99}); }), Errc::kUnknownContext);
}

TEST(Registry, CachedReplyTracksAllowedSet) {
  Registry reg(CpuSet::range(0, 15));
  const auto a = reg.create_context(CpuSet::range(0, 11));
  auto before = reg.require(a);
  EXPECT_EQ(decode_kernel_mask(before->cached_reply), CpuSet::range(0, 11));
  EXPECT_EQ(before->cached_reply.size(), kCachedMaskBytes);
  reg.set_allowed_cpus(a, CpuSet::range(0, 5));
  auto after = reg.require(a);
  EXPECT_GT(after->version, before->version);
  EXPECT_EQ(decode_kernel_mask(after->cached_reply), CpuSet::range(0, 5));
  // The old snapshot is unchanged.
  EXPECT_EQ(decode_kernel_mask(before->cached_reply), CpuSet::range(0, 11));
}

TEST(Registry, EnvironmentOverridesAndUnsets) {
  Registry reg(CpuSet::of({0}));
  const auto a = reg.create_context(CpuSet::of({0}));
  reg.setenv(a, "OMP_NUM_THREADS", "4");
  reg.unsetenv(a, "HOME");
  const auto cfg = reg.require(a);
  EXPECT_EQ(cfg->env.at("OMP_NUM_THREADS"), std::optional<std::string>("4"));
  EXPECT_EQ(cfg->env.at("HOME"), std::nullopt);
  EXPECT_EQ(code_of([&] { reg.setenv(a, "A=B", "x"); }), Errc::kInvalidArgument);
  EXPECT_EQ(code_of([&] { reg.setenv(a, "", "x"); }), Errc::kInvalidArgument);
}

TEST(Registry, BindingRules) {
  Registry reg(CpuSet::range(0, 1));
  const auto a = reg.create_context(CpuSet::of({0}));
  const auto b = reg.create_context(CpuSet::of({1}));
  reg.bind_thread(100, a);
  reg.bind_thread(100, a);
  EXPECT_EQ(code_of([&] { reg.bind_thread(100, b); }), Errc::kAlreadyBound);
  EXPECT_EQ(reg.lookup(100), a);
  EXPECT_EQ(reg.inherit(100, 101), a);
  EXPECT_EQ(reg.lookup(101), a);
  EXPECT_EQ(reg.inherit(555, 556), std::nullopt);
  EXPECT_EQ(reg.bound_threads(a), (std::vector<pid_t>{100, 101}));
  reg.unbind(100);
  EXPECT_EQ(reg.lookup(100), std::nullopt);
}

TEST(Registry, EnterExitRestoresPreviousBinding) {
  Registry reg(CpuSet::range(0, 1));
  const auto a = reg.create_context(CpuSet::of({0}));
  const auto b = reg.create_context(CpuSet::of({1}));
  reg.enter(7, a);
  reg.enter(7, b);
  EXPECT_EQ(reg.lookup(7), b);
  reg.exit(7);
  EXPECT_EQ(reg.lookup(7), a);
  reg.exit(7);
  EXPECT_EQ(reg.lookup(7), std::nullopt);
  EXPECT_EQ(code_of([&] { reg.exit(7); }), Errc::kNotBound);
}

TEST(Registry, NamespaceCapCountsTheBaseNamespace) {
  Registry reg(CpuSet::of({0}));
  std::vector<ContextId> ids;
  for (std::size_t i = 0; i < kMaxContextNamespaces + 1; ++i) ids.push_back(reg.create_context(CpuSet::of({0})));
  for (std::size_t i = 0; i < kMaxContextNamespaces; ++i) reg.mark_namespace(ids[i]);
  EXPECT_EQ(reg.namespace_count(), kMaxContextNamespaces);
  try {
    reg.mark_namespace(ids.back());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kNamespaceCap);
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
  EXPECT_EQ(code_of([&] { reg.create_context(CpuSet::of({0})); }), Errc::kNamespaceCap);
}

TEST(Registry, ClearRetiresIds) {
  Registry reg(CpuSet::of({0}));
  const auto a = reg.create_context(CpuSet::of({0}));
  reg.bind_thread(1, a);
  reg.clear();
  EXPECT_TRUE(reg.contexts().empty());
  EXPECT_EQ(reg.lookup(1), std::nullopt);
  EXPECT_GT(reg.create_context(CpuSet::of({0})).value, a.value);
}

TEST(Registry, ConcurrentReadersSeeConsistentSnapshots) {
  Registry reg(CpuSet::range(0, 63));
  const auto a = reg.create_context(CpuSet::range(0, 63));
  std::atomic<bool> stop{false};
  std::thread writer([&] {
    for (unsigned i = 0; i < 2000; ++i) reg.set_allowed_cpus(a, CpuSet::range(0, i % 64));
    stop = true;
  });
  while (!stop) {
    const auto cfg = reg.require(a);
    ASSERT_EQ(decode_kernel_mask(cfg->cached_reply), cfg->allowed);
  }
  writer.join();
}

TEST(ThreadContext, NestsAndUnwinds) {
  EXPECT_EQ(thread_context::current(), std::nullopt);
  thread_context::push(ContextId{3});
  thread_context::push(ContextId{4});
  EXPECT_EQ(thread_context::current(), ContextId{4});
  EXPECT_EQ(thread_context::depth(), 2u);
  // Other threads are unaffected.
  std::thread([] { EXPECT_EQ(thread_context::current(), std::nullopt); }).join();
  thread_context::pop();
  EXPECT_EQ(thread_context::current(), ContextId{3});
  thread_context::pop();
  EXPECT_EQ(code_of([] { thread_context::pop(); }), Errc::kNotBound);
}

TEST(ThreadContext, DepthIsBounded) {
  for (std::size_t i = 0; i < kMaxNesting; ++i) thread_context::push(ContextId{1});
  EXPECT_EQ(code_of([] { thread_context::push(ContextId{1}); }), Errc::kNestingTooDeep);
  for (std::size_t i = 0; i < kMaxNesting; ++i) thread_context::pop();
  EXPECT_EQ(thread_context::depth(), 0u);
}

}  // namespace
}  // namespace libctx
