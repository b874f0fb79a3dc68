#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "libctx/error.hpp"

namespace libctx {

class Monitor;

/// Private channel from an application using the in-process runtime to its
/// monitor. Frame: [u8 version][u8 type][u32 payload length][payload], all
/// integers little-endian; strings are [u32 length][bytes]. Every frame is
/// answered with [u8 version][u8 status][u32 error code].
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxPayload = 1u << 20;

enum class MsgType : std::uint8_t {
  kCreateCtx = 1,  // u32 ctx, str cpu-list
  kSetCpus = 2,    // u32 ctx, str cpu-list
  kSetEnv = 3,     // u32 ctx, str name, str value
  kUnsetEnv = 4,   // u32 ctx, str name
  kBind = 5,       // u32 tid, u32 ctx, u8 flags
  kUnbind = 6,     // u32 tid, u8 flags
  kShutdown = 7,   // empty
};

enum BindFlags : std::uint8_t {
  kBindPush = 1,  // BIND: save the previous binding / UNBIND: restore it
  kBindPin = 2,   // apply (or restore) kernel affinity
};

struct Message {
  MsgType type = MsgType::kShutdown;
  std::uint32_t ctx = 0;
  std::uint32_t tid = 0;
  std::uint8_t flags = 0;
  std::string text;   // cpu list or variable name
  std::string value;  // variable value
};

enum class AckStatus : std::uint8_t { kOk = 0, kErr = 1 };

struct Ack {
  AckStatus status = AckStatus::kOk;
  Errc code = Errc::kOk;
};

std::vector<std::uint8_t> encode_message(const Message& m);
/// Throws Error(kProtocol) on a malformed or truncated frame.
Message decode_message(std::span<const std::uint8_t> frame);

std::vector<std::uint8_t> encode_ack(const Ack& a);
Ack decode_ack(std::span<const std::uint8_t> frame);
inline constexpr std::size_t kAckSize = 6;
inline constexpr std::size_t kHeaderSize = 6;

/// Blocking frame I/O on pipes. read_message returns nullopt on a clean
/// end-of-file before a frame starts.
void write_frame(int fd, std::span<const std::uint8_t> bytes);
std::optional<Message> read_message(int fd);
Ack read_ack(int fd);

/// Applies one request to the monitor's configuration.
Ack apply_message(Monitor& monitor, const Message& m);

/// Serves requests from `in_fd` until end-of-file or until `stop` is set,
/// acknowledging each on `out_fd`. Runs on a thread that never issues
/// ptrace requests.
void serve_control(Monitor& monitor, int in_fd, int out_fd, const std::atomic<bool>& stop);

}  // namespace libctx
