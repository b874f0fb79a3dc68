#include "libctx/control.hpp"

#include <poll.h>
#include <unistd.h>

#include <cerrno>

#include "libctx/log.hpp"
#include "libctx/monitor.hpp"

namespace libctx {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void finish() const {
    if (pos_ != in_.size()) throw Error(Errc::kProtocol, "trailing bytes in control frame");
  }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(Errc::kProtocol, "truncated control frame");
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void read_exact(int fd, std::uint8_t* p, std::size_t n) {
  std::size_t done = 0;
  while (done < n) {
    const ssize_t r = ::read(fd, p + done, n - done);
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) throw_errno(Errc::kProtocol, "control channel read", errno);
    if (r == 0) throw Error(Errc::kProtocol, "control channel closed");
    done += static_cast<std::size_t>(r);
  }
}

std::uint32_t le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

std::vector<std::uint8_t> encode_message(const Message& m) {
  Writer payload;
  switch (m.type) {
    case MsgType::kCreateCtx:
    case MsgType::kSetCpus:
      payload.u32(m.ctx);
      payload.str(m.text);
      break;
    case MsgType::kSetEnv:
      payload.u32(m.ctx);
      payload.str(m.text);
      payload.str(m.value);
      break;
    case MsgType::kUnsetEnv:
      payload.u32(m.ctx);
      payload.str(m.text);
      break;
    case MsgType::kBind:
      payload.u32(m.tid);
      payload.u32(m.ctx);
      payload.u8(m.flags);
      break;
    case MsgType::kUnbind:
      payload.u32(m.tid);
      payload.u8(m.flags);
      break;
    case MsgType::kShutdown:
      break;
  }
  Writer frame;
  frame.u8(kProtocolVersion);
  frame.u8(static_cast<std::uint8_t>(m.type));
  frame.u32(static_cast<std::uint32_t>(payload.bytes().size()));
  auto& out = frame.bytes();
  out.insert(out.end(), payload.bytes().begin(), payload.bytes().end());
  return out;
}

Message decode_message(std::span<const std::uint8_t> frame) {
  Reader r(frame);
  const std::uint8_t version = r.u8();
  if (version != kProtocolVersion) {
    throw Error(Errc::kProtocol, "unsupported control protocol version " + std::to_string(version));
  }
  Message m;
  const std::uint8_t type = r.u8();
  const std::uint32_t len = r.u32();
  if (len != frame.size() - kHeaderSize) throw Error(Errc::kProtocol, "control frame length mismatch");
  switch (type) {
    case static_cast<std::uint8_t>(MsgType::kCreateCtx):
    case static_cast<std::uint8_t>(MsgType::kSetCpus):
      m.ctx = r.u32();
      m.text = r.str();
      break;
    case static_cast<std::uint8_t>(MsgType::kSetEnv):
      m.ctx = r.u32();
      m.text = r.str();
      m.value = r.str();
      break;
    case static_cast<std::uint8_t>(MsgType::kUnsetEnv):
      m.ctx = r.u32();
      m.text = r.str();
      break;
    case static_cast<std::uint8_t>(MsgType::kBind):
      m.tid = r.u32();
      m.ctx = r.u32();
      m.flags = r.u8();
      break;
    case static_cast<std::uint8_t>(MsgType::kUnbind):
      m.tid = r.u32();
      m.flags = r.u8();
      break;
    case static_cast<std::uint8_t>(MsgType::kShutdown):
      break;
    default:
      throw Error(Errc::kProtocol, "unknown control message type " + std::to_string(type));
  }
  m.type = static_cast<MsgType>(type);
  r.finish();
  return m;
}

std::vector<std::uint8_t> encode_ack(const Ack& a) {
  Writer w;
  w.u8(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(a.status));
  w.u32(static_cast<std::uint32_t>(a.code));
  return w.bytes();
}

Ack decode_ack(std::span<const std::uint8_t> frame) {
  Reader r(frame);
  if (r.u8() != kProtocolVersion) throw Error(Errc::kProtocol, "unsupported ack version");
  const std::uint8_t status = r.u8();
  if (status > 1) throw Error(Errc::kProtocol, "bad ack status " + std::to_string(status));
  Ack a{static_cast<AckStatus>(status), static_cast<Errc>(r.u32())};
  r.finish();
  return a;
}

void write_frame(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t w = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (w < 0 && errno == EINTR) continue;
    if (w < 0) throw_errno(Errc::kProtocol, "control channel write", errno);
    done += static_cast<std::size_t>(w);
  }
}

std::optional<Message> read_message(int fd) {
  std::uint8_t header[kHeaderSize];
  ssize_t r;
  do {
    r = ::read(fd, header, 1);
  } while (r < 0 && errno == EINTR);
  if (r == 0) return std::nullopt;
  if (r < 0) throw_errno(Errc::kProtocol, "control channel read", errno);
  read_exact(fd, header + 1, kHeaderSize - 1);
  const std::uint32_t len = le32(header + 2);
  if (len > kMaxPayload) throw Error(Errc::kProtocol, "control payload too large");
  std::vector<std::uint8_t> frame(header, header + kHeaderSize);
  frame.resize(kHeaderSize + len);
  read_exact(fd, frame.data() + kHeaderSize, len);
  return decode_message(frame);
}

Ack read_ack(int fd) {
  std::uint8_t buf[kAckSize];
  read_exact(fd, buf, sizeof(buf));
  return decode_ack(buf);
}

Ack apply_message(Monitor& monitor, const Message& m) {
  try {
    const ContextId ctx{m.ctx};
    const auto tid = static_cast<pid_t>(m.tid);
    switch (m.type) {
      case MsgType::kCreateCtx:
        monitor.create_context_with_id(ctx, parse_cpu_list(m.text));
        break;
      case MsgType::kSetCpus:
        monitor.set_allowed_cpus(ctx, parse_cpu_list(m.text));
        break;
      case MsgType::kSetEnv:
        monitor.setenv(ctx, m.text, m.value);
        break;
      case MsgType::kUnsetEnv:
        monitor.unsetenv(ctx, m.text);
        break;
      case MsgType::kBind:
        monitor.bind(tid, ctx, (m.flags & kBindPush) != 0, (m.flags & kBindPin) != 0);
        break;
      case MsgType::kUnbind:
        monitor.unbind(tid, (m.flags & kBindPush) != 0, (m.flags & kBindPin) != 0);
        break;
      case MsgType::kShutdown:
        monitor.drop_all_contexts();
        break;
    }
    return {};
  } catch (const Error& e) {
    LIBCTX_LOG_INFO("control request {} rejected: {}", static_cast<int>(m.type), e.what());
    return {AckStatus::kErr, e.code()};
  } catch (const std::exception& e) {
    LIBCTX_LOG_WARN("control request {} failed: {}", static_cast<int>(m.type), e.what());
    return {AckStatus::kErr, Errc::kInvalidArgument};
  }
}

void serve_control(Monitor& monitor, int in_fd, int out_fd, const std::atomic<bool>& stop) {
  while (!stop.load()) {
    pollfd pfd{in_fd, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 100);
    if (ready < 0 && errno != EINTR) throw_errno(Errc::kProtocol, "control channel poll", errno);
    if (ready <= 0) continue;
    std::optional<Message> m;
    try {
      m = read_message(in_fd);
    } catch (const Error& e) {
      LIBCTX_LOG_WARN("control channel: {}", e.what());
      write_frame(out_fd, encode_ack({AckStatus::kErr, e.code()}));
      return;
    }
    if (!m) return;
    write_frame(out_fd, encode_ack(apply_message(monitor, *m)));
  }
}

}  // namespace libctx
