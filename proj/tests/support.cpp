#include "support.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace libctx::test {

namespace {

int make_capture_file() {
  char path[] = "/tmp/libctx-test-out-XXXXXX";
  const int fd = ::mkstemp(path);
  if (fd < 0) throw std::runtime_error("mkstemp failed");
  ::unlink(path);
  return fd;
}

std::string slurp(int fd) {
  std::string out;
  ::lseek(fd, 0, SEEK_SET);
  char buf[4096];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  ::close(fd);
  return out;
}

}  // namespace

std::string probe_path() { return LIBCTX_PROBE; }

RunResult run_supervised(Monitor& mon, ContextId ctx, const std::vector<std::string>& argv) {
  const int fd = make_capture_file();
  SpawnOptions opts;
  opts.stdout_fd = fd;
  RunResult r;
  try {
    const auto h = mon.spawn(argv, ctx, opts);
    mon.run();
    r.exit_code = exit_code_of(mon.root_status(h.root).value_or(0));
  } catch (...) {
    ::close(fd);
    throw;
  }
  r.out = slurp(fd);
  return r;
}

RunResult run_plain(const std::vector<std::string>& argv) {
  const int fd = make_capture_file();
  const pid_t pid = ::fork();
  if (pid == 0) {
    ::dup2(fd, STDOUT_FILENO);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  return {slurp(fd), exit_code_of(status)};
}

std::string value_of(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.size() > key.size() && line.compare(0, key.size(), key) == 0 && line[key.size()] == ' ') {
      return line.substr(key.size() + 1);
    }
  }
  return {};
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto sp = line.find(' ');
    if (sp == std::string::npos) {
      out[line] = "";
    } else {
      out[line.substr(0, sp)] = line.substr(sp + 1);
    }
  }
  return out;
}

HostTopology synthetic_topology(unsigned n) { return HostTopology::synthetic(n); }

}  // namespace libctx::test
