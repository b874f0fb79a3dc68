#include "libctx/topology.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <fstream>
#include <sstream>
#include <vector>

#include "libctx/error.hpp"

namespace libctx {

namespace {

// "processor\t: 12" → 12; anything else → nullopt.
std::optional<unsigned> processor_id(std::string_view line) {
  constexpr std::string_view kKey = "processor";
  if (line.substr(0, kKey.size()) != kKey) return std::nullopt;
  line.remove_prefix(kKey.size());
  while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
  if (line.empty() || line.front() != ':') return std::nullopt;
  line.remove_prefix(1);
  while (!line.empty() && line.front() == ' ') line.remove_prefix(1);
  unsigned id = 0;
  auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), id);
  if (ec != std::errc() || ptr == line.data()) return std::nullopt;
  return id;
}

std::vector<std::string_view> split_lines_keep_newline(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::size_t end = nl == std::string_view::npos ? text.size() : nl + 1;
    lines.push_back(text.substr(pos, end - pos));
    pos = end;
  }
  return lines;
}

}  // namespace

std::string HostTopology::cpuinfo_text() const {
  std::string out = cpuinfo_preamble;
  for (const auto& [id, stanza] : stanzas) out += stanza;
  out += cpuinfo_trailer;
  return out;
}

HostTopology HostTopology::from_text(std::string_view online_text, std::string_view cpuinfo_text) {
  HostTopology topo;
  topo.online = parse_cpu_list(online_text);

  // A stanza runs from its "processor" line through the blank line that
  // ends it. Text after the last stanza's blank line that does not start a
  // new stanza is the trailer.
  std::optional<unsigned> current;
  std::string* sink = &topo.cpuinfo_preamble;
  bool after_blank = false;
  for (std::string_view line : split_lines_keep_newline(cpuinfo_text)) {
    if (auto id = processor_id(line)) {
      if (topo.stanzas.count(*id) != 0) {
        throw Error(Errc::kParse, "duplicate processor " + std::to_string(*id) + " in cpuinfo");
      }
      current = id;
      sink = &topo.stanzas[*id];
      after_blank = false;
    } else if (current && after_blank) {
      sink = &topo.cpuinfo_trailer;
      current.reset();
    }
    *sink += line;
    if (current) after_blank = (line == "\n");
  }
  return topo;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_errno(Errc::kIo, "cannot read " + path.string(), errno ? errno : ENOENT);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

HostTopology HostTopology::synthetic(unsigned n) {
  if (n == 0 || n > kMaxCpus) {
    throw Error(Errc::kInvalidArgument, "synthetic topology needs 1.." + std::to_string(kMaxCpus) + " cpus");
  }
  const unsigned cores = std::max(1u, n / 2);
  std::string cpuinfo;
  for (unsigned i = 0; i < n; ++i) {
    cpuinfo += "processor\t: " + std::to_string(i) + "\nvendor_id\t: SyntheticCPU\nmodel name\t: Test Core " +
               std::to_string(i) + "\ncore id\t\t: " + std::to_string(i % cores) + "\n\n";
  }
  return from_text("0-" + std::to_string(n - 1) + "\n", cpuinfo);
}

HostTopology read_host_topology(const std::filesystem::path& root) {
  const auto online = read_text_file(root / "sys/devices/system/cpu/online");
  const auto cpuinfo = read_text_file(root / "proc/cpuinfo");
  return HostTopology::from_text(online, cpuinfo);
}

}  // namespace libctx
