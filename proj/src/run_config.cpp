#include "libctx/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

#include "libctx/error.hpp"

namespace libctx {

namespace {

using nlohmann::json;

/// Character iterator that counts the newlines the parser has consumed.
class LineIterator {
 public:
  using iterator_category = std::forward_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  LineIterator() = default;
  LineIterator(const char* p, int* line) : p_(p), line_(line) {}

  reference operator*() const { return *p_; }
  LineIterator& operator++() {
    if (*p_ == '\n') ++*line_;
    ++p_;
    return *this;
  }
  LineIterator operator++(int) {
    auto old = *this;
    ++*this;
    return old;
  }
  bool operator==(const LineIterator& o) const { return p_ == o.p_; }

 private:
  const char* p_ = nullptr;
  int* line_ = nullptr;
};

std::string escape_pointer_token(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') {
      out += "~0";
    } else if (c == '/') {
      out += "~1";
    } else {
      out += c;
    }
  }
  return out;
}

/// Builds the document while recording the line of every value, keyed by
/// JSON pointer.
class LineSax {
 public:
  LineSax(json& root, const int& line, std::map<std::string, int>& lines)
      : dom_(root), line_(line), lines_(lines) {}

  bool null() { return value(), dom_.null(); }
  bool boolean(bool v) { return value(), dom_.boolean(v); }
  bool number_integer(json::number_integer_t v) { return value(), dom_.number_integer(v); }
  bool number_unsigned(json::number_unsigned_t v) { return value(), dom_.number_unsigned(v); }
  bool number_float(json::number_float_t v, const std::string& s) { return value(), dom_.number_float(v, s); }
  bool string(std::string& v) { return value(), dom_.string(v); }
  bool binary(json::binary_t& v) { return value(), dom_.binary(v); }
  bool start_object(std::size_t n) {
    stack_.push_back({value(), false, 0, {}});
    return dom_.start_object(n);
  }
  bool key(std::string& k) {
    stack_.back().key = k;
    return dom_.key(k);
  }
  bool end_object() {
    stack_.pop_back();
    return dom_.end_object();
  }
  bool start_array(std::size_t n) {
    stack_.push_back({value(), true, 0, {}});
    return dom_.start_array(n);
  }
  bool end_array() {
    stack_.pop_back();
    return dom_.end_array();
  }
  template <typename Exception>
  bool parse_error(std::size_t pos, const std::string& token, const Exception& ex) {
    return dom_.parse_error(pos, token, ex);
  }

 private:
  struct Frame {
    std::string ptr;
    bool array;
    std::size_t next_index;
    std::string key;
  };

  std::string value() {
    std::string p;
    if (!stack_.empty()) {
      auto& f = stack_.back();
      p = f.ptr + "/" + (f.array ? std::to_string(f.next_index++) : escape_pointer_token(f.key));
    }
    lines_[p] = line_;
    return p;
  }

  nlohmann::detail::json_sax_dom_parser<json> dom_;
  const int& line_;
  std::map<std::string, int>& lines_;
  std::vector<Frame> stack_;
};

class Validator {
 public:
  Validator(std::string source, const std::map<std::string, int>& lines) : source_(std::move(source)), lines_(lines) {}

  [[noreturn]] void fail(const std::string& ptr, const std::string& what) const {
    auto it = lines_.find(ptr);
    const int line = it == lines_.end() ? 1 : it->second;
    throw Error(Errc::kConfig, source_ + ":" + std::to_string(line) + ": " + what);
  }

  int line_of(const std::string& ptr) const {
    auto it = lines_.find(ptr);
    return it == lines_.end() ? 0 : it->second;
  }

  void only_keys(const json& obj, const std::string& ptr, const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : obj.items()) {
      if (!allowed.count(k)) fail(ptr + "/" + escape_pointer_token(k), "unknown key '" + k + "'");
    }
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
  const std::map<std::string, int>& lines_;
};

ContextSpec parse_context(const json& c, const std::string& ptr, const Validator& v) {
  if (!c.is_object()) v.fail(ptr, "each context must be an object");
  v.only_keys(c, ptr, {"name", "cpus", "env", "argv"});
  ContextSpec spec;
  spec.line = v.line_of(ptr);

  if (!c.contains("name") || !c["name"].is_string() || c["name"].get<std::string>().empty()) {
    v.fail(c.contains("name") ? ptr + "/name" : ptr, "context needs a non-empty string \"name\"");
  }
  spec.name = c["name"].get<std::string>();
  const std::string who = "context '" + spec.name + "': ";

  if (!c.contains("cpus") || !c["cpus"].is_string()) {
    v.fail(c.contains("cpus") ? ptr + "/cpus" : ptr, who + "\"cpus\" must be a cpu-list string");
  }
  spec.cpus = c["cpus"].get<std::string>();
  try {
    spec.allowed = parse_cpu_list(spec.cpus);
  } catch (const Error& e) {
    v.fail(ptr + "/cpus", who + e.what());
  }
  if (spec.allowed.empty()) v.fail(ptr + "/cpus", who + "\"cpus\" selects no CPU");

  if (c.contains("env")) {
    const auto& env = c["env"];
    if (!env.is_object()) v.fail(ptr + "/env", who + "\"env\" must be an object of strings");
    for (const auto& [name, value] : env.items()) {
      const std::string vp = ptr + "/env/" + escape_pointer_token(name);
      if (!value.is_string()) v.fail(vp, who + "env value of " + name + " must be a string");
      if (name.empty() || name.find('=') != std::string::npos) v.fail(vp, who + "invalid variable name '" + name + "'");
      spec.env.emplace(name, value.get<std::string>());
    }
  }

  if (!c.contains("argv") || !c["argv"].is_array() || c["argv"].empty()) {
    v.fail(c.contains("argv") ? ptr + "/argv" : ptr, who + "\"argv\" must be a non-empty array of strings");
  }
  std::size_t i = 0;
  for (const auto& a : c["argv"]) {
    if (!a.is_string()) v.fail(ptr + "/argv/" + std::to_string(i), who + "argv entries must be strings");
    spec.argv.push_back(a.get<std::string>());
    ++i;
  }
  return spec;
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  json root;
  std::map<std::string, int> lines;
  int line = 1;
  LineSax sax(root, line, lines);
  try {
    json::sax_parse(LineIterator(text.data(), &line), LineIterator(text.data() + text.size(), &line), &sax);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const int err_line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n'));
    throw Error(Errc::kConfig, source + ":" + std::to_string(err_line) + ": invalid JSON: " + e.what());
  }

  const Validator v(source, lines);
  if (!root.is_object()) v.fail("", "top level must be an object");
  v.only_keys(root, "", {"contexts", "options"});
  RunConfig config;
  if (!root.contains("contexts") || !root["contexts"].is_array() || root["contexts"].empty()) {
    v.fail(root.contains("contexts") ? "/contexts" : "", "\"contexts\" must be a non-empty array");
  }
  std::set<std::string> names;
  std::size_t i = 0;
  for (const auto& c : root["contexts"]) {
    const std::string ptr = "/contexts/" + std::to_string(i++);
    auto spec = parse_context(c, ptr, v);
    if (!names.insert(spec.name).second) v.fail(ptr + "/name", "duplicate context name '" + spec.name + "'");
    config.contexts.push_back(std::move(spec));
  }

  if (root.contains("options")) {
    const auto& o = root["options"];
    if (!o.is_object()) v.fail("/options", "\"options\" must be an object");
    v.only_keys(o, "/options", {"trace_all", "forge_root"});
    if (o.contains("trace_all")) {
      if (!o["trace_all"].is_boolean()) v.fail("/options/trace_all", "\"trace_all\" must be true or false");
      config.options.trace_all = o["trace_all"].get<bool>();
    }
    if (o.contains("forge_root")) {
      if (!o["forge_root"].is_string() || o["forge_root"].get<std::string>().empty()) {
        v.fail("/options/forge_root", "\"forge_root\" must be a non-empty path string");
      }
      config.options.forge_root = o["forge_root"].get<std::string>();
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kConfig, "cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.string());
}

void check_cpus_online(const RunConfig& config, const CpuSet& online, const std::string& source) {
  for (const auto& c : config.contexts) {
    const CpuSet outside = c.allowed - online;
    if (!outside.empty()) {
      throw Error(Errc::kConfig, source + ":" + std::to_string(c.line) + ": context '" + c.name + "': cpus " +
                                     format_cpu_list(outside) + " are not online (online: " +
                                     format_cpu_list(online) + ")");
    }
  }
}

}  // namespace libctx
