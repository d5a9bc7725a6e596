#include "robomamba/config.hpp"

#include <algorithm>

#include "robomamba/binio.hpp"
#include "robomamba/error.hpp"
#include "robomamba/tokenizer.hpp"

namespace robomamba {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(std::string_view k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& source) {
  if (!is_valid_utf8(text)) throw DataError(source + ": not valid UTF-8");
  KeyValueConfig cfg;
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    const auto where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string_view::npos) throw DataError(where + "expected key=value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw DataError(where + "bad key '" + std::string(key) + "'");
    if (cfg.find(key)) throw DataError(where + "duplicate key '" + std::string(key) + "'");
    cfg.entries_.emplace_back(std::string(key), std::string(value));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

const std::string* KeyValueConfig::find(std::string_view key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return &v;
  return nullptr;
}

}  // namespace robomamba
