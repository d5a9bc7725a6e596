#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace robomamba {

// Flat UTF-8 key=value file. Blank lines and lines starting with '#' are
// skipped, whitespace around keys and values is trimmed, keys are unique and
// made of [a-z0-9_-].
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, const std::string& source = "config");
  static KeyValueConfig load(const std::filesystem::path& path);

  const std::string* find(std::string_view key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace robomamba
