#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "robomamba/nn.hpp"

namespace robomamba {

// Word-level tokenizer over a corpus-built vocabulary.
//
// Text is cut into pieces: runs of word characters, single punctuation
// characters, and whitespace. A single space directly before a word or
// punctuation piece is folded into that piece (" drawer"), other whitespace
// becomes its own piece, so decode(encode(t)) == t whenever every piece of t
// is in the vocabulary.
class Tokenizer {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr std::size_t kMaxVocab = 2048;
  // U+FFFD, emitted for unknown ids.
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

  Tokenizer();
  explicit Tokenizer(std::vector<std::string> tokens);

  // Most frequent pieces first, ties broken lexicographically.
  static Tokenizer from_corpus(std::span<const std::string> texts,
                               std::size_t max_vocab = kMaxVocab);

  static std::vector<std::string> split(std::string_view text);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, line index = id. Backslash escapes keep control
  // characters on a single line: \n \r \t \\.
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

bool is_valid_utf8(std::string_view text);

}  // namespace robomamba
