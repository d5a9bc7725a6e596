#include "robomamba/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace robomamba {

namespace {

const std::vector<std::string>& specials() {
  static const std::vector<std::string> s{"<unk>", "<bos>", "<eos>"};
  return s;
}

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

bool is_word(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' ||
         c >= 0x80;
}

std::string escape(const std::string& token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(const std::string& line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\' || i + 1 == line.size()) {
      out += line[i];
      continue;
    }
    switch (line[++i]) {
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      case '\\': out += '\\'; break;
      default: throw DataError("vocabulary: unknown escape \\" + std::string(1, line[i]));
    }
  }
  return out;
}

}  // namespace

bool is_valid_utf8(std::string_view text) {
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t extra = 0;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xE) extra = 2;
    else if ((c >> 3) == 0x1E) extra = 3;
    else return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if (i + k >= text.size()) return false;
      if ((static_cast<unsigned char>(text[i + k]) >> 6) != 0x2) return false;
    }
    i += extra + 1;
  }
  return true;
}

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

Tokenizer::Tokenizer(std::vector<std::string> tokens) {
  const auto& sp = specials();
  if (tokens.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens.begin())) {
    tokens.insert(tokens.begin(), sp.begin(), sp.end());
  }
  if (tokens.size() > kMaxVocab) {
    throw DataError("vocabulary has " + std::to_string(tokens.size()) + " tokens, limit is " +
                    std::to_string(kMaxVocab));
  }
  tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw DataError("vocabulary: duplicate token '" + escape(tokens_[i]) + "'");
    }
  }
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> pieces;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto uc = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  while (i < n) {
    std::size_t start = i;
    if (is_space(uc(i))) {
      std::size_t j = i;
      while (j < n && is_space(uc(j))) ++j;
      // A trailing single space before a non-space piece belongs to it.
      if (j < n && text[j - 1] == ' ') {
        if (j - 1 > i) pieces.emplace_back(text.substr(i, j - 1 - i));
        start = j - 1;
        i = j;
      } else {
        pieces.emplace_back(text.substr(i, j - i));
        i = j;
        continue;
      }
    }
    if (is_word(uc(i))) {
      while (i < n && is_word(uc(i))) ++i;
    } else {
      ++i;
    }
    pieces.emplace_back(text.substr(start, i - start));
  }
  return pieces;
}

Tokenizer Tokenizer::from_corpus(std::span<const std::string> texts, std::size_t max_vocab) {
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    if (!is_valid_utf8(t)) throw DataError("corpus text is not valid UTF-8");
    for (auto& p : split(t)) ++counts[p];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(specials());
  for (auto& [piece, count] : ranked) {
    if (tokens.size() >= max_vocab) break;
    if (std::find(tokens.begin(), tokens.end(), piece) != tokens.end()) continue;
    tokens.push_back(piece);
  }
  return Tokenizer(std::move(tokens));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  if (!is_valid_utf8(text)) throw DataError("tokenize: text is not valid UTF-8");
  std::vector<TokenId> ids;
  for (const auto& piece : split(text)) {
    auto it = index_.find(piece);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kBos || id == kEos) continue;
    if (id == kUnk || id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      out += kReplacement;
      continue;
    }
    out += tokens_[static_cast<std::size_t>(id)];
  }
  return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << escape(t) << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(unescape(line));
  return Tokenizer(std::move(tokens));
}

}  // namespace robomamba
