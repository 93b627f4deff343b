#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsr/corpus.hpp"

namespace wsr::parsing {

// Organ label for reports without any organ keyword.
inline constexpr int kUncertainOrgan = -1;

struct ParsedReport {
  int organ_label = kUncertainOrgan;
  std::vector<std::optional<std::string>> tag_sentences;
  std::vector<std::optional<int>> tag_classes;
  std::vector<bool> tag_mask;

  bool operator==(const ParsedReport&) const = default;
};

void to_json(nlohmann::json& j, const ParsedReport& r);

// Splits on '.' and newlines; trims and drops empty pieces.
std::vector<std::string> split_sentences(const std::string& report);

// For each key tag, the first sentence containing the tag name
// (case-insensitive); absent when none does.
std::vector<std::optional<std::string>> extract_tag_sentences(const std::string& report,
                                                              const corpus::OrganSchema& schema);

using OrganKeywords = std::map<int, std::vector<std::string>>;
OrganKeywords organ_keywords(const std::vector<corpus::OrganSchema>& schemas);

// Organ whose keyword occurs earliest; kUncertainOrgan when none occurs.
// Throws ParseError when two organs tie at the earliest offset and
// ConfigError for an empty keyword map.
int assign_organ(const std::string& report, const OrganKeywords& keywords);

// Longest matching inner-class name of the tag (ties: lowest global index);
// the uncertain class when nothing matches.
int classify_inner(const std::string& sentence, int tag, const corpus::OrganSchema& schema);

ParsedReport parse_report(const std::string& report, const std::vector<corpus::OrganSchema>& schemas);
// Parse against a known schema (organ still read from the text).
ParsedReport parse_report_for(const std::string& report, const corpus::OrganSchema& schema,
                              const std::vector<corpus::OrganSchema>& schemas);

// ---------------------------------------------------------------- tokens

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocab();

  int add(const std::string& token);
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab build(const std::vector<std::string>& sentences);

  // One token per line; line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Whitespace split, with every punctuation character a separate token.
std::vector<std::string> split_tokens(const std::string& sentence);
// [BOS, tokens..., EOS]; unknown words map to UNK.
std::vector<int> tokenize(const std::string& sentence, const Vocab& vocab);
// Drops special tokens and re-attaches punctuation.
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);
std::string join_tokens(const std::vector<std::string>& tokens);

}  // namespace wsr::parsing
