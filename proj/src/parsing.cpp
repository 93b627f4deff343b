#include "wsr/parsing.hpp"

#include <cctype>
#include <fstream>
#include <limits>
#include <set>

#include "wsr/errors.hpp"
#include "wsr/text.hpp"

namespace wsr::parsing {

using corpus::OrganSchema;

void to_json(nlohmann::json& j, const ParsedReport& r) {
  j = nlohmann::json::object();
  j["organ_label"] = r.organ_label;
  auto sentences = nlohmann::json::array();
  auto classes = nlohmann::json::array();
  for (std::size_t i = 0; i < r.tag_mask.size(); ++i) {
    sentences.push_back(r.tag_sentences[i] ? nlohmann::json(*r.tag_sentences[i]) : nlohmann::json());
    classes.push_back(r.tag_classes[i] ? nlohmann::json(*r.tag_classes[i]) : nlohmann::json());
  }
  j["tag_sentences"] = sentences;
  j["tag_classes"] = classes;
  j["tag_mask"] = r.tag_mask;
}

std::vector<std::string> split_sentences(const std::string& report) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    std::string t = text::trim(cur);
    if (!t.empty()) out.push_back(std::move(t));
    cur.clear();
  };
  for (char c : report) {
    if (c == '.' || c == '\n') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::vector<std::optional<std::string>> extract_tag_sentences(const std::string& report,
                                                              const OrganSchema& schema) {
  if (schema.key_tags.empty()) throw ConfigError("extract_tag_sentences: schema has no tags");
  const auto sentences = split_sentences(report);
  std::vector<std::optional<std::string>> out(schema.key_tags.size());
  for (std::size_t t = 0; t < schema.key_tags.size(); ++t) {
    for (const auto& s : sentences) {
      if (text::icontains(s, schema.key_tags[t])) {
        out[t] = s;
        break;
      }
    }
  }
  return out;
}

OrganKeywords organ_keywords(const std::vector<OrganSchema>& schemas) {
  OrganKeywords kw;
  for (const auto& s : schemas) kw[s.organ_id] = s.keywords;
  return kw;
}

int assign_organ(const std::string& report, const OrganKeywords& keywords) {
  if (keywords.empty()) throw ConfigError("assign_organ: empty keyword map");
  const std::string low = text::lower(report);
  std::size_t best = std::numeric_limits<std::size_t>::max();
  std::set<int> at_best;
  for (const auto& [organ, words] : keywords) {
    for (const auto& w : words) {
      if (w.empty()) continue;
      const std::size_t pos = low.find(text::lower(w));
      if (pos == std::string::npos) continue;
      if (pos < best) {
        best = pos;
        at_best = {organ};
      } else if (pos == best) {
        at_best.insert(organ);
      }
    }
  }
  if (at_best.empty()) return kUncertainOrgan;
  if (at_best.size() > 1) {
    throw ParseError("assign_organ: ambiguous organ keywords at offset " + std::to_string(best));
  }
  return *at_best.begin();
}

int classify_inner(const std::string& sentence, int tag, const OrganSchema& schema) {
  if (tag < 0 || tag >= schema.tag_count()) throw ConfigError("classify_inner: tag index out of range");
  if (!text::icontains(sentence, schema.key_tags[static_cast<std::size_t>(tag)])) {
    throw ConfigError("classify_inner: sentence does not contain tag '" +
                      schema.key_tags[static_cast<std::size_t>(tag)] + "'");
  }
  int best = corpus::kUncertainClass;
  std::size_t best_len = 0;
  for (int c : schema.class_indices(tag)) {
    if (c == corpus::kUncertainClass) continue;
    const auto& name = corpus::inner_class_names()[static_cast<std::size_t>(c)];
    if (!text::icontains(sentence, name)) continue;
    if (name.size() > best_len || (name.size() == best_len && c < best)) {
      best = c;
      best_len = name.size();
    }
  }
  return best;
}

ParsedReport parse_report_for(const std::string& report, const OrganSchema& schema,
                              const std::vector<OrganSchema>& schemas) {
  ParsedReport r;
  r.organ_label = assign_organ(report, organ_keywords(schemas));
  r.tag_sentences = extract_tag_sentences(report, schema);
  r.tag_classes.resize(r.tag_sentences.size());
  r.tag_mask.resize(r.tag_sentences.size());
  for (std::size_t t = 0; t < r.tag_sentences.size(); ++t) {
    if (!r.tag_sentences[t]) continue;
    r.tag_mask[t] = true;
    r.tag_classes[t] = classify_inner(*r.tag_sentences[t], static_cast<int>(t), schema);
  }
  return r;
}

ParsedReport parse_report(const std::string& report, const std::vector<OrganSchema>& schemas) {
  const int organ = assign_organ(report, organ_keywords(schemas));
  if (organ == kUncertainOrgan) return ParsedReport{};
  return parse_report_for(report, schemas.at(static_cast<std::size_t>(organ)), schemas);
}

// ---------------------------------------------------------------- vocab

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
}

int Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw ConfigError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

Vocab Vocab::build(const std::vector<std::string>& sentences) {
  Vocab v;
  for (const auto& s : sentences) {
    for (const auto& t : split_tokens(s)) v.add(t);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  Vocab v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  while (std::getline(in, line)) {
    v.tokens_.push_back(line);
    v.index_.emplace(line, static_cast<int>(v.tokens_.size()) - 1);
  }
  if (v.size() < 4 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<bos>" || v.tokens_[2] != "<eos>" ||
      v.tokens_[3] != "<unk>") {
    throw FormatError("vocab file " + path.string() + " lacks the reserved ids 0..3");
  }
  return v;
}

std::vector<std::string> split_tokens(const std::string& sentence) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : sentence) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

std::vector<int> tokenize(const std::string& sentence, const Vocab& vocab) {
  std::vector<int> ids{Vocab::kBos};
  for (const auto& t : split_tokens(sentence)) ids.push_back(vocab.id(t));
  ids.push_back(Vocab::kEos);
  return ids;
}

namespace {

bool glue_left(const std::string& t) {
  static const std::set<std::string> s = {".", ",", ":", ";", ")", "?", "!", "/", "-", "%"};
  return s.count(t) != 0;
}

bool glue_right(const std::string& t) {
  static const std::set<std::string> s = {"(", "/", "-"};
  return s.count(t) != 0;
}

}  // namespace

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  bool suppress = true;
  for (const auto& t : tokens) {
    if (!suppress && !glue_left(t)) out.push_back(' ');
    out += t;
    suppress = glue_right(t);
  }
  return out;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::vector<std::string> tokens;
  for (int id : ids) {
    if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
    tokens.push_back(vocab.token(id));
  }
  return join_tokens(tokens);
}

}  // namespace wsr::parsing
