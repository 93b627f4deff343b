#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "wsr/corpus.hpp"
#include "wsr/errors.hpp"
#include "wsr/parsing.hpp"

using namespace wsr;
using namespace wsr::parsing;

namespace {

corpus::OrganSchema colon() { return corpus::default_schemas()[1]; }

}  // namespace

TEST_CASE("tag sentences: first match, case-insensitive, absence") {
  corpus::OrganSchema s = colon();
  s.key_tags = {"histologic type", "differentiation"};
  s.inner_classes.resize(2);
  s.sentence_templates.resize(2);
  const auto both =
      extract_tag_sentences("Histologic type: tubular adenocarcinoma. Differentiation: moderate.", s);
  REQUIRE(both.size() == 2);
  CHECK(both[0] == "Histologic type: tubular adenocarcinoma");
  CHECK(both[1] == "Differentiation: moderate");

  const auto one = extract_tag_sentences("Histologic type: tubular adenocarcinoma.", s);
  CHECK(one[0].has_value());
  CHECK_FALSE(one[1].has_value());

  const auto none = extract_tag_sentences("", s);
  CHECK_FALSE(none[0].has_value());
  CHECK_FALSE(none[1].has_value());

  const auto first = extract_tag_sentences("Differentiation: well.\nDifferentiation: poor.", s);
  CHECK(first[1] == "Differentiation: well");
}

TEST_CASE("organ assignment") {
  const auto kw = organ_keywords(corpus::default_schemas());
  CHECK(assign_organ("kidney, partial nephrectomy:", kw) == 0);
  CHECK(assign_organ("Colon, right, hemicolectomy: kidney mentioned later", kw) == 1);
  CHECK(assign_organ("Skin, shave biopsy", kw) == kUncertainOrgan);
  CHECK_THROWS_AS(assign_organ("kidney", OrganKeywords{}), ConfigError);
  OrganKeywords clash{{0, {"mass"}}, {1, {"mass"}}};
  CHECK_THROWS_AS(assign_organ("a mass", clash), ParseError);
}

TEST_CASE("inner classification: substring, longest match, uncertain fallback") {
  const auto s = colon();
  const int diff = 1;
  CHECK(classify_inner("Differentiation: moderately differentiated", diff, s) ==
        corpus::inner_class_index("moderately differentiated"));
  CHECK(classify_inner("Differentiation: something odd", diff, s) == corpus::kUncertainClass);
  const int lvi = 2;
  CHECK(classify_inner("Lymphovascular invasion: not identified", lvi, s) ==
        corpus::inner_class_index("not identified"));
  CHECK(classify_inner("Lymphovascular invasion: identified", lvi, s) == corpus::inner_class_index("identified"));
  CHECK_THROWS_AS(classify_inner("no tag here", diff, s), ConfigError);
}

TEST_CASE("every template sentence classifies back to its generating class") {
  for (const auto& s : corpus::default_schemas()) {
    for (int t = 0; t < s.tag_count(); ++t) {
      for (int c : s.class_indices(t)) {
        CHECK(classify_inner(s.template_for(t, c), t, s) == c);
      }
    }
  }
}

TEST_CASE("parsed report mask consistency and determinism") {
  const auto schemas = corpus::default_schemas();
  const std::string r = "Kidney, right, partial nephrectomy:\nNuclear grade: WHO/ISUP grade 3.";
  const auto a = parse_report(r, schemas);
  const auto b = parse_report(r, schemas);
  CHECK(a == b);
  CHECK(a.organ_label == 0);
  for (std::size_t i = 0; i < a.tag_mask.size(); ++i) {
    CHECK(a.tag_mask[i] == a.tag_sentences[i].has_value());
    CHECK(a.tag_mask[i] == a.tag_classes[i].has_value());
  }
  CHECK(a.tag_classes[1] == corpus::inner_class_index("grade 3"));
  nlohmann::json j = a;
  CHECK(j["tag_mask"].size() == 4);
}

TEST_CASE("tokenize and detokenize") {
  const Vocab v = Vocab::build({"Differentiation: moderately differentiated", "Nuclear grade: WHO/ISUP grade 3"});
  CHECK(tokenize("", v) == std::vector<int>{Vocab::kBos, Vocab::kEos});
  const auto ids = tokenize("moderately differentiated", v);
  CHECK(ids.size() == 4);
  CHECK(ids.front() == Vocab::kBos);
  CHECK(ids.back() == Vocab::kEos);
  for (const std::string s : {"Differentiation: moderately differentiated", "Nuclear grade: WHO/ISUP grade 3"}) {
    CHECK(detokenize(tokenize(s, v), v) == s);
  }
  CHECK(tokenize("unseen", v)[1] == Vocab::kUnk);

  const auto path = std::filesystem::temp_directory_path() / "wsr_vocab.txt";
  v.save(path);
  const Vocab back = Vocab::load(path);
  CHECK(back.tokens() == v.tokens());
  std::ofstream(path) << "a\nb\n";
  CHECK_THROWS_AS(Vocab::load(path), FormatError);
  std::filesystem::remove(path);
}
