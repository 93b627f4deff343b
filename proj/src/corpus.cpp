#include "wsr/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "wsr/errors.hpp"
#include "wsr/rng.hpp"
#include "wsr/text.hpp"

namespace wsr::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& inner_class_names() {
  static const std::vector<std::string> names = {
      // kidney: histologic type
      "clear cell renal cell carcinoma", "papillary renal cell carcinoma",
      "chromophobe renal cell carcinoma", "collecting duct carcinoma",
      // kidney: nuclear grade
      "grade 1", "grade 2", "grade 3", "grade 4",
      // kidney: tumor necrosis
      "extensive necrosis", "focal necrosis", "no necrosis",
      // kidney: sarcomatoid features
      "no sarcomatoid change", "focal sarcomatoid change", "extensive sarcomatoid change",
      // colon: histologic type
      "tubular adenocarcinoma", "mucinous adenocarcinoma", "signet ring cell carcinoma",
      "medullary carcinoma", "serrated adenocarcinoma",
      // colon: differentiation
      "well differentiated", "moderately differentiated", "poorly differentiated",
      "undifferentiated",
      // colon: lymphovascular invasion
      "not identified", "identified", "suspicious for invasion",
      "uncertain"};
  return names;
}

int inner_class_index(const std::string& name) {
  const auto& names = inner_class_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown inner class '" + name + "'");
  return static_cast<int>(it - names.begin());
}

// ---------------------------------------------------------------- schema

std::vector<int> OrganSchema::class_indices(int tag) const {
  std::vector<int> out;
  for (const auto& n : inner_classes.at(static_cast<std::size_t>(tag))) out.push_back(inner_class_index(n));
  return out;
}

const std::string& OrganSchema::template_for(int tag, int global_class) const {
  const auto& names = inner_classes.at(static_cast<std::size_t>(tag));
  const auto& target = inner_class_names().at(static_cast<std::size_t>(global_class));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == target) return sentence_templates[static_cast<std::size_t>(tag)][i];
  }
  throw ConfigError("class '" + target + "' is not an inner class of tag '" +
                    key_tags.at(static_cast<std::size_t>(tag)) + "'");
}

void OrganSchema::validate() const {
  if (key_tags.empty()) throw ConfigError("organ '" + organ_name + "' has no key tags");
  if (inner_classes.size() != key_tags.size() || sentence_templates.size() != key_tags.size()) {
    throw ConfigError("organ '" + organ_name + "': per-tag lists must match key_tags");
  }
  std::set<std::string> seen;
  for (std::size_t t = 0; t < key_tags.size(); ++t) {
    if (!seen.insert(text::lower(key_tags[t])).second) {
      throw ConfigError("organ '" + organ_name + "': duplicate tag '" + key_tags[t] + "'");
    }
    if (inner_classes[t].empty() || inner_classes[t].size() != sentence_templates[t].size()) {
      throw ConfigError("tag '" + key_tags[t] + "': classes and templates must be non-empty and aligned");
    }
    for (std::size_t c = 0; c < inner_classes[t].size(); ++c) {
      inner_class_index(inner_classes[t][c]);
      const std::string& tpl = sentence_templates[t][c];
      if (!text::icontains(tpl, key_tags[t])) {
        throw ConfigError("template '" + tpl + "' does not contain tag '" + key_tags[t] + "'");
      }
      if (tpl.find_first_of(".\n") != std::string::npos) {
        throw ConfigError("template '" + tpl + "' contains a sentence terminator");
      }
    }
  }
  if (keywords.empty()) throw ConfigError("organ '" + organ_name + "' has no keywords");
}

void to_json(json& j, const OrganSchema& s) {
  j = json{{"organ_id", s.organ_id},
           {"organ_name", s.organ_name},
           {"keywords", s.keywords},
           {"report_header", s.report_header},
           {"key_tags", s.key_tags},
           {"inner_classes", s.inner_classes},
           {"sentence_templates", s.sentence_templates}};
}

void from_json(const json& j, OrganSchema& s) {
  j.at("organ_id").get_to(s.organ_id);
  j.at("organ_name").get_to(s.organ_name);
  s.keywords = j.value("keywords", std::vector<std::string>{s.organ_name});
  s.report_header = j.value("report_header", s.organ_name + ":");
  j.at("key_tags").get_to(s.key_tags);
  j.at("inner_classes").get_to(s.inner_classes);
  j.at("sentence_templates").get_to(s.sentence_templates);
}

namespace {

OrganSchema make_schema(int id, std::string name, std::vector<std::string> keywords,
                        std::string header,
                        std::vector<std::pair<std::string, std::vector<std::string>>> tags,
                        const std::map<std::string, std::string>& formats) {
  OrganSchema s;
  s.organ_id = id;
  s.organ_name = std::move(name);
  s.keywords = std::move(keywords);
  s.report_header = std::move(header);
  for (auto& [tag, classes] : tags) {
    s.key_tags.push_back(tag);
    classes.push_back("uncertain");
    std::vector<std::string> templates;
    const auto fmt = formats.count(tag) ? formats.at(tag) : std::string("{tag}: {class}");
    for (const auto& c : classes) {
      std::string t = c == "uncertain" ? std::string("{tag}: cannot be assessed") : fmt;
      t = text::replace_all(t, "{tag}", tag);
      t = text::replace_all(t, "{class}", c);
      templates.push_back(t);
    }
    s.inner_classes.push_back(classes);
    s.sentence_templates.push_back(std::move(templates));
  }
  return s;
}

}  // namespace

std::vector<OrganSchema> default_schemas() {
  std::vector<OrganSchema> out;
  out.push_back(make_schema(
      0, "kidney", {"kidney", "nephrectomy"}, "Kidney, right, partial nephrectomy:",
      {{"Histologic type",
        {"clear cell renal cell carcinoma", "papillary renal cell carcinoma",
         "chromophobe renal cell carcinoma", "collecting duct carcinoma"}},
       {"Nuclear grade", {"grade 1", "grade 2", "grade 3", "grade 4"}},
       {"Tumor necrosis", {"extensive necrosis", "focal necrosis", "no necrosis"}},
       {"Sarcomatoid features",
        {"no sarcomatoid change", "focal sarcomatoid change", "extensive sarcomatoid change"}}},
      {{"Nuclear grade", "{tag}: WHO/ISUP {class}"},
       {"Tumor necrosis", "{tag}: {class} in the tumor"}}));
  out.push_back(make_schema(
      1, "colon", {"colon", "colectomy"}, "Colon, right, hemicolectomy:",
      {{"Histologic type",
        {"tubular adenocarcinoma", "mucinous adenocarcinoma", "signet ring cell carcinoma",
         "medullary carcinoma", "serrated adenocarcinoma"}},
       {"Differentiation",
        {"well differentiated", "moderately differentiated", "poorly differentiated",
         "undifferentiated"}},
       {"Lymphovascular invasion", {"not identified", "identified", "suspicious for invasion"}}},
      {}));
  return out;
}

void validate_schema_set(const std::vector<OrganSchema>& schemas) {
  if (schemas.empty()) throw ConfigError("schema set is empty");
  for (std::size_t i = 0; i < schemas.size(); ++i) {
    if (schemas[i].organ_id != static_cast<int>(i)) {
      throw ConfigError("organ ids must be 0..n_o-1 in order");
    }
    schemas[i].validate();
  }
}

// ---------------------------------------------------------------- dims

void SizeConfig::validate() const {
  if (patch_size <= 0 || grid <= 0 || level2_rows <= 0 || level2_cols <= 0) {
    throw ConfigError("size config: patch_size, grid and level-2 grid must be positive");
  }
  if (min_slides < 1 || max_slides < min_slides) {
    throw ConfigError("size config: need 1 <= min_slides <= max_slides");
  }
  if (noise_sigma < 0.0 || drop_prob < 0.0 || drop_prob > 1.0 || uncertain_prob < 0.0 ||
      uncertain_prob > 1.0) {
    throw ConfigError("size config: probabilities must lie in [0,1] and sigma >= 0");
  }
}

void to_json(json& j, const SizeConfig& d) {
  j = json{{"patch_size", d.patch_size},   {"grid", d.grid},
           {"level2_rows", d.level2_rows}, {"level2_cols", d.level2_cols},
           {"noise_sigma", d.noise_sigma}, {"min_slides", d.min_slides},
           {"max_slides", d.max_slides},   {"drop_prob", d.drop_prob},
           {"uncertain_prob", d.uncertain_prob}};
}

void from_json(const json& j, SizeConfig& d) {
  d.patch_size = j.value("patch_size", d.patch_size);
  d.grid = j.value("grid", d.grid);
  d.level2_rows = j.value("level2_rows", d.level2_rows);
  d.level2_cols = j.value("level2_cols", d.level2_cols);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.min_slides = j.value("min_slides", d.min_slides);
  d.max_slides = j.value("max_slides", d.max_slides);
  d.drop_prob = j.value("drop_prob", d.drop_prob);
  d.uncertain_prob = j.value("uncertain_prob", d.uncertain_prob);
}

void to_json(json& j, const SyntheticPatient& p) {
  j = json{{"patient_id", p.patient_id},
           {"organ_id", p.organ_id},
           {"slide_count", p.slide_count},
           {"tag_assignments", p.tag_assignments},
           {"dropped_tags", p.dropped_tags},
           {"render_seed", p.render_seed}};
}

void from_json(const json& j, SyntheticPatient& p) {
  j.at("patient_id").get_to(p.patient_id);
  j.at("organ_id").get_to(p.organ_id);
  j.at("slide_count").get_to(p.slide_count);
  j.at("tag_assignments").get_to(p.tag_assignments);
  j.at("dropped_tags").get_to(p.dropped_tags);
  p.render_seed = j.value("render_seed", std::uint64_t{0});
}

const OrganSchema& Corpus::schema_of(const SyntheticPatient& p) const {
  if (p.organ_id < 0 || p.organ_id >= static_cast<int>(schemas.size())) {
    throw ConfigError("patient " + p.patient_id + " has unknown organ id");
  }
  return schemas[static_cast<std::size_t>(p.organ_id)];
}

std::string slide_id(const std::string& patient_id, int slide_index) {
  return patient_id + "_s" + std::to_string(slide_index);
}

// ---------------------------------------------------------------- generation

std::string build_report(const SyntheticPatient& patient, const OrganSchema& schema) {
  std::string report = schema.report_header;
  for (int t = 0; t < schema.tag_count(); ++t) {
    const auto& tag = schema.key_tags[static_cast<std::size_t>(t)];
    auto it = patient.tag_assignments.find(tag);
    if (it == patient.tag_assignments.end()) continue;
    report += "\n" + schema.template_for(t, it->second) + ".";
  }
  return report;
}

Corpus generate_corpus(const std::vector<OrganSchema>& schemas, int n_patients, std::uint64_t seed,
                       const SizeConfig& dims) {
  if (n_patients < 1) throw ConfigError("n_patients must be >= 1");
  validate_schema_set(schemas);
  dims.validate();

  Corpus corpus;
  corpus.schemas = schemas;
  corpus.dims = dims;
  corpus.seed = seed;
  Rng rng(derive_seed(seed, "corpus/patients"));
  const int width = std::max(4, static_cast<int>(std::to_string(n_patients).size()));
  for (int i = 0; i < n_patients; ++i) {
    SyntheticPatient p;
    std::string num = std::to_string(i + 1);
    p.patient_id = "P" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(num.size(), width), '0') + num;
    p.organ_id = rng.uniform_int(static_cast<int>(schemas.size()));
    p.slide_count = rng.uniform_int(dims.min_slides, dims.max_slides);
    const auto& schema = schemas[static_cast<std::size_t>(p.organ_id)];
    for (int t = 0; t < schema.tag_count(); ++t) {
      const auto& tag = schema.key_tags[static_cast<std::size_t>(t)];
      // draws happen unconditionally so one probability does not shift the others
      const bool dropped = rng.bernoulli(dims.drop_prob);
      const bool uncertain = rng.bernoulli(dims.uncertain_prob);
      std::vector<int> named;
      for (int c : schema.class_indices(t)) {
        if (c != kUncertainClass) named.push_back(c);
      }
      const int pick = named.empty() ? kUncertainClass : named[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(named.size())))];
      if (dropped) {
        p.dropped_tags.push_back(tag);
        continue;
      }
      const auto allowed = schema.class_indices(t);
      const bool has_uncertain =
          std::find(allowed.begin(), allowed.end(), kUncertainClass) != allowed.end();
      p.tag_assignments[tag] = (uncertain && has_uncertain) || named.empty() ? kUncertainClass : pick;
    }
    p.render_seed = derive_seed(seed, "corpus/render", static_cast<std::uint64_t>(i));
    PatientRecord rec;
    rec.report = build_report(p, schema);
    rec.patient = std::move(p);
    corpus.patients.push_back(std::move(rec));
  }
  return corpus;
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i;
  const double p = v * (1 - s);
  const double q = v * (1 - s * f);
  const double t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Texture {
  std::array<double, 3> base{};
  int kind = -1;  // -1 plain background
  double freq = 1.0;
  double amp = 0.0;
};

Texture texture_for(int inner_class) {
  Texture t;
  if (inner_class == kUncertainClass) {
    t.base = {0.62, 0.6, 0.62};
    t.kind = 4;  // fine checker
    t.freq = 8.0;
    t.amp = 0.12;
    return t;
  }
  t.base = hsv_to_rgb(inner_class * 0.6180339887498949, 0.55, 0.78);
  t.kind = inner_class % 4;
  t.freq = 1.0 + (inner_class / 4) % 3;
  t.amp = 0.2;
  return t;
}

std::array<double, 3> organ_tint(int organ_id) {
  const auto rgb = hsv_to_rgb(0.83 + 0.37 * organ_id, 0.5, 1.0);
  return {0.16 * (rgb[0] - 0.75), 0.16 * (rgb[1] - 0.75), 0.16 * (rgb[2] - 0.75)};
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(c * 255.0) / 255.0);
}

double pattern(const Texture& t, double gx, double gy, int patch) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double u = gx / patch;
  const double v = gy / patch;
  switch (t.kind) {
    case 0: return std::sin(two_pi * t.freq * v);
    case 1: return std::sin(two_pi * t.freq * u);
    case 2: return std::sin(two_pi * t.freq * (u + v) * 0.7071);
    case 3: return std::sin(two_pi * t.freq * u) * std::sin(two_pi * t.freq * v);
    case 4: return ((static_cast<int>(gx) / 2 + static_cast<int>(gy) / 2) % 2) ? 1.0 : -1.0;
    default: return 0.0;
  }
}

}  // namespace

SlidePyramid render_slide(const SyntheticPatient& patient, const OrganSchema& schema,
                          int slide_index, const SizeConfig& dims) {
  dims.validate();
  if (slide_index < 0 || slide_index >= patient.slide_count) {
    throw ConfigError("slide index " + std::to_string(slide_index) + " out of range for patient " +
                      patient.patient_id);
  }
  SlidePyramid pyr;
  pyr.slide_id = slide_id(patient.patient_id, slide_index);
  pyr.grid = dims.grid;
  pyr.level2_rows = dims.level2_rows;
  pyr.level2_cols = dims.level2_cols;
  const int P = dims.patch_size;
  const int K = schema.tag_count();
  const auto tint = organ_tint(patient.organ_id);

  Rng noise(derive_seed(patient.render_seed, "slide", static_cast<std::uint64_t>(slide_index)));
  const int rows1 = pyr.level1_rows();
  const int cols1 = pyr.level1_cols();
  pyr.level1.resize(static_cast<std::size_t>(rows1) * cols1);
  for (int r = 0; r < rows1; ++r) {
    for (int c = 0; c < cols1; ++c) {
      const int region = (r / dims.grid) * dims.level2_cols + (c / dims.grid);
      const int tag = (region + slide_index) % K;
      auto it = patient.tag_assignments.find(schema.key_tags[static_cast<std::size_t>(tag)]);
      Texture tex;
      if (it != patient.tag_assignments.end()) {
        tex = texture_for(it->second);
      } else {
        tex.base = {0.84, 0.8, 0.84};
      }
      Patch& patch = pyr.level1[static_cast<std::size_t>(r) * cols1 + c];
      patch.size = P;
      patch.pixels.resize(static_cast<std::size_t>(P) * P * 3);
      for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) {
          const double s = pattern(tex, c * P + x, r * P + y, P);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = tex.base[static_cast<std::size_t>(ch)] + tint[static_cast<std::size_t>(ch)] +
                             tex.amp * s + noise.normal(0.0, 1.0) * dims.noise_sigma;
            patch.pixels[(static_cast<std::size_t>(y) * P + x) * 3 + ch] = quantize(v);
          }
        }
      }
    }
  }
  // Level 2 is the G-fold box downsample of the level-1 mosaic under it.
  const int G = dims.grid;
  pyr.level2.resize(static_cast<std::size_t>(dims.level2_rows) * dims.level2_cols);
  for (int i = 0; i < dims.level2_rows; ++i) {
    for (int j = 0; j < dims.level2_cols; ++j) {
      Patch& out = pyr.level2[static_cast<std::size_t>(i) * dims.level2_cols + j];
      out.size = P;
      out.pixels.resize(static_cast<std::size_t>(P) * P * 3);
      for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) {
          for (int ch = 0; ch < 3; ++ch) {
            double acc = 0.0;
            for (int dy = 0; dy < G; ++dy) {
              for (int dx = 0; dx < G; ++dx) {
                const int my = y * G + dy;  // mosaic pixel coordinates
                const int mx = x * G + dx;
                const Patch& src = pyr.level1_at(i * G + my / P, j * G + mx / P);
                acc += src.at(my % P, mx % P, ch);
              }
            }
            const double v = acc / (G * G) + noise.normal(0.0, 1.0) * dims.noise_sigma;
            out.pixels[(static_cast<std::size_t>(y) * P + x) * 3 + ch] = quantize(v);
          }
        }
      }
    }
  }
  return pyr;
}

// ---------------------------------------------------------------- split

Split split_corpus(const Corpus& corpus, const SplitFractions& f, std::uint64_t seed) {
  const std::size_t n = corpus.patients.size();
  if (n < 3) throw ConfigError("split_corpus: need at least 3 patients, got " + std::to_string(n));
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9 || f.train < 0 || f.val < 0 || f.test < 0) {
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(f.val * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(f.test * static_cast<double>(n) + 1e-9));
  const std::size_t n_train = n - n_val - n_test;
  Split s;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& id = corpus.patients[order[i]].patient.patient_id;
    if (i < n_train) {
      s.train.push_back(id);
    } else if (i < n_train + n_val) {
      s.val.push_back(id);
    } else {
      s.test.push_back(id);
    }
  }
  // manifests list patients in corpus order
  auto by_corpus_order = [&](std::vector<std::string>& ids) { std::sort(ids.begin(), ids.end()); };
  by_corpus_order(s.train);
  by_corpus_order(s.val);
  by_corpus_order(s.test);
  return s;
}

// ---------------------------------------------------------------- I/O

namespace {

constexpr char kPyramidMagic[4] = {'M', 'R', 'V', 'P'};
constexpr std::uint32_t kPyramidVersion = 1;

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << content;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated pyramid header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_pyramid(const fs::path& path, const SlidePyramid& pyr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kPyramidMagic, 4);
  put_u32(out, kPyramidVersion);
  const int P = pyr.level2.empty() ? (pyr.level1.empty() ? 0 : pyr.level1.front().size) : pyr.level2.front().size;
  put_u32(out, static_cast<std::uint32_t>(P));
  put_u32(out, static_cast<std::uint32_t>(pyr.grid));
  put_u32(out, static_cast<std::uint32_t>(pyr.level2_rows));
  put_u32(out, static_cast<std::uint32_t>(pyr.level2_cols));
  std::vector<unsigned char> buf;
  auto emit = [&](const Patch& p) {
    buf.resize(p.pixels.size());
    for (std::size_t i = 0; i < p.pixels.size(); ++i) {
      buf[i] = static_cast<unsigned char>(std::lround(p.pixels[i] * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  };
  for (const auto& p : pyr.level2) emit(p);
  for (const auto& p : pyr.level1) emit(p);
}

SlidePyramid read_pyramid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kPyramidMagic, 4) != 0) {
    throw FormatError("bad magic in " + path.string());
  }
  if (get_u32(in) != kPyramidVersion) throw FormatError("unsupported pyramid version");
  SlidePyramid pyr;
  const int P = static_cast<int>(get_u32(in));
  pyr.grid = static_cast<int>(get_u32(in));
  pyr.level2_rows = static_cast<int>(get_u32(in));
  pyr.level2_cols = static_cast<int>(get_u32(in));
  pyr.slide_id = path.parent_path().filename().string();
  std::vector<unsigned char> buf(static_cast<std::size_t>(P) * P * 3);
  auto take = [&]() {
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw FormatError("truncated pyramid payload in " + path.string());
    }
    Patch p;
    p.size = P;
    p.pixels.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) p.pixels[i] = static_cast<float>(buf[i] / 255.0);
    return p;
  };
  for (int i = 0; i < pyr.level2_rows * pyr.level2_cols; ++i) pyr.level2.push_back(take());
  for (int i = 0; i < pyr.level1_rows() * pyr.level1_cols(); ++i) pyr.level1.push_back(take());
  return pyr;
}

void write_corpus(const Corpus& corpus, const fs::path& dir, bool write_pixels) {
  fs::create_directories(dir / "patients");
  write_text(dir / "schema.json", json(corpus.schemas).dump(2));
  json manifest{{"seed", corpus.seed}, {"dims", corpus.dims}, {"patients", json::array()}};
  for (const auto& rec : corpus.patients) {
    const auto& p = rec.patient;
    manifest["patients"].push_back(p.patient_id);
    const fs::path pdir = dir / "patients" / p.patient_id;
    fs::create_directories(pdir);
    write_text(pdir / "report.txt", rec.report);
    json labels{{"organ_id", p.organ_id},
                {"tag_assignments", p.tag_assignments},
                {"dropped_tags", p.dropped_tags},
                {"slide_count", p.slide_count},
                {"render_seed", p.render_seed}};
    write_text(pdir / "labels.json", labels.dump(2));
    if (write_pixels) {
      for (int k = 0; k < p.slide_count; ++k) {
        const fs::path sdir = pdir / ("slide_" + std::to_string(k));
        fs::create_directories(sdir);
        write_pyramid(sdir / "pyramid.bin", render_slide(p, corpus.schema_of(p), k, corpus.dims));
      }
    }
  }
  write_text(dir / "corpus.json", manifest.dump(2));
}

Corpus read_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "corpus.json")) throw FormatError("no corpus at " + dir.string());
  Corpus corpus;
  corpus.schemas = json::parse(read_text(dir / "schema.json")).get<std::vector<OrganSchema>>();
  validate_schema_set(corpus.schemas);
  const json manifest = json::parse(read_text(dir / "corpus.json"));
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  corpus.dims = manifest.at("dims").get<SizeConfig>();
  for (const auto& id : manifest.at("patients")) {
    PatientRecord rec;
    rec.patient.patient_id = id.get<std::string>();
    const fs::path pdir = dir / "patients" / rec.patient.patient_id;
    const json labels = json::parse(read_text(pdir / "labels.json"));
    rec.patient.organ_id = labels.at("organ_id").get<int>();
    rec.patient.tag_assignments = labels.at("tag_assignments").get<std::map<std::string, int>>();
    rec.patient.dropped_tags = labels.at("dropped_tags").get<std::vector<std::string>>();
    rec.patient.slide_count = labels.at("slide_count").get<int>();
    rec.patient.render_seed = labels.at("render_seed").get<std::uint64_t>();
    rec.report = read_text(pdir / "report.txt");
    corpus.patients.push_back(std::move(rec));
  }
  return corpus;
}

SlidePyramid load_slide(const Corpus& corpus, const fs::path& dir, const SyntheticPatient& patient,
                        int slide_index) {
  const fs::path file =
      dir / "patients" / patient.patient_id / ("slide_" + std::to_string(slide_index)) / "pyramid.bin";
  if (!dir.empty() && fs::exists(file)) {
    SlidePyramid pyr = read_pyramid(file);
    pyr.slide_id = slide_id(patient.patient_id, slide_index);
    return pyr;
  }
  return render_slide(patient, corpus.schema_of(patient), slide_index, corpus.dims);
}

void write_split(const fs::path& dir, const Split& split) {
  fs::create_directories(dir);
  write_text(dir / "split_train.json", json(split.train).dump(2));
  write_text(dir / "split_val.json", json(split.val).dump(2));
  write_text(dir / "split_test.json", json(split.test).dump(2));
}

Split read_split(const fs::path& dir) {
  Split s;
  s.train = json::parse(read_text(dir / "split_train.json")).get<std::vector<std::string>>();
  s.val = json::parse(read_text(dir / "split_val.json")).get<std::vector<std::string>>();
  s.test = json::parse(read_text(dir / "split_test.json")).get<std::vector<std::string>>();
  return s;
}

}  // namespace wsr::corpus
