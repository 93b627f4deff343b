#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace wsr::corpus {

inline constexpr int kNumInnerClasses = 27;
inline constexpr int kUncertainClass = 26;

// The 27 inner-class names shared by all tags; the last entry is "uncertain".
const std::vector<std::string>& inner_class_names();
int inner_class_index(const std::string& name);

struct OrganSchema {
  int organ_id = 0;
  std::string organ_name;
  std::vector<std::string> keywords;  // organ keywords searched in the report header
  std::string report_header;
  std::vector<std::string> key_tags;
  // Per tag: class names from inner_class_names(), and one sentence
  // template per class (same order). Templates are complete sentences
  // without the terminating period.
  std::vector<std::vector<std::string>> inner_classes;
  std::vector<std::vector<std::string>> sentence_templates;

  int tag_count() const { return static_cast<int>(key_tags.size()); }
  std::vector<int> class_indices(int tag) const;
  const std::string& template_for(int tag, int global_class) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const OrganSchema& s);
void from_json(const nlohmann::json& j, OrganSchema& s);

// Two-organ default: kidney (4 tags) and colon (3 tags), 26 named classes.
std::vector<OrganSchema> default_schemas();
void validate_schema_set(const std::vector<OrganSchema>& schemas);

struct SizeConfig {
  int patch_size = 32;
  int grid = 4;  // level-1 patches per level-2 patch along each axis
  int level2_rows = 2;
  int level2_cols = 2;
  double noise_sigma = 0.05;
  int min_slides = 1;
  int max_slides = 3;
  double drop_prob = 0.15;
  double uncertain_prob = 0.05;

  void validate() const;
};

void to_json(nlohmann::json& j, const SizeConfig& d);
void from_json(const nlohmann::json& j, SizeConfig& d);

struct SyntheticPatient {
  std::string patient_id;
  int organ_id = 0;
  int slide_count = 1;
  std::map<std::string, int> tag_assignments;  // tag -> global inner class
  std::vector<std::string> dropped_tags;
  std::uint64_t render_seed = 0;
};

void to_json(nlohmann::json& j, const SyntheticPatient& p);
void from_json(const nlohmann::json& j, SyntheticPatient& p);

// H x W x 3, values in [0, 1], quantized to 1/255 steps.
struct Patch {
  int size = 0;
  std::vector<float> pixels;

  float at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + ch];
  }
};

struct SlidePyramid {
  std::string slide_id;
  int grid = 4;
  int level2_rows = 0;
  int level2_cols = 0;
  std::vector<Patch> level2;  // level2_rows x level2_cols, row-major
  std::vector<Patch> level1;  // (level2_rows*grid) x (level2_cols*grid), row-major

  int level1_rows() const { return level2_rows * grid; }
  int level1_cols() const { return level2_cols * grid; }
  const Patch& level1_at(int r, int c) const {
    return level1[static_cast<std::size_t>(r) * level1_cols() + c];
  }
};

struct PatientRecord {
  SyntheticPatient patient;
  std::string report;
};

struct Corpus {
  std::vector<OrganSchema> schemas;
  SizeConfig dims;
  std::uint64_t seed = 0;
  std::vector<PatientRecord> patients;

  const OrganSchema& schema_of(const SyntheticPatient& p) const;
};

std::string slide_id(const std::string& patient_id, int slide_index);

Corpus generate_corpus(const std::vector<OrganSchema>& schemas, int n_patients, std::uint64_t seed,
                       const SizeConfig& dims);

std::string build_report(const SyntheticPatient& patient, const OrganSchema& schema);

// Region r of slide s displays key tag (r + s) mod K; dropped tags render
// as plain organ background.
SlidePyramid render_slide(const SyntheticPatient& patient, const OrganSchema& schema,
                          int slide_index, const SizeConfig& dims);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

// Patient-level partition: floor each share, remainder goes to train.
Split split_corpus(const Corpus& corpus, const SplitFractions& fractions, std::uint64_t seed);

// Directory tree: schema.json, corpus.json, patients/<id>/{report.txt,
// labels.json, slide_<k>/pyramid.bin}.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir, bool write_pixels);
Corpus read_corpus(const std::filesystem::path& dir);
// Reads the stored pyramid if present, otherwise renders it.
SlidePyramid load_slide(const Corpus& corpus, const std::filesystem::path& dir,
                        const SyntheticPatient& patient, int slide_index);

void write_pyramid(const std::filesystem::path& path, const SlidePyramid& pyramid);
SlidePyramid read_pyramid(const std::filesystem::path& path);

void write_split(const std::filesystem::path& dir, const Split& split);
Split read_split(const std::filesystem::path& dir);

}  // namespace wsr::corpus
