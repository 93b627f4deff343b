#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsr/corpus.hpp"
#include "wsr/dino.hpp"
#include "wsr/eval.hpp"
#include "wsr/mrvit.hpp"
#include "wsr/nn.hpp"
#include "wsr/parsing.hpp"
#include "wsr/regions.hpp"
#include "wsr/reportgen.hpp"

namespace wsr::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

struct Stage1Config {
  int epochs = 500;
  int batch = 64;
  dino::OptConfig opt;  // sgd, lr 0.1
  int backbone_dim = 64;
  std::vector<int> backbone_channels{8, 16};
  mrvit::ViTConfig vit_r;
  mrvit::ViTConfig vit_s;
  dino::DinoConfig dino_r;
  dino::DinoConfig dino_s;
  int q = 1;
  int l = 2;
  // Re-assemble regions (fresh drop slot) every time an item is drawn.
  bool resample_regions = true;
};

struct Stage2Config {
  int epochs = 300;
  int batch = 1;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double clip_grad = 1.0;
  bool cosine_lr = true;  // per-epoch cosine decay of lr towards 0
  reportgen::LossWeights weights;
  reportgen::GeneratorConfig generator;
  int lm_warmup_epochs = 20;
  double lm_warmup_lr = 3e-3;
  bool no_tag_cls = false;
};

struct RunConfig {
  std::string profile = "full";
  std::uint64_t seed = 0;
  int n_patients = 200;
  corpus::SizeConfig dims;
  corpus::SplitFractions split;
  Stage1Config stage1;
  Stage2Config stage2;
  eval::ProbeConfig probe;
  double rouge_beta = 1.0;
  int one_shot_max_len = 64;  // ablation scenario 1 decode budget

  void validate() const;
};

RunConfig full_defaults();
RunConfig desk_profile();

void to_json(nlohmann::json& j, const RunConfig& c);
// Starts from the profile named in `profile` (full when absent) and applies
// every key present.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const fs::path& path);
void save_config(const fs::path& path, const RunConfig& c);

// Hex digest of the canonical JSON dump.
std::string fingerprint(const RunConfig& c);

// ---------------------------------------------------------------- checkpoint

struct StoredParam {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
};

struct Checkpoint {
  std::string module_id;
  std::string fingerprint;
  long step = 0;
  std::map<std::string, std::string> rng_states;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<StoredParam> params;
};

// "MRCK", u32 version, u64 header length, JSON header, then every
// parameter's values as little-endian float64 in header order.
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

std::vector<StoredParam> capture(const nn::ParamList& params);
// Copies stored values by name; throws on a missing name or shape mismatch.
void restore(const nn::ParamList& params, const std::vector<StoredParam>& stored);

// ---------------------------------------------------------------- layout

struct Layout {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path split() const { return root / "split"; }
  fs::path stage1() const { return root / "stage1"; }
  fs::path features() const { return root / "features"; }
  fs::path manifest() const { return features() / "manifest.json"; }
  fs::path stage2() const { return root / "stage2"; }
  fs::path reports() const { return root / "reports"; }
  fs::path eval() const { return root / "eval"; }
  fs::path ablation() const { return root / "ablation"; }
  fs::path attention() const { return root / "attention"; }
};

// ---------------------------------------------------------------- stages

void synth(const RunConfig& c, const Layout& out);
corpus::Split make_split(const RunConfig& c, const Layout& out);

struct Encoders {
  std::unique_ptr<mrvit::VisionTransformer> vit_r;
  std::unique_ptr<mrvit::VisionTransformer> vit_s;
};

// MR-ViT_R by self-distillation over region tokens, F_R extraction into the
// feature store, then MR-ViT_S over sampled F'_R. Teacher weights are saved.
void train_stage1(const RunConfig& c, const Layout& out);
void train_vit_r(const RunConfig& c, const Layout& out);
void extract_features(const RunConfig& c, const Layout& out);
void train_vit_s(const RunConfig& c, const Layout& out);

std::unique_ptr<mrvit::VisionTransformer> load_encoder(const fs::path& path, const mrvit::ViTConfig& config);

struct PatientData {
  std::string patient_id;
  int organ = 0;
  reportgen::PatientFeatures features;
  reportgen::Targets targets;
  std::vector<std::string> reference;  // per tag; empty where absent
  std::vector<int> slide_rows;         // feature rows contributed by each slide
  const corpus::PatientRecord* record = nullptr;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_tag_accuracy = 0.0;
  double val_organ_accuracy = 0.0;
  double val_sentence_loss = 0.0;
};

// Argmax of validation tag accuracy (ties: later epoch); with no_tag_cls,
// minimum validation L_sen.
int select_epoch(const std::vector<EpochLog>& logs, bool no_tag_cls);

struct Stage2Result {
  std::vector<EpochLog> logs;
  int best_epoch = 0;
};

Stage2Result train_stage2(const RunConfig& c, const Layout& out);

// Trains a generator on prepared data. Writes nothing; `logs` gets one entry
// per epoch and the returned model carries the selected epoch's weights.
// Called whenever the selected epoch changes, with the current weights.
using BestCallback = std::function<void(const reportgen::ReportGenerator&, int epoch)>;

reportgen::ReportGenerator fit_generator(const RunConfig& c, const reportgen::GeneratorConfig& generator,
                                         const std::vector<PatientData>& train, const std::vector<PatientData>& val,
                                         const parsing::Vocab& vocab, Stage2Result& result,
                                         std::ostream* csv = nullptr, const BestCallback& on_best = {});

struct Prepared {
  corpus::Corpus corpus;
  corpus::Split split;
  parsing::Vocab vocab;
  std::vector<PatientData> train, val, test;
};

// Loads corpus, split and region features; builds the vocabulary from the
// training reports.
Prepared prepare(const Layout& out);

struct Generated {
  std::string patient_id;
  reportgen::GenerationResult result;
};

std::vector<Generated> generate_reports(const RunConfig& c, const Layout& out);

struct Evaluation {
  eval::MetricReport metrics;
  std::vector<eval::ReportScores> per_patient;
  double keyword_consistency = 0.0;  // generated inner-class keyword == tag argmax
};

// Scores generated reports against the test split; throws ConfigError when
// counts differ.
Evaluation evaluate_reports(const RunConfig& c, const Layout& out);

struct AblationRow {
  int scenario = 0;
  std::string name;
  eval::MetricReport metrics;
};

// Scenario ids: 1 = mean-pooled features to a one-shot LM report, 2 =
// slide-level F_S through the tag pipeline, 3 = full pipeline.
std::vector<AblationRow> run_ablation(const RunConfig& c, const Layout& out, const std::vector<int>& scenarios);

void export_attention(const RunConfig& c, const Layout& out);

// synth -> split -> stage 1 -> stage 2 -> generate -> evaluate.
Evaluation run_pipeline(const RunConfig& c, const Layout& out);

// Drops special tokens and attaches punctuation tokens; used for scoring.
eval::Tokens score_tokens(const std::string& text);

}  // namespace wsr::harness
