#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsr/corpus.hpp"
#include "wsr/nn.hpp"
#include "wsr/parsing.hpp"
#include "wsr/regions.hpp"
#include "wsr/rng.hpp"

namespace wsr::reportgen {

using ad::Tensor;

// ---------------------------------------------------------------- inputs

struct PatientFeatures {
  Tensor rows;                      // S x d_R
  std::vector<std::uint8_t> valid;  // per row

  int length() const { return rows.rows(); }
  int valid_count() const;
};

// Row-wise concatenation of the slides' region features, in slide order.
PatientFeatures aggregate_patient(const std::vector<regions::FeatureMatrix>& slides);
// Pads every item with zero rows (valid = 0) up to the batch max length.
std::vector<PatientFeatures> pad_batch(std::vector<PatientFeatures> items);

// ---------------------------------------------------------------- config

struct GeneratorConfig {
  int input_dim = 96;        // d_R
  int organ_hidden = 64;
  int tag_dim = 64;          // d' (also the width of G_d and H)
  int heads = 4;
  int gd_depth = 1;
  int ffn_hidden = 128;
  int tag_cls_hidden = 64;
  int lm_width = 128;
  int lm_blocks = 2;
  int lm_heads = 4;
  int lm_ffn = 256;
  int lm_max_positions = 64;
  int max_len = 24;          // decoded tokens per sentence, excluding BOS
  int beam_width = 1;
  double organ_threshold = 0.0;  // max softmax prob below this -> undetermined
  std::vector<int> tag_counts;   // K_j per organ

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct LossWeights {
  double organ = 0.2;
  double tag = 0.6;
  double sentence = 0.2;
};

double total_loss(double l_org, double l_tag, double l_sen, const LossWeights& w = {});
Tensor total_loss(const Tensor& l_org, const Tensor& l_tag, const Tensor& l_sen, const LossWeights& w = {});

// ---------------------------------------------------------------- modules

class TagDictionary {
 public:
  TagDictionary() = default;
  TagDictionary(const std::vector<int>& tag_counts, int dim, Rng& rng);

  int organs() const { return static_cast<int>(tags.size()); }
  const Tensor& organ(int j) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  std::vector<Tensor> tags;  // K_j x d'
};

struct TagBatch {
  std::vector<Tensor> tags;                       // K' x d' per item, zero pad rows
  std::vector<std::vector<std::uint8_t>> valid;   // K' per item
  std::vector<int> organ;
  std::vector<int> k;
};

// Organ index, or parsing::kUncertainOrgan when the top softmax probability
// falls below `threshold`.
int predict_organ(std::span<const double> organ_logits, double threshold = 0.0);

// Retrieves tags of the predicted organ per item and pads to K'. When a
// prediction is undetermined, `fallback` (ground truth) is used if given,
// otherwise ConfigError is thrown.
TagBatch select_tags(const std::vector<std::vector<double>>& organ_logits, const TagDictionary& dict,
                     double threshold = 0.0, const std::vector<int>* fallback = nullptr);
// Same, routed by explicit organ ids.
TagBatch select_tags_for(const std::vector<int>& organs, const TagDictionary& dict);

class OrganClassifier {
 public:
  OrganClassifier() = default;
  OrganClassifier(int in_dim, int hidden, int organs, Rng& rng);
  Tensor forward(const PatientFeatures& pf) const;  // 1 x n_o
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Linear fc1;
  nn::Linear fc2;
};

// G_d: post-LN decoder block over the visual stream.
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(int dim, int heads, int hidden, Rng& rng);
  Tensor forward(const Tensor& visual, std::span<const std::uint8_t> visual_valid, const Tensor& tags,
                 std::span<const std::uint8_t> tag_valid) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::MultiHeadAttention self_attn;
  nn::LayerNorm ln1;
  nn::MultiHeadAttention cross_attn;
  nn::LayerNorm ln2;
  nn::FeedForward ffn;
  nn::LayerNorm ln3;
};

// H: tag queries over the G_d output; no self-attention.
class TagPooler {
 public:
  TagPooler() = default;
  TagPooler(int dim, int heads, int hidden, Rng& rng);
  Tensor forward(const Tensor& tags, const Tensor& memory, std::span<const std::uint8_t> memory_valid,
                 nn::AttentionWeights* weights = nullptr) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::MultiHeadAttention cross_attn;
  nn::LayerNorm ln1;
  nn::FeedForward ffn;
  nn::LayerNorm ln2;
};

class TagFeatureExtractor {
 public:
  TagFeatureExtractor() = default;
  TagFeatureExtractor(int in_dim, int dim, int heads, int hidden, int depth, Rng& rng);
  // visual: S x d_R, tags: K' x d'. Returns K' x d'.
  Tensor forward(const Tensor& visual, std::span<const std::uint8_t> visual_valid, const Tensor& tags,
                 std::span<const std::uint8_t> tag_valid, nn::AttentionWeights* weights = nullptr) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Linear visual_proj;
  std::vector<DecoderBlock> gd;
  TagPooler h;
};

class TagClassifier {
 public:
  TagClassifier() = default;
  TagClassifier(int dim, int hidden, Rng& rng);
  Tensor forward(const Tensor& f) const;  // rows x 27
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Linear fc1;
  nn::Linear fc2;
};

// Pseudo self-attention: keys/values of condition rows (through the new
// cond_k/cond_v maps) are prepended to the text keys/values; the causal
// mask applies among text positions only. `text` is already normalised.
Tensor psa_attention(const Tensor& text, const Tensor& condition, const nn::MultiHeadAttention& base,
                     const nn::Linear& cond_k, const nn::Linear& cond_v,
                     nn::AttentionWeights* weights = nullptr);

class PsaBlock {
 public:
  PsaBlock() = default;
  PsaBlock(int width, int heads, int hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& condition, nn::AttentionWeights* weights = nullptr) const;
  void collect_base(nn::ParamList& out, const std::string& prefix) const;
  void collect_psa(nn::ParamList& out, const std::string& prefix) const;

  nn::LayerNorm ln1;
  nn::MultiHeadAttention attn;
  nn::Linear cond_k;  // W'_k, no bias
  nn::Linear cond_v;  // W'_v, no bias
  nn::LayerNorm ln2;
  nn::FeedForward ffn;
};

class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(int vocab, int width, int blocks, int heads, int hidden, int max_positions, Rng& rng);

  // ids: T input tokens (right-shifted). condition: C x width, C may be 0
  // (undefined tensor). Returns T x vocab logits.
  Tensor forward(std::span<const int> ids, const Tensor& condition) const;
  nn::ParamList base_parameters() const;
  nn::ParamList psa_parameters() const;
  void freeze_base();

  int vocab_size() const { return token_embedding.rows(); }
  int width() const { return token_embedding.cols(); }
  int max_positions() const { return position_embedding.rows(); }

  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<PsaBlock> blocks;
  nn::LayerNorm final_norm;
  nn::Linear output;
};

// Token-level cross-entropy sum of one sentence: input [BOS, w...] and
// target [w..., EOS]. Returns (sum, token count).
std::pair<Tensor, int> sentence_loss(const LanguageModel& lm, std::span<const int> sentence_ids,
                                     const Tensor& condition);

// Unconditioned language-model warm-up on token sequences ([BOS ... EOS]).
double warmup_language_model(LanguageModel& lm, const std::vector<std::vector<int>>& sequences, int epochs,
                             double lr, Rng& rng);

struct DecodeOptions {
  int max_len = 24;
  int beam_width = 1;
};

// Greedy (beam 1) or beam decoding from BOS; never emits PAD or BOS.
std::vector<int> decode(const LanguageModel& lm, const Tensor& condition, const DecodeOptions& options);

// ---------------------------------------------------------------- generator

struct Targets {
  int organ = 0;
  std::vector<std::uint8_t> tag_mask;          // K of the true organ
  std::vector<int> tag_classes;                // ignored where the mask is 0
  std::vector<std::vector<int>> sentence_ids;  // [BOS ... EOS]; ignored where the mask is 0
};

struct LossParts {
  Tensor organ;
  Tensor tag;
  Tensor sentence;
  Tensor total;
  int tag_count = 0;
  int token_count = 0;
};

struct GenerationResult {
  bool undetermined = false;
  int organ = parsing::kUncertainOrgan;
  std::vector<double> organ_logits;
  std::vector<std::vector<double>> tag_logits;      // K x 27
  std::vector<int> tag_predictions;                 // argmax per tag
  std::vector<std::vector<int>> sentence_ids;       // decoded tokens (no BOS/EOS)
  std::vector<std::string> sentences;
  std::vector<nn::AttentionWeights> attention;      // per tag: 1 x S
  std::string report;                               // "organ: name" then one line per tag
};

class ReportGenerator {
 public:
  ReportGenerator() = default;
  ReportGenerator(const GeneratorConfig& config, int vocab_size, Rng& rng);

  const GeneratorConfig& config() const { return config_; }

  nn::ParamList parameters() const;  // every parameter, canonical names
  // Base LM params frozen; everything else trainable.
  void apply_freeze_policy();
  nn::ParamList trainable_parameters() const;

  // Per-tag features for one item (no batching).
  Tensor tag_features(const PatientFeatures& pf, const Tensor& tags, std::span<const std::uint8_t> tag_valid,
                      nn::AttentionWeights* weights = nullptr) const;
  Tensor condition(const Tensor& tag_feature_row) const;  // 1 x lm_width

  OrganClassifier organ_cls;
  TagDictionary dictionary;
  TagFeatureExtractor fte;
  TagClassifier tag_cls;
  nn::Linear cond_proj;
  LanguageModel lm;

 private:
  GeneratorConfig config_;
};

// Losses over a (possibly padded) batch. Tag routing uses the ground-truth
// organ. L_tag averages over present tags, L_sen over target tokens of
// present tags; L_org over items.
LossParts compute_losses(const ReportGenerator& gen, const std::vector<PatientFeatures>& batch,
                         const TagBatch& tags, const std::vector<Targets>& targets,
                         const LossWeights& weights = {});
// Single-item convenience: routes by targets.organ.
LossParts compute_losses(const ReportGenerator& gen, const PatientFeatures& pf, const Targets& targets,
                         const LossWeights& weights = {});

Targets make_targets(const corpus::PatientRecord& record, const corpus::OrganSchema& schema,
                     const std::vector<corpus::OrganSchema>& schemas, const parsing::Vocab& vocab);

GenerationResult generate(const ReportGenerator& gen, const PatientFeatures& pf,
                          const std::vector<corpus::OrganSchema>& schemas, const parsing::Vocab& vocab,
                          const DecodeOptions& options);

// Tag predictions only (no decoding), routed by argmax organ.
std::vector<int> predict_tags(const ReportGenerator& gen, const PatientFeatures& pf, int organ);

}  // namespace wsr::reportgen
