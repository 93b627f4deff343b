#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace wsr::eval {

using Tokens = std::vector<std::string>;

// ---------------------------------------------------------------- NLG

// Modified n-gram precision, unsmoothed; n in 1..4.
double bleu_n(const Tokens& candidate, const Tokens& reference, int n);

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.0);
int lcs_length(const Tokens& a, const Tokens& b);

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
  bool exact = true;  // false when the search budget ran out and the greedy alignment was used
};

// Maximum exact-unigram alignment with the fewest chunks.
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference, long search_budget = 200000);
double meteor_score(int matches, int candidate_len, int reference_len, int chunks);
double meteor(const Tokens& candidate, const Tokens& reference);

// ---------------------------------------------------------------- clinical efficacy

struct CeMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  int evaluated = 0;
};

// Positions with mask 0 are ignored. Macro-F1 averages over classes present
// in the unmasked ground truth.
CeMetrics ce_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                     const std::vector<std::uint8_t>& mask);

// Severity-ordered classes: a patient gets the max slide class.
int patient_from_slides(const std::vector<int>& slide_predictions);

// ---------------------------------------------------------------- probe

struct ProbeConfig {
  int hidden = 32;
  int epochs = 300;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<int> predictions;  // per test row
};

// Two linear layers then softmax, trained full-batch on standardised copies
// of the train features. Inputs are never modified.
ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                         const ProbeConfig& config = {});

// ---------------------------------------------------------------- reports

struct ReportScores {
  std::string patient_id;
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge_l = 0.0;
  int tag_correct = 0;
  int tag_total = 0;
  bool organ_correct = false;
};

struct EvalItem {
  std::string patient_id;
  Tokens candidate;
  Tokens reference;
  std::vector<int> predicted_tags;
  std::vector<int> true_tags;
  std::vector<std::uint8_t> tag_mask;
  int predicted_organ = -1;
  int true_organ = -1;
};

struct MetricReport {
  std::array<double, 4> bleu{};
  double meteor = 0.0;
  double rouge_l = 0.0;
  double ce_accuracy = 0.0;
  double ce_f1_macro = 0.0;
  double organ_accuracy = 0.0;
  int n_items = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

ReportScores score_item(const EvalItem& item, double rouge_beta = 1.0);

// Corpus scores are means of per-report scores; CE metrics pool all tags.
MetricReport evaluate(const std::vector<EvalItem>& items, std::vector<ReportScores>* per_item = nullptr,
                      double rouge_beta = 1.0);

void write_scores_csv(std::ostream& os, const std::vector<ReportScores>& scores);

}  // namespace wsr::eval
