#include "wsr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <unordered_map>

#include "wsr/errors.hpp"
#include "wsr/nn.hpp"
#include "wsr/optim.hpp"
#include "wsr/rng.hpp"
#include "wsr/tensor.hpp"

namespace wsr::eval {

namespace {

std::map<Tokens, int> ngram_counts(const Tokens& t, int n) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i) + n)];
  }
  return out;
}

}  // namespace

double bleu_n(const Tokens& candidate, const Tokens& reference, int n) {
  if (n < 1 || n > 4) throw ConfigError("bleu order must be in 1..4");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto cand = ngram_counts(candidate, k);
    const auto ref = ngram_counts(reference, k);
    long clipped = 0;
    long total = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      const auto it = ref.find(gram);
      if (it != ref.end()) clipped += std::min(count, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / n);
}

int lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (beta <= 0.0) throw ConfigError("rouge beta must be positive");
  if (candidate.empty() || reference.empty()) return 0.0;
  const int lcs = lcs_length(candidate, reference);
  if (lcs == 0) return 0.0;
  const double r = static_cast<double>(lcs) / static_cast<double>(reference.size());
  const double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

// Depth-first search over candidate positions. Each position is either
// skipped or linked to an unused reference occurrence of the same token;
// per-token skips are limited so the alignment always has the maximum
// match count. Chunks = matches - adjacent links, so maximising adjacent
// links minimises chunks.
namespace {

class MeteorSearch {
 public:
  MeteorSearch(const Tokens& cand, const Tokens& ref, long budget) : cand_(cand), ref_(ref), budget_(budget) {
    std::map<std::string, int> ids;
    for (const auto& t : cand) ids.emplace(t, static_cast<int>(ids.size()));
    for (const auto& t : ref) ids.emplace(t, static_cast<int>(ids.size()));
    for (const auto& t : cand) cid_.push_back(ids[t]);
    for (const auto& t : ref) rid_.push_back(ids[t]);
    const std::size_t types = ids.size();
    std::vector<int> cc(types, 0), rc(types, 0);
    for (int t : cid_) ++cc[static_cast<std::size_t>(t)];
    for (int t : rid_) ++rc[static_cast<std::size_t>(t)];
    allowed_skips_.resize(types);
    matches = 0;
    for (std::size_t t = 0; t < types; ++t) {
      const int m = std::min(cc[t], rc[t]);
      matches += m;
      allowed_skips_[t] = cc[t] - m;
    }
    skips_.assign(types, 0);
    used_.assign(ref.size(), 0);
  }

  int matches = 0;

  // Returns max adjacent links, or -1 when the budget ran out.
  int solve() { return visit(0, -2); }

  int greedy_links() const {
    std::vector<std::uint8_t> used(ref_.size(), 0);
    std::vector<int> skips(allowed_skips_.size(), 0);
    std::vector<int> remaining_matches(allowed_skips_.size(), 0);
    for (std::size_t i = 0; i < cand_.size(); ++i) ++remaining_matches[static_cast<std::size_t>(cid_[i])];
    for (std::size_t t = 0; t < remaining_matches.size(); ++t) remaining_matches[t] -= allowed_skips_[t];
    int prev = -2;
    int links = 0;
    for (std::size_t i = 0; i < cand_.size(); ++i) {
      const auto t = static_cast<std::size_t>(cid_[i]);
      int pick = -1;
      if (remaining_matches[t] > 0) {
        if (prev >= -1 && prev + 1 < static_cast<int>(ref_.size()) && used[static_cast<std::size_t>(prev + 1)] == 0 &&
            rid_[static_cast<std::size_t>(prev + 1)] == cid_[i]) {
          pick = prev + 1;
        } else {
          for (std::size_t j = 0; j < ref_.size(); ++j) {
            if (used[j] == 0 && rid_[j] == cid_[i]) {
              pick = static_cast<int>(j);
              break;
            }
          }
        }
      }
      if (pick < 0) {
        ++skips[t];
        prev = -2;
        continue;
      }
      if (prev >= 0 && pick == prev + 1) ++links;
      used[static_cast<std::size_t>(pick)] = 1;
      --remaining_matches[t];
      prev = pick;
    }
    return links;
  }

 private:
  int visit(std::size_t i, int prev) {
    if (i == cand_.size()) return 0;
    if (--budget_ < 0) return -1;
    std::string key(reinterpret_cast<const char*>(used_.data()), used_.size());
    key.append(reinterpret_cast<const char*>(&i), sizeof(i));
    key.append(reinterpret_cast<const char*>(&prev), sizeof(prev));
    if (const auto it = memo_.find(key); it != memo_.end()) return it->second;

    const auto t = static_cast<std::size_t>(cid_[i]);
    int best = -1;
    bool aborted = false;
    if (skips_[t] < allowed_skips_[t]) {
      ++skips_[t];
      const int v = visit(i + 1, -2);
      --skips_[t];
      if (v < 0) aborted = true;
      best = std::max(best, v);
    }
    for (std::size_t j = 0; j < ref_.size() && !aborted; ++j) {
      if (used_[j] != 0 || rid_[j] != cid_[i]) continue;
      used_[j] = 1;
      const int v = visit(i + 1, static_cast<int>(j));
      used_[j] = 0;
      if (v < 0) {
        aborted = true;
        break;
      }
      best = std::max(best, v + (prev >= 0 && static_cast<int>(j) == prev + 1 ? 1 : 0));
    }
    if (aborted) return -1;
    memo_.emplace(std::move(key), best);
    return best;
  }

  const Tokens& cand_;
  const Tokens& ref_;
  long budget_;
  std::vector<int> cid_, rid_;
  std::vector<int> allowed_skips_, skips_;
  std::vector<std::uint8_t> used_;
  std::unordered_map<std::string, int> memo_;
};

}  // namespace

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference, long search_budget) {
  MeteorSearch search(candidate, reference, search_budget);
  MeteorAlignment a;
  a.matches = search.matches;
  if (a.matches == 0) return a;
  int links = search.solve();
  if (links < 0) {
    links = search.greedy_links();
    a.exact = false;
  }
  a.chunks = a.matches - links;
  return a;
}

double meteor_score(int matches, int candidate_len, int reference_len, int chunks) {
  if (matches == 0) return 0.0;
  const double m = matches;
  const double p = m / candidate_len;
  const double r = m / reference_len;
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  return f_mean * (1.0 - penalty);
}

double meteor(const Tokens& candidate, const Tokens& reference) {
  const auto a = meteor_align(candidate, reference);
  return meteor_score(a.matches, static_cast<int>(candidate.size()), static_cast<int>(reference.size()), a.chunks);
}

CeMetrics ce_metrics(const std::vector<int>& predicted, const std::vector<int>& truth,
                     const std::vector<std::uint8_t>& mask) {
  if (predicted.size() != truth.size() || mask.size() != truth.size()) {
    throw ShapeError("ce_metrics: predicted/truth/mask lengths differ");
  }
  std::map<int, int> tp, fp, fn;
  std::set<int> present;
  CeMetrics out;
  int correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (mask[i] == 0) continue;
    ++out.evaluated;
    present.insert(truth[i]);
    if (predicted[i] == truth[i]) {
      ++correct;
      ++tp[truth[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  if (out.evaluated == 0) throw ConfigError("no evaluable tags");
  out.accuracy = static_cast<double>(correct) / out.evaluated;
  double f1_sum = 0.0;
  for (int c : present) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    f1_sum += 2.0 * tp[c] / denom;
  }
  out.macro_f1 = f1_sum / static_cast<double>(present.size());
  return out;
}

int patient_from_slides(const std::vector<int>& slide_predictions) {
  if (slide_predictions.empty()) throw ConfigError("patient has no slide predictions");
  return *std::max_element(slide_predictions.begin(), slide_predictions.end());
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"hidden", c.hidden}, {"epochs", c.epochs}, {"lr", c.lr}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c.hidden = j.value("hidden", c.hidden);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
}

ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<int>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<int>& test_y,
                         const ProbeConfig& config) {
  if (train_x.empty() || test_x.empty()) throw ConfigError("linear probe needs train and test rows");
  if (train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw ShapeError("linear probe: feature/label counts differ");
  }
  const std::size_t dim = train_x.front().size();
  int classes = 0;
  for (int y : train_y) classes = std::max(classes, y + 1);
  for (int y : test_y) classes = std::max(classes, y + 1);
  if (classes < 2) classes = 2;

  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (const auto& row : train_x) {
    if (row.size() != dim) throw ShapeError("linear probe: ragged features");
    for (std::size_t c = 0; c < dim; ++c) mean[c] += row[c];
  }
  for (double& m : mean) m /= static_cast<double>(train_x.size());
  for (const auto& row : train_x) {
    for (std::size_t c = 0; c < dim; ++c) sd[c] += (row[c] - mean[c]) * (row[c] - mean[c]);
  }
  for (double& s : sd) s = std::sqrt(s / static_cast<double>(train_x.size())) + 1e-8;

  auto standardise = [&](const std::vector<std::vector<double>>& x) {
    std::vector<double> v;
    v.reserve(x.size() * dim);
    for (const auto& row : x) {
      if (row.size() != dim) throw ShapeError("linear probe: ragged features");
      for (std::size_t c = 0; c < dim; ++c) v.push_back((row[c] - mean[c]) / sd[c]);
    }
    return ad::Tensor::from(static_cast<int>(x.size()), static_cast<int>(dim), std::move(v));
  };
  const ad::Tensor xtr = standardise(train_x);
  const ad::Tensor xte = standardise(test_x);

  Rng rng(config.seed);
  nn::Linear fc1(static_cast<int>(dim), config.hidden, rng);
  nn::Linear fc2(config.hidden, classes, rng);
  nn::ParamList params;
  fc1.collect(params, "fc1");
  fc2.collect(params, "fc2");
  optim::AdamW opt(nn::trainable_tensors(params), {config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  const double inv_n = 1.0 / static_cast<double>(train_x.size());
  for (int e = 0; e < config.epochs; ++e) {
    nn::zero_grads(params);
    const ad::Tensor loss = ad::scale(ad::cross_entropy_sum(fc2.forward(fc1.forward(xtr)), train_y), inv_n);
    loss.backward();
    opt.step();
  }

  ProbeResult out;
  ad::NoGradGuard guard;
  const ad::Tensor logits = fc2.forward(fc1.forward(xte));
  int correct = 0;
  for (int r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out.predictions.push_back(best);
    if (best == test_y[static_cast<std::size_t>(r)]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(test_x.size());
  return out;
}

void MetricReport::validate() const {
  if (n_items < 1) throw ConfigError("metric report needs at least one item");
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (double b : bleu) {
    if (!in_unit(b)) throw ConfigError("bleu out of [0,1]");
  }
  if (!in_unit(meteor) || !in_unit(rouge_l) || !in_unit(ce_accuracy) || !in_unit(ce_f1_macro) ||
      !in_unit(organ_accuracy)) {
    throw ConfigError("metric out of [0,1]");
  }
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"bleu_1", r.bleu[0]},      {"bleu_2", r.bleu[1]},
       {"bleu_3", r.bleu[2]},      {"bleu_4", r.bleu[3]},
       {"meteor", r.meteor},       {"rouge_l", r.rouge_l},
       {"ce_accuracy", r.ce_accuracy}, {"ce_f1_macro", r.ce_f1_macro},
       {"organ_accuracy", r.organ_accuracy}, {"n_items", r.n_items}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  for (int n = 0; n < 4; ++n) r.bleu[static_cast<std::size_t>(n)] = j.at("bleu_" + std::to_string(n + 1)).get<double>();
  r.meteor = j.at("meteor").get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.ce_accuracy = j.at("ce_accuracy").get<double>();
  r.ce_f1_macro = j.at("ce_f1_macro").get<double>();
  r.organ_accuracy = j.value("organ_accuracy", 0.0);
  r.n_items = j.at("n_items").get<int>();
}

ReportScores score_item(const EvalItem& item, double rouge_beta) {
  ReportScores s;
  s.patient_id = item.patient_id;
  for (int n = 1; n <= 4; ++n) s.bleu[static_cast<std::size_t>(n - 1)] = bleu_n(item.candidate, item.reference, n);
  s.meteor = meteor(item.candidate, item.reference);
  s.rouge_l = rouge_l(item.candidate, item.reference, rouge_beta);
  if (item.predicted_tags.size() != item.true_tags.size() || item.tag_mask.size() != item.true_tags.size()) {
    throw ShapeError("tag vectors differ in length for " + item.patient_id);
  }
  for (std::size_t i = 0; i < item.true_tags.size(); ++i) {
    if (item.tag_mask[i] == 0) continue;
    ++s.tag_total;
    if (item.predicted_tags[i] == item.true_tags[i]) ++s.tag_correct;
  }
  s.organ_correct = item.predicted_organ == item.true_organ;
  return s;
}

MetricReport evaluate(const std::vector<EvalItem>& items, std::vector<ReportScores>* per_item, double rouge_beta) {
  if (items.empty()) throw ConfigError("nothing to evaluate");
  MetricReport r;
  std::vector<int> pred, truth;
  std::vector<std::uint8_t> mask;
  int organ_correct = 0;
  for (const auto& item : items) {
    const auto s = score_item(item, rouge_beta);
    for (std::size_t n = 0; n < 4; ++n) r.bleu[n] += s.bleu[n];
    r.meteor += s.meteor;
    r.rouge_l += s.rouge_l;
    if (s.organ_correct) ++organ_correct;
    pred.insert(pred.end(), item.predicted_tags.begin(), item.predicted_tags.end());
    truth.insert(truth.end(), item.true_tags.begin(), item.true_tags.end());
    mask.insert(mask.end(), item.tag_mask.begin(), item.tag_mask.end());
    if (per_item != nullptr) per_item->push_back(s);
  }
  const double n = static_cast<double>(items.size());
  for (double& b : r.bleu) b /= n;
  r.meteor /= n;
  r.rouge_l /= n;
  r.organ_accuracy = organ_correct / n;
  const auto ce = ce_metrics(pred, truth, mask);
  r.ce_accuracy = ce.accuracy;
  r.ce_f1_macro = ce.macro_f1;
  r.n_items = static_cast<int>(items.size());
  return r;
}

void write_scores_csv(std::ostream& os, const std::vector<ReportScores>& scores) {
  os << "patient_id,bleu_1,bleu_2,bleu_3,bleu_4,meteor,rouge_l,tag_correct,tag_total,organ_correct\n";
  os << std::setprecision(17);
  for (const auto& s : scores) {
    os << s.patient_id;
    for (double b : s.bleu) os << ',' << b;
    os << ',' << s.meteor << ',' << s.rouge_l << ',' << s.tag_correct << ',' << s.tag_total << ','
       << (s.organ_correct ? 1 : 0) << '\n';
  }
}

}  // namespace wsr::eval
