#include "wsr/reportgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wsr/errors.hpp"
#include "wsr/optim.hpp"
#include "wsr/text.hpp"

namespace wsr::reportgen {

using parsing::Vocab;

// ---------------------------------------------------------------- inputs

int PatientFeatures::valid_count() const {
  return static_cast<int>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

PatientFeatures aggregate_patient(const std::vector<regions::FeatureMatrix>& slides) {
  if (slides.empty()) throw ConfigError("aggregate_patient: no slides");
  const int dim = slides.front().dim;
  int rows = 0;
  std::vector<double> values;
  for (const auto& s : slides) {
    if (s.dim != dim) {
      throw ShapeError("aggregate_patient: slide " + s.slide_id + " has width " + std::to_string(s.dim) +
                       ", expected " + std::to_string(dim));
    }
    values.insert(values.end(), s.values.begin(), s.values.end());
    rows += s.rows;
  }
  if (rows == 0) throw ShapeError("aggregate_patient: slides contain no regions");
  PatientFeatures pf;
  pf.rows = Tensor::from(rows, dim, std::move(values));
  pf.valid.assign(static_cast<std::size_t>(rows), 1);
  return pf;
}

std::vector<PatientFeatures> pad_batch(std::vector<PatientFeatures> items) {
  int len = 0;
  for (const auto& it : items) len = std::max(len, it.length());
  for (auto& it : items) {
    const int missing = len - it.length();
    if (missing == 0) continue;
    const std::vector<Tensor> parts{it.rows, Tensor::zeros(missing, it.rows.cols())};
    it.rows = ad::concat_rows(parts).detach();
    it.valid.resize(static_cast<std::size_t>(len), 0);
  }
  return items;
}

// ---------------------------------------------------------------- config

void GeneratorConfig::validate() const {
  for (int v : {input_dim, organ_hidden, tag_dim, heads, gd_depth, ffn_hidden, tag_cls_hidden, lm_width, lm_blocks,
                lm_heads, lm_ffn, lm_max_positions, max_len, beam_width}) {
    if (v < 1) throw ConfigError("generator config has a non-positive dimension");
  }
  if (tag_dim % heads != 0 || lm_width % lm_heads != 0) throw ConfigError("generator widths not divisible by heads");
  if (max_len + 1 > lm_max_positions) throw ConfigError("max_len exceeds the language model positions");
  if (tag_counts.empty()) throw ConfigError("generator config lists no organs");
  for (int k : tag_counts) {
    if (k < 1) throw ConfigError("organ with no key tags");
  }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"organ_hidden", c.organ_hidden},
                     {"tag_dim", c.tag_dim},
                     {"heads", c.heads},
                     {"gd_depth", c.gd_depth},
                     {"ffn_hidden", c.ffn_hidden},
                     {"tag_cls_hidden", c.tag_cls_hidden},
                     {"lm_width", c.lm_width},
                     {"lm_blocks", c.lm_blocks},
                     {"lm_heads", c.lm_heads},
                     {"lm_ffn", c.lm_ffn},
                     {"lm_max_positions", c.lm_max_positions},
                     {"max_len", c.max_len},
                     {"beam_width", c.beam_width},
                     {"organ_threshold", c.organ_threshold},
                     {"tag_counts", c.tag_counts}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.organ_hidden = j.value("organ_hidden", c.organ_hidden);
  c.tag_dim = j.value("tag_dim", c.tag_dim);
  c.heads = j.value("heads", c.heads);
  c.gd_depth = j.value("gd_depth", c.gd_depth);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.tag_cls_hidden = j.value("tag_cls_hidden", c.tag_cls_hidden);
  c.lm_width = j.value("lm_width", c.lm_width);
  c.lm_blocks = j.value("lm_blocks", c.lm_blocks);
  c.lm_heads = j.value("lm_heads", c.lm_heads);
  c.lm_ffn = j.value("lm_ffn", c.lm_ffn);
  c.lm_max_positions = j.value("lm_max_positions", c.lm_max_positions);
  c.max_len = j.value("max_len", c.max_len);
  c.beam_width = j.value("beam_width", c.beam_width);
  c.organ_threshold = j.value("organ_threshold", c.organ_threshold);
  c.tag_counts = j.value("tag_counts", c.tag_counts);
}

double total_loss(double l_org, double l_tag, double l_sen, const LossWeights& w) {
  return w.organ * l_org + w.tag * l_tag + w.sentence * l_sen;
}

Tensor total_loss(const Tensor& l_org, const Tensor& l_tag, const Tensor& l_sen, const LossWeights& w) {
  return ad::scale(l_org, w.organ) + ad::scale(l_tag, w.tag) + ad::scale(l_sen, w.sentence);
}

// ---------------------------------------------------------------- tags

TagDictionary::TagDictionary(const std::vector<int>& tag_counts, int dim, Rng& rng) {
  for (int k : tag_counts) tags.push_back(nn::normal_param(k, dim, 1.0, rng));
}

const Tensor& TagDictionary::organ(int j) const {
  if (j < 0 || j >= organs()) throw ConfigError("tag dictionary has no organ " + std::to_string(j));
  return tags[static_cast<std::size_t>(j)];
}

void TagDictionary::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t j = 0; j < tags.size(); ++j) out.push_back({prefix + "." + std::to_string(j), tags[j]});
}

int predict_organ(std::span<const double> logits, double threshold) {
  if (logits.empty()) throw ShapeError("predict_organ: empty logits");
  const auto it = std::max_element(logits.begin(), logits.end());
  const int best = static_cast<int>(it - logits.begin());
  if (threshold > 0.0) {
    double s = 0.0;
    for (double l : logits) s += std::exp(l - *it);
    if (1.0 / s < threshold) return parsing::kUncertainOrgan;
  }
  return best;
}

TagBatch select_tags_for(const std::vector<int>& organs, const TagDictionary& dict) {
  TagBatch b;
  int kmax = 0;
  for (int o : organs) kmax = std::max(kmax, dict.organ(o).rows());
  for (int o : organs) {
    const Tensor& t = dict.organ(o);
    const int k = t.rows();
    b.organ.push_back(o);
    b.k.push_back(k);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(kmax), 0);
    std::fill(valid.begin(), valid.begin() + k, 1);
    b.valid.push_back(std::move(valid));
    if (k == kmax) {
      b.tags.push_back(t);
    } else {
      const std::vector<Tensor> parts{t, Tensor::zeros(kmax - k, t.cols())};
      b.tags.push_back(ad::concat_rows(parts));
    }
  }
  return b;
}

TagBatch select_tags(const std::vector<std::vector<double>>& organ_logits, const TagDictionary& dict,
                     double threshold, const std::vector<int>* fallback) {
  std::vector<int> organs;
  for (std::size_t i = 0; i < organ_logits.size(); ++i) {
    int o = predict_organ(organ_logits[i], threshold);
    if (o == parsing::kUncertainOrgan) {
      if (fallback == nullptr) throw ConfigError("organ undetermined; no tags can be selected");
      o = fallback->at(i);
    }
    organs.push_back(o);
  }
  return select_tags_for(organs, dict);
}

// ---------------------------------------------------------------- modules

OrganClassifier::OrganClassifier(int in_dim, int hidden, int organs, Rng& rng)
    : fc1(in_dim, hidden, rng), fc2(hidden, organs, rng) {}

Tensor OrganClassifier::forward(const PatientFeatures& pf) const {
  if (pf.valid_count() == 0) throw ShapeError("organ classifier: every row is masked");
  return fc2.forward(ad::relu(fc1.forward(ad::masked_mean_rows(pf.rows, pf.valid))));
}

void OrganClassifier::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

DecoderBlock::DecoderBlock(int dim, int heads, int hidden, Rng& rng)
    : self_attn(dim, heads, rng), ln1(dim), cross_attn(dim, heads, rng), ln2(dim), ffn(dim, hidden, rng), ln3(dim) {}

Tensor DecoderBlock::forward(const Tensor& visual, std::span<const std::uint8_t> visual_valid, const Tensor& tags,
                             std::span<const std::uint8_t> tag_valid) const {
  const int s = visual.rows();
  Tensor x = ln1.forward(visual + self_attn.forward(visual, visual, ad::Mask::key_padding(s, visual_valid)));
  x = ln2.forward(x + cross_attn.forward(x, tags, ad::Mask::key_padding(s, tag_valid)));
  return ln3.forward(x + ffn.forward(x));
}

void DecoderBlock::collect(nn::ParamList& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  ln1.collect(out, prefix + ".ln1");
  cross_attn.collect(out, prefix + ".cross_attn");
  ln2.collect(out, prefix + ".ln2");
  ffn.collect(out, prefix + ".ffn");
  ln3.collect(out, prefix + ".ln3");
}

TagPooler::TagPooler(int dim, int heads, int hidden, Rng& rng)
    : cross_attn(dim, heads, rng), ln1(dim), ffn(dim, hidden, rng), ln2(dim) {}

Tensor TagPooler::forward(const Tensor& tags, const Tensor& memory, std::span<const std::uint8_t> memory_valid,
                          nn::AttentionWeights* weights) const {
  Tensor x = ln1.forward(
      tags + cross_attn.forward(tags, memory, ad::Mask::key_padding(tags.rows(), memory_valid), weights));
  return ln2.forward(x + ffn.forward(x));
}

void TagPooler::collect(nn::ParamList& out, const std::string& prefix) const {
  cross_attn.collect(out, prefix + ".cross_attn");
  ln1.collect(out, prefix + ".ln1");
  ffn.collect(out, prefix + ".ffn");
  ln2.collect(out, prefix + ".ln2");
}

TagFeatureExtractor::TagFeatureExtractor(int in_dim, int dim, int heads, int hidden, int depth, Rng& rng)
    : visual_proj(in_dim, dim, rng) {
  for (int i = 0; i < depth; ++i) gd.emplace_back(dim, heads, hidden, rng);
  h = TagPooler(dim, heads, hidden, rng);
}

Tensor TagFeatureExtractor::forward(const Tensor& visual, std::span<const std::uint8_t> visual_valid,
                                    const Tensor& tags, std::span<const std::uint8_t> tag_valid,
                                    nn::AttentionWeights* weights) const {
  if (static_cast<int>(visual_valid.size()) != visual.rows() || static_cast<int>(tag_valid.size()) != tags.rows()) {
    throw ShapeError("tag feature extractor: mask lengths do not match inputs");
  }
  if (tags.cols() != visual_proj.out_dim()) throw ShapeError("tag feature extractor: tag width mismatch");
  Tensor x = visual_proj.forward(visual);
  for (const auto& b : gd) x = b.forward(x, visual_valid, tags, tag_valid);
  return h.forward(tags, x, visual_valid, weights);
}

void TagFeatureExtractor::collect(nn::ParamList& out, const std::string& prefix) const {
  visual_proj.collect(out, prefix + ".visual_proj");
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i].collect(out, prefix + ".gd." + std::to_string(i));
  h.collect(out, prefix + ".h");
}

TagClassifier::TagClassifier(int dim, int hidden, Rng& rng)
    : fc1(dim, hidden, rng), fc2(hidden, corpus::kNumInnerClasses, rng) {}

Tensor TagClassifier::forward(const Tensor& f) const { return fc2.forward(ad::relu(fc1.forward(f))); }

void TagClassifier::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

// ---------------------------------------------------------------- PSA language model

Tensor psa_attention(const Tensor& text, const Tensor& condition, const nn::MultiHeadAttention& base,
                     const nn::Linear& cond_k, const nn::Linear& cond_v, nn::AttentionWeights* weights) {
  const int t = text.rows();
  const int c = condition.defined() ? condition.rows() : 0;
  const Tensor q = base.q.forward(text);
  Tensor k = base.k.forward(text);
  Tensor v = base.v.forward(text);
  if (c > 0) {
    const std::vector<Tensor> ks{cond_k.forward(condition), k};
    const std::vector<Tensor> vs{cond_v.forward(condition), v};
    k = ad::concat_rows(ks);
    v = ad::concat_rows(vs);
  }
  return base.o.forward(nn::attention_core(q, k, v, base.heads, ad::Mask::causal(t, c), weights));
}

PsaBlock::PsaBlock(int width, int heads, int hidden, Rng& rng)
    : ln1(width),
      attn(width, heads, rng),
      cond_k(width, width, rng, false),
      cond_v(width, width, rng, false),
      ln2(width),
      ffn(width, hidden, rng) {}

Tensor PsaBlock::forward(const Tensor& x, const Tensor& condition, nn::AttentionWeights* weights) const {
  const Tensor a = x + psa_attention(ln1.forward(x), condition, attn, cond_k, cond_v, weights);
  return a + ffn.forward(ln2.forward(a));
}

void PsaBlock::collect_base(nn::ParamList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  attn.collect(out, prefix + ".attn");
  ln2.collect(out, prefix + ".ln2");
  ffn.collect(out, prefix + ".ffn");
}

void PsaBlock::collect_psa(nn::ParamList& out, const std::string& prefix) const {
  cond_k.collect(out, prefix + ".cond_k");
  cond_v.collect(out, prefix + ".cond_v");
}

LanguageModel::LanguageModel(int vocab, int width, int n_blocks, int heads, int hidden, int max_positions, Rng& rng)
    : token_embedding(nn::normal_param(vocab, width, 0.1, rng)),
      position_embedding(nn::normal_param(max_positions, width, 0.02, rng)),
      final_norm(width),
      output(width, vocab, rng) {
  for (int i = 0; i < n_blocks; ++i) blocks.emplace_back(width, heads, hidden, rng);
}

Tensor LanguageModel::forward(std::span<const int> ids, const Tensor& condition) const {
  const int t = static_cast<int>(ids.size());
  if (t == 0) throw ShapeError("language model: empty input");
  if (t > max_positions()) {
    throw ShapeError("sequence of " + std::to_string(t) + " tokens exceeds max length " +
                     std::to_string(max_positions()));
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw ShapeError("token id out of vocabulary range");
  }
  if (condition.defined() && condition.rows() > 0 && condition.cols() != width()) {
    throw ShapeError("condition width does not match the language model");
  }
  Tensor x = ad::gather_rows(token_embedding, ids) + ad::slice_rows(position_embedding, 0, t);
  for (const auto& b : blocks) x = b.forward(x, condition);
  return output.forward(final_norm.forward(x));
}

nn::ParamList LanguageModel::base_parameters() const {
  nn::ParamList out{{"lm.token_embedding", token_embedding}, {"lm.position_embedding", position_embedding}};
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_base(out, "lm.blocks." + std::to_string(i));
  final_norm.collect(out, "lm.final_norm");
  output.collect(out, "lm.output");
  return out;
}

nn::ParamList LanguageModel::psa_parameters() const {
  nn::ParamList out;
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_psa(out, "lm.blocks." + std::to_string(i));
  return out;
}

void LanguageModel::freeze_base() { nn::set_trainable(base_parameters(), false); }

std::pair<Tensor, int> sentence_loss(const LanguageModel& lm, std::span<const int> ids, const Tensor& condition) {
  if (ids.size() < 2) throw ShapeError("sentence needs at least BOS and EOS");
  const auto input = ids.first(ids.size() - 1);
  const auto target = ids.subspan(1);
  const Tensor logits = lm.forward(input, condition);
  return {ad::cross_entropy_sum(logits, target), static_cast<int>(target.size())};
}

double warmup_language_model(LanguageModel& lm, const std::vector<std::vector<int>>& sequences, int epochs,
                             double lr, Rng& rng) {
  if (sequences.empty() || epochs <= 0) return 0.0;
  const auto params = lm.base_parameters();
  nn::set_trainable(params, true);
  optim::AdamW opt(nn::trainable_tensors(params), optim::AdamWOptions{lr, 0.9, 0.999, 1e-8, 0.0});
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = 8;
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    int tokens = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      nn::zero_grads(params);
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      Tensor sum;
      int n = 0;
      for (std::size_t b = b0; b < b1; ++b) {
        auto [l, c] = sentence_loss(lm, sequences[order[b]], Tensor{});
        sum = sum.defined() ? sum + l : l;
        n += c;
      }
      const Tensor loss = ad::scale(sum, 1.0 / n);
      total += sum.item();
      tokens += n;
      loss.backward();
      optim::clip_grad_norm(opt.params(), 1.0);
      opt.step();
    }
    last = total / tokens;
  }
  return last;
}

namespace {

std::vector<double> last_log_probs(const LanguageModel& lm, const std::vector<int>& ids, const Tensor& cond) {
  const Tensor logits = lm.forward(ids, cond);
  const int v = logits.cols();
  const double* row = logits.values().data() + static_cast<std::size_t>(logits.rows() - 1) * v;
  double mx = -INFINITY;
  for (int i = 0; i < v; ++i) {
    if (i != Vocab::kPad && i != Vocab::kBos) mx = std::max(mx, row[i]);
  }
  double s = 0.0;
  for (int i = 0; i < v; ++i) {
    if (i != Vocab::kPad && i != Vocab::kBos) s += std::exp(row[i] - mx);
  }
  std::vector<double> out(static_cast<std::size_t>(v), -INFINITY);
  const double lse = mx + std::log(s);
  for (int i = 0; i < v; ++i) {
    if (i != Vocab::kPad && i != Vocab::kBos) out[static_cast<std::size_t>(i)] = row[i] - lse;
  }
  return out;
}

struct Hypothesis {
  std::vector<int> ids;
  double score = 0.0;
  bool done = false;
};

}  // namespace

std::vector<int> decode(const LanguageModel& lm, const Tensor& condition, const DecodeOptions& options) {
  if (options.max_len < 1 || options.beam_width < 1) throw ConfigError("decode: max_len and beam width must be >= 1");
  if (options.max_len + 1 > lm.max_positions()) throw ConfigError("decode: max_len exceeds model positions");
  ad::NoGradGuard guard;
  std::vector<Hypothesis> beams{Hypothesis{{Vocab::kBos}, 0.0, false}};
  for (int step = 0; step < options.max_len; ++step) {
    std::vector<Hypothesis> next;
    bool any_open = false;
    for (const auto& h : beams) {
      if (h.done) {
        next.push_back(h);
        continue;
      }
      any_open = true;
      const auto lp = last_log_probs(lm, h.ids, condition);
      std::vector<int> idx(lp.size());
      std::iota(idx.begin(), idx.end(), 0);
      const int keep = std::min<int>(options.beam_width, static_cast<int>(lp.size()) - 2);
      std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(), [&](int a, int b) {
        return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)] ||
               (lp[static_cast<std::size_t>(a)] == lp[static_cast<std::size_t>(b)] && a < b);
      });
      for (int i = 0; i < keep; ++i) {
        Hypothesis n = h;
        n.ids.push_back(idx[static_cast<std::size_t>(i)]);
        n.score += lp[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        n.done = idx[static_cast<std::size_t>(i)] == Vocab::kEos;
        next.push_back(std::move(n));
      }
    }
    if (!any_open) break;
    std::stable_sort(next.begin(), next.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
    if (static_cast<int>(next.size()) > options.beam_width) next.resize(static_cast<std::size_t>(options.beam_width));
    beams = std::move(next);
  }
  std::vector<int> out;
  for (std::size_t i = 1; i < beams.front().ids.size(); ++i) {
    const int id = beams.front().ids[i];
    if (id == Vocab::kEos) break;
    out.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------- generator

ReportGenerator::ReportGenerator(const GeneratorConfig& config, int vocab_size, Rng& rng) : config_(config) {
  config_.validate();
  organ_cls = OrganClassifier(config_.input_dim, config_.organ_hidden, static_cast<int>(config_.tag_counts.size()), rng);
  dictionary = TagDictionary(config_.tag_counts, config_.tag_dim, rng);
  fte = TagFeatureExtractor(config_.input_dim, config_.tag_dim, config_.heads, config_.ffn_hidden, config_.gd_depth,
                            rng);
  tag_cls = TagClassifier(config_.tag_dim, config_.tag_cls_hidden, rng);
  cond_proj = nn::Linear(config_.tag_dim, config_.lm_width, rng);
  lm = LanguageModel(vocab_size, config_.lm_width, config_.lm_blocks, config_.lm_heads, config_.lm_ffn,
                     config_.lm_max_positions, rng);
}

nn::ParamList ReportGenerator::parameters() const {
  nn::ParamList out;
  organ_cls.collect(out, "organ_cls");
  dictionary.collect(out, "tag_dict");
  fte.collect(out, "fte");
  tag_cls.collect(out, "tag_cls");
  cond_proj.collect(out, "cond_proj");
  const auto base = lm.base_parameters();
  const auto psa = lm.psa_parameters();
  out.insert(out.end(), base.begin(), base.end());
  out.insert(out.end(), psa.begin(), psa.end());
  return out;
}

void ReportGenerator::apply_freeze_policy() {
  nn::set_trainable(parameters(), true);
  lm.freeze_base();
}

nn::ParamList ReportGenerator::trainable_parameters() const {
  nn::ParamList out;
  for (const auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

Tensor ReportGenerator::tag_features(const PatientFeatures& pf, const Tensor& tags,
                                     std::span<const std::uint8_t> tag_valid, nn::AttentionWeights* weights) const {
  return fte.forward(pf.rows, pf.valid, tags, tag_valid, weights);
}

Tensor ReportGenerator::condition(const Tensor& row) const { return cond_proj.forward(row); }

LossParts compute_losses(const ReportGenerator& gen, const std::vector<PatientFeatures>& batch, const TagBatch& tags,
                         const std::vector<Targets>& targets, const LossWeights& weights) {
  if (batch.empty() || batch.size() != targets.size() || tags.tags.size() != batch.size()) {
    throw ShapeError("compute_losses: batch, tags and targets differ in size");
  }
  Tensor org_sum;
  Tensor tag_sum;
  Tensor sen_sum;
  LossParts parts;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& pf = batch[b];
    const auto& tg = targets[b];
    const int organ_target = tg.organ;
    const Tensor ol = ad::cross_entropy_sum(gen.organ_cls.forward(pf), std::span<const int>(&organ_target, 1));
    org_sum = org_sum.defined() ? org_sum + ol : ol;

    const int k = tags.k[b];
    if (static_cast<int>(tg.tag_mask.size()) != k || static_cast<int>(tg.tag_classes.size()) != k ||
        static_cast<int>(tg.sentence_ids.size()) != k) {
      throw ShapeError("compute_losses: targets do not match the routed tag count");
    }
    const Tensor f = gen.tag_features(pf, tags.tags[b], tags.valid[b]);
    const Tensor logits = gen.tag_cls.forward(f);
    std::vector<int> cls(static_cast<std::size_t>(f.rows()), 0);
    std::vector<std::uint8_t> include(static_cast<std::size_t>(f.rows()), 0);
    for (int t = 0; t < k; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      if (tg.tag_mask[ti] == 0 || tags.valid[b][ti] == 0) continue;
      include[ti] = 1;
      cls[ti] = tg.tag_classes[ti];
      ++parts.tag_count;
    }
    const Tensor tl = ad::cross_entropy_sum(logits, cls, include);
    tag_sum = tag_sum.defined() ? tag_sum + tl : tl;

    if (weights.sentence != 0.0) {
      for (int t = 0; t < k; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        if (include[ti] == 0 || tg.sentence_ids[ti].size() < 2) continue;
        auto [sl, n] = sentence_loss(gen.lm, tg.sentence_ids[ti], gen.condition(ad::slice_rows(f, t, 1)));
        sen_sum = sen_sum.defined() ? sen_sum + sl : sl;
        parts.token_count += n;
      }
    }
  }
  parts.organ = ad::scale(org_sum, 1.0 / static_cast<double>(batch.size()));
  parts.tag = parts.tag_count > 0 ? ad::scale(tag_sum, 1.0 / parts.tag_count) : Tensor::scalar(0.0);
  parts.sentence = parts.token_count > 0 ? ad::scale(sen_sum, 1.0 / parts.token_count) : Tensor::scalar(0.0);
  parts.total = total_loss(parts.organ, parts.tag, parts.sentence, weights);
  return parts;
}

LossParts compute_losses(const ReportGenerator& gen, const PatientFeatures& pf, const Targets& targets,
                         const LossWeights& weights) {
  return compute_losses(gen, {pf}, select_tags_for({targets.organ}, gen.dictionary), {targets}, weights);
}

Targets make_targets(const corpus::PatientRecord& record, const corpus::OrganSchema& schema,
                     const std::vector<corpus::OrganSchema>& schemas, const Vocab& vocab) {
  const auto parsed = parsing::parse_report_for(record.report, schema, schemas);
  Targets t;
  t.organ = record.patient.organ_id;
  for (int i = 0; i < schema.tag_count(); ++i) {
    const auto ti = static_cast<std::size_t>(i);
    t.tag_mask.push_back(parsed.tag_mask[ti] ? 1 : 0);
    t.tag_classes.push_back(parsed.tag_classes[ti].value_or(0));
    t.sentence_ids.push_back(parsed.tag_sentences[ti] ? parsing::tokenize(*parsed.tag_sentences[ti], vocab)
                                                      : std::vector<int>{});
  }
  return t;
}

std::vector<int> predict_tags(const ReportGenerator& gen, const PatientFeatures& pf, int organ) {
  ad::NoGradGuard guard;
  const Tensor& tags = gen.dictionary.organ(organ);
  const std::vector<std::uint8_t> valid(static_cast<std::size_t>(tags.rows()), 1);
  const Tensor logits = gen.tag_cls.forward(gen.tag_features(pf, tags, valid));
  std::vector<int> out;
  for (int r = 0; r < logits.rows(); ++r) {
    const double* row = logits.values().data() + static_cast<std::size_t>(r) * logits.cols();
    out.push_back(static_cast<int>(std::max_element(row, row + logits.cols()) - row));
  }
  return out;
}

GenerationResult generate(const ReportGenerator& gen, const PatientFeatures& pf,
                          const std::vector<corpus::OrganSchema>& schemas, const Vocab& vocab,
                          const DecodeOptions& options) {
  ad::NoGradGuard guard;
  GenerationResult r;
  const Tensor ol = gen.organ_cls.forward(pf);
  r.organ_logits = ol.values();
  r.organ = predict_organ(r.organ_logits, gen.config().organ_threshold);
  if (r.organ == parsing::kUncertainOrgan) {
    r.undetermined = true;
    r.report = "organ: undetermined\n";
    return r;
  }
  const auto& schema = schemas.at(static_cast<std::size_t>(r.organ));
  const Tensor& tags = gen.dictionary.organ(r.organ);
  if (tags.rows() != schema.tag_count()) throw ConfigError("tag dictionary does not match the organ schema");
  const std::vector<std::uint8_t> valid(static_cast<std::size_t>(tags.rows()), 1);
  nn::AttentionWeights w;
  const Tensor f = gen.tag_features(pf, tags, valid, &w);
  const Tensor logits = gen.tag_cls.forward(f);
  r.report = "organ: " + schema.organ_name + "\n";
  for (int t = 0; t < f.rows(); ++t) {
    const double* row = logits.values().data() + static_cast<std::size_t>(t) * logits.cols();
    r.tag_logits.emplace_back(row, row + logits.cols());
    r.tag_predictions.push_back(static_cast<int>(std::max_element(row, row + logits.cols()) - row));

    nn::AttentionWeights a;
    a.rows = 1;
    for (int c = 0; c < w.cols; ++c) {
      if (pf.valid[static_cast<std::size_t>(c)] == 0) continue;
      a.values.push_back(w.values[static_cast<std::size_t>(t * w.cols + c)]);
    }
    a.cols = static_cast<int>(a.values.size());
    r.attention.push_back(std::move(a));

    const auto ids = decode(gen.lm, gen.condition(ad::slice_rows(f, t, 1)), options);
    r.sentence_ids.push_back(ids);
    r.sentences.push_back(parsing::detokenize(ids, vocab));
    const auto& tag = schema.key_tags[static_cast<std::size_t>(t)];
    const auto& s = r.sentences.back();
    const bool leads = text::lower(s).rfind(text::lower(tag), 0) == 0;
    r.report += (leads ? s : tag + ": " + s) + "\n";
  }
  return r;
}

}  // namespace wsr::reportgen
