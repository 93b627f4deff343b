#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <numeric>

#include "wsr/errors.hpp"
#include "wsr/harness.hpp"
#include "wsr/optim.hpp"
#include "wsr/text.hpp"

namespace wsr::harness {

using nlohmann::json;
using reportgen::ReportGenerator;

namespace {

void write_text(const fs::path& path, const std::string& s) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << s;
  if (!out) throw FormatError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing " + path.string());
  return json::parse(in);
}

void log(const std::string& msg) { std::cerr << "[wsr] " << msg << '\n'; }

corpus::Corpus require_corpus(const Layout& out) {
  if (!fs::exists(out.corpus() / "corpus.json")) throw ConfigError("no corpus at " + out.corpus().string());
  return corpus::read_corpus(out.corpus());
}

corpus::Split require_split(const Layout& out) {
  if (!fs::exists(out.split() / "split_train.json")) throw ConfigError("no split at " + out.split().string());
  return corpus::read_split(out.split());
}

std::map<std::string, const corpus::PatientRecord*> index_patients(const corpus::Corpus& c) {
  std::map<std::string, const corpus::PatientRecord*> m;
  for (const auto& r : c.patients) m[r.patient.patient_id] = &r;
  return m;
}

const corpus::PatientRecord& find_patient(const std::map<std::string, const corpus::PatientRecord*>& index,
                                          const std::string& id) {
  const auto it = index.find(id);
  if (it == index.end()) throw ConfigError("split names unknown patient " + id);
  return *it->second;
}

mrvit::ConvBackbone make_backbone(const RunConfig& c) {
  return mrvit::ConvBackbone(c.stage1.backbone_dim, derive_seed(c.seed, "backbone"), c.stage1.backbone_channels);
}

void save_encoder(const fs::path& path, const std::string& module, const RunConfig& c, const mrvit::Encoder& enc,
                  long step, const Rng& rng) {
  Checkpoint ck;
  ck.module_id = module;
  ck.fingerprint = fingerprint(c);
  ck.step = step;
  ck.rng_states["train"] = rng.state();
  ck.params = capture(enc.parameters());
  save_checkpoint(path, ck);
}

// Per-dimension standardisation with statistics of the training rows; pad
// rows stay zero.
void standardise(std::vector<PatientData>& train, std::vector<PatientData>& val, std::vector<PatientData>& test) {
  if (train.empty()) return;
  const int dim = train.front().features.rows.cols();
  std::vector<double> mean(static_cast<std::size_t>(dim), 0.0), sd(static_cast<std::size_t>(dim), 0.0);
  long n = 0;
  for (const auto& p : train) {
    for (int r = 0; r < p.features.length(); ++r) {
      if (p.features.valid[static_cast<std::size_t>(r)] == 0) continue;
      ++n;
      for (int c = 0; c < dim; ++c) mean[static_cast<std::size_t>(c)] += p.features.rows(r, c);
    }
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (const auto& p : train) {
    for (int r = 0; r < p.features.length(); ++r) {
      if (p.features.valid[static_cast<std::size_t>(r)] == 0) continue;
      for (int c = 0; c < dim; ++c) {
        const double d = p.features.rows(r, c) - mean[static_cast<std::size_t>(c)];
        sd[static_cast<std::size_t>(c)] += d * d;
      }
    }
  }
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(n)) + 1e-6;
  for (auto* set : {&train, &val, &test}) {
    for (auto& p : *set) {
      ad::Tensor t = p.features.rows.clone(false);
      auto& v = t.mutable_values();
      for (int r = 0; r < p.features.length(); ++r) {
        if (p.features.valid[static_cast<std::size_t>(r)] == 0) continue;
        for (int c = 0; c < dim; ++c) {
          const auto i = static_cast<std::size_t>(r * dim + c);
          v[i] = (v[i] - mean[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
        }
      }
      p.features.rows = t;
    }
  }
}

}  // namespace

eval::Tokens score_tokens(const std::string& s) {
  eval::Tokens out;
  for (const auto& t : parsing::split_tokens(s)) {
    const bool punct = std::all_of(t.begin(), t.end(), [](unsigned char ch) { return std::ispunct(ch) != 0; });
    if (!punct) out.push_back(text::lower(t));
  }
  return out;
}

// ---------------------------------------------------------------- synth / split

void synth(const RunConfig& c, const Layout& out) {
  c.validate();
  const auto corpus = corpus::generate_corpus(corpus::default_schemas(), c.n_patients, c.seed, c.dims);
  corpus::write_corpus(corpus, out.corpus(), false);
  save_config(out.root / "config.json", c);
  log("synth: " + std::to_string(corpus.patients.size()) + " patients -> " + out.corpus().string());
}

corpus::Split make_split(const RunConfig& c, const Layout& out) {
  const auto corpus = require_corpus(out);
  const auto split = corpus::split_corpus(corpus, c.split, derive_seed(c.seed, "split"));
  corpus::write_split(out.split(), split);
  log("split: " + std::to_string(split.train.size()) + "/" + std::to_string(split.val.size()) + "/" +
      std::to_string(split.test.size()));
  return split;
}

// ---------------------------------------------------------------- stage 1

std::unique_ptr<mrvit::VisionTransformer> load_encoder(const fs::path& path, const mrvit::ViTConfig& config) {
  const auto ck = load_checkpoint(path);
  Rng rng(0);
  auto vit = std::make_unique<mrvit::VisionTransformer>(config, rng);
  restore(vit->parameters(), ck.params);
  return vit;
}

void train_vit_r(const RunConfig& c, const Layout& out) {
  c.validate();
  const auto corpus = require_corpus(out);
  const auto split = require_split(out);
  const auto index = index_patients(corpus);
  const auto backbone = make_backbone(c);
  const int grid = c.dims.grid;

  struct Item {
    std::size_t slide;
    regions::RegionGroup group;
  };
  std::vector<mrvit::SlideTokens> slides;
  std::vector<Item> items;
  for (const auto& id : split.train) {
    const auto& rec = find_patient(index, id);
    for (int s = 0; s < rec.patient.slide_count; ++s) {
      const auto pyr = corpus::load_slide(corpus, out.corpus(), rec.patient, s);
      slides.push_back(mrvit::extract_slide_tokens(pyr, backbone));
      for (const auto& g : regions::enumerate_regions(pyr, grid)) items.push_back({slides.size() - 1, g});
    }
  }
  log("stage1/vit_r: " + std::to_string(items.size()) + " regions from " + std::to_string(slides.size()) + " slides");

  Rng rng(derive_seed(c.seed, "stage1/vit_r"));
  std::vector<ad::Tensor> dataset;
  for (const auto& it : items) {
    dataset.push_back(mrvit::region_tokens(regions::assemble_region(it.group, grid, rng), slides[it.slide]));
  }
  auto state = dino::make_state(mrvit::vit_factory(c.stage1.vit_r), c.stage1.dino_r, rng);
  dino::SslOptions opts;
  opts.epochs = c.stage1.epochs;
  opts.batch = c.stage1.batch;
  opts.opt = c.stage1.opt;
  if (c.stage1.resample_regions) {
    opts.source = [&](std::size_t i, Rng& r) {
      return mrvit::region_tokens(regions::assemble_region(items[i].group, grid, r), slides[items[i].slide]);
    };
  }
  fs::create_directories(out.stage1());
  std::ofstream csv(out.stage1() / "ssl_vit_r.csv");
  opts.csv = &csv;
  const auto logs = dino::train_ssl(dataset, state, c.stage1.dino_r, opts, rng);
  if (!logs.empty()) log("stage1/vit_r: final loss " + std::to_string(logs.back().loss));
  save_encoder(out.stage1() / "vit_r.ckpt", "mrvit_r", c, *state.teacher, state.step, rng);
}

void extract_features(const RunConfig& c, const Layout& out) {
  c.validate();
  const auto corpus = require_corpus(out);
  const auto vit_r = load_encoder(out.stage1() / "vit_r.ckpt", c.stage1.vit_r);
  const auto backbone = make_backbone(c);
  regions::FeatureManifest manifest;
  manifest.grid = c.dims.grid;
  manifest.q = c.stage1.q;
  manifest.l = c.stage1.l;
  fs::create_directories(out.features());
  for (const auto& rec : corpus.patients) {
    for (int s = 0; s < rec.patient.slide_count; ++s) {
      const auto pyr = corpus::load_slide(corpus, out.corpus(), rec.patient, s);
      Rng rng(derive_seed(c.seed, "extract/" + pyr.slide_id));
      const auto tokens = mrvit::extract_slide_tokens(pyr, backbone);
      const auto fm = mrvit::encode_slide(pyr, tokens, *vit_r, rng, "mrvit_r");
      const std::string file = pyr.slide_id + ".mrvf";
      regions::write_features(out.features() / file, fm);
      manifest.slides[pyr.slide_id] = {file, "mrvit_r", pyr.level2_rows, pyr.level2_cols};
    }
  }
  regions::write_manifest(out.manifest(), manifest);
  log("features: " + std::to_string(manifest.slides.size()) + " slides -> " + out.features().string());
}

namespace {

regions::FeatureMatrix load_slide_features(const Layout& out, const regions::FeatureManifest& m,
                                           const std::string& slide) {
  const auto it = m.slides.find(slide);
  if (it == m.slides.end()) throw ConfigError("feature store lacks slide " + slide);
  auto fm = regions::read_features(out.features() / it->second.path);
  fm.slide_id = slide;
  return fm;
}

}  // namespace

void train_vit_s(const RunConfig& c, const Layout& out) {
  c.validate();
  const auto corpus = require_corpus(out);
  const auto split = require_split(out);
  const auto index = index_patients(corpus);
  const auto manifest = regions::read_manifest(out.manifest());

  std::vector<regions::FeatureMatrix> store;
  std::vector<std::pair<int, int>> geometry;
  for (const auto& id : split.train) {
    const auto& rec = find_patient(index, id);
    for (int s = 0; s < rec.patient.slide_count; ++s) {
      const std::string sid = corpus::slide_id(id, s);
      store.push_back(load_slide_features(out, manifest, sid));
      const auto& e = manifest.slides.at(sid);
      geometry.emplace_back(e.region_rows, e.region_cols);
    }
  }
  Rng rng(derive_seed(c.seed, "stage1/vit_s"));
  auto sample = [&](std::size_t i, Rng& r) {
    return mrvit::to_tensor(regions::sample_region_features(store[i], geometry[i].first, geometry[i].second,
                                                            c.stage1.q, c.stage1.l, r));
  };
  std::vector<ad::Tensor> dataset;
  for (std::size_t i = 0; i < store.size(); ++i) dataset.push_back(sample(i, rng));
  auto state = dino::make_state(mrvit::vit_factory(c.stage1.vit_s), c.stage1.dino_s, rng);
  dino::SslOptions opts;
  opts.epochs = c.stage1.epochs;
  opts.batch = c.stage1.batch;
  opts.opt = c.stage1.opt;
  opts.source = sample;
  std::ofstream csv(out.stage1() / "ssl_vit_s.csv");
  opts.csv = &csv;
  const auto logs = dino::train_ssl(dataset, state, c.stage1.dino_s, opts, rng);
  if (!logs.empty()) log("stage1/vit_s: final loss " + std::to_string(logs.back().loss));
  save_encoder(out.stage1() / "vit_s.ckpt", "mrvit_s", c, *state.teacher, state.step, rng);
}

void train_stage1(const RunConfig& c, const Layout& out) {
  train_vit_r(c, out);
  extract_features(c, out);
  train_vit_s(c, out);
}

// ---------------------------------------------------------------- stage 2

Prepared prepare(const Layout& out) {
  Prepared p;
  p.corpus = require_corpus(out);
  p.split = require_split(out);
  const auto index = index_patients(p.corpus);
  const auto manifest = regions::read_manifest(out.manifest());

  std::vector<std::string> sentences;
  for (const auto& id : p.split.train) {
    const auto& rec = find_patient(index, id);
    const auto parsed = parsing::parse_report_for(rec.report, p.corpus.schema_of(rec.patient), p.corpus.schemas);
    for (const auto& s : parsed.tag_sentences) {
      if (s) sentences.push_back(*s);
    }
  }
  p.vocab = parsing::Vocab::build(sentences);

  auto load = [&](const std::vector<std::string>& ids, std::vector<PatientData>& dst) {
    for (const auto& id : ids) {
      const auto& rec = find_patient(index, id);
      std::vector<regions::FeatureMatrix> slides;
      for (int s = 0; s < rec.patient.slide_count; ++s) {
        slides.push_back(load_slide_features(out, manifest, corpus::slide_id(id, s)));
      }
      PatientData d;
      d.patient_id = id;
      d.organ = rec.patient.organ_id;
      d.features = reportgen::aggregate_patient(slides);
      for (const auto& m : slides) d.slide_rows.push_back(m.rows);
      const auto& schema = p.corpus.schema_of(rec.patient);
      d.targets = reportgen::make_targets(rec, schema, p.corpus.schemas, p.vocab);
      const auto parsed = parsing::parse_report_for(rec.report, schema, p.corpus.schemas);
      for (const auto& s : parsed.tag_sentences) d.reference.push_back(s.value_or(""));
      d.record = &rec;
      dst.push_back(std::move(d));
    }
  };
  load(p.split.train, p.train);
  load(p.split.val, p.val);
  load(p.split.test, p.test);
  standardise(p.train, p.val, p.test);
  return p;
}

int select_epoch(const std::vector<EpochLog>& logs, bool no_tag_cls) {
  if (logs.empty()) return 0;
  std::size_t best = 0;
  for (std::size_t i = 1; i < logs.size(); ++i) {
    const bool better = no_tag_cls ? logs[i].val_sentence_loss <= logs[best].val_sentence_loss
                                   : logs[i].val_tag_accuracy >= logs[best].val_tag_accuracy;
    if (better) best = i;
  }
  return logs[best].epoch;
}

namespace {

double cosine_lr(double base, int epoch, int epochs) {
  return 0.5 * base * (1.0 + std::cos(M_PI * static_cast<double>(epoch - 1) / static_cast<double>(epochs)));
}

struct ValStats {
  double tag_accuracy = 0.0;
  double organ_accuracy = 0.0;
  double sentence_loss = 0.0;
};

ValStats validate_generator(const ReportGenerator& gen, const std::vector<PatientData>& val, bool need_sentence) {
  ValStats s;
  if (val.empty()) return s;
  ad::NoGradGuard guard;
  int correct = 0, total = 0, organ_ok = 0, tokens = 0;
  double sen = 0.0;
  for (const auto& p : val) {
    const auto ol = gen.organ_cls.forward(p.features).values();
    const int organ = static_cast<int>(std::max_element(ol.begin(), ol.end()) - ol.begin());
    if (organ == p.organ) ++organ_ok;
    const auto pred = organ == p.organ ? reportgen::predict_tags(gen, p.features, organ) : std::vector<int>{};
    for (std::size_t t = 0; t < p.targets.tag_mask.size(); ++t) {
      if (p.targets.tag_mask[t] == 0) continue;
      ++total;
      if (!pred.empty() && pred[t] == p.targets.tag_classes[t]) ++correct;
    }
    if (need_sentence) {
      const auto parts = reportgen::compute_losses(gen, p.features, p.targets, reportgen::LossWeights{0, 0, 1});
      sen += parts.sentence.item() * parts.token_count;
      tokens += parts.token_count;
    }
  }
  s.tag_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
  s.organ_accuracy = static_cast<double>(organ_ok) / static_cast<double>(val.size());
  s.sentence_loss = tokens > 0 ? sen / tokens : 0.0;
  return s;
}

}  // namespace

ReportGenerator fit_generator(const RunConfig& c, const reportgen::GeneratorConfig& generator,
                              const std::vector<PatientData>& train, const std::vector<PatientData>& val,
                              const parsing::Vocab& vocab, Stage2Result& result, std::ostream* csv,
                              const BestCallback& on_best) {
  if (train.empty()) throw ConfigError("stage 2 has no training patients");
  Rng rng(derive_seed(c.seed, "stage2"));
  ReportGenerator gen(generator, vocab.size(), rng);

  std::vector<std::vector<int>> sequences;
  for (const auto& p : train) {
    for (std::size_t t = 0; t < p.targets.tag_mask.size(); ++t) {
      if (p.targets.tag_mask[t] != 0) sequences.push_back(p.targets.sentence_ids[t]);
    }
  }
  const double lm_loss =
      reportgen::warmup_language_model(gen.lm, sequences, c.stage2.lm_warmup_epochs, c.stage2.lm_warmup_lr, rng);
  log("stage2: LM warm-up loss " + std::to_string(lm_loss));
  gen.apply_freeze_policy();

  reportgen::LossWeights weights = c.stage2.weights;
  if (c.stage2.no_tag_cls) weights.tag = 0.0;
  const auto trainable = gen.trainable_parameters();
  optim::AdamW opt(nn::trainable_tensors(trainable),
                   optim::AdamWOptions{c.stage2.lr, c.stage2.beta1, c.stage2.beta2, 1e-8, c.stage2.weight_decay});

  if (csv != nullptr) *csv << "epoch,train_loss,val_tag_accuracy,val_organ_accuracy,val_sentence_loss\n";
  result.logs.clear();
  result.best_epoch = 0;
  std::vector<StoredParam> best = capture(gen.parameters());
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(c.stage2.batch);
  for (int epoch = 1; epoch <= c.stage2.epochs; ++epoch) {
    if (c.stage2.cosine_lr) opt.set_lr(cosine_lr(c.stage2.lr, epoch, c.stage2.epochs));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      nn::zero_grads(gen.parameters());
      for (std::size_t b = b0; b < b1; ++b) {
        const auto& p = train[order[b]];
        const auto parts = reportgen::compute_losses(gen, p.features, p.targets, weights);
        const double v = parts.total.item();
        if (!std::isfinite(v)) {
          throw NumericError("stage 2 loss became non-finite at epoch " + std::to_string(epoch) + "; last good epoch " +
                             std::to_string(result.best_epoch) + " retained");
        }
        loss_sum += v;
        ad::scale(parts.total, 1.0 / static_cast<double>(b1 - b0)).backward();
      }
      optim::clip_grad_norm(opt.params(), c.stage2.clip_grad);
      opt.step();
    }
    const auto vs = validate_generator(gen, val, c.stage2.no_tag_cls);
    EpochLog e{epoch, loss_sum / static_cast<double>(train.size()), vs.tag_accuracy, vs.organ_accuracy,
               vs.sentence_loss};
    result.logs.push_back(e);
    if (csv != nullptr) {
      *csv << std::setprecision(10) << e.epoch << ',' << e.train_loss << ',' << e.val_tag_accuracy << ','
           << e.val_organ_accuracy << ',' << e.val_sentence_loss << '\n';
    }
    log("stage2: epoch " + std::to_string(epoch) + " loss " + std::to_string(e.train_loss) + " val tag acc " +
        std::to_string(e.val_tag_accuracy) + " organ acc " + std::to_string(e.val_organ_accuracy));
    const int selected = select_epoch(result.logs, c.stage2.no_tag_cls);
    if (selected != result.best_epoch) {
      result.best_epoch = selected;
      best = capture(gen.parameters());
      if (on_best) on_best(gen, selected);
    }
  }
  restore(gen.parameters(), best);
  return gen;
}

namespace {

reportgen::GeneratorConfig generator_config(const RunConfig& c, const std::vector<corpus::OrganSchema>& schemas) {
  auto g = c.stage2.generator;
  g.tag_counts.clear();
  for (const auto& s : schemas) g.tag_counts.push_back(s.tag_count());
  g.validate();
  return g;
}

void save_generator(const fs::path& path, const RunConfig& c, const ReportGenerator& gen, int epoch) {
  Checkpoint ck;
  ck.module_id = "pmprg";
  ck.fingerprint = fingerprint(c);
  ck.step = epoch;
  ck.extra = {{"generator", gen.config()}, {"vocab_size", gen.lm.vocab_size()}, {"epoch", epoch}};
  ck.params = capture(gen.parameters());
  save_checkpoint(path, ck);
}

ReportGenerator load_generator(const fs::path& path) {
  const auto ck = load_checkpoint(path);
  const auto g = ck.extra.at("generator").get<reportgen::GeneratorConfig>();
  Rng rng(0);
  ReportGenerator gen(g, ck.extra.at("vocab_size").get<int>(), rng);
  restore(gen.parameters(), ck.params);
  return gen;
}

}  // namespace

Stage2Result train_stage2(const RunConfig& c, const Layout& out) {
  c.validate();
  const auto data = prepare(out);
  fs::create_directories(out.stage2());
  data.vocab.save(out.stage2() / "vocab.txt");
  std::ofstream csv(out.stage2() / "train_log.csv");
  Stage2Result result;
  const auto ckpt = out.stage2() / "generator.ckpt";
  auto gen = fit_generator(c, generator_config(c, data.corpus.schemas), data.train, data.val, data.vocab, result,
                           &csv, [&](const ReportGenerator& g, int epoch) { save_generator(ckpt, c, g, epoch); });
  save_generator(ckpt, c, gen, result.best_epoch);
  log("stage2: selected epoch " + std::to_string(result.best_epoch));
  return result;
}

// ---------------------------------------------------------------- generation / evaluation

namespace {

reportgen::DecodeOptions decode_options(const RunConfig& c) {
  return {c.stage2.generator.max_len, c.stage2.generator.beam_width};
}

json generation_json(const std::string& id, const reportgen::GenerationResult& r) {
  return {{"patient_id", id},
          {"undetermined", r.undetermined},
          {"organ", r.organ},
          {"tag_predictions", r.tag_predictions},
          {"sentences", r.sentences},
          {"report", r.report}};
}

}  // namespace

std::vector<Generated> generate_reports(const RunConfig& c, const Layout& out) {
  const auto data = prepare(out);
  const auto gen = load_generator(out.stage2() / "generator.ckpt");
  if (gen.lm.vocab_size() != data.vocab.size()) throw ConfigError("vocabulary does not match the generator");
  std::vector<Generated> res;
  json all = json::array();
  for (const auto& p : data.test) {
    Generated g{p.patient_id, reportgen::generate(gen, p.features, data.corpus.schemas, data.vocab, decode_options(c))};
    write_text(out.reports() / (p.patient_id + ".txt"), g.result.report);
    all.push_back(generation_json(p.patient_id, g.result));
    res.push_back(std::move(g));
  }
  write_text(out.reports() / "generations.json", all.dump(2) + "\n");
  log("generate: " + std::to_string(res.size()) + " reports -> " + out.reports().string());
  return res;
}

namespace {

// Tag classes read back from generated sentences, judged against the true
// organ's schema; a tag with no sentence naming it counts as uncertain.
std::vector<int> classes_from_text(const std::string& header, const std::vector<std::string>& sentences,
                                   const corpus::OrganSchema& schema,
                                   const std::vector<corpus::OrganSchema>& schemas) {
  std::string text = header;
  for (const auto& s : sentences) text += "\n" + s + ".";
  const auto parsed = parsing::parse_report_for(text, schema, schemas);
  std::vector<int> out;
  for (const auto& c : parsed.tag_classes) out.push_back(c.value_or(corpus::kUncertainClass));
  return out;
}

eval::EvalItem make_item(const PatientData& p, const std::vector<std::string>& sentences, int predicted_organ,
                         std::vector<int> predicted_tags) {
  eval::EvalItem item;
  item.patient_id = p.patient_id;
  std::string cand, ref;
  for (const auto& s : sentences) cand += s + " . ";
  for (std::size_t t = 0; t < p.reference.size(); ++t) {
    if (p.targets.tag_mask[t] != 0) ref += p.reference[t] + " . ";
  }
  item.candidate = score_tokens(cand);
  item.reference = score_tokens(ref);
  item.true_tags = p.targets.tag_classes;
  item.tag_mask = p.targets.tag_mask;
  if (predicted_tags.size() != item.true_tags.size()) {
    predicted_tags.assign(item.true_tags.size(), corpus::kUncertainClass);
  }
  item.predicted_tags = std::move(predicted_tags);
  item.predicted_organ = predicted_organ;
  item.true_organ = p.organ;
  return item;
}

// Two-class organ probe on frozen slide-mean F_R; slide predictions are
// aggregated to patients by the max rule.
double probe_accuracy(const RunConfig& c, const Prepared& data) {
  auto slide_means = [](const PatientData& p) {
    std::vector<std::vector<double>> out;
    int begin = 0;
    for (int rows : p.slide_rows) {
      ad::NoGradGuard guard;
      const std::vector<std::uint8_t> all(static_cast<std::size_t>(rows), 1);
      out.push_back(ad::masked_mean_rows(ad::slice_rows(p.features.rows, begin, rows), all).values());
      begin += rows;
    }
    return out;
  };
  std::vector<std::vector<double>> xtr, xte;
  std::vector<int> ytr, yte;
  std::vector<std::size_t> owner;
  for (const auto& p : data.train) {
    for (auto& row : slide_means(p)) {
      xtr.push_back(std::move(row));
      ytr.push_back(p.organ);
    }
  }
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    for (auto& row : slide_means(data.test[i])) {
      xte.push_back(std::move(row));
      yte.push_back(data.test[i].organ);
      owner.push_back(i);
    }
  }
  eval::ProbeConfig pc = c.probe;
  pc.seed = derive_seed(c.seed, "probe");
  const auto r = eval::linear_probe(xtr, ytr, xte, yte, pc);
  std::vector<std::vector<int>> per_patient(data.test.size());
  for (std::size_t k = 0; k < owner.size(); ++k) per_patient[owner[k]].push_back(r.predictions[k]);
  int correct = 0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    if (eval::patient_from_slides(per_patient[i]) == data.test[i].organ) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.test.size());
}

}  // namespace

Evaluation evaluate_reports(const RunConfig& c, const Layout& out) {
  const auto data = prepare(out);
  const fs::path gen_path = out.reports() / "generations.json";
  const json generated = read_json(gen_path);
  if (generated.size() != data.test.size()) {
    throw ConfigError("report count mismatch: " + std::to_string(generated.size()) + " generated vs " +
                      std::to_string(data.test.size()) + " test patients");
  }
  std::vector<eval::EvalItem> items;
  int consistent = 0, judged = 0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const auto& p = data.test[i];
    const json& g = generated[i];
    if (g.at("patient_id").get<std::string>() != p.patient_id) {
      throw ConfigError("generated report " + std::to_string(i) + " is for " + g.at("patient_id").get<std::string>() +
                        ", expected " + p.patient_id);
    }
    const int organ = g.at("organ").get<int>();
    const auto sentences = g.at("sentences").get<std::vector<std::string>>();
    auto tags = g.at("tag_predictions").get<std::vector<int>>();
    if (organ >= 0) {
      const auto& schema = data.corpus.schemas[static_cast<std::size_t>(organ)];
      for (std::size_t t = 0; t < sentences.size() && t < tags.size(); ++t) {
        ++judged;
        // A sentence that never names its tag cannot agree with the prediction.
        if (!text::icontains(sentences[t], schema.key_tags[t])) continue;
        if (parsing::classify_inner(sentences[t], static_cast<int>(t), schema) == tags[t]) ++consistent;
      }
    }
    const auto& schema = data.corpus.schemas[static_cast<std::size_t>(p.organ)];
    if (c.stage2.no_tag_cls) tags = classes_from_text(schema.report_header, sentences, schema, data.corpus.schemas);
    if (organ != p.organ) tags.clear();
    items.push_back(make_item(p, sentences, organ, std::move(tags)));
  }
  Evaluation ev;
  ev.metrics = eval::evaluate(items, &ev.per_patient, c.rouge_beta);
  ev.keyword_consistency = judged > 0 ? static_cast<double>(consistent) / judged : 0.0;
  json j = ev.metrics;
  j["keyword_consistency"] = ev.keyword_consistency;
  j["probe_accuracy"] = probe_accuracy(c, data);
  write_text(out.eval() / "metrics.json", j.dump(2) + "\n");
  std::ofstream csv(out.eval() / "per_patient.csv");
  eval::write_scores_csv(csv, ev.per_patient);
  log("evaluate: " + j.dump());
  return ev;
}

// ---------------------------------------------------------------- ablation

namespace {

// Scenario 1: the masked mean of a patient's region features conditions the
// language model, which writes the whole report in one sequence.
struct OneShot {
  nn::Linear cond;
  reportgen::LanguageModel lm;

  ad::Tensor condition(const PatientData& p) const {
    return cond.forward(ad::masked_mean_rows(p.features.rows, p.features.valid));
  }
  nn::ParamList trainable() const {
    nn::ParamList out;
    cond.collect(out, "cond");
    for (auto& q : lm.psa_parameters()) out.push_back(q);
    return out;
  }
};

std::string joined_reference(const PatientData& p) {
  std::string out;
  for (std::size_t t = 0; t < p.reference.size(); ++t) {
    if (p.targets.tag_mask[t] == 0) continue;
    if (!out.empty()) out += " ";
    out += p.reference[t] + ".";
  }
  return out;
}

std::vector<eval::EvalItem> one_shot_scenario(const RunConfig& c, const Prepared& data) {
  std::vector<std::string> texts;
  for (const auto& p : data.train) texts.push_back(joined_reference(p));
  const auto vocab = parsing::Vocab::build(texts);
  auto encode = [&](const std::vector<PatientData>& ps) {
    std::vector<std::vector<int>> out;
    for (const auto& p : ps) out.push_back(parsing::tokenize(joined_reference(p), vocab));
    return out;
  };
  const auto train_ids = encode(data.train);
  const auto val_ids = encode(data.val);
  int longest = 0;
  for (const auto& s : train_ids) longest = std::max(longest, static_cast<int>(s.size()));
  for (const auto& s : val_ids) longest = std::max(longest, static_cast<int>(s.size()));
  const auto& g = c.stage2.generator;
  const int positions = std::max({g.lm_max_positions, longest, c.one_shot_max_len + 1});

  Rng rng(derive_seed(c.seed, "ablation/one_shot"));
  OneShot m{nn::Linear(g.input_dim, g.lm_width, rng),
            reportgen::LanguageModel(vocab.size(), g.lm_width, g.lm_blocks, g.lm_heads, g.lm_ffn, positions, rng)};
  reportgen::warmup_language_model(m.lm, train_ids, c.stage2.lm_warmup_epochs, c.stage2.lm_warmup_lr, rng);
  m.lm.freeze_base();
  const auto params = m.trainable();
  optim::AdamW opt(nn::trainable_tensors(params),
                   optim::AdamWOptions{c.stage2.lr, c.stage2.beta1, c.stage2.beta2, 1e-8, c.stage2.weight_decay});
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<StoredParam> best = capture(params);
  double best_loss = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= c.stage2.epochs; ++epoch) {
    if (c.stage2.cosine_lr) opt.set_lr(cosine_lr(c.stage2.lr, epoch, c.stage2.epochs));
    rng.shuffle(order);
    for (std::size_t i : order) {
      nn::zero_grads(params);
      auto [loss, count] = reportgen::sentence_loss(m.lm, train_ids[i], m.condition(data.train[i]));
      ad::scale(loss, 1.0 / count).backward();
      optim::clip_grad_norm(opt.params(), c.stage2.clip_grad);
      opt.step();
    }
    double val_loss = 0.0;
    int tokens = 0;
    {
      ad::NoGradGuard guard;
      for (std::size_t i = 0; i < data.val.size(); ++i) {
        auto [loss, count] = reportgen::sentence_loss(m.lm, val_ids[i], m.condition(data.val[i]));
        val_loss += loss.item();
        tokens += count;
      }
    }
    val_loss = tokens > 0 ? val_loss / tokens : 0.0;
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = capture(params);
    }
  }
  restore(params, best);

  std::vector<eval::EvalItem> items;
  ad::NoGradGuard guard;
  const auto keywords = parsing::organ_keywords(data.corpus.schemas);
  for (const auto& p : data.test) {
    const auto ids = reportgen::decode(m.lm, m.condition(p), {c.one_shot_max_len, c.stage2.generator.beam_width});
    const std::string text = parsing::detokenize(ids, vocab);
    const auto sentences = parsing::split_sentences(text);
    const auto& schema = data.corpus.schemas[static_cast<std::size_t>(p.organ)];
    int organ = parsing::kUncertainOrgan;
    try {
      organ = parsing::assign_organ(text, keywords);
    } catch (const ParseError&) {
    }
    items.push_back(make_item(p, sentences, organ,
                              classes_from_text(schema.report_header, sentences, schema, data.corpus.schemas)));
  }
  return items;
}

std::vector<eval::EvalItem> tag_pipeline_items(const RunConfig& c, const Prepared& data, const ReportGenerator& gen,
                                               const std::vector<PatientData>& test) {
  std::vector<eval::EvalItem> items;
  for (const auto& p : test) {
    const auto r = reportgen::generate(gen, p.features, data.corpus.schemas, data.vocab, decode_options(c));
    const auto& schema = data.corpus.schemas[static_cast<std::size_t>(p.organ)];
    items.push_back(make_item(p, r.sentences, r.organ,
                              classes_from_text(schema.report_header, r.sentences, schema, data.corpus.schemas)));
  }
  return items;
}

std::vector<PatientData> slide_level_raw(const RunConfig& c, const Layout& out, const std::vector<PatientData>& src,
                                         const mrvit::Encoder& vit_s) {
  const auto manifest = regions::read_manifest(out.manifest());
  std::vector<PatientData> dst;
  ad::NoGradGuard guard;
  for (const auto& p : src) {
    std::vector<regions::FeatureMatrix> rows;
    for (int s = 0; s < static_cast<int>(p.slide_rows.size()); ++s) {
      const std::string sid = corpus::slide_id(p.patient_id, s);
      const auto fm = load_slide_features(out, manifest, sid);
      const auto& e = manifest.slides.at(sid);
      Rng rng(derive_seed(c.seed, "ablation/fs/" + sid));
      const auto sampled = regions::sample_region_features(fm, e.region_rows, e.region_cols, c.stage1.q, c.stage1.l, rng);
      rows.push_back(mrvit::to_feature_matrix(vit_s.forward(mrvit::to_tensor(sampled))));
    }
    PatientData d = p;
    d.features = reportgen::aggregate_patient(rows);
    d.slide_rows.assign(rows.size(), 1);
    dst.push_back(std::move(d));
  }
  return dst;
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& c, const Layout& out, const std::vector<int>& scenarios) {
  for (int s : scenarios) {
    if (s < 1 || s > 3) throw ConfigError("unknown ablation variant " + std::to_string(s));
  }
  const auto data = prepare(out);
  const auto gcfg = generator_config(c, data.corpus.schemas);
  std::vector<AblationRow> rows;
  for (int s : scenarios) {
    AblationRow row;
    row.scenario = s;
    std::vector<eval::EvalItem> items;
    if (s == 1) {
      row.name = "one_shot_report";
      items = one_shot_scenario(c, data);
    } else if (s == 2) {
      row.name = "slide_level_features";
      const auto vit_s = load_encoder(out.stage1() / "vit_s.ckpt", c.stage1.vit_s);
      auto train = slide_level_raw(c, out, data.train, *vit_s);
      auto val = slide_level_raw(c, out, data.val, *vit_s);
      auto test = slide_level_raw(c, out, data.test, *vit_s);
      standardise(train, val, test);
      auto g2 = gcfg;
      g2.input_dim = c.stage1.vit_s.output_dim;
      Stage2Result r;
      const auto gen = fit_generator(c, g2, train, val, data.vocab, r);
      items = tag_pipeline_items(c, data, gen, test);
    } else {
      row.name = "regional_tag_pipeline";
      const auto ckpt = out.stage2() / "generator.ckpt";
      if (fs::exists(ckpt)) {
        items = tag_pipeline_items(c, data, load_generator(ckpt), data.test);
      } else {
        Stage2Result r;
        items = tag_pipeline_items(c, data, fit_generator(c, gcfg, data.train, data.val, data.vocab, r), data.test);
      }
    }
    row.metrics = eval::evaluate(items, nullptr, c.rouge_beta);
    log("ablation: scenario " + std::to_string(s) + " ce_accuracy " + std::to_string(row.metrics.ce_accuracy));
    rows.push_back(row);
  }
  json j = json::array();
  std::string csv = "scenario,name,bleu_1,bleu_4,meteor,rouge_l,ce_accuracy,ce_f1_macro\n";
  for (const auto& r : rows) {
    j.push_back({{"scenario", r.scenario}, {"name", r.name}, {"metrics", r.metrics}});
    std::ostringstream line;
    line << std::setprecision(10) << r.scenario << ',' << r.name << ',' << r.metrics.bleu[0] << ','
         << r.metrics.bleu[3] << ',' << r.metrics.meteor << ',' << r.metrics.rouge_l << ',' << r.metrics.ce_accuracy
         << ',' << r.metrics.ce_f1_macro << '\n';
    csv += line.str();
  }
  write_text(out.ablation() / "ablation.json", j.dump(2) + "\n");
  write_text(out.ablation() / "ablation.csv", csv);
  return rows;
}

// ---------------------------------------------------------------- attention export

void export_attention(const RunConfig& c, const Layout& out) {
  const auto data = prepare(out);
  const auto gen = load_generator(out.stage2() / "generator.ckpt");
  const auto manifest = regions::read_manifest(out.manifest());
  for (const auto& p : data.test) {
    const auto r = reportgen::generate(gen, p.features, data.corpus.schemas, data.vocab, decode_options(c));
    json j = {{"patient_id", p.patient_id}, {"organ", r.organ}, {"tags", json::array()}};
    if (!r.undetermined) {
      const auto& schema = data.corpus.schemas[static_cast<std::size_t>(r.organ)];
      for (std::size_t t = 0; t < r.attention.size(); ++t) {
        json cells = json::array();
        std::size_t col = 0;
        for (std::size_t s = 0; s < p.slide_rows.size(); ++s) {
          const std::string sid = corpus::slide_id(p.patient_id, static_cast<int>(s));
          const int cols = manifest.slides.at(sid).region_cols;
          for (int k = 0; k < p.slide_rows[s]; ++k, ++col) {
            cells.push_back({{"slide", sid},
                             {"region", k},
                             {"level2_row", k / cols},
                             {"level2_col", k % cols},
                             {"weight", r.attention[t].values[col]}});
          }
        }
        j["tags"].push_back({{"tag", schema.key_tags[t]}, {"sentence", r.sentences[t]}, {"regions", cells}});
      }
    }
    write_text(out.attention() / (p.patient_id + ".json"), j.dump(2) + "\n");
  }
  log("export-attention: " + std::to_string(data.test.size()) + " patients -> " + out.attention().string());
}

Evaluation run_pipeline(const RunConfig& c, const Layout& out) {
  synth(c, out);
  make_split(c, out);
  train_stage1(c, out);
  train_stage2(c, out);
  generate_reports(c, out);
  return evaluate_reports(c, out);
}

}  // namespace wsr::harness
