#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "wsr/errors.hpp"
#include "wsr/harness.hpp"

namespace wsr::harness {

using nlohmann::json;

void RunConfig::validate() const {
  if (n_patients < 1) throw ConfigError("n_patients must be >= 1");
  dims.validate();
  if (split.train <= 0 || split.val < 0 || split.test <= 0) throw ConfigError("split fractions must be positive");
  if (stage1.epochs < 0 || stage1.batch < 1) throw ConfigError("stage1 epochs/batch invalid");
  if (stage1.opt.lr <= 0) throw ConfigError("stage1 lr must be > 0");
  if (stage1.q < 1 || stage1.l < 1) throw ConfigError("Q and L must be >= 1");
  if (stage1.l > dims.level2_rows || stage1.l > dims.level2_cols) throw ConfigError("L exceeds the region grid");
  if (stage1.vit_r.token_count != dims.grid * dims.grid) throw ConfigError("vit_r token_count must be G*G");
  if (stage1.vit_r.input_dim != stage1.backbone_dim) throw ConfigError("vit_r input_dim must equal backbone_dim");
  if (stage1.vit_s.token_count != stage1.q * stage1.l * stage1.l) throw ConfigError("vit_s token_count must be Q*L*L");
  if (stage1.vit_s.input_dim != stage1.vit_r.output_dim) throw ConfigError("vit_s input_dim must equal d_R");
  stage1.vit_r.validate();
  stage1.vit_s.validate();
  if (stage2.epochs < 0 || stage2.batch < 1) throw ConfigError("stage2 epochs/batch invalid");
  if (stage2.lr <= 0 || stage2.lm_warmup_lr <= 0) throw ConfigError("stage2 rates must be > 0");
  const auto& w = stage2.weights;
  if (w.organ < 0 || w.tag < 0 || w.sentence < 0) throw ConfigError("loss weights must be nonnegative");
  if (stage2.generator.input_dim != stage1.vit_r.output_dim) throw ConfigError("generator input_dim must equal d_R");
  if (rouge_beta <= 0) throw ConfigError("rouge_beta must be > 0");
}

RunConfig full_defaults() {
  RunConfig c;
  c.profile = "full";
  c.dims.patch_size = 256;
  c.stage1.epochs = 500;
  c.stage1.batch = 64;
  c.stage1.opt = dino::OptConfig{"sgd", 0.1, 0.9, 0.9, 0.999, 0.0};
  c.stage1.vit_r = mrvit::ViTConfig{16, 64, 96, 2, 4, 2.0, true, 96};
  c.stage1.vit_s = mrvit::ViTConfig{4, 96, 96, 2, 4, 2.0, true, 96};
  c.stage2.epochs = 300;
  c.stage2.batch = 1;
  c.stage2.lr = 3e-3;
  c.stage2.cosine_lr = false;
  c.stage2.generator.input_dim = 96;
  return c;
}

RunConfig desk_profile() {
  RunConfig c = full_defaults();
  c.profile = "desk";
  c.dims.patch_size = 32;
  c.stage1.epochs = 4;
  c.stage1.batch = 32;
  c.stage1.opt.lr = 0.02;
  c.stage1.dino_r.out_dim = 64;
  c.stage1.dino_r.head_hidden = 64;
  c.stage1.dino_r.teacher_temp_warmup_epochs = 2;
  c.stage1.dino_s = c.stage1.dino_r;
  c.stage2.epochs = 60;
  c.stage2.lr = 1e-3;
  c.stage2.cosine_lr = true;
  c.stage2.lm_warmup_epochs = 15;
  c.stage2.generator.organ_hidden = 8;
  c.stage2.generator.tag_dim = 48;
  c.stage2.generator.ffn_hidden = 96;
  c.stage2.generator.lm_width = 64;
  c.stage2.generator.lm_heads = 4;
  c.stage2.generator.lm_ffn = 128;
  c.stage2.generator.max_len = 24;
  c.probe.epochs = 200;
  return c;
}

namespace {

json split_json(const corpus::SplitFractions& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}}; }

void from_json(const json& j, corpus::SplitFractions& s) {
  s.train = j.value("train", s.train);
  s.val = j.value("val", s.val);
  s.test = j.value("test", s.test);
}

json weights_json(const reportgen::LossWeights& w) {
  return {{"alpha", w.organ}, {"beta", w.tag}, {"gamma", w.sentence}};
}

template <typename T>
void merge(const json& j, const char* key, T& target) {
  if (!j.contains(key)) return;
  from_json(j.at(key), target);
}

}  // namespace

void to_json(json& j, const RunConfig& c) {
  json s1 = {{"epochs", c.stage1.epochs},
             {"batch", c.stage1.batch},
             {"optimizer", c.stage1.opt},
             {"backbone_dim", c.stage1.backbone_dim},
             {"backbone_channels", c.stage1.backbone_channels},
             {"vit_r", c.stage1.vit_r},
             {"vit_s", c.stage1.vit_s},
             {"dino_r", c.stage1.dino_r},
             {"dino_s", c.stage1.dino_s},
             {"Q", c.stage1.q},
             {"L", c.stage1.l},
             {"resample_regions", c.stage1.resample_regions}};
  json s2 = {{"epochs", c.stage2.epochs},
             {"batch", c.stage2.batch},
             {"optimizer", "adamw"},
             {"lr", c.stage2.lr},
             {"beta1", c.stage2.beta1},
             {"beta2", c.stage2.beta2},
             {"weight_decay", c.stage2.weight_decay},
             {"clip_grad", c.stage2.clip_grad},
             {"cosine_lr", c.stage2.cosine_lr},
             {"loss_weights", weights_json(c.stage2.weights)},
             {"generator", c.stage2.generator},
             {"lm_warmup_epochs", c.stage2.lm_warmup_epochs},
             {"lm_warmup_lr", c.stage2.lm_warmup_lr},
             {"no_tag_cls", c.stage2.no_tag_cls}};
  j = {{"profile", c.profile},         {"seed", c.seed},   {"n_patients", c.n_patients},
       {"dims", c.dims},               {"split", split_json(c.split)}, {"stage1", s1},
       {"stage2", s2},                 {"probe", c.probe}, {"rouge_beta", c.rouge_beta},
       {"one_shot_max_len", c.one_shot_max_len}};
}

RunConfig config_from_json(const json& j) {
  const std::string profile = j.value("profile", std::string("full"));
  RunConfig c;
  if (profile == "full") {
    c = full_defaults();
  } else if (profile == "desk") {
    c = desk_profile();
  } else {
    throw ConfigError("unknown profile '" + profile + "'");
  }
  c.seed = j.value("seed", c.seed);
  c.n_patients = j.value("n_patients", c.n_patients);
  merge(j, "dims", c.dims);
  merge(j, "split", c.split);
  merge(j, "probe", c.probe);
  c.rouge_beta = j.value("rouge_beta", c.rouge_beta);
  c.one_shot_max_len = j.value("one_shot_max_len", c.one_shot_max_len);
  if (j.contains("stage1")) {
    const json& s = j.at("stage1");
    auto& t = c.stage1;
    t.epochs = s.value("epochs", t.epochs);
    t.batch = s.value("batch", t.batch);
    merge(s, "optimizer", t.opt);
    t.backbone_dim = s.value("backbone_dim", t.backbone_dim);
    t.backbone_channels = s.value("backbone_channels", t.backbone_channels);
    merge(s, "vit_r", t.vit_r);
    merge(s, "vit_s", t.vit_s);
    merge(s, "dino_r", t.dino_r);
    merge(s, "dino_s", t.dino_s);
    t.q = s.value("Q", t.q);
    t.l = s.value("L", t.l);
    t.resample_regions = s.value("resample_regions", t.resample_regions);
  }
  if (j.contains("stage2")) {
    const json& s = j.at("stage2");
    auto& t = c.stage2;
    if (s.value("optimizer", std::string("adamw")) != "adamw") throw ConfigError("stage2 optimizer must be adamw");
    t.epochs = s.value("epochs", t.epochs);
    t.batch = s.value("batch", t.batch);
    t.lr = s.value("lr", t.lr);
    t.beta1 = s.value("beta1", t.beta1);
    t.beta2 = s.value("beta2", t.beta2);
    t.weight_decay = s.value("weight_decay", t.weight_decay);
    t.clip_grad = s.value("clip_grad", t.clip_grad);
    t.cosine_lr = s.value("cosine_lr", t.cosine_lr);
    if (s.contains("loss_weights")) {
      const json& w = s.at("loss_weights");
      t.weights.organ = w.value("alpha", t.weights.organ);
      t.weights.tag = w.value("beta", t.weights.tag);
      t.weights.sentence = w.value("gamma", t.weights.sentence);
    }
    merge(s, "generator", t.generator);
    t.lm_warmup_epochs = s.value("lm_warmup_epochs", t.lm_warmup_epochs);
    t.lm_warmup_lr = s.value("lm_warmup_lr", t.lm_warmup_lr);
    t.no_tag_cls = s.value("no_tag_cls", t.no_tag_cls);
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const fs::path& path, const RunConfig& c) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << json(c).dump(2) << '\n';
  if (!out) throw FormatError("cannot write " + path.string());
}

std::string fingerprint(const RunConfig& c) {
  const std::string dump = json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'M', 'R', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated checkpoint: " + what);
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json header = {{"module_id", ckpt.module_id},
                 {"fingerprint", ckpt.fingerprint},
                 {"step", ckpt.step},
                 {"rng_states", ckpt.rng_states},
                 {"extra", ckpt.extra}};
  json params = json::array();
  for (const auto& p : ckpt.params) {
    if (p.values.size() != static_cast<std::size_t>(p.rows) * static_cast<std::size_t>(p.cols)) {
      throw ShapeError("checkpoint param " + p.name + " has a wrong value count");
    }
    params.push_back({{"name", p.name}, {"rows", p.rows}, {"cols", p.cols}});
  }
  header["params"] = params;
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : ckpt.params) {
      out.write(reinterpret_cast<const char*>(p.values.data()),
                static_cast<std::streamsize>(p.values.size() * sizeof(double)));
    }
    if (!out) throw FormatError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic in " + path.string());
  if (take<std::uint32_t>(in, "version") != kVersion) throw FormatError("unsupported checkpoint version");
  const auto len = take<std::uint64_t>(in, "header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint header");
  const json header = json::parse(text);
  Checkpoint c;
  c.module_id = header.at("module_id").get<std::string>();
  c.fingerprint = header.at("fingerprint").get<std::string>();
  c.step = header.at("step").get<long>();
  c.rng_states = header.at("rng_states").get<std::map<std::string, std::string>>();
  c.extra = header.at("extra");
  for (const auto& p : header.at("params")) {
    StoredParam s;
    s.name = p.at("name").get<std::string>();
    s.rows = p.at("rows").get<int>();
    s.cols = p.at("cols").get<int>();
    s.values.resize(static_cast<std::size_t>(s.rows) * static_cast<std::size_t>(s.cols));
    if (!in.read(reinterpret_cast<char*>(s.values.data()),
                 static_cast<std::streamsize>(s.values.size() * sizeof(double)))) {
      throw FormatError("truncated checkpoint payload at " + s.name);
    }
    c.params.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path.string());
  return c;
}

std::vector<StoredParam> capture(const nn::ParamList& params) {
  std::vector<StoredParam> out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.rows(), p.tensor.cols(), p.tensor.values()});
  return out;
}

void restore(const nn::ParamList& params, const std::vector<StoredParam>& stored) {
  std::map<std::string, const StoredParam*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s;
  for (const auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + p.name);
    const StoredParam& s = *it->second;
    if (s.rows != p.tensor.rows() || s.cols != p.tensor.cols()) {
      throw ShapeError("checkpoint shape mismatch for " + p.name);
    }
    ad::Tensor t = p.tensor;
    t.mutable_values() = s.values;
  }
}

}  // namespace wsr::harness
