#include "wsr/dino.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <variant>

#include "wsr/errors.hpp"
#include "wsr/optim.hpp"

namespace wsr::dino {

// ---------------------------------------------------------------- views

namespace {

View make_view(const Tensor& tokens, double lo, double hi, double sigma, bool global, Rng& rng) {
  const int n = tokens.rows();
  const int a = std::min(n, std::max(1, static_cast<int>(std::ceil(lo * n - 1e-9))));
  const int b = std::max(a, std::min(n, static_cast<int>(std::floor(hi * n + 1e-9))));
  const int k = rng.uniform_int(a, b);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  View v;
  v.global = global;
  v.positions = idx;
  Tensor sub = ad::gather_rows(tokens.detach(), idx);
  if (sigma > 0.0) {
    for (double& x : sub.mutable_values()) x += rng.normal(0.0, sigma);
  }
  v.tokens = sub;
  return v;
}

}  // namespace

std::vector<View> make_views(const Tensor& tokens, const ViewConfig& c, Rng& rng) {
  if (!tokens.defined() || tokens.rows() == 0) throw ShapeError("make_views: empty token matrix");
  if (c.n_global < 2) throw ConfigError("make_views: at least 2 global views are required");
  if (c.n_local < 0) throw ConfigError("make_views: negative local view count");
  if (c.global_keep_min < 0.75 || c.global_keep_max > 1.0 || c.global_keep_min > c.global_keep_max) {
    throw ConfigError("make_views: global keep ratio must lie in [0.75, 1]");
  }
  if (c.local_keep_min <= 0.0 || c.local_keep_min > c.local_keep_max || c.local_keep_max > 1.0) {
    throw ConfigError("make_views: invalid local keep ratio");
  }
  std::vector<View> out;
  for (int i = 0; i < c.n_global; ++i) {
    out.push_back(make_view(tokens, c.global_keep_min, c.global_keep_max, c.noise_sigma, true, rng));
  }
  for (int i = 0; i < c.n_local; ++i) {
    out.push_back(make_view(tokens, c.local_keep_min, c.local_keep_max, c.noise_sigma, false, rng));
  }
  return out;
}

// ---------------------------------------------------------------- head

ProjectionHead::ProjectionHead(int in_dim, int hidden, int out_dim, Rng& rng)
    : fc1(in_dim, hidden, rng), fc2(hidden, hidden, rng), fc3(hidden, out_dim, rng) {}

Tensor ProjectionHead::forward(const Tensor& x) const {
  return fc3.forward(ad::gelu(fc2.forward(ad::gelu(fc1.forward(x)))));
}

void ProjectionHead::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
  fc3.collect(out, prefix + ".fc3");
}

// ---------------------------------------------------------------- loss

std::vector<double> teacher_probs(std::span<const double> t, std::span<const double> center, double temp) {
  if (temp <= 0.0) throw ConfigError("teacher temperature must be positive");
  if (center.size() != t.size()) throw ShapeError("center width does not match teacher logits");
  std::vector<double> z(t.size());
  double mx = -INFINITY;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw NumericError("non-finite teacher logit");
    z[i] = (t[i] - center[i]) / temp;
    mx = std::max(mx, z[i]);
  }
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

Tensor pair_loss(const Tensor& student, std::span<const double> teacher_p, double student_temp) {
  if (student_temp <= 0.0) throw ConfigError("student temperature must be positive");
  if (student.rows() != 1 || static_cast<std::size_t>(student.cols()) != teacher_p.size()) {
    throw ShapeError("dino loss: student and teacher projection widths differ");
  }
  for (double v : student.values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite student logit");
  }
  const Tensor logp = ad::log_softmax_rows(ad::scale(student, 1.0 / student_temp));
  const Tensor p = Tensor::from(1, student.cols(), std::vector<double>(teacher_p.begin(), teacher_p.end()));
  return ad::scale(ad::sum(ad::mul(logp, p)), -1.0);
}

Tensor dino_loss(const std::vector<Tensor>& students, const std::vector<Tensor>& teachers, double student_temp,
                 double teacher_temp, std::span<const double> center) {
  Tensor total;
  int pairs = 0;
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    if (teachers[i].rows() != 1) throw ShapeError("dino loss: teacher output must be a row vector");
    const auto p = teacher_probs(teachers[i].values(), center, teacher_temp);
    for (std::size_t j = 0; j < students.size(); ++j) {
      if (i == j) continue;
      const Tensor l = pair_loss(students[j], p, student_temp);
      total = total.defined() ? total + l : l;
      ++pairs;
    }
  }
  if (pairs == 0) throw ConfigError("dino loss: no (teacher, student) view pairs");
  return ad::scale(total, 1.0 / pairs);
}

void ema_update(const nn::ParamList& teacher, const nn::ParamList& student, double m) {
  if (m < 0.0 || m > 1.0) throw ConfigError("EMA momentum must lie in [0, 1]");
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const Tensor& s = student[i].tensor;
    Tensor t = teacher[i].tensor;
    if (teacher[i].name != student[i].name || t.rows() != s.rows() || t.cols() != s.cols()) {
      throw ShapeError("ema_update: mismatch at " + teacher[i].name);
    }
    auto& tv = t.mutable_values();
    const auto& sv = s.values();
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = m * tv[k] + (1.0 - m) * sv[k];
  }
}

void update_center(std::vector<double>& center, const std::vector<std::vector<double>>& batch, double m_c) {
  if (m_c < 0.0 || m_c > 1.0) throw ConfigError("center momentum must lie in [0, 1]");
  if (batch.empty()) return;
  std::vector<double> mean(center.size(), 0.0);
  for (const auto& row : batch) {
    if (row.size() != center.size()) throw ShapeError("update_center: width mismatch");
    for (std::size_t k = 0; k < row.size(); ++k) mean[k] += row[k];
  }
  for (std::size_t k = 0; k < center.size(); ++k) {
    center[k] = m_c * center[k] + (1.0 - m_c) * (mean[k] / static_cast<double>(batch.size()));
  }
}

// ---------------------------------------------------------------- config

void to_json(nlohmann::json& j, const DinoConfig& c) {
  j = nlohmann::json{{"n_global", c.views.n_global},
                     {"n_local", c.views.n_local},
                     {"global_keep_min", c.views.global_keep_min},
                     {"global_keep_max", c.views.global_keep_max},
                     {"local_keep_min", c.views.local_keep_min},
                     {"local_keep_max", c.views.local_keep_max},
                     {"view_noise", c.views.noise_sigma},
                     {"head_hidden", c.head_hidden},
                     {"out_dim", c.out_dim},
                     {"student_temp", c.student_temp},
                     {"teacher_temp_start", c.teacher_temp_start},
                     {"teacher_temp_end", c.teacher_temp_end},
                     {"teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs},
                     {"momentum_start", c.momentum_start},
                     {"momentum_end", c.momentum_end},
                     {"center_momentum", c.center_momentum},
                     {"clip_grad", c.clip_grad}};
}

void from_json(const nlohmann::json& j, DinoConfig& c) {
  c.views.n_global = j.value("n_global", c.views.n_global);
  c.views.n_local = j.value("n_local", c.views.n_local);
  c.views.global_keep_min = j.value("global_keep_min", c.views.global_keep_min);
  c.views.global_keep_max = j.value("global_keep_max", c.views.global_keep_max);
  c.views.local_keep_min = j.value("local_keep_min", c.views.local_keep_min);
  c.views.local_keep_max = j.value("local_keep_max", c.views.local_keep_max);
  c.views.noise_sigma = j.value("view_noise", c.views.noise_sigma);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.student_temp = j.value("student_temp", c.student_temp);
  c.teacher_temp_start = j.value("teacher_temp_start", c.teacher_temp_start);
  c.teacher_temp_end = j.value("teacher_temp_end", c.teacher_temp_end);
  c.teacher_temp_warmup_epochs = j.value("teacher_temp_warmup_epochs", c.teacher_temp_warmup_epochs);
  c.momentum_start = j.value("momentum_start", c.momentum_start);
  c.momentum_end = j.value("momentum_end", c.momentum_end);
  c.center_momentum = j.value("center_momentum", c.center_momentum);
  c.clip_grad = j.value("clip_grad", c.clip_grad);
}

void to_json(nlohmann::json& j, const OptConfig& c) {
  j = nlohmann::json{{"name", c.name},   {"lr", c.lr},       {"momentum", c.momentum},
                     {"beta1", c.beta1}, {"beta2", c.beta2}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, OptConfig& c) {
  c.name = j.value("name", c.name);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
}

double teacher_temp_at(const DinoConfig& c, int epoch) {
  if (c.teacher_temp_warmup_epochs <= 0 || epoch >= c.teacher_temp_warmup_epochs) return c.teacher_temp_end;
  return c.teacher_temp_start +
         (c.teacher_temp_end - c.teacher_temp_start) * static_cast<double>(epoch) / c.teacher_temp_warmup_epochs;
}

double momentum_at(const DinoConfig& c, long step, long total) {
  if (total <= 1) return c.momentum_start;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return c.momentum_end - (c.momentum_end - c.momentum_start) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

// ---------------------------------------------------------------- state

nn::ParamList DinoState::student_params() const {
  nn::ParamList p = student->parameters();
  student_head.collect(p, "head");
  return p;
}

nn::ParamList DinoState::teacher_params() const {
  nn::ParamList p = teacher->parameters();
  teacher_head.collect(p, "head");
  return p;
}

void DinoState::validate() const {
  const auto s = student_params();
  const auto t = teacher_params();
  if (s.size() != t.size()) throw ShapeError("teacher and student parameter sets differ");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].name != t[i].name || s[i].tensor.rows() != t[i].tensor.rows() ||
        s[i].tensor.cols() != t[i].tensor.cols()) {
      throw ShapeError("teacher/student mismatch at " + s[i].name);
    }
  }
  for (double c : center) {
    if (!std::isfinite(c)) throw NumericError("non-finite DINO center");
  }
  if (teacher_temp <= 0.0 || student_temp <= 0.0) throw ConfigError("DINO temperatures must be positive");
  if (momentum < 0.0 || momentum > 1.0 || center_momentum < 0.0 || center_momentum > 1.0) {
    throw ConfigError("DINO momenta must lie in [0, 1]");
  }
}

DinoState make_state(const mrvit::EncoderFactory& factory, const DinoConfig& config, Rng& rng) {
  DinoState s;
  s.student = factory(rng);
  s.student_head = ProjectionHead(s.student->output_dim(), config.head_hidden, config.out_dim, rng);
  Rng scratch(derive_seed(0, "teacher-shape"));
  s.teacher = factory(scratch);
  s.teacher_head = ProjectionHead(s.student->output_dim(), config.head_hidden, config.out_dim, scratch);
  nn::copy_values(s.student_params(), s.teacher_params());
  nn::set_trainable(s.teacher_params(), false);
  s.center.assign(static_cast<std::size_t>(config.out_dim), 0.0);
  s.teacher_temp = config.teacher_temp_start;
  s.student_temp = config.student_temp;
  s.momentum = config.momentum_start;
  s.center_momentum = config.center_momentum;
  s.validate();
  return s;
}

// ---------------------------------------------------------------- training

namespace {

class Optimizer {
 public:
  Optimizer(const OptConfig& c, std::vector<Tensor> params) {
    if (c.lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (c.name == "sgd") {
      impl_.emplace<optim::Sgd>(std::move(params), optim::SgdOptions{c.lr, c.momentum, c.weight_decay});
    } else if (c.name == "adamw") {
      impl_.emplace<optim::AdamW>(std::move(params),
                                  optim::AdamWOptions{c.lr, c.beta1, c.beta2, 1e-8, c.weight_decay});
    } else {
      throw ConfigError("unknown optimizer '" + c.name + "'");
    }
  }
  void step() {
    std::visit([](auto& o) {
      if constexpr (!std::is_same_v<std::decay_t<decltype(o)>, std::monostate>) o.step();
    }, impl_);
  }

 private:
  std::variant<std::monostate, optim::Sgd, optim::AdamW> impl_;
};

double max_abs_grad(const nn::ParamList& params) {
  double m = 0.0;
  for (const auto& p : params) {
    if (p.tensor.node()->grad.empty()) continue;
    for (double g : p.tensor.node()->grad) m = std::max(m, std::abs(g));
  }
  return m;
}

}  // namespace

std::vector<StepLog> train_ssl(const std::vector<Tensor>& dataset, DinoState& state, const DinoConfig& config,
                               const SslOptions& options, Rng& rng) {
  if (dataset.empty()) throw ConfigError("train_ssl: empty dataset");
  if (options.epochs < 0 || options.batch < 1) throw ConfigError("train_ssl: invalid epochs/batch");
  const auto student = state.student_params();
  const auto teacher = state.teacher_params();
  const auto trainable = nn::trainable_tensors(student);
  Optimizer opt(options.opt, trainable);

  const long per_epoch = static_cast<long>((dataset.size() + static_cast<std::size_t>(options.batch) - 1) /
                                           static_cast<std::size_t>(options.batch));
  const long total = per_epoch * options.epochs;
  if (options.csv != nullptr) *options.csv << "step,loss,teacher_temp,momentum,center_norm\n";

  std::vector<StepLog> log;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    state.teacher_temp = teacher_temp_at(config, epoch);
    rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(options.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(options.batch));
      nn::zero_grads(student);
      nn::zero_grads(teacher);
      std::vector<std::vector<double>> teacher_rows;
      double loss_sum = 0.0;
      for (std::size_t b = b0; b < b1; ++b) {
        const Tensor tokens = options.source ? options.source(order[b], rng) : dataset[order[b]];
        const auto views = make_views(tokens, config.views, rng);
        std::vector<Tensor> t_out;
        {
          ad::NoGradGuard guard;
          for (const auto& v : views) {
            if (!v.global) continue;
            t_out.push_back(state.teacher_head.forward(state.teacher->forward(v.tokens, v.positions)));
            teacher_rows.push_back(t_out.back().values());
          }
        }
        std::vector<Tensor> s_out;
        for (const auto& v : views) {
          s_out.push_back(state.student_head.forward(state.student->forward(v.tokens, v.positions)));
        }
        const Tensor loss = ad::scale(
            dino_loss(s_out, t_out, state.student_temp, state.teacher_temp, state.center),
            1.0 / static_cast<double>(b1 - b0));
        if (!std::isfinite(loss.item())) {
          throw NumericError("DINO loss became non-finite at step " + std::to_string(state.step) +
                             " (teacher temp " + std::to_string(state.teacher_temp) + ")");
        }
        loss_sum += loss.item();
        loss.backward();
      }
      StepLog entry;
      entry.teacher_grad_max = max_abs_grad(teacher);
      if (entry.teacher_grad_max != 0.0) throw NumericError("teacher received a gradient");
      optim::clip_grad_norm(trainable, config.clip_grad);
      opt.step();
      state.momentum = momentum_at(config, state.step, total);
      ema_update(teacher, student, state.momentum);
      update_center(state.center, teacher_rows, state.center_momentum);

      entry.step = state.step;
      entry.loss = loss_sum;
      entry.teacher_temp = state.teacher_temp;
      entry.momentum = state.momentum;
      double cn = 0.0;
      for (double c : state.center) cn += c * c;
      entry.center_norm = std::sqrt(cn);
      log.push_back(entry);
      if (options.csv != nullptr) {
        *options.csv << entry.step << ',' << entry.loss << ',' << entry.teacher_temp << ',' << entry.momentum
                     << ',' << entry.center_norm << '\n';
      }
      ++state.step;
    }
  }
  return log;
}

}  // namespace wsr::dino
