#pragma once

#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsr/mrvit.hpp"
#include "wsr/nn.hpp"
#include "wsr/rng.hpp"

namespace wsr::dino {

using ad::Tensor;

struct View {
  Tensor tokens;
  std::vector<int> positions;  // ascending source rows
  bool global = false;
};

struct ViewConfig {
  int n_global = 2;
  int n_local = 2;
  double global_keep_min = 0.75;
  double global_keep_max = 1.0;
  double local_keep_min = 0.25;
  double local_keep_max = 0.5;
  double noise_sigma = 0.05;
};

// Global views first, then locals. Token subsets are drawn without replacement.
std::vector<View> make_views(const Tensor& tokens, const ViewConfig& config, Rng& rng);

class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int in_dim, int hidden, int out_dim, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Linear fc1;
  nn::Linear fc2;
  nn::Linear fc3;
};

// softmax((teacher - center) / temp), row vector.
std::vector<double> teacher_probs(std::span<const double> teacher_logits, std::span<const double> center,
                                  double temp);
double entropy(std::span<const double> p);

// -sum P_t log softmax(student / temp_s); teacher side is a constant.
Tensor pair_loss(const Tensor& student_logits, std::span<const double> teacher_p, double student_temp);

// Mean over (teacher view i, student view j) with i != j. Teacher view i
// and student view i are the same augmented view.
Tensor dino_loss(const std::vector<Tensor>& student_logits, const std::vector<Tensor>& teacher_logits,
                 double student_temp, double teacher_temp, std::span<const double> center);

void ema_update(const nn::ParamList& teacher, const nn::ParamList& student, double m);
void update_center(std::vector<double>& center, const std::vector<std::vector<double>>& teacher_logits,
                   double m_c);

struct DinoConfig {
  ViewConfig views;
  int head_hidden = 128;
  int out_dim = 256;
  double student_temp = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  int teacher_temp_warmup_epochs = 30;
  double momentum_start = 0.996;
  double momentum_end = 1.0;
  double center_momentum = 0.9;
  double clip_grad = 3.0;
};

void to_json(nlohmann::json& j, const DinoConfig& c);
void from_json(const nlohmann::json& j, DinoConfig& c);

struct OptConfig {
  std::string name = "sgd";  // sgd | adamw
  double lr = 0.1;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
};

void to_json(nlohmann::json& j, const OptConfig& c);
void from_json(const nlohmann::json& j, OptConfig& c);

double teacher_temp_at(const DinoConfig& c, int epoch);
double momentum_at(const DinoConfig& c, long step, long total_steps);

struct DinoState {
  std::unique_ptr<mrvit::Encoder> student;
  std::unique_ptr<mrvit::Encoder> teacher;
  ProjectionHead student_head;
  ProjectionHead teacher_head;
  std::vector<double> center;
  long step = 0;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  double momentum = 0.996;
  double center_momentum = 0.9;

  nn::ParamList student_params() const;
  nn::ParamList teacher_params() const;
  void validate() const;
};

// Teacher starts as an exact copy of the student and never requires grad.
DinoState make_state(const mrvit::EncoderFactory& factory, const DinoConfig& config, Rng& rng);

struct StepLog {
  long step = 0;
  double loss = 0.0;
  double teacher_temp = 0.0;
  double momentum = 0.0;
  double center_norm = 0.0;
  double teacher_grad_max = 0.0;  // must stay exactly 0
};

// Per item: token matrix plus an optional override producing fresh tokens
// per step (pixel-level augmentation path).
using TokenSource = std::function<Tensor(std::size_t item, Rng& rng)>;

struct SslOptions {
  int epochs = 1;
  int batch = 64;
  OptConfig opt;
  std::ostream* csv = nullptr;
  TokenSource source;  // when set, replaces dataset lookup
};

std::vector<StepLog> train_ssl(const std::vector<Tensor>& dataset, DinoState& state, const DinoConfig& config,
                               const SslOptions& options, Rng& rng);

}  // namespace wsr::dino
