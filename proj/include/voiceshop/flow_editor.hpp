#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "voiceshop/layers.hpp"
#include "voiceshop/matrix.hpp"
#include "voiceshop/ode.hpp"

namespace vs::flow {

using num::Rng;
using num::Tensor;

struct AttributeVector {
  double age = 55;     // years
  double gender = 0;   // logit; sign encodes class
};

enum class TraceMode { exact, hutchinson };

// dz/dt for a batch: z (d, B), conditioning a (k, B) -> (d, B).
using ConditionalDynamics = std::function<Tensor(const Tensor& z, double t, const Tensor& a)>;

// Per-column Tr(d phi / d z) through d vector-Jacobian products (exact) or
// Rademacher probes (hutchinson). Values only; returns one entry per column.
std::vector<double> trace_jacobian(const ConditionalDynamics& f, const Tensor& z, double t, const Tensor& a,
                                   TraceMode mode, int probes, Rng& rng);

// Sum over checkpoints of squared residuals against a least-squares polynomial
// of the given degree in t, averaged over coordinates. states[i] is z(times[i]).
Tensor tpr_penalty(const std::vector<Tensor>& states, const std::vector<double>& times, int degree = 1);

struct FlowConfig {
  std::size_t hidden = 64;
  double t0 = 0.0;
  double t1 = 1.0;
  num::OdeSolverConfig solver{};
  TraceMode trace = TraceMode::exact;  // exact for dim <= 64, else hutchinson
  int hutchinson_probes = 4;
};

// One conditional block: phi = W2 tanh(W1 z + U c + b1) + V c + b2 with c = [t; a].
struct CnfBlock {
  Tensor w1, u, b1, w2, v, b2;

  CnfBlock() = default;
  CnfBlock(std::size_t dim, std::size_t attr_dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& z, double t, const Tensor& a) const;
  // Closed-form Tr(d phi / d z) per column: sum_k (1 - h_k^2) (W1 W2)_kk; (1, B).
  Tensor trace(const Tensor& z, double t, const Tensor& a) const;
  num::ParamList params() const;
  std::size_t dim() const { return w1.cols(); }
  std::size_t attr_dim() const { return u.cols() - 1; }
};

// Attribute-conditional CNF over embeddings with prior N(0, I) at t0 and data at t1.
class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(std::size_t dim, std::size_t attr_dim, const FlowConfig& cfg, Rng& rng);

  std::size_t dim() const { return block_.dim(); }
  std::size_t attr_dim() const { return block_.attr_dim(); }
  const FlowConfig& config() const { return cfg_; }
  FlowConfig& config() { return cfg_; }
  const CnfBlock& block() const { return block_; }

  // Data standardization applied before the flow (identity until fitted).
  void set_standardization(const Vector& mean, const Vector& std);
  // Age normalization for AttributeVector inputs; gender logits are used raw.
  void set_age_normalization(double mean, double std);
  Tensor conditioning(const std::vector<AttributeVector>& attrs) const;  // (2, B)

  // Columns are samples. Differentiable when parameters require grad.
  Tensor forward_map(const Tensor& z0, const Tensor& a) const;  // prior -> data
  Tensor reverse_map(const Tensor& w, const Tensor& a) const;   // data -> prior
  // log p(w | a) per column; (1, B).
  Tensor log_likelihood(const Tensor& w, const Tensor& a) const;

  Vector edit(const Vector& w, const AttributeVector& from, const AttributeVector& to, double strength = 1.0) const;

  num::ParamList params() const { return block_.params(); }
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  struct Path {
    Tensor z0;                   // state at t0
    Tensor log_det;              // (1, B): minus the integrated trace
    std::vector<Tensor> states;  // z at the checkpoints, t1 first
    std::vector<double> times;
  };
  // Reverse integration of the augmented state with checkpoints for the TPR penalty.
  Path reverse_path(const Tensor& w_std, const Tensor& a, int checkpoints, const num::OdeSolverConfig& solver) const;

  Tensor standardize(const Tensor& w) const;
  Tensor destandardize(const Tensor& w) const;

 private:
  Tensor augmented_dynamics(const Tensor& state, double t, const Tensor& a, Rng* rng) const;

  FlowConfig cfg_;
  CnfBlock block_;
  Tensor mean_, std_;  // (d, 1)
  double age_mean_ = 55, age_std_ = 20;
};

struct CnfTrainConfig {
  int iterations = 300;
  int batch = 128;
  double lr = 5e-3;
  double lr_final = 5e-4;
  int tpr_checkpoints = 5;
  int tpr_degree = 1;
  double tpr_weight = 0.01;
  double solver_tol = 1e-4;
  bool standardize = true;
  std::uint64_t seed = 3;
};

struct CnfTrainLog {
  std::vector<double> nll;  // mean NLL per iteration (training batch)
  double initial_nll = 0;
  double final_nll = 0;
};

// data: (d, N) embeddings; attrs: per-column attributes.
CnfTrainLog train_cnf(ConditionalFlow& flow, const Matrix& data, const std::vector<AttributeVector>& attrs,
                      const CnfTrainConfig& cfg, const std::function<void(int, double)>& progress = {});

// ---- attribute predictor and weak labels

class AttributePredictor {
 public:
  AttributePredictor() = default;
  AttributePredictor(std::size_t dim, std::size_t hidden, Rng& rng);

  AttributeVector predict(const Vector& embedding) const;
  Tensor forward(const Tensor& x) const;  // (2, B): normalized age, gender logit
  num::ParamList params() const;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  nn::Linear l1, l2;
  Tensor in_mean, in_std;  // input standardization
  double age_mean = 55, age_std = 20;
};

struct PredictorTrainConfig {
  int epochs = 400;
  double lr = 1e-2;
  double weight_decay = 1e-3;
  std::uint64_t seed = 5;
};

// gender_class entries are +1 / -1. Throws TrainingError on single-class data.
AttributePredictor train_attribute_predictor(const Matrix& embeddings, const std::vector<double>& ages,
                                             const std::vector<int>& gender_class, const PredictorTrainConfig& cfg);

struct WeakLabel {
  std::string id;
  double age_years = 0;
  double gender_logit = 0;
  std::string source;  // "labeled" or "weak"
};

std::vector<WeakLabel> weak_label(const Matrix& embeddings, const std::vector<std::string>& ids,
                                  const AttributePredictor& predictor);
void write_attribute_csv(const std::filesystem::path& path, const std::vector<WeakLabel>& rows);

}  // namespace vs::flow
