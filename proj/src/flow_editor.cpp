#include "voiceshop/flow_editor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Dense>

#include "voiceshop/checkpoint.hpp"
#include "voiceshop/errors.hpp"
#include "voiceshop/optim.hpp"

namespace vs::flow {

using namespace vs::num;

// ---- generic trace and TPR

std::vector<double> trace_jacobian(const ConditionalDynamics& f, const Tensor& z, double t, const Tensor& a,
                                   TraceMode mode, int probes, Rng& rng) {
  const std::size_t d = z.rows(), B = z.cols();
  EnableGradGuard record;
  Tensor leaf = z.clone_leaf(true);
  Tensor out = f(leaf, t, a);
  if (out.shape() != leaf.shape()) throw ContractError("trace_jacobian: dynamics must preserve shape");
  std::vector<double> tr(B, 0.0);
  if (mode == TraceMode::exact) {
    for (std::size_t i = 0; i < d; ++i) {
      auto g = gradients(sum(slice(out, 0, i, i + 1)), {leaf})[0];
      for (std::size_t b = 0; b < B; ++b) tr[b] += g[i * B + b];
    }
    return tr;
  }
  if (probes < 1) throw ContractError("trace_jacobian: need at least one probe");
  for (int p = 0; p < probes; ++p) {
    std::vector<double> eps(d * B);
    for (auto& e : eps) e = rng.rademacher();
    Tensor probe = Tensor::from({d, B}, eps);
    auto g = gradients(sum(mul(out, probe)), {leaf})[0];  // eps^T J per column
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t b = 0; b < B; ++b) tr[b] += g[i * B + b] * eps[i * B + b];
  }
  for (auto& v : tr) v /= probes;
  return tr;
}

Tensor tpr_penalty(const std::vector<Tensor>& states, const std::vector<double>& times, int degree) {
  const std::size_t K = states.size();
  if (degree < 0) throw ContractError("tpr_penalty: negative degree");
  if (K < 3 || K < static_cast<std::size_t>(degree) + 1 || times.size() != K)
    throw ContractError("tpr_penalty: need at least max(3, degree + 1) checkpoints with matching times");
  Eigen::MatrixXd T(K, degree + 1);
  for (std::size_t i = 0; i < K; ++i)
    for (int p = 0; p <= degree; ++p) T(i, p) = std::pow(times[i], p);
  // Residual operator I - T (T^T T)^-1 T^T, applied per coordinate.
  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(K, K) - T * (T.transpose() * T).ldlt().solve(T.transpose());
  Tensor total;
  for (std::size_t i = 0; i < K; ++i) {
    Tensor r;
    for (std::size_t j = 0; j < K; ++j) {
      if (R(i, j) == 0.0) continue;
      Tensor term = scale(states[j], R(i, j));
      r = r.node() && r.numel() ? add(r, term) : term;
    }
    if (!r.node() || r.numel() == 0) continue;
    Tensor sq = sum(square(r));
    total = total.node() && total.numel() ? add(total, sq) : sq;
  }
  if (!total.node() || total.numel() == 0) return Tensor::scalar(0.0);
  return scale(total, 1.0 / static_cast<double>(states[0].numel()));
}

// ---- block

namespace {

Tensor param(Shape s, Rng& rng, double bound) {
  Tensor t = bound > 0 ? Tensor::uniform(std::move(s), rng, -bound, bound) : Tensor::zeros(std::move(s));
  t.set_requires_grad(true);
  return t;
}

Tensor time_and_attrs(double t, const Tensor& a) { return concat({Tensor::full({1, a.cols()}, t), a}, 0); }

Tensor log_normal(const Tensor& z) {
  const double d = static_cast<double>(z.rows());
  return add_scalar(scale(sum(square(z), 0), -0.5), -0.5 * d * std::log(2.0 * std::numbers::pi));
}

}  // namespace

CnfBlock::CnfBlock(std::size_t dim, std::size_t attr_dim, std::size_t hidden, Rng& rng)
    : w1(param({hidden, dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)))),
      u(param({hidden, attr_dim + 1}, rng, 1.0 / std::sqrt(static_cast<double>(attr_dim + 1)))),
      b1(param({hidden, 1}, rng, 0.0)),
      w2(param({dim, hidden}, rng, 0.0)),
      v(param({dim, attr_dim + 1}, rng, 0.0)),
      b2(param({dim, 1}, rng, 0.0)) {}

Tensor CnfBlock::operator()(const Tensor& z, double t, const Tensor& a) const {
  if (z.rows() != dim() || a.rows() != attr_dim() || a.cols() != z.cols())
    throw ContractError("cnf dynamics: expected z (" + std::to_string(dim()) + ", B) and a (" +
                        std::to_string(attr_dim()) + ", B)");
  Tensor c = time_and_attrs(t, a);
  Tensor h = tanh(add(add(matmul(w1, z), matmul(u, c)), b1));
  return add(add(matmul(w2, h), matmul(v, c)), b2);
}

Tensor CnfBlock::trace(const Tensor& z, double t, const Tensor& a) const {
  Tensor c = time_and_attrs(t, a);
  Tensor h = tanh(add(add(matmul(w1, z), matmul(u, c)), b1));
  Tensor diag = sum(mul(w1, transpose(w2)), 1);  // (H, 1): (W1 W2)_kk
  return sum(mul(add_scalar(neg(square(h)), 1.0), diag), 0);
}

ParamList CnfBlock::params() const {
  return {{"w1", w1}, {"u", u}, {"b1", b1}, {"w2", w2}, {"v", v}, {"b2", b2}};
}

// ---- flow

ConditionalFlow::ConditionalFlow(std::size_t dim, std::size_t attr_dim, const FlowConfig& cfg, Rng& rng)
    : cfg_(cfg),
      block_(dim, attr_dim, cfg.hidden, rng),
      mean_(Tensor::zeros({dim, 1})),
      std_(Tensor::full({dim, 1}, 1.0)) {
  cfg.solver.validate();
  if (dim == 0 || cfg.hidden == 0) throw ConfigError("flow: dimensions must be positive");
  if (cfg.t1 == cfg.t0) throw ConfigError("flow: t0 and t1 must differ");
  if (dim > 64 && cfg.trace == TraceMode::exact) cfg_.trace = TraceMode::hutchinson;
}

void ConditionalFlow::set_standardization(const Vector& mean, const Vector& sd) {
  if (static_cast<std::size_t>(mean.size()) != dim() || static_cast<std::size_t>(sd.size()) != dim())
    throw ContractError("flow: standardization dimension mismatch");
  if ((sd.array() <= 0).any()) throw ContractError("flow: standard deviations must be positive");
  mean_ = reshape(to_tensor(mean), {dim(), 1});
  std_ = reshape(to_tensor(sd), {dim(), 1});
}

void ConditionalFlow::set_age_normalization(double mean, double sd) {
  if (!(sd > 0)) throw ContractError("flow: age std must be positive");
  age_mean_ = mean;
  age_std_ = sd;
}

Tensor ConditionalFlow::conditioning(const std::vector<AttributeVector>& attrs) const {
  if (attr_dim() != 2) throw ContractError("flow: AttributeVector conditioning needs attr_dim 2");
  std::vector<double> v(2 * attrs.size());
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    v[i] = (attrs[i].age - age_mean_) / age_std_;
    v[attrs.size() + i] = attrs[i].gender;
  }
  return Tensor::from({2, attrs.size()}, std::move(v));
}

Tensor ConditionalFlow::standardize(const Tensor& w) const { return div(sub(w, mean_), std_); }
Tensor ConditionalFlow::destandardize(const Tensor& w) const { return add(mul(w, std_), mean_); }

Tensor ConditionalFlow::forward_map(const Tensor& z0, const Tensor& a) const {
  auto f = [&](const Tensor& z, double t) { return block_(z, t, a); };
  return destandardize(dopri5_integrate(f, z0, cfg_.t0, cfg_.t1, cfg_.solver).state);
}

Tensor ConditionalFlow::reverse_map(const Tensor& w, const Tensor& a) const {
  auto f = [&](const Tensor& z, double t) { return block_(z, t, a); };
  return dopri5_integrate(f, standardize(w), cfg_.t1, cfg_.t0, cfg_.solver).state;
}

Tensor ConditionalFlow::augmented_dynamics(const Tensor& state, double t, const Tensor& a, Rng* rng) const {
  const std::size_t d = dim();
  Tensor z = slice(state, 0, 0, d);
  Tensor dz = block_(z, t, a);
  Tensor tr;
  if (cfg_.trace == TraceMode::hutchinson && rng && !grad_enabled()) {
    auto f = [&](const Tensor& zz, double tt, const Tensor& aa) { return block_(zz, tt, aa); };
    // Same probes at every evaluation so the integrand stays smooth for the adaptive solver.
    Rng probes = *rng;
    tr = Tensor::from({1, z.cols()}, trace_jacobian(f, z, t, a, TraceMode::hutchinson, cfg_.hutchinson_probes, probes));
  } else {
    tr = block_.trace(z, t, a);
  }
  return concat({dz, tr}, 0);
}

ConditionalFlow::Path ConditionalFlow::reverse_path(const Tensor& w_std, const Tensor& a, int checkpoints,
                                                    const OdeSolverConfig& solver) const {
  if (checkpoints < 2) throw ContractError("reverse_path: need at least 2 checkpoints");
  const std::size_t d = dim();
  Rng rng(0x5EED);
  auto f = [&](const Tensor& s, double t) { return augmented_dynamics(s, t, a, &rng); };
  Tensor s0 = concat({w_std, Tensor::zeros({1, w_std.cols()})}, 0);
  std::vector<double> times(checkpoints);
  for (int i = 0; i < checkpoints; ++i) times[i] = cfg_.t1 + (cfg_.t0 - cfg_.t1) * i / (checkpoints - 1);
  OdePath p = dopri5_path(f, s0, times, solver);
  Path out;
  out.times = times;
  for (const auto& s : p.states) out.states.push_back(slice(s, 0, 0, d));
  out.z0 = out.states.back();
  out.log_det = slice(p.states.back(), 0, d, d + 1);
  return out;
}

Tensor ConditionalFlow::log_likelihood(const Tensor& w, const Tensor& a) const {
  Path p = reverse_path(standardize(w), a, 2, cfg_.solver);
  double log_std = 0;
  for (double s : std_.data()) log_std += std::log(s);
  return add_scalar(add(log_normal(p.z0), p.log_det), -log_std);
}

Vector ConditionalFlow::edit(const Vector& w, const AttributeVector& from, const AttributeVector& to,
                             double strength) const {
  AttributeVector target{from.age + strength * (to.age - from.age), from.gender + strength * (to.gender - from.gender)};
  NoGradGuard guard;
  Tensor wt = to_tensor(w);
  Tensor z0 = reverse_map(reshape(wt, {dim(), 1}), conditioning({from}));
  return to_vector(forward_map(z0, conditioning({target})));
}

void ConditionalFlow::save(const std::filesystem::path& path) const {
  ParamList p = params();
  p.emplace_back("std.mean", mean_);
  p.emplace_back("std.std", std_);
  p.emplace_back("attr.age", Tensor::vector({age_mean_, age_std_}));
  save_checkpoint(path, p);
}

void ConditionalFlow::load(const std::filesystem::path& path) {
  Tensor age = Tensor::zeros({2});
  ParamList p = params();
  p.emplace_back("std.mean", mean_);
  p.emplace_back("std.std", std_);
  p.emplace_back("attr.age", age);
  load_checkpoint(path, p);
  age_mean_ = age.at(0);
  age_std_ = age.at(1);
}

// ---- training

CnfTrainLog train_cnf(ConditionalFlow& flow, const Matrix& data, const std::vector<AttributeVector>& attrs,
                      const CnfTrainConfig& cfg, const std::function<void(int, double)>& progress) {
  const auto N = static_cast<std::size_t>(data.cols());
  if (static_cast<std::size_t>(data.rows()) != flow.dim()) throw ContractError("train_cnf: data dimension mismatch");
  if (attrs.size() != N || N == 0) throw ContractError("train_cnf: one attribute vector per column required");
  {
    bool distinct = false;
    for (const auto& a : attrs) distinct |= a.age != attrs[0].age || a.gender != attrs[0].gender;
    if (!distinct) throw TrainingError("train_cnf: need at least two distinct attribute values");
  }
  if (cfg.standardize) {
    Vector mean = data.rowwise().mean();
    Vector sd = ((data.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
    for (Eigen::Index i = 0; i < sd.size(); ++i) sd[i] = std::max(sd[i], 1e-6);
    flow.set_standardization(mean, sd);
    double am = 0, as = 0;
    for (const auto& a : attrs) am += a.age;
    am /= N;
    for (const auto& a : attrs) as += (a.age - am) * (a.age - am);
    as = std::sqrt(as / N);
    flow.set_age_normalization(am, as > 1e-9 ? as : 1.0);
  }

  // Reported NLL is in data space: the standardization Jacobian is a constant.
  double log_std = 0;
  {
    Tensor one = flow.standardize(Tensor::zeros({flow.dim(), 1}));
    Tensor two = flow.standardize(Tensor::full({flow.dim(), 1}, 1.0));
    for (std::size_t i = 0; i < flow.dim(); ++i) log_std -= std::log(two.at(i) - one.at(i));
  }
  OdeSolverConfig solver = flow.config().solver;
  solver.rtol = solver.atol = cfg.solver_tol;
  Rng rng(cfg.seed);
  Adam opt(flow.params(), {.lr = cfg.lr});
  CnfTrainLog log;
  const std::size_t B = std::min<std::size_t>(cfg.batch, N);
  std::vector<std::size_t> order(N);
  for (std::size_t i = 0; i < N; ++i) order[i] = i;

  for (int it = 0; it < cfg.iterations; ++it) {
    double frac = cfg.iterations > 1 ? static_cast<double>(it) / (cfg.iterations - 1) : 1.0;
    opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * frac)));
    // Partial Fisher-Yates for a batch without replacement.
    for (std::size_t i = 0; i < B; ++i) std::swap(order[i], order[i + rng.below(N - i)]);
    Matrix wb(flow.dim(), B);
    std::vector<AttributeVector> ab(B);
    for (std::size_t i = 0; i < B; ++i) {
      wb.col(i) = data.col(order[i]);
      ab[i] = attrs[order[i]];
    }
    Tensor w = to_tensor(wb);
    Tensor a = flow.conditioning(ab);
    auto path = flow.reverse_path(flow.standardize(w), a, cfg.tpr_checkpoints, solver);
    Tensor ll = add(log_normal(path.z0), path.log_det);
    Tensor nll = neg(mean(ll));
    Tensor loss = cfg.tpr_weight > 0 ? add(nll, scale(tpr_penalty(path.states, path.times, cfg.tpr_degree), cfg.tpr_weight))
                                     : nll;
    double value = nll.item() + log_std;
    if (!std::isfinite(value) || !std::isfinite(loss.item()))
      throw TrainingError("train_cnf: non-finite loss at iteration " + std::to_string(it));
    backward(loss);
    clip_grad_norm(opt.params(), 10.0);
    opt.step();
    log.nll.push_back(value);
    if (it == 0) log.initial_nll = value;
    if (progress) progress(it + 1, value);
  }
  log.final_nll = log.nll.empty() ? 0.0 : log.nll.back();
  return log;
}

// ---- predictor

AttributePredictor::AttributePredictor(std::size_t dim, std::size_t hidden, Rng& rng)
    : l1(dim, hidden, rng), l2(hidden, 2, rng), in_mean(Tensor::zeros({dim, 1})), in_std(Tensor::full({dim, 1}, 1.0)) {}

Tensor AttributePredictor::forward(const Tensor& x) const { return l2(tanh(l1(div(sub(x, in_mean), in_std)))); }

AttributeVector AttributePredictor::predict(const Vector& embedding) const {
  NoGradGuard guard;
  Tensor out = forward(reshape(to_tensor(embedding), {static_cast<std::size_t>(embedding.size()), 1}));
  return {age_mean + age_std * out.at(0), out.at(1)};
}

ParamList AttributePredictor::params() const {
  ParamList p;
  nn::append(p, "l1", l1.params());
  nn::append(p, "l2", l2.params());
  return p;
}

void AttributePredictor::save(const std::filesystem::path& path) const {
  ParamList p = params();
  p.emplace_back("in.mean", in_mean);
  p.emplace_back("in.std", in_std);
  p.emplace_back("age", Tensor::vector({age_mean, age_std}));
  save_checkpoint(path, p);
}

void AttributePredictor::load(const std::filesystem::path& path) {
  Tensor age = Tensor::zeros({2});
  ParamList p = params();
  p.emplace_back("in.mean", in_mean);
  p.emplace_back("in.std", in_std);
  p.emplace_back("age", age);
  load_checkpoint(path, p);
  age_mean = age.at(0);
  age_std = age.at(1);
}

AttributePredictor train_attribute_predictor(const Matrix& embeddings, const std::vector<double>& ages,
                                             const std::vector<int>& gender_class, const PredictorTrainConfig& cfg) {
  const auto N = static_cast<std::size_t>(embeddings.cols());
  if (N == 0 || ages.size() != N || gender_class.size() != N)
    throw ContractError("train_attribute_predictor: one label per embedding required");
  bool has_pos = false, has_neg = false;
  for (int g : gender_class) {
    if (g != 1 && g != -1) throw ContractError("train_attribute_predictor: gender classes must be +1 / -1");
    (g > 0 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw TrainingError("train_attribute_predictor: degenerate single-class gender labels");

  Rng rng(cfg.seed);
  AttributePredictor p(static_cast<std::size_t>(embeddings.rows()), 32, rng);
  Vector mean = embeddings.rowwise().mean();
  Vector sd = ((embeddings.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index i = 0; i < sd.size(); ++i) sd[i] = std::max(sd[i], 1e-6);
  const auto D = static_cast<std::size_t>(embeddings.rows());
  p.in_mean = reshape(to_tensor(mean), {D, 1});
  p.in_std = reshape(to_tensor(sd), {D, 1});
  double am = 0, as = 0;
  for (double a : ages) am += a;
  am /= N;
  for (double a : ages) as += (a - am) * (a - am);
  as = std::sqrt(as / N);
  p.age_mean = am;
  // Constant ages: predict the mean exactly.
  p.age_std = as > 1e-9 ? as : 0.0;
  const double age_div = as > 1e-9 ? as : 1.0;

  std::vector<double> age_n(N), g01(N);
  for (std::size_t i = 0; i < N; ++i) {
    age_n[i] = (ages[i] - p.age_mean) / age_div;
    g01[i] = gender_class[i] > 0 ? 1.0 : 0.0;
  }
  Tensor x = to_tensor(embeddings);
  Tensor age_t = Tensor::from({1, N}, age_n);
  Tensor g_t = Tensor::from({1, N}, g01);
  Adam opt(p.params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  for (int e = 0; e < cfg.epochs; ++e) {
    Tensor out = p.forward(x);
    Tensor loss = add(mae(slice(out, 0, 0, 1), age_t), binary_cross_entropy(sigmoid(slice(out, 0, 1, 2)), g_t));
    if (!std::isfinite(loss.item())) throw TrainingError("train_attribute_predictor: non-finite loss");
    backward(loss);
    opt.step();
  }
  return p;
}

std::vector<WeakLabel> weak_label(const Matrix& embeddings, const std::vector<std::string>& ids,
                                  const AttributePredictor& predictor) {
  if (ids.size() != static_cast<std::size_t>(embeddings.cols())) throw ContractError("weak_label: one id per column");
  std::vector<WeakLabel> rows;
  rows.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    AttributeVector a = predictor.predict(embeddings.col(static_cast<Eigen::Index>(i)));
    rows.push_back({ids[i], a.age, a.gender, "weak"});
  }
  return rows;
}

void write_attribute_csv(const std::filesystem::path& path, const std::vector<WeakLabel>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "id,age_years,gender_logit,source\n";
  for (const auto& r : rows) os << r.id << ',' << r.age_years << ',' << r.gender_logit << ',' << r.source << '\n';
}

}  // namespace vs::flow
