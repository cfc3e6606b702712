#include "voiceshop/eval.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "voiceshop/checkpoint.hpp"
#include "voiceshop/errors.hpp"
#include "voiceshop/optim.hpp"

namespace vs::eval {

using namespace vs::num;
using json = nlohmann::json;

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  return os;
}

Tensor unit_columns(const Tensor& x) { return div(x, sqrt(add_scalar(sum(square(x), 0), 1e-12))); }
Tensor unit_rows(const Tensor& x) { return div(x, sqrt(add_scalar(sum(square(x), 1), 1e-12))); }

}  // namespace

// ---- similarity

std::string SimilarityReport::to_json() const {
  return json{{"metric", metric}, {"mean", mean}, {"ci95", ci95}, {"n", n}}.dump();
}

SimilarityReport summarize(const std::string& metric, std::vector<double> scores) {
  SimilarityReport r;
  r.metric = metric;
  r.n = scores.size();
  if (!scores.empty()) {
    r.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(r.n);
    if (r.n > 1) {
      double ss = 0;
      for (double s : scores) ss += (s - r.mean) * (s - r.mean);
      r.ci95 = 1.96 * std::sqrt(ss / static_cast<double>(r.n - 1)) / std::sqrt(static_cast<double>(r.n));
    }
  }
  r.scores = std::move(scores);
  return r;
}

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ContractError("cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) throw DomainError("cosine: zero-norm embedding");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

SimilarityReport asv_cosine(const std::vector<std::pair<Vector, Vector>>& pairs, const std::string& metric) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      scores.push_back(cosine(pairs[i].first, pairs[i].second));
    } catch (const DomainError&) {
      throw DomainError("asv_cosine: score undefined for pair " + std::to_string(i) + " (zero-norm embedding)");
    }
  }
  return summarize(metric, std::move(scores));
}

// ---- accent classifier

AccentClassifier::AccentClassifier(std::size_t input_dim, std::vector<std::string> accents,
                                   const AccentClassifierConfig& cfg, Rng& rng)
    : cfg_(cfg),
      accents_(std::move(accents)),
      conv1_(input_dim, cfg.hidden, cfg.kernel, rng),
      conv2_(cfg.hidden, cfg.hidden, cfg.kernel, rng),
      proj_(2 * cfg.hidden, cfg.embedding, rng),
      classes_(Tensor::randn({accents_.size(), cfg.embedding}, rng).set_requires_grad(true)) {}

std::size_t AccentClassifier::accent_index(const std::string& name) const {
  for (std::size_t i = 0; i < accents_.size(); ++i)
    if (accents_[i] == name) return i;
  throw LookupError("accent classifier: unknown accent '" + name + "'");
}

Tensor AccentClassifier::forward(const Tensor& x) const {
  if (x.cols() == 0) throw ContractError("accent classifier: empty sequence");
  Tensor h = relu(conv2_(relu(conv1_(x))));
  // First and second moments: an orthogonal mix shows up in the frame covariance.
  return proj_(concat({mean(h, 1), mean(square(h), 1)}, 0));
}

Vector AccentClassifier::embed(const Matrix& x) const {
  NoGradGuard guard;
  return to_vector(forward(to_tensor(x)));
}

int AccentClassifier::classify(const Matrix& x) const {
  if (centroids_.empty()) throw ContractError("accent classifier: centroids not set");
  Vector e = embed(x);
  int best = 0;
  double best_score = -2;
  for (std::size_t j = 0; j < centroids_.size(); ++j) {
    double s = cosine(e, centroids_[j]);
    if (s > best_score) best_score = s, best = static_cast<int>(j);
  }
  return best;
}

void AccentClassifier::set_centroids(const std::vector<LabeledSequence>& reference) {
  std::vector<Vector> sums(accents_.size(), Vector::Zero(static_cast<Eigen::Index>(cfg_.embedding)));
  std::vector<int> counts(accents_.size(), 0);
  for (const auto& s : reference) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= accents_.size())
      throw ContractError("accent classifier: label out of range");
    Vector e = embed(s.features);
    sums[s.label] += e / e.norm();
    ++counts[s.label];
  }
  centroids_.clear();
  for (std::size_t j = 0; j < sums.size(); ++j) {
    if (counts[j] == 0) throw TrainingError("accent classifier: no reference sequences for " + accents_[j]);
    centroids_.push_back(sums[j] / sums[j].norm());
  }
}

num::ParamList AccentClassifier::params() const {
  num::ParamList p;
  nn::append(p, "conv1", conv1_.params());
  nn::append(p, "conv2", conv2_.params());
  nn::append(p, "proj", proj_.params());
  p.emplace_back("classes", classes_);
  return p;
}

void AccentClassifier::save(const std::filesystem::path& path) const {
  num::ParamList p = params();
  const std::size_t A = accents_.size(), E = cfg_.embedding;
  std::vector<double> c(A * E, 0.0);
  for (std::size_t j = 0; j < centroids_.size(); ++j)
    for (std::size_t k = 0; k < E; ++k) c[j * E + k] = centroids_[j][static_cast<Eigen::Index>(k)];
  p.emplace_back("centroids", Tensor::from({A, E}, c));
  p.emplace_back("holdout_accuracy", Tensor::scalar(holdout_accuracy_));
  save_checkpoint(path, p);
}

void AccentClassifier::load(const std::filesystem::path& path) {
  num::ParamList p = params();
  const std::size_t A = accents_.size(), E = cfg_.embedding;
  Tensor c = Tensor::zeros({A, E}), acc = Tensor::scalar(0);
  p.emplace_back("centroids", c);
  p.emplace_back("holdout_accuracy", acc);
  load_checkpoint(path, p);
  centroids_.assign(A, Vector(static_cast<Eigen::Index>(E)));
  for (std::size_t j = 0; j < A; ++j)
    for (std::size_t k = 0; k < E; ++k) centroids_[j][static_cast<Eigen::Index>(k)] = c.at(j, k);
  holdout_accuracy_ = acc.item();
}

AccentClassifier train_accent_classifier(const std::vector<LabeledSequence>& train,
                                         const std::vector<LabeledSequence>& holdout,
                                         const std::vector<std::string>& accents, const AccentClassifierConfig& cfg) {
  if (train.empty()) throw ContractError("train_accent_classifier: no training sequences");
  std::vector<int> seen(accents.size(), 0);
  for (const auto& s : train) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= accents.size())
      throw ContractError("train_accent_classifier: label out of range");
    seen[s.label] = 1;
  }
  if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
    throw TrainingError("train_accent_classifier: need sequences from at least two accents");

  Rng rng(cfg.seed);
  AccentClassifier clf(static_cast<std::size_t>(train[0].features.rows()), accents, cfg, rng);
  Adam opt(clf.params(), {.lr = cfg.lr});
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor loss;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& s = train[rng.below(train.size())];
      // Random crops vary the token mix so the embedding keys on the accent.
      const auto T = static_cast<std::size_t>(s.features.cols());
      auto len = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(T * cfg.min_crop)));
      len += rng.below(T - len + 1);
      const std::size_t start = rng.below(T - len + 1);
      Tensor x = to_tensor(Matrix(s.features.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len))));
      Tensor e = unit_columns(clf.forward(x));
      Tensor cos = matmul(unit_rows(clf.class_weights()), e);
      std::vector<double> shift(accents.size(), 0.0);
      shift[static_cast<std::size_t>(s.label)] = -cfg.margin;
      Tensor logits = scale(add(cos, Tensor::from({accents.size(), 1}, shift)), cfg.logit_scale);
      Tensor ce = neg(slice(log_softmax(logits, 0), 0, static_cast<std::size_t>(s.label), s.label + 1ul));
      loss = loss.numel() ? add(loss, ce) : ce;
    }
    loss = scale(sum(loss), 1.0 / cfg.batch);
    if (!std::isfinite(loss.item())) throw TrainingError("train_accent_classifier: non-finite loss");
    backward(loss);
    opt.step();
  }
  clf.set_centroids(train);
  if (!holdout.empty()) {
    int correct = 0;
    for (const auto& s : holdout) correct += clf.classify(s.features) == s.label;
    clf.set_holdout_accuracy(static_cast<double>(correct) / static_cast<double>(holdout.size()));
  }
  return clf;
}

SimilarityReport centroid_similarity(const AccentClassifier& clf, const std::vector<Matrix>& sequences,
                                     const std::string& target_accent, const std::string& metric) {
  const Vector& c = clf.centroids().at(clf.accent_index(target_accent));
  std::vector<double> scores;
  scores.reserve(sequences.size());
  for (const auto& s : sequences) scores.push_back(cosine(clf.embed(s), c));
  return summarize(metric, std::move(scores));
}

void export_embeddings(const std::filesystem::path& path, const std::vector<LabeledSequence>& items,
                       const AccentClassifier& clf) {
  auto os = open_out(path);
  os << "id,accent";
  const std::size_t E = clf.class_weights().cols();
  for (std::size_t k = 0; k < E; ++k) os << ",e" << k;
  os << '\n';
  for (const auto& it : items) {
    Vector e = clf.embed(it.features);
    os << it.id << ',' << clf.accents().at(static_cast<std::size_t>(it.label));
    for (Eigen::Index k = 0; k < e.size(); ++k) os << ',' << e[k];
    os << '\n';
  }
}

// ---- attribute shifts

const AttributeShift& ShiftReport::get(const std::string& name) const {
  for (const auto& a : attributes)
    if (a.attribute == name) return a;
  throw LookupError("shift report: no attribute '" + name + "'");
}

std::string ShiftReport::to_json() const {
  json attrs = json::array();
  for (const auto& a : attributes)
    attrs.push_back({{"attribute", a.attribute},
                     {"edited", a.edited},
                     {"mean_shift", a.mean_shift},
                     {"sd_shift", a.sd_shift},
                     {"mean_abs_shift", a.mean_abs_shift},
                     {"sign_flip_rate", a.sign_flip_rate}});
  return json{{"rows", rows()}, {"attributes", attrs}}.dump(2);
}

void ShiftReport::write_csv(const std::filesystem::path& path) const {
  auto os = open_out(path);
  os << "row,age_before,age_after,gender_before,gender_after\n";
  for (std::size_t i = 0; i < before.size(); ++i)
    os << i << ',' << before[i].age << ',' << after[i].age << ',' << before[i].gender << ',' << after[i].gender
       << '\n';
}

ShiftReport attribute_shift_report(const std::vector<flow::AttributeVector>& before,
                                   const std::vector<flow::AttributeVector>& after, const EditMask& edited,
                                   double age_pivot) {
  if (before.size() != after.size())
    throw ContractError("attribute_shift_report: " + std::to_string(before.size()) + " rows before vs " +
                        std::to_string(after.size()) + " after");
  ShiftReport r;
  r.before = before;
  r.after = after;
  auto summarize_attr = [&](const std::string& name, bool was_edited, auto value, double pivot) {
    AttributeShift a;
    a.attribute = name;
    a.edited = was_edited;
    const std::size_t n = before.size();
    if (n == 0) return a;
    std::vector<double> d(n);
    int flips = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double b = value(before[i]), c = value(after[i]);
      d[i] = c - b;
      flips += (b - pivot) * (c - pivot) < 0;
    }
    a.mean_shift = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0, abs_sum = 0;
    for (double x : d) ss += (x - a.mean_shift) * (x - a.mean_shift), abs_sum += std::abs(x);
    a.sd_shift = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    a.mean_abs_shift = abs_sum / n;
    a.sign_flip_rate = static_cast<double>(flips) / n;
    return a;
  };
  r.attributes.push_back(summarize_attr("age", edited.age, [](const auto& v) { return v.age; }, age_pivot));
  r.attributes.push_back(summarize_attr("gender", edited.gender, [](const auto& v) { return v.gender; }, 0.0));
  return r;
}

// ---- files

void write_scores_csv(const std::filesystem::path& path, const SimilarityReport& r) {
  auto os = open_out(path);
  os << "index,score\n";
  for (std::size_t i = 0; i < r.scores.size(); ++i) os << i << ',' << r.scores[i] << '\n';
}

void write_summary_json(const std::filesystem::path& path, const std::vector<SimilarityReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(json::parse(r.to_json()));
  auto os = open_out(path);
  os << arr.dump(2) << '\n';
}

double linear_probe_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                             const std::vector<int>& test_y, int classes, double ridge) {
  if (train_x.cols() != static_cast<Eigen::Index>(train_y.size()) ||
      test_x.cols() != static_cast<Eigen::Index>(test_y.size()) || train_x.rows() != test_x.rows())
    throw ContractError("linear_probe_accuracy: shape mismatch");
  if (classes < 2 || train_y.empty() || test_y.empty() || ridge < 0)
    throw ContractError("linear_probe_accuracy: needs two classes, data and ridge >= 0");
  const Eigen::Index d = train_x.rows();
  Eigen::MatrixXd a(d + 1, train_x.cols());
  a.topRows(d) = train_x;
  a.row(d).setOnes();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(train_x.cols(), classes);
  for (std::size_t i = 0; i < train_y.size(); ++i) {
    if (train_y[i] < 0 || train_y[i] >= classes) throw ContractError("linear_probe_accuracy: label out of range");
    y(static_cast<Eigen::Index>(i), train_y[i]) = 1;
  }
  Eigen::MatrixXd gram = a * a.transpose();
  gram.diagonal().array() += ridge;
  Eigen::MatrixXd w = gram.ldlt().solve(a * y);
  Eigen::MatrixXd b(d + 1, test_x.cols());
  b.topRows(d) = test_x;
  b.row(d).setOnes();
  Eigen::MatrixXd scores = w.transpose() * b;
  int hits = 0;
  for (Eigen::Index i = 0; i < scores.cols(); ++i) {
    Eigen::Index k;
    scores.col(i).maxCoeff(&k);
    hits += k == test_y[static_cast<std::size_t>(i)];
  }
  return double(hits) / static_cast<double>(test_y.size());
}

}  // namespace vs::eval
