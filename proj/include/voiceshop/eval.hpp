#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "voiceshop/flow_editor.hpp"
#include "voiceshop/layers.hpp"
#include "voiceshop/matrix.hpp"

namespace vs::eval {

using num::Rng;
using num::Tensor;

struct SimilarityReport {
  std::string metric;
  std::vector<double> scores;
  double mean = 0;
  double ci95 = 0;  // 1.96 sd / sqrt(n), sample sd
  std::size_t n = 0;

  std::string to_json() const;  // {metric, mean, ci95, n}
};

SimilarityReport summarize(const std::string& metric, std::vector<double> scores);

// Throws DomainError when either vector has zero norm.
double cosine(const Vector& a, const Vector& b);

SimilarityReport asv_cosine(const std::vector<std::pair<Vector, Vector>>& pairs, const std::string& metric = "asv");

// ---- accent classifier

struct LabeledSequence {
  std::string id;
  int label = 0;  // accent index
  Matrix features;  // (D1, T)
};

struct AccentClassifierConfig {
  std::size_t hidden = 64;
  std::size_t embedding = 16;
  std::size_t kernel = 5;
  double logit_scale = 30.0;
  double margin = 0.2;  // additive cosine margin on the true class
  int steps = 1500;
  int batch = 8;
  double min_crop = 0.3;  // random crops of at least this fraction of each sequence
  double lr = 3e-3;
  std::uint64_t seed = 4;
};

// Convolutional summarizer with a cosine softmax head; embeddings of each
// accent cluster around a unit-normalized centroid.
class AccentClassifier {
 public:
  AccentClassifier() = default;
  AccentClassifier(std::size_t input_dim, std::vector<std::string> accents, const AccentClassifierConfig& cfg,
                   Rng& rng);

  const std::vector<std::string>& accents() const { return accents_; }
  std::size_t accent_index(const std::string& name) const;
  Tensor forward(const Tensor& x) const;  // (embedding, 1)
  Vector embed(const Matrix& x) const;
  // Nearest centroid by cosine.
  int classify(const Matrix& x) const;
  const std::vector<Vector>& centroids() const { return centroids_; }
  void set_centroids(const std::vector<LabeledSequence>& reference);
  double holdout_accuracy() const { return holdout_accuracy_; }
  void set_holdout_accuracy(double a) { holdout_accuracy_ = a; }
  num::ParamList params() const;
  const Tensor& class_weights() const { return classes_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  AccentClassifierConfig cfg_;
  std::vector<std::string> accents_;
  nn::Conv1d conv1_, conv2_;
  nn::Linear proj_;
  Tensor classes_;  // (n_accents, embedding)
  std::vector<Vector> centroids_;
  double holdout_accuracy_ = 0;
};

// Trains on `train`, sets centroids from `train`, reports accuracy on `holdout`.
// Fewer than two accents present raises TrainingError.
AccentClassifier train_accent_classifier(const std::vector<LabeledSequence>& train,
                                         const std::vector<LabeledSequence>& holdout,
                                         const std::vector<std::string>& accents, const AccentClassifierConfig& cfg);

SimilarityReport centroid_similarity(const AccentClassifier& clf, const std::vector<Matrix>& sequences,
                                     const std::string& target_accent, const std::string& metric = "accent");

// One row per item: id, accent, embedding values.
void export_embeddings(const std::filesystem::path& path, const std::vector<LabeledSequence>& items,
                       const AccentClassifier& clf);

// ---- attribute shifts

struct EditMask {
  bool age = false;
  bool gender = false;
};

struct AttributeShift {
  std::string attribute;
  bool edited = false;
  double mean_shift = 0;
  double sd_shift = 0;
  double mean_abs_shift = 0;
  double sign_flip_rate = 0;  // fraction of rows whose value crossed `pivot`
};

struct ShiftReport {
  std::vector<flow::AttributeVector> before, after;
  std::vector<AttributeShift> attributes;  // age, gender
  std::size_t rows() const { return before.size(); }

  const AttributeShift& get(const std::string& name) const;
  std::string to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

// Age sign flips are measured around `age_pivot`; gender logits around zero.
ShiftReport attribute_shift_report(const std::vector<flow::AttributeVector>& before,
                                   const std::vector<flow::AttributeVector>& after, const EditMask& edited,
                                   double age_pivot = 55.0);

// ---- report files

// Linear probe: ridge least squares onto one-hot labels with a bias column,
// argmax decision. Columns of x are samples. Returns test accuracy.
double linear_probe_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                             const std::vector<int>& test_y, int classes, double ridge = 1e-3);

void write_scores_csv(const std::filesystem::path& path, const SimilarityReport& r);
void write_summary_json(const std::filesystem::path& path, const std::vector<SimilarityReport>& reports);

}  // namespace vs::eval
