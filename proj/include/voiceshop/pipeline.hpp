#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voiceshop/bn2bn.hpp"
#include "voiceshop/diffusion.hpp"
#include "voiceshop/eval.hpp"
#include "voiceshop/flow_editor.hpp"
#include "voiceshop/toyworld.hpp"

// Orchestration shared by the command-line tool and the acceptance harness.
// Every command reads and writes one run directory:
//   config.json, manifest.json, world/, checkpoints/, reports/, outputs/
namespace vs::pipeline {

namespace fs = std::filesystem;

struct PipelineConfig {
  std::uint64_t seed = 7;
  toy::WorldConfig world{};

  diffusion::DenoiserConfig denoiser{};
  diffusion::DiffusionTrainConfig diffusion{};
  int backbone_pool = 2000;  // fresh prior speakers, one utterance each, added to backbone training
  int sample_steps = 10;
  diffusion::SampleMode sample_mode = diffusion::SampleMode::deterministic;

  flow::FlowConfig flow{};
  flow::CnfTrainConfig cnf{};
  flow::PredictorTrainConfig predictor{};
  int flow_pool = 2000;           // prior speakers whose embeddings train the flow
  double labeled_fraction = 0.25;  // of flow_pool; the rest is weakly labeled

  bn2bn::Bn2BnConfig bn2bn{};  // accents are taken from the world
  bn2bn::Bn2BnTrainConfig bn2bn_train{};
  int heldout_contents = 4;  // last contents, unseen by BN2BN and classifier training

  eval::AccentClassifierConfig classifier{};

  PipelineConfig();
  void validate() const;
  // Sets the master seed; module seeds are fixed offsets from it.
  void apply_seed(std::uint64_t s);
  std::string to_json() const;
  static PipelineConfig from_json(const std::string& text);
  std::string hash() const;  // SHA-256 of the canonical JSON, hex
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

struct ArtifactRecord {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct CommandRecord {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string started;  // UTC, ISO 8601
  double wall_seconds = 0;
  std::vector<ArtifactRecord> inputs;
  std::vector<ArtifactRecord> outputs;
};

class Run {
 public:
  // Fresh directory <root>/<timestamp>-<hash12>.
  static Run create_under(const fs::path& root, const PipelineConfig& cfg);
  // Uses `dir` as the run directory, creating it when absent.
  static Run at(const fs::path& dir, const PipelineConfig& cfg);
  // Reads config.json from an existing run; MissingArtifactError when absent.
  static PipelineConfig load_config(const fs::path& dir);

  const fs::path& dir() const { return dir_; }
  const PipelineConfig& config() const { return cfg_; }
  fs::path world_dir() const { return dir_ / "world"; }
  fs::path checkpoint(const std::string& name) const { return dir_ / "checkpoints" / name; }
  fs::path report(const std::string& name) const { return dir_ / "reports" / name; }
  fs::path output(const std::string& name) const { return dir_ / "outputs" / name; }

  // Throws MissingArtifactError naming the command that produces `path`.
  void require(const fs::path& path, const std::string& producer) const;
  // Non-empty when config.json in the directory was written by a different config.
  std::optional<std::string> staleness() const { return stale_; }
  // Sampler settings are per invocation and do not mark the run stale.
  void override_sampling(int steps, diffusion::SampleMode mode);

  // Appends one record to manifest.json with hashes of the listed files.
  void record(const std::string& command, double wall_seconds, const std::vector<fs::path>& inputs,
              const std::vector<fs::path>& outputs, const std::string& started) const;

 private:
  Run(fs::path dir, PipelineConfig cfg);
  fs::path dir_;
  PipelineConfig cfg_;
  std::optional<std::string> stale_;
};

// ---- loaded artifacts

toy::World load_world(const Run& run);
diffusion::Backbone load_backbone(const Run& run);
bn2bn::Bn2BnModel load_bn2bn(const Run& run);
eval::AccentClassifier load_classifier(const Run& run);

struct Editor {
  flow::ConditionalFlow flow;
  flow::AttributePredictor predictor;
};
Editor load_editor(const Run& run);

// ---- commands; each returns the files it wrote

std::vector<fs::path> cmd_world(const Run& run);
std::vector<fs::path> cmd_train_diffusion(const Run& run);
std::vector<fs::path> cmd_train_cnf(const Run& run);
std::vector<fs::path> cmd_train_bn2bn(const Run& run);
std::vector<fs::path> cmd_train_classifier(const Run& run);

// One requested edit: source utterance plus any of accent, age, gender.
struct EditRequest {
  int speaker = 0;
  int content = 0;
  std::string source_accent;       // empty: the world's first accent
  std::string target_accent;       // empty: keep the content as is
  std::optional<double> age;       // target age in years
  std::optional<double> age_delta;  // or a shift in years
  std::optional<std::string> gender;  // "flip", "positive" or "negative" logit sign

  bool edits_embedding() const { return age || age_delta || gender; }
  static std::vector<EditRequest> parse(const std::string& json_text);
  std::string to_json() const;
};

struct EditResult {
  EditRequest request;
  Vector embedding_in, embedding_out;
  flow::AttributeVector attrs_in, attrs_target;
  Matrix content;  // content condition after any conversion
  Matrix mel;      // synthesized
  toy::OracleEstimate decoded_source;  // oracle on the ground-truth source mel
  toy::OracleEstimate decoded;         // oracle on the synthesized mel
  int decoded_accent = -1;             // accent classifier on the content condition
};

// Content conversion first, then the embedding edit; both feed one sampling pass.
// Loaded models are passed in so callers can run many requests per invocation.
struct EditModels {
  const toy::World* world = nullptr;
  const diffusion::Backbone* backbone = nullptr;
  const Editor* editor = nullptr;              // required for age/gender
  const bn2bn::Bn2BnModel* bn2bn = nullptr;     // required for accent
  const eval::AccentClassifier* classifier = nullptr;  // optional
};
EditResult run_edit(const EditModels& m, const EditRequest& req, int steps, diffusion::SampleMode mode,
                    std::uint64_t seed);

std::vector<fs::path> cmd_edit(const Run& run, const std::vector<EditRequest>& requests);
// Converts held-out contents of every target speaker into `target_accent`.
std::vector<fs::path> cmd_convert(const Run& run, const std::string& target_accent);
// Synthesizes held-out contents for every world speaker; reports oracle speaker recovery.
std::vector<fs::path> cmd_sample(const Run& run);

std::vector<fs::path> cmd_eval_asv(const Run& run);
std::vector<fs::path> cmd_eval_accent(const Run& run);
std::vector<fs::path> cmd_eval_attr(const Run& run);
std::vector<fs::path> cmd_report(const Run& run);

// Command-line entry point; returns the process exit code
// (0 ok, 2 config error, 3 missing artifact, 4 numeric failure).
int main_cli(int argc, char** argv);

}  // namespace vs::pipeline
