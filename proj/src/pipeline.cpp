#include "voiceshop/pipeline.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "voiceshop/errors.hpp"

namespace vs::pipeline {

using json = nlohmann::json;
using diffusion::SampleMode;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

template <class T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json solver_json(const num::OdeSolverConfig& s) {
  return {{"rtol", s.rtol}, {"atol", s.atol}, {"max_steps", s.max_steps}, {"initial_step", s.initial_step}};
}

void solver_from(const json& j, num::OdeSolverConfig& s) {
  get(j, "rtol", s.rtol);
  get(j, "atol", s.atol);
  get(j, "max_steps", s.max_steps);
  get(j, "initial_step", s.initial_step);
}

std::string mode_name(SampleMode m) { return m == SampleMode::deterministic ? "ddim" : "noise"; }

SampleMode parse_mode(const std::string& s) {
  if (s == "ddim") return SampleMode::deterministic;
  if (s == "noise") return SampleMode::noise_replace;
  throw ConfigError("sample mode must be ddim or noise, got '" + s + "'");
}


json oracle_json(const toy::OracleEstimate& e) {
  return {{"speaker_id", e.speaker_id}, {"age", e.age}, {"gender_latent", e.gender_latent},
          {"confidence", e.confidence}};
}

std::vector<int> range(int begin, int end) {
  std::vector<int> v;
  for (int i = begin; i < end; ++i) v.push_back(i);
  return v;
}

// BN2BN dimensions and accent names always follow the world.
void shape_bn2bn(bn2bn::Bn2BnConfig& b, const toy::WorldConfig& w) {
  b.accents.clear();
  for (int a = 0; a < w.m_accents; ++a) b.accents.push_back("accent" + std::to_string(a));
  b.content_dim = static_cast<std::size_t>(w.content_dim);
  b.l18_dim = static_cast<std::size_t>(w.l18_dim);
  b.n_languages = static_cast<std::size_t>(w.n_languages);
}

}  // namespace

// ---- config

PipelineConfig::PipelineConfig() {
  // Edited embeddings leave the world speakers' neighbourhood; the backbone
  // needs the long schedule to keep speaker identity there.
  diffusion.steps = 48000;
  // Held-out contents only look in-distribution to BN2BN and the accent
  // classifier when training covers a few dozen.
  world.k_contents = 32;
  apply_seed(seed);
  shape_bn2bn(bn2bn, world);
}

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  world.seed = s;
  diffusion.seed = s + 1;
  cnf.seed = s + 2;
  predictor.seed = s + 3;
  bn2bn_train.seed = s + 4;
  classifier.seed = s + 5;
}

void PipelineConfig::validate() const {
  world.validate();
  denoiser.validate();
  bn2bn.validate();
  if (static_cast<int>(denoiser.mel_bins) != world.mel_bins || static_cast<int>(denoiser.content_dim) != world.content_dim)
    throw ConfigError("denoiser mel_bins/content_dim must match the world");
  if (heldout_contents < 1 || heldout_contents >= world.k_contents)
    throw ConfigError("heldout_contents must be in [1, k_contents)");
  if (!(labeled_fraction > 0 && labeled_fraction <= 1)) throw ConfigError("labeled_fraction must be in (0, 1]");
  if (flow_pool < 8 || backbone_pool < 0) throw ConfigError("flow_pool must be >= 8 and backbone_pool >= 0");
  if (sample_steps < 1) throw ConfigError("sample_steps must be >= 1");
  if (diffusion.steps < 1 || cnf.iterations < 1 || bn2bn_train.steps < 1 || classifier.steps < 1)
    throw ConfigError("training steps must be positive");
  flow.solver.validate();
}

std::string PipelineConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["world"] = json::parse(world.to_json());
  j["denoiser"] = {{"mel_bins", denoiser.mel_bins},
                   {"content_dim", denoiser.content_dim},
                   {"speaker_dim", denoiser.speaker_dim},
                   {"time_dim", denoiser.time_dim},
                   {"cond_hidden", denoiser.cond_hidden},
                   {"local_hidden", denoiser.local_hidden},
                   {"channels", denoiser.channels},
                   {"downsample", denoiser.downsample},
                   {"attention_heads", denoiser.attention_heads},
                   {"resnet_groups", denoiser.resnet_groups},
                   {"encoder_channels", denoiser.encoder_channels}};
  j["diffusion"] = {{"steps", diffusion.steps},         {"batch", diffusion.batch},
                    {"crop_content_frames", diffusion.crop_content_frames},
                    {"lr", diffusion.lr},               {"lr_final", diffusion.lr_final},
                    {"clip_norm", diffusion.clip_norm}, {"log_every", diffusion.log_every},
                    {"seed", diffusion.seed}};
  j["backbone_pool"] = backbone_pool;
  j["sample_steps"] = sample_steps;
  j["sample_mode"] = mode_name(sample_mode);
  j["flow"] = {{"hidden", flow.hidden},
               {"t0", flow.t0},
               {"t1", flow.t1},
               {"solver", solver_json(flow.solver)},
               {"trace", flow.trace == flow::TraceMode::exact ? "exact" : "hutchinson"},
               {"hutchinson_probes", flow.hutchinson_probes}};
  j["cnf"] = {{"iterations", cnf.iterations},
              {"batch", cnf.batch},
              {"lr", cnf.lr},
              {"lr_final", cnf.lr_final},
              {"tpr_checkpoints", cnf.tpr_checkpoints},
              {"tpr_degree", cnf.tpr_degree},
              {"tpr_weight", cnf.tpr_weight},
              {"solver_tol", cnf.solver_tol},
              {"standardize", cnf.standardize},
              {"seed", cnf.seed}};
  j["predictor"] = {{"epochs", predictor.epochs},
                    {"lr", predictor.lr},
                    {"weight_decay", predictor.weight_decay},
                    {"seed", predictor.seed}};
  j["flow_pool"] = flow_pool;
  j["labeled_fraction"] = labeled_fraction;
  j["bn2bn"] = json::parse(bn2bn.to_json());
  j["bn2bn_train"] = {{"steps", bn2bn_train.steps},
                      {"lr", bn2bn_train.lr},
                      {"lr_final", bn2bn_train.lr_final},
                      {"clip_norm", bn2bn_train.clip_norm},
                      {"weight_decay", bn2bn_train.weight_decay},
                      {"gate_padding", bn2bn_train.gate_padding},
                      {"joint_l18", bn2bn_train.joint_l18},
                      {"adversarial_weight", bn2bn_train.adversarial_weight},
                      {"log_every", bn2bn_train.log_every},
                      {"seed", bn2bn_train.seed}};
  j["heldout_contents"] = heldout_contents;
  j["classifier"] = {{"hidden", classifier.hidden},
                     {"embedding", classifier.embedding},
                     {"kernel", classifier.kernel},
                     {"logit_scale", classifier.logit_scale},
                     {"margin", classifier.margin},
                     {"steps", classifier.steps},
                     {"batch", classifier.batch},
                     {"min_crop", classifier.min_crop},
                     {"lr", classifier.lr},
                     {"seed", classifier.seed}};
  return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  PipelineConfig c;
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("pipeline config: expected a JSON object");
    // A bare seed re-derives every module seed; explicit module seeds below still win.
    if (j.contains("seed")) c.apply_seed(j.at("seed").get<std::uint64_t>());
    if (j.contains("world")) {
      json w = json::parse(c.world.to_json());
      w.update(j.at("world"));
      c.world = toy::WorldConfig::from_json(w.dump());
      shape_bn2bn(c.bn2bn, c.world);
    }
    if (j.contains("denoiser")) {
      const json& d = j.at("denoiser");
      get(d, "mel_bins", c.denoiser.mel_bins);
      get(d, "content_dim", c.denoiser.content_dim);
      get(d, "speaker_dim", c.denoiser.speaker_dim);
      get(d, "time_dim", c.denoiser.time_dim);
      get(d, "cond_hidden", c.denoiser.cond_hidden);
      get(d, "local_hidden", c.denoiser.local_hidden);
      get(d, "channels", c.denoiser.channels);
      get(d, "downsample", c.denoiser.downsample);
      get(d, "attention_heads", c.denoiser.attention_heads);
      get(d, "resnet_groups", c.denoiser.resnet_groups);
      get(d, "encoder_channels", c.denoiser.encoder_channels);
    }
    if (j.contains("diffusion")) {
      const json& d = j.at("diffusion");
      get(d, "steps", c.diffusion.steps);
      get(d, "batch", c.diffusion.batch);
      get(d, "crop_content_frames", c.diffusion.crop_content_frames);
      get(d, "lr", c.diffusion.lr);
      get(d, "lr_final", c.diffusion.lr_final);
      get(d, "clip_norm", c.diffusion.clip_norm);
      get(d, "log_every", c.diffusion.log_every);
      get(d, "seed", c.diffusion.seed);
    }
    get(j, "backbone_pool", c.backbone_pool);
    get(j, "sample_steps", c.sample_steps);
    if (j.contains("sample_mode")) c.sample_mode = parse_mode(j.at("sample_mode").get<std::string>());
    if (j.contains("flow")) {
      const json& f = j.at("flow");
      get(f, "hidden", c.flow.hidden);
      get(f, "t0", c.flow.t0);
      get(f, "t1", c.flow.t1);
      if (f.contains("solver")) solver_from(f.at("solver"), c.flow.solver);
      if (f.contains("trace")) {
        auto t = f.at("trace").get<std::string>();
        if (t != "exact" && t != "hutchinson") throw ConfigError("flow.trace must be exact or hutchinson");
        c.flow.trace = t == "exact" ? flow::TraceMode::exact : flow::TraceMode::hutchinson;
      }
      get(f, "hutchinson_probes", c.flow.hutchinson_probes);
    }
    if (j.contains("cnf")) {
      const json& f = j.at("cnf");
      get(f, "iterations", c.cnf.iterations);
      get(f, "batch", c.cnf.batch);
      get(f, "lr", c.cnf.lr);
      get(f, "lr_final", c.cnf.lr_final);
      get(f, "tpr_checkpoints", c.cnf.tpr_checkpoints);
      get(f, "tpr_degree", c.cnf.tpr_degree);
      get(f, "tpr_weight", c.cnf.tpr_weight);
      get(f, "solver_tol", c.cnf.solver_tol);
      get(f, "standardize", c.cnf.standardize);
      get(f, "seed", c.cnf.seed);
    }
    if (j.contains("predictor")) {
      const json& p = j.at("predictor");
      get(p, "epochs", c.predictor.epochs);
      get(p, "lr", c.predictor.lr);
      get(p, "weight_decay", c.predictor.weight_decay);
      get(p, "seed", c.predictor.seed);
    }
    get(j, "flow_pool", c.flow_pool);
    get(j, "labeled_fraction", c.labeled_fraction);
    if (j.contains("bn2bn")) {
      json b = json::parse(c.bn2bn.to_json());
      b.update(j.at("bn2bn"));
      for (const char* k : {"accents", "content_dim", "l18_dim", "n_languages"}) b.erase(k);
      json shaped = json::parse(c.bn2bn.to_json());
      b.update(json{{"accents", shaped["accents"]}, {"content_dim", shaped["content_dim"]},
                    {"l18_dim", shaped["l18_dim"]}, {"n_languages", shaped["n_languages"]}});
      c.bn2bn = bn2bn::Bn2BnConfig::from_json(b.dump());
    }
    if (j.contains("bn2bn_train")) {
      const json& b = j.at("bn2bn_train");
      get(b, "steps", c.bn2bn_train.steps);
      get(b, "lr", c.bn2bn_train.lr);
      get(b, "lr_final", c.bn2bn_train.lr_final);
      get(b, "clip_norm", c.bn2bn_train.clip_norm);
      get(b, "weight_decay", c.bn2bn_train.weight_decay);
      get(b, "gate_padding", c.bn2bn_train.gate_padding);
      get(b, "joint_l18", c.bn2bn_train.joint_l18);
      get(b, "adversarial_weight", c.bn2bn_train.adversarial_weight);
      get(b, "log_every", c.bn2bn_train.log_every);
      get(b, "seed", c.bn2bn_train.seed);
    }
    get(j, "heldout_contents", c.heldout_contents);
    if (j.contains("classifier")) {
      const json& a = j.at("classifier");
      get(a, "hidden", c.classifier.hidden);
      get(a, "embedding", c.classifier.embedding);
      get(a, "kernel", c.classifier.kernel);
      get(a, "logit_scale", c.classifier.logit_scale);
      get(a, "margin", c.classifier.margin);
      get(a, "steps", c.classifier.steps);
      get(a, "batch", c.classifier.batch);
      get(a, "min_crop", c.classifier.min_crop);
      get(a, "lr", c.classifier.lr);
      get(a, "seed", c.classifier.seed);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string PipelineConfig::hash() const { return sha256_hex(to_json()); }

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return ss.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---- run directory

Run::Run(fs::path dir, PipelineConfig cfg) : dir_(std::move(dir)), cfg_(std::move(cfg)) {}

Run Run::create_under(const fs::path& root, const PipelineConfig& cfg) {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << '-' << cfg.hash().substr(0, 12);
  return at(root / name.str(), cfg);
}

Run Run::at(const fs::path& dir, const PipelineConfig& cfg) {
  cfg.validate();
  Run run(dir, cfg);
  for (const char* sub : {"checkpoints", "reports", "outputs"}) fs::create_directories(dir / sub);
  const fs::path config_path = dir / "config.json";
  if (fs::exists(config_path)) {
    const std::string stored = read_file(config_path);
    if (sha256_hex(stored) != sha256_hex(cfg.to_json()))
      run.stale_ = "config.json in " + dir.string() + " differs from the current configuration (" +
                   sha256_hex(stored).substr(0, 12) + " vs " + cfg.hash().substr(0, 12) +
                   "); artifacts may be stale";
  } else {
    write_file(config_path, cfg.to_json());
  }
  return run;
}

PipelineConfig Run::load_config(const fs::path& dir) {
  const fs::path p = dir / "config.json";
  if (!fs::exists(p)) throw MissingArtifactError("no config.json in " + dir.string() + " (run `voiceshop world` first)");
  return PipelineConfig::from_json(read_file(p));
}

void Run::override_sampling(int steps, SampleMode mode) {
  if (steps < 1) throw ConfigError("--steps must be >= 1");
  cfg_.sample_steps = steps;
  cfg_.sample_mode = mode;
}

void Run::require(const fs::path& path, const std::string& producer) const {
  if (!fs::exists(path))
    throw MissingArtifactError("missing " + path.string() + "; produce it with `voiceshop " + producer + " --out " +
                               dir_.string() + "`");
}

void Run::record(const std::string& command, double wall_seconds, const std::vector<fs::path>& inputs,
                 const std::vector<fs::path>& outputs, const std::string& started) const {
  const fs::path path = dir_ / "manifest.json";
  json m;
  if (fs::exists(path)) m = json::parse(read_file(path));
  else m = {{"run", dir_.filename().string()}, {"commands", json::array()}};
  auto list = [&](const std::vector<fs::path>& files) {
    json arr = json::array();
    for (const auto& f : files)
      arr.push_back({{"path", fs::relative(f, dir_).generic_string()}, {"sha256", sha256_file(f)}});
    return arr;
  };
  m["commands"].push_back({{"command", command},
                           {"config_hash", cfg_.hash()},
                           {"seed", cfg_.seed},
                           {"started", started},
                           {"wall_seconds", wall_seconds},
                           {"inputs", list(inputs)},
                           {"outputs", list(outputs)}});
  write_file(path, m.dump(2));
}

// ---- artifacts

toy::World load_world(const Run& run) {
  run.require(run.world_dir() / "world.json", "world");
  return toy::load_world(run.world_dir());
}

namespace {

toy::ParallelManifest load_manifest(const Run& run) {
  run.require(run.world_dir() / "manifest.json", "world");
  return toy::ParallelManifest::from_json(read_file(run.world_dir() / "manifest.json"));
}

std::vector<std::string> accent_names(const toy::World& w) {
  std::vector<std::string> n;
  for (const auto& a : w.accents()) n.push_back(a.name);
  return n;
}

int train_content_count(const PipelineConfig& c) { return c.world.k_contents - c.heldout_contents; }

}  // namespace

diffusion::Backbone load_backbone(const Run& run) {
  run.require(run.checkpoint("backbone.vsck"), "train diffusion");
  num::Rng rng(0);
  diffusion::Backbone b(run.config().denoiser, rng);
  b.load(run.checkpoint("backbone.vsck"));
  return b;
}

bn2bn::Bn2BnModel load_bn2bn(const Run& run) {
  run.require(run.checkpoint("bn2bn.vsck"), "train bn2bn");
  run.require(run.checkpoint("bn2bn.json"), "train bn2bn");
  num::Rng rng(0);
  bn2bn::Bn2BnModel m(bn2bn::Bn2BnConfig::from_json(read_file(run.checkpoint("bn2bn.json"))), rng);
  m.load(run.checkpoint("bn2bn.vsck"));
  return m;
}

eval::AccentClassifier load_classifier(const Run& run) {
  run.require(run.checkpoint("accent_classifier.vsck"), "train classifier");
  num::Rng rng(0);
  const auto& w = run.config().world;
  std::vector<std::string> names;
  for (int a = 0; a < w.m_accents; ++a) names.push_back("accent" + std::to_string(a));
  eval::AccentClassifier clf(static_cast<std::size_t>(w.content_dim), names, run.config().classifier, rng);
  clf.load(run.checkpoint("accent_classifier.vsck"));
  return clf;
}

Editor load_editor(const Run& run) {
  run.require(run.checkpoint("flow.vsck"), "train cnf");
  run.require(run.checkpoint("predictor.vsck"), "train cnf");
  num::Rng rng(0);
  const auto dim = run.config().denoiser.speaker_dim;
  Editor e{flow::ConditionalFlow(dim, 2, run.config().flow, rng), flow::AttributePredictor(dim, 32, rng)};
  e.flow.load(run.checkpoint("flow.vsck"));
  e.predictor.load(run.checkpoint("predictor.vsck"));
  return e;
}

// ---- world and training

namespace {

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void write_losses(const fs::path& path, const std::vector<double>& losses, int every) {
  std::ostringstream os;
  os.precision(10);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << (i + 1) * static_cast<std::size_t>(every) << ',' << losses[i] << '\n';
  write_file(path, os.str());
}

}  // namespace

std::vector<fs::path> cmd_world(const Run& run) {
  toy::World w = toy::World::generate(run.config().world);
  toy::save_world(w, run.world_dir());
  return files_under(run.world_dir());
}

std::vector<fs::path> cmd_train_diffusion(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  std::vector<diffusion::TrainingPair> data;
  for (const auto& u : w.utterances()) {
    Matrix c = w.content_features(u.content, u.accent, u.speaker);
    data.push_back({w.render_mel(w.speaker(u.speaker), c), c, u.speaker});
  }
  // Prior speakers outside the world list teach the backbone the whole embedding range.
  num::Rng pool(cfg.diffusion.seed * 7919 + 13);
  for (int i = 0; i < cfg.backbone_pool; ++i) {
    toy::ToySpeaker s = w.sample_speaker(pool);
    int c = static_cast<int>(pool.below(w.contents().size()));
    int a = static_cast<int>(pool.below(w.accents().size()));
    Matrix cf = w.content_features(c, a, 0);
    data.push_back({w.render_mel(s, cf), cf, -1});
  }
  num::Rng rng(cfg.diffusion.seed);
  diffusion::Backbone b(cfg.denoiser, rng);
  auto log = diffusion::train_diffusion(b, data, cfg.diffusion);
  b.save(run.checkpoint("backbone.vsck"));
  write_losses(run.report("diffusion_loss.csv"), log.losses, cfg.diffusion.log_every);
  write_file(run.report("diffusion_train.json"),
             json{{"initial_loss", log.initial_loss}, {"final_loss", log.final_loss}, {"items", data.size()}}.dump(2));
  return {run.checkpoint("backbone.vsck"), run.report("diffusion_loss.csv"), run.report("diffusion_train.json")};
}

std::vector<fs::path> cmd_train_cnf(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  diffusion::Backbone b = load_backbone(run);
  const int n = cfg.flow_pool;
  const int n_labeled = std::max(2, static_cast<int>(std::lround(cfg.labeled_fraction * n)));
  num::Rng pool(cfg.cnf.seed * 7919 + 29);
  Matrix emb(static_cast<Eigen::Index>(cfg.denoiser.speaker_dim), n);
  std::vector<toy::ToySpeaker> speakers;
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    speakers.push_back(w.sample_speaker(pool));
    int c = static_cast<int>(pool.below(w.contents().size()));
    int a = static_cast<int>(pool.below(w.accents().size()));
    emb.col(i) = b.encode_speaker(w.render_mel(speakers.back(), w.content_features(c, a, 0)));
    ids.push_back("pool" + std::to_string(i));
  }
  std::vector<double> ages;
  std::vector<int> genders;
  for (int i = 0; i < n_labeled; ++i) {
    ages.push_back(speakers[i].age);
    genders.push_back(speakers[i].gender_class);
  }
  auto predictor = flow::train_attribute_predictor(emb.leftCols(n_labeled), ages, genders, cfg.predictor);
  auto rows = flow::weak_label(emb, ids, predictor);
  std::vector<flow::AttributeVector> attrs;
  for (int i = 0; i < n; ++i) {
    if (i < n_labeled) {
      rows[i].age_years = speakers[i].age;
      rows[i].source = "labeled";
    }
    attrs.push_back({rows[i].age_years, rows[i].gender_logit});
  }
  flow::write_attribute_csv(run.report("attributes.csv"), rows);

  num::Rng rng(cfg.cnf.seed);
  flow::ConditionalFlow f(cfg.denoiser.speaker_dim, 2, cfg.flow, rng);
  auto log = flow::train_cnf(f, emb, attrs, cfg.cnf);
  f.save(run.checkpoint("flow.vsck"));
  predictor.save(run.checkpoint("predictor.vsck"));
  write_losses(run.report("cnf_nll.csv"), log.nll, 1);
  return {run.checkpoint("flow.vsck"), run.checkpoint("predictor.vsck"), run.report("attributes.csv"),
          run.report("cnf_nll.csv")};
}

std::vector<fs::path> cmd_train_bn2bn(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  toy::ParallelManifest manifest = load_manifest(run);
  bn2bn::Bn2BnConfig mc = cfg.bn2bn;
  if (mc.accents != accent_names(w)) throw ConfigError("bn2bn accents do not match the world");
  mc.validate();
  auto groups = bn2bn::groups_from_world(w, manifest, manifest.targets, range(0, train_content_count(cfg)));
  num::Rng rng(cfg.bn2bn_train.seed);
  bn2bn::Bn2BnModel m(mc, rng);
  auto log = bn2bn::train_bn2bn(m, groups, cfg.bn2bn_train);
  m.save(run.checkpoint("bn2bn.vsck"));
  write_file(run.checkpoint("bn2bn.json"), mc.to_json());
  write_losses(run.report("bn2bn_loss.csv"), log.losses, cfg.bn2bn_train.log_every);
  return {run.checkpoint("bn2bn.vsck"), run.checkpoint("bn2bn.json"), run.report("bn2bn_loss.csv")};
}

namespace {

// Ground-truth content sequences of the target speakers for the given contents.
std::vector<eval::LabeledSequence> ground_truth(const toy::World& w, const std::vector<int>& speakers,
                                                const std::vector<int>& contents) {
  std::vector<eval::LabeledSequence> out;
  for (int s : speakers)
    for (int c : contents)
      for (int a = 0; a < static_cast<int>(w.accents().size()); ++a)
        out.push_back({"s" + std::to_string(s) + "_c" + std::to_string(c) + "_" + w.accent(a).name, a,
                       w.content_features(c, a, s)});
  return out;
}

}  // namespace

std::vector<fs::path> cmd_train_classifier(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  toy::ParallelManifest manifest = load_manifest(run);
  const int k_train = train_content_count(cfg);
  auto train = ground_truth(w, manifest.targets, range(0, k_train));
  auto holdout = ground_truth(w, manifest.targets, range(k_train, cfg.world.k_contents));
  auto clf = eval::train_accent_classifier(train, holdout, accent_names(w), cfg.classifier);
  clf.save(run.checkpoint("accent_classifier.vsck"));
  write_file(run.report("accent_classifier.json"),
             json{{"holdout_accuracy", clf.holdout_accuracy()}, {"train_items", train.size()},
                  {"holdout_items", holdout.size()}}
                 .dump(2));
  eval::export_embeddings(run.report("accent_embeddings.csv"), holdout, clf);
  return {run.checkpoint("accent_classifier.vsck"), run.report("accent_classifier.json"),
          run.report("accent_embeddings.csv")};
}

// ---- editing

std::vector<EditRequest> EditRequest::parse(const std::string& text) {
  std::vector<EditRequest> out;
  try {
    json j = json::parse(text);
    json items = j.is_array() ? j : json::array({j});
    for (const auto& it : items) {
      if (!it.is_object()) throw ConfigError("edit request: expected an object");
      EditRequest r;
      get(it, "speaker", r.speaker);
      get(it, "content", r.content);
      get(it, "source_accent", r.source_accent);
      get(it, "accent", r.target_accent);
      if (it.contains("age")) r.age = it.at("age").get<double>();
      if (it.contains("age_delta")) r.age_delta = it.at("age_delta").get<double>();
      if (it.contains("gender")) r.gender = it.at("gender").get<std::string>();
      if (r.age && r.age_delta) throw ConfigError("edit request: give age or age_delta, not both");
      if (r.gender && *r.gender != "flip" && *r.gender != "positive" && *r.gender != "negative")
        throw ConfigError("edit request: gender must be flip, positive or negative");
      out.push_back(r);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("edit request: ") + e.what());
  }
  return out;
}

std::string EditRequest::to_json() const {
  json j{{"speaker", speaker}, {"content", content}, {"source_accent", source_accent}};
  if (!target_accent.empty()) j["accent"] = target_accent;
  if (age) j["age"] = *age;
  if (age_delta) j["age_delta"] = *age_delta;
  if (gender) j["gender"] = *gender;
  return j.dump();
}

EditResult run_edit(const EditModels& m, const EditRequest& req, int steps, SampleMode mode, std::uint64_t seed) {
  if (!m.world || !m.backbone) throw ContractError("run_edit: world and backbone are required");
  const toy::World& w = *m.world;
  EditResult r;
  r.request = req;
  const int src = req.source_accent.empty() ? 0 : w.accent_index(req.source_accent);
  Matrix content = w.content_features(req.content, src, req.speaker);
  const Matrix source_mel = w.render_mel(w.speaker(req.speaker), content);
  r.decoded_source = w.oracle_decode_mel(source_mel);
  r.embedding_in = m.backbone->encode_speaker(source_mel);

  // Content conversion first.
  if (!req.target_accent.empty()) {
    if (!m.bn2bn) throw ContractError("run_edit: accent edit needs a BN2BN model");
    content = m.bn2bn->convert(content, req.target_accent).l10;
  }
  r.content = content;

  // Then the speaker-embedding edit.
  r.embedding_out = r.embedding_in;
  if (m.editor) {
    r.attrs_in = m.editor->predictor.predict(r.embedding_in);
    r.attrs_target = r.attrs_in;
  }
  if (req.edits_embedding()) {
    if (!m.editor) throw ContractError("run_edit: age/gender edits need the flow editor");
    if (req.age) r.attrs_target.age = *req.age;
    if (req.age_delta) r.attrs_target.age = r.attrs_in.age + *req.age_delta;
    if (req.gender) {
      const double g = r.attrs_in.gender;
      if (*req.gender == "flip") r.attrs_target.gender = -g;
      else if (*req.gender == "positive") r.attrs_target.gender = std::fabs(g);
      else r.attrs_target.gender = -std::fabs(g);
    }
    r.embedding_out = m.editor->flow.edit(r.embedding_in, r.attrs_in, r.attrs_target);
  }

  num::Rng rng(seed);
  r.mel = m.backbone->sample(r.embedding_out, content, steps, mode, rng);
  r.decoded = w.oracle_decode_mel(r.mel);
  if (m.classifier) r.decoded_accent = m.classifier->classify(content);
  return r;
}

namespace {

std::uint64_t item_seed(std::uint64_t base, std::uint64_t i) { return base * 1000003ULL + i; }

json result_json(const EditResult& r, const toy::World& w) {
  json j{{"request", json::parse(r.request.to_json())},
         {"attributes_in", {{"age", r.attrs_in.age}, {"gender_logit", r.attrs_in.gender}}},
         {"attributes_target", {{"age", r.attrs_target.age}, {"gender_logit", r.attrs_target.gender}}},
         {"embedding_shift", (r.embedding_out - r.embedding_in).norm()},
         {"decoded_source", oracle_json(r.decoded_source)},
         {"decoded", oracle_json(r.decoded)},
         {"content_frames", r.content.cols()}};
  if (r.decoded_accent >= 0) j["decoded_accent"] = w.accent(r.decoded_accent).name;
  return j;
}

}  // namespace

std::vector<fs::path> cmd_edit(const Run& run, const std::vector<EditRequest>& requests) {
  if (requests.empty()) throw ConfigError("edit: no requests");
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  diffusion::Backbone b = load_backbone(run);
  bool need_flow = false, need_bn2bn = false;
  for (const auto& r : requests) {
    need_flow |= r.edits_embedding();
    need_bn2bn |= !r.target_accent.empty();
    w.speaker(r.speaker);
    w.content(r.content);
  }
  std::optional<Editor> editor;
  if (need_flow || fs::exists(run.checkpoint("flow.vsck"))) editor = load_editor(run);
  std::optional<bn2bn::Bn2BnModel> bn;
  if (need_bn2bn) bn = load_bn2bn(run);
  std::optional<eval::AccentClassifier> clf;
  if (fs::exists(run.checkpoint("accent_classifier.vsck"))) clf = load_classifier(run);
  EditModels models{&w, &b, editor ? &*editor : nullptr, bn ? &*bn : nullptr, clf ? &*clf : nullptr};

  std::vector<fs::path> written;
  json all = json::array();
  for (std::size_t i = 0; i < requests.size(); ++i) {
    EditResult r = run_edit(models, requests[i], cfg.sample_steps, cfg.sample_mode, item_seed(cfg.seed, i));
    const std::string stem = "edit-" + std::to_string(i);
    toy::write_matrix(run.output(stem + ".mel.bin"), r.mel);
    toy::write_matrix(run.output(stem + ".embedding.bin"), Matrix(r.embedding_out));
    written.push_back(run.output(stem + ".mel.bin"));
    written.push_back(run.output(stem + ".embedding.bin"));
    all.push_back(result_json(r, w));
  }
  write_file(run.report("edit.json"), all.dump(2));
  written.push_back(run.report("edit.json"));
  return written;
}

// ---- conversion and sampling

std::vector<fs::path> cmd_convert(const Run& run, const std::string& target_accent) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  toy::ParallelManifest manifest = load_manifest(run);
  bn2bn::Bn2BnModel m = load_bn2bn(run);
  const int tgt = w.accent_index(target_accent);
  std::optional<eval::AccentClassifier> clf;
  if (fs::exists(run.checkpoint("accent_classifier.vsck"))) clf = load_classifier(run);

  std::ostringstream csv;
  csv.precision(10);
  csv << "id,source_accent,frames_in,frames_out,truncated,mae_to_ground_truth,classified_as\n";
  std::vector<fs::path> written;
  for (int s : manifest.targets)
    for (int c = train_content_count(cfg); c < cfg.world.k_contents; ++c)
      for (int a = 0; a < static_cast<int>(w.accents().size()); ++a) {
        if (a == tgt) continue;
        Matrix x = w.content_features(c, a, s);
        auto conv = m.convert(x, target_accent);
        Matrix truth = w.content_features(c, tgt, s);
        double mae = (toy::resample(conv.l10, static_cast<int>(truth.cols())) - truth).cwiseAbs().mean();
        const std::string id = "s" + std::to_string(s) + "_c" + std::to_string(c) + "_" + w.accent(a).name;
        fs::path out = run.output("convert/" + target_accent + "/" + id + ".bin");
        fs::create_directories(out.parent_path());
        toy::write_matrix(out, conv.l10);
        written.push_back(out);
        csv << id << ',' << w.accent(a).name << ',' << x.cols() << ',' << conv.l10.cols() << ',' << conv.truncated
            << ',' << mae << ',' << (clf ? w.accent(clf->classify(conv.l10)).name : "") << '\n';
      }
  write_file(run.report("convert_" + target_accent + ".csv"), csv.str());
  written.push_back(run.report("convert_" + target_accent + ".csv"));
  return written;
}

std::vector<fs::path> cmd_sample(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  diffusion::Backbone b = load_backbone(run);
  std::ostringstream csv;
  csv.precision(10);
  csv << "speaker,content,accent,decoded_speaker,correct,age_error,mel_mae\n";
  int correct = 0, n = 0;
  std::vector<fs::path> written;
  const int k_train = train_content_count(cfg);
  for (const auto& s : w.speakers()) {
    // Reference utterance for the embedding, held-out content for synthesis.
    Vector e = b.encode_speaker(w.render_mel(s, w.content_features(0, 0, s.id)));
    const int c = k_train + s.id % cfg.heldout_contents;
    const int a = s.id % static_cast<int>(w.accents().size());
    Matrix content = w.content_features(c, a, s.id);
    num::Rng rng(item_seed(cfg.seed, static_cast<std::uint64_t>(s.id)));
    Matrix mel = b.sample(e, content, cfg.sample_steps, cfg.sample_mode, rng);
    auto d = w.oracle_decode_mel(mel);
    const bool ok = d.speaker_id == s.id;
    correct += ok;
    ++n;
    fs::path out = run.output("samples/s" + std::to_string(s.id) + "_c" + std::to_string(c) + ".bin");
    fs::create_directories(out.parent_path());
    toy::write_matrix(out, mel);
    written.push_back(out);
    csv << s.id << ',' << c << ',' << w.accent(a).name << ',' << d.speaker_id << ',' << ok << ','
        << std::fabs(d.age - s.age) << ',' << (mel - w.render_mel(s, content)).cwiseAbs().mean() << '\n';
  }
  write_file(run.report("sample.csv"), csv.str());
  write_file(run.report("sample.json"),
             json{{"speaker_recovery", double(correct) / n}, {"n", n}, {"steps", cfg.sample_steps},
                  {"mode", mode_name(cfg.sample_mode)}}
                 .dump(2));
  written.push_back(run.report("sample.csv"));
  written.push_back(run.report("sample.json"));
  return written;
}

// ---- evaluation

std::vector<fs::path> cmd_eval_asv(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  toy::ParallelManifest manifest = load_manifest(run);
  diffusion::Backbone b = load_backbone(run);
  bn2bn::Bn2BnModel m = load_bn2bn(run);
  const auto& targets = manifest.targets;
  if (targets.size() < 2) throw ConfigError("eval asv: needs at least two target speakers");

  // Reference embedding per speaker from a training content; cosines are taken
  // after removing the mean reference embedding.
  std::map<int, Vector> ref;
  Vector center = Vector::Zero(static_cast<Eigen::Index>(cfg.denoiser.speaker_dim));
  for (int s : targets) {
    ref[s] = b.encode_speaker(w.render_mel(w.speaker(s), w.content_features(0, 0, s)));
    center += ref[s];
  }
  center /= static_cast<double>(targets.size());
  auto score = [&](const Vector& e, int s) { return eval::cosine(e - center, ref[s] - center); };

  std::vector<double> same, converted, other;
  const int M = static_cast<int>(w.accents().size());
  std::uint64_t k = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int s = targets[i], s2 = targets[(i + 1) % targets.size()];
    for (int c = train_content_count(cfg); c < cfg.world.k_contents; ++c)
      for (int tgt = 0; tgt < M; ++tgt) {
        same.push_back(score(b.encode_speaker(w.render_mel(w.speaker(s), w.content_features(c, tgt, s))), s));
        other.push_back(score(b.encode_speaker(w.render_mel(w.speaker(s2), w.content_features(c, tgt, s2))), s));
        const int src = (tgt + 1) % M;
        Matrix source = w.content_features(c, src, s);
        Vector e = b.encode_speaker(w.render_mel(w.speaker(s), source));
        Matrix content = m.convert(source, w.accent(tgt).name).l10;
        num::Rng rng(item_seed(cfg.seed, k++));
        converted.push_back(score(b.encode_speaker(b.sample(e, content, cfg.sample_steps, cfg.sample_mode, rng)), s));
      }
  }
  std::vector<eval::SimilarityReport> reps{eval::summarize("asv_same_speaker", same),
                                           eval::summarize("asv_converted", converted),
                                           eval::summarize("asv_non_matching", other)};
  std::vector<fs::path> written;
  for (const auto& r : reps) {
    eval::write_scores_csv(run.report(r.metric + ".csv"), r);
    written.push_back(run.report(r.metric + ".csv"));
  }
  eval::write_summary_json(run.report("asv.json"), reps);
  written.push_back(run.report("asv.json"));
  return written;
}

std::vector<fs::path> cmd_eval_accent(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  toy::ParallelManifest manifest = load_manifest(run);
  bn2bn::Bn2BnModel m = load_bn2bn(run);
  eval::AccentClassifier clf = load_classifier(run);
  const int M = static_cast<int>(w.accents().size());
  const auto held = range(train_content_count(cfg), cfg.world.k_contents);

  json per_accent = json::array();
  std::vector<eval::SimilarityReport> all;
  std::vector<double> gt_all, conv_all, other_all;
  int hits = 0, conversions = 0;
  std::vector<fs::path> written;
  for (int a = 0; a < M; ++a) {
    const std::string name = w.accent(a).name;
    std::vector<Matrix> gt, conv, other;
    for (int s : manifest.targets)
      for (int c : held) {
        gt.push_back(w.content_features(c, a, s));
        for (int b = 0; b < M; ++b) {
          if (b == a) continue;
          other.push_back(w.content_features(c, b, s));
          Matrix y = m.convert(w.content_features(c, b, s), name).l10;
          hits += clf.classify(y) == a;
          ++conversions;
          conv.push_back(std::move(y));
        }
      }
    auto r_gt = eval::centroid_similarity(clf, gt, name, "accent_ground_truth_" + name);
    auto r_conv = eval::centroid_similarity(clf, conv, name, "accent_converted_" + name);
    auto r_other = eval::centroid_similarity(clf, other, name, "accent_non_matching_" + name);
    for (const auto* r : {&r_gt, &r_conv, &r_other}) {
      eval::write_scores_csv(run.report(r->metric + ".csv"), *r);
      written.push_back(run.report(r->metric + ".csv"));
      all.push_back(*r);
    }
    gt_all.insert(gt_all.end(), r_gt.scores.begin(), r_gt.scores.end());
    conv_all.insert(conv_all.end(), r_conv.scores.begin(), r_conv.scores.end());
    other_all.insert(other_all.end(), r_other.scores.begin(), r_other.scores.end());
  }
  all.push_back(eval::summarize("accent_ground_truth", gt_all));
  all.push_back(eval::summarize("accent_converted", conv_all));
  all.push_back(eval::summarize("accent_non_matching", other_all));
  eval::write_summary_json(run.report("accent.json"), all);
  write_file(run.report("accent_conversion.json"),
             json{{"classified_as_target", double(hits) / conversions}, {"n", conversions},
                  {"classifier_holdout_accuracy", clf.holdout_accuracy()}}
                 .dump(2));
  written.push_back(run.report("accent.json"));
  written.push_back(run.report("accent_conversion.json"));
  return written;
}

std::vector<fs::path> cmd_eval_attr(const Run& run) {
  const auto& cfg = run.config();
  toy::World w = load_world(run);
  diffusion::Backbone b = load_backbone(run);
  Editor editor = load_editor(run);
  EditModels models{&w, &b, &editor, nullptr, nullptr};
  const double range_years = cfg.world.age_max - cfg.world.age_min;
  const double mid = 0.5 * (cfg.world.age_min + cfg.world.age_max);
  const int k_train = train_content_count(cfg);

  std::vector<flow::AttributeVector> before, after_gender;
  std::vector<std::vector<flow::AttributeVector>> after_age(3);
  int monotone = 0;
  std::uint64_t k = 0;
  for (const auto& s : w.speakers()) {
    EditRequest base;
    base.speaker = s.id;
    base.content = k_train + s.id % cfg.heldout_contents;
    const std::uint64_t seed = item_seed(cfg.seed, k++);
    auto decode = [&](const EditRequest& r) {
      auto d = run_edit(models, r, cfg.sample_steps, cfg.sample_mode, seed).decoded;
      return flow::AttributeVector{d.age, d.gender_latent};
    };
    before.push_back(decode(base));
    EditRequest g = base;
    g.gender = "flip";
    after_gender.push_back(decode(g));
    // Age edits point toward the far end of the range, at three strengths.
    const double dir = s.age < mid ? 1.0 : -1.0;
    double prev = before.back().age;
    bool mono = true;
    for (int j = 0; j < 3; ++j) {
      EditRequest a = base;
      a.age_delta = dir * range_years * (j + 1) / 7.0;
      after_age[j].push_back(decode(a));
      mono &= dir * (after_age[j].back().age - prev) > 0;
      prev = after_age[j].back().age;
    }
    monotone += mono;
  }
  std::vector<fs::path> written;
  json summary;
  auto gender_report = eval::attribute_shift_report(before, after_gender, {.age = false, .gender = true}, mid);
  gender_report.write_csv(run.report("attr_gender.csv"));
  summary["gender_edit"] = json::parse(gender_report.to_json());
  written.push_back(run.report("attr_gender.csv"));
  json strengths = json::array();
  for (int j = 0; j < 3; ++j) {
    auto rep = eval::attribute_shift_report(before, after_age[j], {.age = true, .gender = false}, mid);
    rep.write_csv(run.report("attr_age_" + std::to_string(j + 1) + ".csv"));
    written.push_back(run.report("attr_age_" + std::to_string(j + 1) + ".csv"));
    strengths.push_back(json::parse(rep.to_json()));
  }
  summary["age_edits"] = strengths;
  summary["age_monotone_fraction"] = double(monotone) / static_cast<double>(before.size());
  summary["age_range_years"] = range_years;
  write_file(run.report("attr.json"), summary.dump(2));
  written.push_back(run.report("attr.json"));
  return written;
}

std::vector<fs::path> cmd_report(const Run& run) {
  json summary = json::object();
  std::ostringstream md;
  md << "# Run " << run.dir().filename().string() << "\n\n";
  for (const char* name : {"diffusion_train.json", "sample.json", "accent_classifier.json", "accent.json",
                           "accent_conversion.json", "asv.json", "attr.json", "edit.json"}) {
    const fs::path p = run.report(name);
    if (!fs::exists(p)) continue;
    json j = json::parse(read_file(p));
    summary[fs::path(name).stem().string()] = j;
    md << "## " << fs::path(name).stem().string() << "\n\n";
    if (j.is_array() && !j.empty() && j.front().contains("metric")) {
      md << "| metric | mean | ci95 | n |\n|---|---|---|---|\n";
      for (const auto& r : j)
        md << "| " << r["metric"].get<std::string>() << " | " << r["mean"].get<double>() << " | "
           << r["ci95"].get<double>() << " | " << r["n"].get<std::size_t>() << " |\n";
    } else {
      md << "```json\n" << j.dump(2) << "\n```\n";
    }
    md << '\n';
  }
  if (summary.empty()) throw MissingArtifactError("report: no reports in " + run.report("").string() + "; run `voiceshop eval` first");
  write_file(run.report("summary.json"), summary.dump(2));
  write_file(run.report("summary.md"), md.str());
  return {run.report("summary.json"), run.report("summary.md")};
}

}  // namespace vs::pipeline
