#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "voiceshop/errors.hpp"
#include "voiceshop/pipeline.hpp"

using namespace vs;
using namespace vs::pipeline;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("vs_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "voiceshop");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return main_cli(static_cast<int>(argv.size()), argv.data());
}

PipelineConfig tiny() {
  return PipelineConfig::from_json(R"({"diffusion":{"steps":40,"log_every":10},"backbone_pool":20,
    "cnf":{"iterations":10},"flow_pool":120,"bn2bn_train":{"steps":20},"classifier":{"steps":20}})");
}

std::map<std::string, std::string> hashes_under(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = sha256_file(e.path());
  return out;
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(PipelineConfigTest, JsonRoundTripAndHash) {
  PipelineConfig a = tiny();
  PipelineConfig b = PipelineConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 64u);
  EXPECT_EQ(a.diffusion.steps, 40);
  EXPECT_EQ(a.flow_pool, 120);
  // Untouched fields keep defaults.
  EXPECT_EQ(a.world.n_speakers, PipelineConfig{}.world.n_speakers);
  EXPECT_NE(a.hash(), PipelineConfig{}.hash());
}

TEST(PipelineConfigTest, SeedOffsets) {
  PipelineConfig c = PipelineConfig::from_json(R"({"seed": 100})");
  EXPECT_EQ(c.world.seed, 100u);
  EXPECT_EQ(c.diffusion.seed, 101u);
  EXPECT_EQ(c.cnf.seed, 102u);
  EXPECT_EQ(c.predictor.seed, 103u);
  EXPECT_EQ(c.bn2bn_train.seed, 104u);
  EXPECT_EQ(c.classifier.seed, 105u);
  PipelineConfig d = PipelineConfig::from_json(R"({"seed": 100, "cnf": {"seed": 5}})");
  EXPECT_EQ(d.cnf.seed, 5u);
}

TEST(PipelineConfigTest, BnShapeFollowsWorld) {
  PipelineConfig c = PipelineConfig::from_json(R"({"world": {"m_accents": 4}})");
  EXPECT_EQ(c.bn2bn.accents.size(), 4u);
  EXPECT_EQ(c.bn2bn.accents.back(), "accent3");
}

TEST(PipelineConfigTest, RejectsBadConfigs) {
  EXPECT_THROW(PipelineConfig::from_json("not json"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json("[1,2]"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"sample_steps": 0})"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"sample_mode": "fast"})"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"heldout_contents": 32})"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"labeled_fraction": 0})"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"diffusion": {"steps": "many"}})"), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(R"({"world": {"content_dim": 6}})"), ConfigError);
}

TEST(EditRequestTest, Parsing) {
  auto one = EditRequest::parse(R"({"speaker": 3, "content": 12, "accent": "accent1", "age_delta": -10, "gender": "flip"})");
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].speaker, 3);
  EXPECT_EQ(one[0].content, 12);
  EXPECT_EQ(one[0].target_accent, "accent1");
  EXPECT_DOUBLE_EQ(*one[0].age_delta, -10);
  EXPECT_FALSE(one[0].age);
  EXPECT_TRUE(one[0].edits_embedding());

  auto many = EditRequest::parse(R"([{"speaker": 1}, {"speaker": 2, "age": 70}])");
  ASSERT_EQ(many.size(), 2u);
  EXPECT_FALSE(many[0].edits_embedding());
  EXPECT_DOUBLE_EQ(*many[1].age, 70);

  auto back = EditRequest::parse(one[0].to_json());
  EXPECT_EQ(back[0].to_json(), one[0].to_json());

  EXPECT_THROW(EditRequest::parse(R"({"age": 50, "age_delta": 5})"), ConfigError);
  EXPECT_THROW(EditRequest::parse(R"({"gender": "female"})"), ConfigError);
  EXPECT_THROW(EditRequest::parse(R"({"speaker": "x"})"), ConfigError);
  EXPECT_THROW(EditRequest::parse("{"), ConfigError);
}

TEST(RunTest, WorldIsReproducible) {
  PipelineConfig cfg;
  pipeline::Run a = pipeline::Run::at(scratch("world_a"), cfg);
  pipeline::Run b = pipeline::Run::at(scratch("world_b"), cfg);
  cmd_world(a);
  cmd_world(b);
  auto ha = hashes_under(a.world_dir());
  auto hb = hashes_under(b.world_dir());
  EXPECT_GT(ha.size(), 2u);
  EXPECT_EQ(ha, hb);
  // A different seed changes the world.
  PipelineConfig other;
  other.apply_seed(8);
  pipeline::Run c = pipeline::Run::at(scratch("world_c"), other);
  cmd_world(c);
  EXPECT_NE(hashes_under(c.world_dir()).at("world.json"), ha.at("world.json"));
}

TEST(RunTest, StalenessAndManifest) {
  const fs::path dir = scratch("stale");
  PipelineConfig cfg;
  pipeline::Run r = pipeline::Run::at(dir, cfg);
  EXPECT_FALSE(r.staleness());
  EXPECT_EQ(pipeline::Run::load_config(dir).hash(), cfg.hash());
  EXPECT_FALSE(pipeline::Run::at(dir, cfg).staleness());
  PipelineConfig changed = cfg;
  changed.apply_seed(99);
  EXPECT_TRUE(pipeline::Run::at(dir, changed).staleness());

  auto outs = cmd_world(r);
  r.record("world", 1.5, {dir / "config.json"}, outs, "2000-01-01T00:00:00Z");
  json m = json::parse(slurp(dir / "manifest.json"));
  ASSERT_EQ(m["commands"].size(), 1u);
  const auto& rec = m["commands"][0];
  EXPECT_EQ(rec["config_hash"], cfg.hash());
  EXPECT_EQ(rec["inputs"][0]["path"], "config.json");
  EXPECT_EQ(rec["inputs"][0]["sha256"], sha256_file(dir / "config.json"));
  EXPECT_EQ(rec["outputs"].size(), outs.size());
  for (const auto& o : rec["outputs"])
    EXPECT_EQ(o["sha256"], sha256_file(dir / o["path"].get<std::string>()));
}

TEST(RunTest, CreateUnderNamesByHash) {
  PipelineConfig cfg;
  pipeline::Run r = pipeline::Run::create_under(scratch("root"), cfg);
  const std::string name = r.dir().filename().string();
  EXPECT_EQ(name.substr(name.size() - 12), cfg.hash().substr(0, 12));
  EXPECT_TRUE(fs::exists(r.dir() / "config.json"));
}

TEST(CliTest, ExitCodes) {
  const fs::path dir = scratch("cli");
  EXPECT_EQ(cli({"sample", "--out", dir.string()}), 3);
  EXPECT_EQ(cli({"world", "--out", dir.string()}), 0);
  EXPECT_EQ(cli({"train", "cnf", "--out", dir.string()}), 3);
  EXPECT_EQ(cli({"edit", "--out", dir.string(), "--edit", "{\"age\": 40}"}), 3);

  const fs::path bad = scratch("bad.json");
  std::ofstream(bad) << R"({"sample_steps": -3})";
  EXPECT_EQ(cli({"world", "--config", bad.string(), "--out", scratch("cli_bad").string()}), 2);
  EXPECT_EQ(cli({"edit", "--out", dir.string(), "--edit", "{\"gender\": 1}"}), 2);
  EXPECT_EQ(cli({"convert", "--out", dir.string()}), 2);
  EXPECT_EQ(cli({"nonsense"}), 2);
  EXPECT_EQ(cli({"sample", "--out", dir.string(), "--mode", "fast"}), 2);
}

class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    run_ = new pipeline::Run(pipeline::Run::at(scratch("tiny"), tiny()));
    cmd_world(*run_);
    cmd_train_diffusion(*run_);
    cmd_train_cnf(*run_);
  }
  static void TearDownTestSuite() { delete run_; }
  static pipeline::Run* run_;
};
pipeline::Run* TinyRun::run_ = nullptr;

TEST_F(TinyRun, EmptyEditIsIdentity) {
  toy::World w = load_world(*run_);
  auto b = load_backbone(*run_);
  Editor e = load_editor(*run_);
  EditModels m{&w, &b, &e, nullptr, nullptr};
  EditRequest req;
  req.speaker = 2;
  req.content = 13;
  auto r = run_edit(m, req, 4, diffusion::SampleMode::deterministic, 1);
  EXPECT_LE((r.embedding_out - r.embedding_in).cwiseAbs().maxCoeff(), 1e-3);
  // A zero-size attribute change goes through the flow both ways.
  req.age_delta = 0.0;
  auto z = run_edit(m, req, 4, diffusion::SampleMode::deterministic, 1);
  EXPECT_LE((z.embedding_out - z.embedding_in).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_EQ(r.mel.rows(), w.config().mel_bins);
  EXPECT_THROW(run_edit({&w, &b, nullptr, nullptr, nullptr}, req, 4, diffusion::SampleMode::deterministic, 1),
               ContractError);
}

TEST_F(TinyRun, EditCommandWritesOutputs) {
  auto files = cmd_edit(*run_, EditRequest::parse(R"([{"speaker": 1, "content": 12, "gender": "flip"}, {"speaker": 4}])"));
  json rep = json::parse(slurp(run_->report("edit.json")));
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_DOUBLE_EQ(rep[0]["attributes_target"]["gender_logit"].get<double>(),
                   -rep[0]["attributes_in"]["gender_logit"].get<double>());
  EXPECT_NEAR(rep[1]["embedding_shift"].get<double>(), 0.0, 1e-12);
  for (const auto& f : files) EXPECT_TRUE(fs::exists(f));
  EXPECT_THROW(cmd_edit(*run_, EditRequest::parse(R"({"speaker": 1, "accent": "accent1"})")), MissingArtifactError);
}

TEST_F(TinyRun, SampleCsvIsBitwiseReproducible) {
  cmd_sample(*run_);
  const std::string first = sha256_file(run_->report("sample.csv"));
  cmd_sample(*run_);
  EXPECT_EQ(sha256_file(run_->report("sample.csv")), first);

  // A second run with the same config trains the same backbone.
  pipeline::Run twin = pipeline::Run::at(scratch("tiny_twin"), tiny());
  cmd_world(twin);
  cmd_train_diffusion(twin);
  EXPECT_EQ(sha256_file(twin.checkpoint("backbone.vsck")), sha256_file(run_->checkpoint("backbone.vsck")));
  cmd_sample(twin);
  EXPECT_EQ(sha256_file(twin.report("sample.csv")), first);
}
