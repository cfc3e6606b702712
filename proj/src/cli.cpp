#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "voiceshop/errors.hpp"
#include "voiceshop/pipeline.hpp"

namespace vs::pipeline {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> steps;
  std::string mode;
  std::string edit;
  std::string target_accent;
  std::string train_target = "all";
  std::string eval_target = "all";
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Latest run under ./runs when --out is omitted.
fs::path latest_run() {
  const fs::path root = "runs";
  fs::path best;
  if (fs::is_directory(root))
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "config.json") && e.path().filename() > best.filename())
        best = e.path();
  if (best.empty()) throw MissingArtifactError("no run found under ./runs; start one with `voiceshop world`");
  return best;
}

PipelineConfig resolve_config(const Options& o, const std::optional<fs::path>& existing) {
  PipelineConfig cfg;
  if (!o.config.empty()) cfg = PipelineConfig::from_json(slurp(o.config));
  else if (existing) cfg = Run::load_config(*existing);
  if (o.seed) cfg.apply_seed(*o.seed);
  return cfg;
}

Run open_run(const Options& o, bool create) {
  if (create) {
    PipelineConfig cfg = resolve_config(o, std::nullopt);
    return o.out.empty() ? Run::create_under("runs", cfg) : Run::at(o.out, cfg);
  }
  const fs::path dir = o.out.empty() ? latest_run() : fs::path(o.out);
  if (!fs::exists(dir / "config.json"))
    throw MissingArtifactError("no run at " + dir.string() + "; start one with `voiceshop world --out " + dir.string() + "`");
  return Run::at(dir, resolve_config(o, dir));
}

std::vector<fs::path> existing_inputs(const Run& run) {
  std::vector<fs::path> in{run.dir() / "config.json"};
  if (fs::exists(run.world_dir() / "world.json")) in.push_back(run.world_dir() / "world.json");
  if (fs::is_directory(run.dir() / "checkpoints"))
    for (const auto& e : fs::directory_iterator(run.dir() / "checkpoints"))
      if (e.is_regular_file()) in.push_back(e.path());
  std::sort(in.begin(), in.end());
  return in;
}

template <class F>
void timed(const Run& run, const std::string& name, F&& body) {
  const std::string started = utc_now();
  const auto inputs = existing_inputs(run);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<fs::path> outputs = body();
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<fs::path> kept;
  for (const auto& p : inputs)
    if (std::find(outputs.begin(), outputs.end(), p) == outputs.end()) kept.push_back(p);
  run.record(name, wall, kept, outputs, started);
  std::cout << name << ": " << outputs.size() << " files in " << std::fixed << std::setprecision(1) << wall << " s\n";
}

void train(const Run& run, const std::string& target) {
  if (target == "diffusion" || target == "all") timed(run, "train diffusion", [&] { return cmd_train_diffusion(run); });
  if (target == "cnf" || target == "all") timed(run, "train cnf", [&] { return cmd_train_cnf(run); });
  if (target == "bn2bn" || target == "all") timed(run, "train bn2bn", [&] { return cmd_train_bn2bn(run); });
  if (target == "classifier" || target == "all")
    timed(run, "train classifier", [&] { return cmd_train_classifier(run); });
}

void evaluate(const Run& run, const std::string& target) {
  if (target == "asv" || target == "all") timed(run, "eval asv", [&] { return cmd_eval_asv(run); });
  if (target == "accent" || target == "all") timed(run, "eval accent", [&] { return cmd_eval_accent(run); });
  if (target == "attr" || target == "all") timed(run, "eval attr", [&] { return cmd_eval_attr(run); });
}

}  // namespace

int main_cli(int argc, char** argv) {
  CLI::App app{"VoiceShop toy-world pipeline"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "pipeline config JSON (partial configs fill from defaults)");
  app.add_option("--seed", o.seed, "master seed; module seeds are offsets from it");
  app.add_option("--out", o.out, "run directory (default: new or latest under ./runs)");
  app.add_option("--steps", o.steps, "sampler steps for sample/edit/eval");
  app.add_option("--mode", o.mode, "sampler mode")->check(CLI::IsMember({"ddim", "noise"}));
  app.fallthrough();

  auto* world = app.add_subcommand("world", "generate the toy world and its parallel manifest");
  auto* tr = app.add_subcommand("train", "train one model or all of them");
  tr->add_option("target", o.train_target)->check(CLI::IsMember({"diffusion", "cnf", "bn2bn", "classifier", "all"}));
  auto* edit = app.add_subcommand("edit", "edit accent, age and gender in one synthesis pass");
  edit->add_option("--edit", o.edit, "edit request JSON, inline or a file path")->required();
  auto* convert = app.add_subcommand("convert", "convert held-out content into a target accent");
  convert->add_option("--target-accent", o.target_accent)->required();
  auto* sample = app.add_subcommand("sample", "resynthesize every world speaker");
  auto* ev = app.add_subcommand("eval", "speaker, accent and attribute evaluations");
  ev->add_option("target", o.eval_target)->check(CLI::IsMember({"asv", "accent", "attr", "all"}));
  auto* report = app.add_subcommand("report", "collect reports into summary.json and summary.md");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Run run = open_run(o, world->parsed());
    if (auto s = run.staleness()) std::cerr << "warning: " << *s << '\n';
    if (o.steps || !o.mode.empty())
      run.override_sampling(o.steps.value_or(run.config().sample_steps),
                            o.mode.empty() ? run.config().sample_mode
                            : o.mode == "ddim" ? diffusion::SampleMode::deterministic
                                               : diffusion::SampleMode::noise_replace);
    std::cout << "run " << run.dir().string() << '\n';

    if (world->parsed()) timed(run, "world", [&] { return cmd_world(run); });
    if (tr->parsed()) train(run, o.train_target);
    if (edit->parsed()) {
      const std::string text = fs::exists(o.edit) ? slurp(o.edit) : o.edit;
      auto requests = EditRequest::parse(text);
      timed(run, "edit", [&] { return cmd_edit(run, requests); });
    }
    if (convert->parsed()) timed(run, "convert " + o.target_accent, [&] { return cmd_convert(run, o.target_accent); });
    if (sample->parsed()) timed(run, "sample", [&] { return cmd_sample(run); });
    if (ev->parsed()) evaluate(run, o.eval_target);
    if (report->parsed()) timed(run, "report", [&] { return cmd_report(run); });
    return 0;
  } catch (const MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const LookupError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const TrainingError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace vs::pipeline
