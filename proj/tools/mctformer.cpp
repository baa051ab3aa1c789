// mctformer: data generation, training, map extraction, evaluation, ablation
// studies and gradient checks from the command line.
//
// Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mct/ablation.hpp"
#include "mct/model_check.hpp"
#include "mct/pipeline.hpp"
#include "mct/synth.hpp"
#include "mct/train.hpp"

namespace fs = std::filesystem;
using namespace mct;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Timestamped run log. Timestamps never reach artifacts or stdout.
class RunLog {
 public:
  void open(const std::string& path) {
    if (path.empty()) return;
    file_.open(path, std::ios::app);
    if (!file_) throw UsageError("cannot open log file " + path);
  }

  void operator()(const std::string& line) {
    std::cerr << line << '\n';
    if (!file_) return;
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    file_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << line << '\n';
    file_.flush();
  }

 private:
  std::ofstream file_;
};

RunLog g_log;

std::set<std::string> model_keys() {
  std::set<std::string> keys;
  const io::Manifest defaults = ModelConfig{}.to_manifest();
  for (const auto& [k, v] : defaults.entries()) keys.insert(k);
  return keys;
}

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys{"epochs", "batch_size", "lr",           "beta1",
                                          "beta2",  "adam_eps",   "weight_decay", "hflip"};
  return keys;
}

/// Loads a flat key=value run config and rejects unknown keys.
io::Manifest load_config(const std::string& path) {
  if (path.empty()) return {};
  io::Manifest m = io::Manifest::load(path);
  const auto model = model_keys();
  for (const auto& [k, v] : m.entries()) {
    if (!model.count(k) && !train_keys().count(k)) {
      throw UsageError("config " + path + ": unknown key '" + k + "'");
    }
  }
  return m;
}

struct RunConfig {
  ModelConfig model;
  TrainOptions train;
};

/// Model shape follows the dataset unless the config pins it.
RunConfig resolve_config(const io::Manifest& m, const synth::DatasetSpec* data) {
  RunConfig rc;
  if (data) {
    rc.model.num_classes = data->num_classes;
    rc.model.image_size = data->image_size;
  }
  rc.model.apply(m);
  rc.train.apply(m);
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::vector<Stage> stages_for(const std::string& kind) {
  if (kind == "all") {
    return {Stage::Attention, Stage::AttentionAffinity, Stage::PatchCam, Stage::Fused,
            Stage::FusedAffinity};
  }
  return {parse_stage(kind)};
}

EvalOptions eval_options(const ModelConfig& cfg, std::optional<std::size_t> k,
                         std::optional<std::size_t> iterations, double tau) {
  EvalOptions opt;
  opt.tau = tau;
  opt.maps = MapOptions::from(cfg);
  if (k) opt.maps.fuse_layers = *k;
  if (iterations) opt.maps.refine_iterations = *iterations;
  if (opt.maps.fuse_layers < 1 || opt.maps.fuse_layers > cfg.layers) {
    throw UsageError("--k must lie in [1," + std::to_string(cfg.layers) + "]");
  }
  if (opt.maps.refine_iterations < 1) throw UsageError("--iterations must be >= 1");
  if (!(tau >= 0 && tau <= 1)) throw UsageError("--tau must lie in [0,1]");
  return opt;
}

void require_compatible(const ModelConfig& cfg, const synth::DatasetSpec& spec) {
  if (cfg.num_classes != spec.num_classes || cfg.image_size != spec.image_size) {
    throw FormatError("checkpoint expects " + std::to_string(cfg.num_classes) + " classes at " +
                      std::to_string(cfg.image_size) + "px, dataset has " +
                      std::to_string(spec.num_classes) + " classes at " +
                      std::to_string(spec.image_size) + "px");
  }
}

std::string pad4(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
};

int run_gen(const GenArgs& a) {
  synth::DatasetSpec spec;
  if (!a.spec.empty()) spec = synth::DatasetSpec::from_manifest(io::Manifest::load(a.spec));
  if (a.seed) spec.seed = *a.seed;
  if (a.samples) spec.num_samples = *a.samples;
  spec.validate();
  g_log("gen: " + std::to_string(spec.num_samples) + " samples, seed " +
        std::to_string(spec.seed) + " -> " + a.out);
  synth::save(a.out, spec, synth::generate(spec));
  return 0;
}

struct TrainArgs {
  std::string data, config, out;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
};

int run_train(const TrainArgs& a) {
  const auto data = synth::load(a.data);
  io::Manifest m = load_config(a.config);
  if (a.epochs) m.set("epochs", *a.epochs);
  const RunConfig rc = resolve_config(m, &data.spec);
  require_compatible(rc.model, data.spec);

  g_log("train: " + std::to_string(data.samples.size()) + " samples, " +
        std::to_string(rc.train.epochs) + " epochs, seed " + std::to_string(a.seed));
  const std::size_t steps_per_epoch =
      (data.samples.size() + rc.train.batch_size - 1) / rc.train.batch_size;
  auto progress = [&](const LossRecord& r) {
    if ((r.step + 1) % steps_per_epoch != 0) return;
    std::ostringstream os;
    os << "epoch " << r.epoch + 1 << "/" << rc.train.epochs << " loss " << std::setprecision(5)
       << r.total << " (cls " << r.cls_class << ", patch " << r.cls_patch << ", cct " << r.cct
       << ")";
    g_log(os.str());
  };
  const auto result = train<float>(data.samples, rc.model, rc.train, a.seed, progress);

  save_checkpoint(a.out, rc.model, result.params);
  io::Manifest run;
  run.set("seed", a.seed);
  run.set("epochs", rc.train.epochs);
  run.set("batch_size", rc.train.batch_size);
  run.set("lr", rc.train.lr);
  run.set("beta1", rc.train.beta1);
  run.set("beta2", rc.train.beta2);
  run.set("adam_eps", rc.train.eps);
  run.set("weight_decay", rc.train.weight_decay);
  run.set("hflip", int(rc.train.hflip));
  run.save(fs::path(a.out) / "train.txt");
  io::write_file(fs::path(a.out) / "loss.csv", loss_csv(result.curve));
  g_log("train: checkpoint written to " + a.out);
  return 0;
}

struct MapsArgs {
  std::string checkpoint, data, kind = "all", out;
  std::optional<std::size_t> k, iterations, limit;
};

int run_maps(const MapsArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto data = synth::load(a.data);
  require_compatible(ck.config, data.spec);
  const EvalOptions opt = eval_options(ck.config, a.k, a.iterations, 0.35);
  const std::size_t n = a.limit ? std::min(*a.limit, data.samples.size()) : data.samples.size();
  const std::size_t c = ck.config.num_classes, s = ck.config.image_size;

  const auto stages = stages_for(a.kind);
  std::vector<Tensor<float>> stacks;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    fs::create_directories(fs::path(a.out) / kind_name(stages[i]));
    stacks.emplace_back(Shape{n, c, s, s});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sample = data.samples[i];
    const auto inf = infer(ck.params, ck.config, sample.image);
    for (std::size_t st = 0; st < stages.size(); ++st) {
      const auto maps = seed_maps(inf, ck.config, stages[st], opt.maps, sample.labels);
      std::copy(maps.maps.data().begin(), maps.maps.data().end(),
                stacks[st].data().begin() + long(i * c * s * s));
      const fs::path dir = fs::path(a.out) / kind_name(stages[st]);
      for (std::size_t k = 0; k < c; ++k) {
        if (!sample.labels[k]) continue;
        io::write_file(dir / ("sample_" + pad4(i) + "_class_" + std::to_string(k) + ".pgm"),
                       encode_pgm(maps.maps, k));
      }
    }
  }
  for (std::size_t st = 0; st < stages.size(); ++st) {
    io::save_tensor(fs::path(a.out) / kind_name(stages[st]) / "maps.mct1", stacks[st]);
  }
  g_log("maps: " + std::to_string(n) + " samples x " + std::to_string(stages.size()) +
        " kinds -> " + a.out);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, kind = "refined", report;
  double tau = 0.35;
  std::optional<std::size_t> k, iterations;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto data = synth::load(a.data);
  require_compatible(ck.config, data.spec);
  const EvalOptions opt = eval_options(ck.config, a.k, a.iterations, a.tau);
  const auto reports = evaluate_stages(ck.params, ck.config, data.samples, stages_for(a.kind), opt);
  for (const auto& r : reports) std::cout << r.table();
  if (!a.report.empty()) io::write_file(a.report, reports_csv(reports, ck.config.num_classes));
  return 0;
}

struct AblateArgs {
  std::string study, out, config, data, eval_data, checkpoint;
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs;
  double tau = 0.35;
};

int run_ablate(const AblateArgs& a) {
  StudySetup s;
  s.seed = a.seed;
  s.log = [](const std::string& line) { g_log("ablate: " + line); };
  synth::DatasetSpec train_spec;
  if (!a.data.empty()) {
    auto train = synth::load(a.data);
    train_spec = train.spec;
    s.train_data = std::move(train.samples);
    if (a.eval_data.empty()) throw UsageError("--data needs --eval-data");
    auto eval = synth::load(a.eval_data);
    if (eval.spec.num_classes != train_spec.num_classes ||
        eval.spec.image_size != train_spec.image_size) {
      throw FormatError("train and eval datasets disagree on classes or image size");
    }
    s.eval_data = std::move(eval.samples);
  } else {
    auto [train, eval] = default_splits(a.seed);
    s.train_data = std::move(train);
    s.eval_data = std::move(eval);
  }
  io::Manifest m = load_config(a.config);
  if (a.epochs) m.set("epochs", *a.epochs);
  const RunConfig rc = resolve_config(m, &train_spec);
  s.model = rc.model;
  s.train = rc.train;
  s.eval = eval_options(s.model, std::nullopt, std::nullopt, a.tau);

  std::string csv;
  if (a.study == "pooling") {
    csv = pooling_csv(pooling_study(s));
  } else if (a.study == "cct-depth") {
    csv = cct_depth_csv(sweep_cct_depth(s));
  } else if (a.study == "k-sweep" || a.study == "pipeline") {
    ParamStore<float> params;
    ModelConfig cfg = s.model;
    if (!a.checkpoint.empty()) {
      Checkpoint ck = load_checkpoint(a.checkpoint);
      cfg = ck.config;
      params = std::move(ck.params);
      s.eval = eval_options(cfg, std::nullopt, std::nullopt, a.tau);
    } else {
      params = train_variant(s, cfg, "default config");
    }
    if (a.study == "k-sweep") csv = k_sweep_csv(sweep_k(params, cfg, s.eval_data, s.eval));
    else csv = reports_csv(pipeline_study(params, cfg, s.eval_data, s.eval), cfg.num_classes);
  } else {
    throw UsageError("unknown study '" + a.study + "'");
  }
  io::write_file(a.out, csv);
  std::cout << csv;
  return 0;
}

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t coords = 8;
  double tolerance = 1e-4;
};

int run_gradcheck(const GradcheckArgs& a) {
  const RunConfig rc = resolve_config(load_config(a.config), nullptr);
  const auto rep = check_model_gradients(rc.model, a.seed, a.coords);
  const auto& r = rep.result;
  std::cout << std::setprecision(3) << "coordinates checked: " << r.coords_checked << "\n"
            << "reduced steps:       " << r.reduced_steps << "\n"
            << "skipped at kinks:    " << r.kinks << "\n"
            << "max relative error:  " << r.max_rel_error << " (" << rep.worst_param << "["
            << r.worst_index << "], analytic " << r.worst_analytic << ", numeric "
            << r.worst_numeric << ")\n"
            << "seconds:             " << std::fixed << rep.seconds << "\n"
            << (rep.passed() ? "PASS" : "FAIL") << " tolerance " << a.tolerance << "\n";
  return rep.passed() ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-class token transformer: synthetic data, training, localization maps"};
  app.require_subcommand(1);
  std::string log_path;
  app.add_option("--log", log_path, "Append timestamped progress lines to this file");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--spec", gen.spec, "key=value dataset spec")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Override the spec seed");
  gen_cmd->add_option("--samples", gen.samples, "Override the sample count");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--config", tr.config, "key=value model/training config")->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", tr.seed, "Run seed");
  train_cmd->add_option("--epochs", tr.epochs, "Override the epoch count");
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();

  MapsArgs mp;
  auto* maps_cmd = app.add_subcommand("maps", "Write localization maps as PGM and MCT1");
  maps_cmd->add_option("--checkpoint", mp.checkpoint)->required()->check(CLI::ExistingDirectory);
  maps_cmd->add_option("--data", mp.data)->required()->check(CLI::ExistingDirectory);
  maps_cmd->add_option("--kind", mp.kind)
      ->check(CLI::IsMember({"attention", "patchcam", "fused", "refined", "all"}));
  maps_cmd->add_option("--k", mp.k, "Number of top layers fused");
  maps_cmd->add_option("--iterations", mp.iterations, "Affinity refinement iterations");
  maps_cmd->add_option("--limit", mp.limit, "Only the first N samples");
  maps_cmd->add_option("--out", mp.out)->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score seed masks against ground truth");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--data", ev.data)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--kind", ev.kind)
      ->check(CLI::IsMember({"attention", "patchcam", "fused", "refined", "all"}));
  eval_cmd->add_option("--tau", ev.tau, "Background threshold");
  eval_cmd->add_option("--k", ev.k, "Number of top layers fused");
  eval_cmd->add_option("--iterations", ev.iterations, "Affinity refinement iterations");
  eval_cmd->add_option("--report", ev.report, "CSV report path");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation study end to end");
  ablate_cmd->add_option("--study", ab.study)
      ->required()
      ->check(CLI::IsMember({"pooling", "cct-depth", "k-sweep", "pipeline"}));
  ablate_cmd->add_option("--out", ab.out, "CSV output path")->required();
  ablate_cmd->add_option("--seed", ab.seed, "Seed for data, init and training");
  ablate_cmd->add_option("--epochs", ab.epochs, "Override the epoch count");
  ablate_cmd->add_option("--config", ab.config)->check(CLI::ExistingFile);
  ablate_cmd->add_option("--data", ab.data, "Training set (default: generated)")
      ->check(CLI::ExistingDirectory);
  ablate_cmd->add_option("--eval-data", ab.eval_data)->check(CLI::ExistingDirectory);
  ablate_cmd->add_option("--checkpoint", ab.checkpoint, "Reuse a model (k-sweep, pipeline)")
      ->check(CLI::ExistingDirectory);
  ablate_cmd->add_option("--tau", ab.tau, "Background threshold");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  gc_cmd->add_option("--config", gc.config)->check(CLI::ExistingFile);
  gc_cmd->add_option("--seed", gc.seed);
  gc_cmd->add_option("--coords", gc.coords, "Coordinates per parameter tensor (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    g_log.open(log_path);
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*maps_cmd) return run_maps(mp);
    if (*eval_cmd) return run_eval(ev);
    if (*ablate_cmd) return run_ablate(ab);
    if (*gc_cmd) return run_gradcheck(gc);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
