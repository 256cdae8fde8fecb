// Command-line entry point: dataset synthesis, backbone pretraining, the
// two-phase training pipeline with baselines/ablations, scenario evaluation,
// deferral curves, and the analytic self-checks.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "sure/pipeline.hpp"
#include "sure/selfcheck.hpp"

namespace {

namespace fs = std::filesystem;

sure::RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open config file: " + path);
  }
  nlohmann::json j = nlohmann::json::parse(in);
  sure::RunConfig cfg = j.get<sure::RunConfig>();
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> parse_scenario(const std::string& text) {
  if (text == "full") return {};
  const std::string prefix = "missing=";
  if (text.rfind(prefix, 0) != 0) {
    throw std::runtime_error(
        "scenario must be 'full' or 'missing=<comma-separated indices>', "
        "got: " + text);
  }
  std::vector<std::size_t> missing;
  std::stringstream ss(text.substr(prefix.size()));
  std::string token;
  while (std::getline(ss, token, ',')) {
    missing.push_back(std::stoul(token));
  }
  if (missing.empty()) {
    throw std::runtime_error("scenario lists no indices: " + text);
  }
  std::sort(missing.begin(), missing.end());
  missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
  return missing;
}

void write_json_file(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

sure::Backbone load_pretrained_backbone(const sure::RunConfig& cfg,
                                        const fs::path& dir) {
  sure::Rng rng(0);
  sure::ModelBundle bundle = sure::init_bundle(cfg, rng);
  std::ifstream in(dir / "backbone.ckpt.json");
  if (!in) {
    throw std::runtime_error("missing backbone.ckpt.json in " + dir.string());
  }
  nlohmann::json ckpt = nlohmann::json::parse(in);
  std::vector<sure::NamedParam> params;
  bundle.backbone.collect_params(params);
  sure::checkpoint_load(ckpt, params);
  bundle.backbone.freeze();
  return std::move(bundle.backbone);
}

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  sure::RunConfig cfg = load_config(config_path);
  if (seed) cfg.dataset.seed = *seed;
  sure::DatasetSplits splits = sure::generate(cfg.dataset);
  fs::path dir(out);
  sure::write_dataset(dir, cfg.dataset, splits);
  nlohmann::ordered_json manifest;
  nlohmann::ordered_json ds_json;
  to_json(ds_json, cfg.dataset);
  manifest["config"] = ds_json;
  manifest["config_hash"] = sure::fnv1a_hex(ds_json.dump());
  manifest["seed"] = cfg.dataset.seed;
  manifest["tool_version"] = sure::kToolVersion;
  write_json_file(dir / "manifest.json", manifest);
  std::cout << "dataset written to " << dir.string() << '\n';
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  sure::RunConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  sure::DatasetSplits data = sure::generate(cfg.dataset);
  // Mirrors the seed derivation inside run_training, so a shared backbone
  // matches what `train` would have produced on its own.
  sure::Rng master(cfg.seed);
  const std::uint64_t seed_init = master.next_u64();
  const std::uint64_t seed_pretrain = master.next_u64();
  sure::Rng rng_init(seed_init);
  sure::ModelBundle bundle = sure::init_bundle(cfg, rng_init);
  sure::Rng rng_pre(seed_pretrain);
  sure::ClassifierHead throwaway =
      sure::ClassifierHead::init(sure::head_config(cfg), rng_pre);
  sure::PretrainConfig pc;
  pc.epochs = cfg.pretrain_epochs;
  pc.lr = cfg.pretrain_lr;
  pc.batch_size = cfg.batch_size;
  sure::pretrain(bundle.backbone, throwaway, data.pretrain, cfg.dataset.task,
                 pc, rng_pre);

  fs::path dir(out);
  fs::create_directories(dir);
  std::vector<sure::NamedParam> params;
  bundle.backbone.collect_params(params);
  std::ofstream ckpt(dir / "backbone.ckpt.json");
  ckpt << sure::checkpoint_save(params).dump() << '\n';
  sure::write_manifest(dir, cfg);
  std::cout << "pretrained backbone written to " << dir.string() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out,
              std::optional<std::uint64_t> seed,
              const std::vector<std::uint64_t>& seeds,
              const std::string& method, const std::string& backbone_dir,
              bool parallel, bool require_ablation) {
  sure::RunConfig base = load_config(config_path);
  if (!method.empty()) base.method = sure::method_from_string(method);
  if (require_ablation) {
    const std::string tag = method_name(base.method);
    if (tag.rfind("ablation-", 0) != 0) {
      throw std::runtime_error(
          "ablate requires an ablation method tag, got: " + tag);
    }
  }
  if (seed) base.seed = *seed;

  std::optional<sure::Backbone> shared;
  if (!backbone_dir.empty()) {
    shared = load_pretrained_backbone(base, backbone_dir);
  }
  const sure::Backbone* shared_ptr = shared ? &*shared : nullptr;

  std::vector<std::uint64_t> run_seeds =
      seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds;
  struct Job {
    sure::RunConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (std::uint64_t s : run_seeds) {
    Job job;
    job.cfg = base;
    job.cfg.seed = s;
    job.dir = seeds.empty() ? fs::path(out)
                            : fs::path(out) / ("seed-" + std::to_string(s));
    jobs.push_back(std::move(job));
  }

  auto run_one = [&](const Job& job) {
    sure::RunArtifacts art = sure::run_training(job.cfg, job.dir, shared_ptr);
    std::ostringstream line;
    line << method_name(job.cfg.method) << " seed " << job.cfg.seed << " -> "
         << job.dir.string();
    if (art.summary.contains("pooled")) {
      const auto& pooled = art.summary["pooled"];
      if (pooled.contains("mean_accuracy")) {
        line << " mean_accuracy=" << pooled["mean_accuracy"];
      }
      if (pooled.contains("unimodal_output_uncertainty_corr")) {
        line << " unimodal_uncertainty_corr="
             << pooled["unimodal_output_uncertainty_corr"];
      }
    }
    std::cout << line.str() << '\n';
  };

  if (parallel && jobs.size() > 1) {
    std::vector<std::thread> threads;
    threads.reserve(jobs.size());
    for (const Job& job : jobs) {
      threads.emplace_back([&run_one, &job] { run_one(job); });
    }
    for (std::thread& t : threads) t.join();
  } else {
    for (const Job& job : jobs) run_one(job);
  }
  return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& scenario,
             const std::string& out) {
  auto [cfg, bundle] = sure::load_bundle(run_dir);
  const sure::MethodTraits traits = sure::method_traits(cfg);
  sure::DatasetSplits data = sure::generate(cfg.dataset);
  std::vector<std::vector<std::size_t>> missing_sets;
  if (scenario.empty()) {
    missing_sets = sure::default_scenarios(cfg.dataset.modalities);
  } else {
    missing_sets.push_back(parse_scenario(scenario));
  }
  for (const auto& missing : missing_sets) {
    for (std::size_t m : missing) {
      if (m >= cfg.dataset.modalities) {
        throw std::runtime_error("scenario index " + std::to_string(m) +
                                 " out of range for " +
                                 std::to_string(cfg.dataset.modalities) +
                                 " modalities");
      }
    }
  }
  sure::Rng rng(cfg.seed ^ 0x5eed5eedULL);
  std::optional<sure::CalibrationStats> calibration;
  if (traits.emit_uncertainty) {
    sure::ModalBatch masked =
        sure::apply_masks(data.finetune, cfg.mask_fraction, cfg.seed);
    sure::ScenarioRecords train_rec = sure::evaluate_batch(
        cfg, traits, bundle, masked, nullptr, "train", {}, rng);
    sure::CalibrationStats stats = sure::calibration_stats(
        train_rec.errors.values(), train_rec.sigma2_total.values());
    if (stats.sd_sigma > 0.0) calibration = stats;
  }
  std::vector<sure::ScenarioRecords> records;
  for (const auto& missing : missing_sets) {
    records.push_back(sure::evaluate_scenario(cfg, traits, bundle, data.test,
                                              missing, rng));
  }
  nlohmann::ordered_json metrics = sure::build_summary(
      cfg, records, {}, sure::Phase1Result{}, calibration);
  metrics.erase("phase1_pairs_trained");
  metrics.erase("phase2_epochs_logged");
  metrics.erase("convergence_final");
  const fs::path out_path =
      out.empty() ? fs::path(run_dir) / "metrics.json" : fs::path(out);
  write_json_file(out_path, metrics);
  std::cout << "metrics written to " << out_path.string() << '\n';
  return 0;
}

int cmd_defer(const std::string& run_dir, const std::string& scenario,
              const std::string& quantile_list, const std::string& out) {
  auto [cfg, bundle] = sure::load_bundle(run_dir);
  if (cfg.dataset.task != sure::Task::classification) {
    throw std::runtime_error("defer requires a classification run");
  }
  const sure::MethodTraits traits = sure::method_traits(cfg);
  if (!traits.emit_uncertainty) {
    throw std::runtime_error(
        "defer: this run's method emits no uncertainty estimates");
  }
  sure::DatasetSplits data = sure::generate(cfg.dataset);
  sure::Rng rng(cfg.seed ^ 0xdefe4ULL);

  std::vector<double> sigma2;
  std::vector<bool> correct;
  if (!scenario.empty()) {
    sure::ScenarioRecords rec = sure::evaluate_scenario(
        cfg, traits, bundle, data.test, parse_scenario(scenario), rng);
    sigma2 = rec.sigma2_total.values();
    correct = rec.correct;
  } else {
    // Pooled over the single-available scenarios.
    for (const auto& missing :
         sure::default_scenarios(cfg.dataset.modalities)) {
      if (missing.size() + 1 != cfg.dataset.modalities) continue;
      sure::ScenarioRecords rec = sure::evaluate_scenario(
          cfg, traits, bundle, data.test, missing, rng);
      const auto& s = rec.sigma2_total.values();
      sigma2.insert(sigma2.end(), s.begin(), s.end());
      correct.insert(correct.end(), rec.correct.begin(), rec.correct.end());
    }
  }

  std::vector<double> quantiles;
  if (quantile_list.empty()) {
    for (int i = 1; i <= 19; ++i) quantiles.push_back(0.05 * i);
  } else {
    std::stringstream ss(quantile_list);
    std::string token;
    while (std::getline(ss, token, ',')) {
      quantiles.push_back(std::stod(token));
    }
  }
  std::vector<sure::DeferralRow> rows =
      sure::deferral_analysis(sigma2, correct, quantiles);

  const fs::path out_path =
      out.empty() ? fs::path(run_dir) / "deferral.csv" : fs::path(out);
  std::ofstream csv(out_path);
  if (!csv) {
    throw std::runtime_error("cannot write " + out_path.string());
  }
  csv << "quantile,threshold,deferred_frac,retained_acc,tdr_recall,"
         "fdr_recall,tdr_precision,fdr_precision\n";
  auto cell = [](const std::optional<double>& v) {
    return v ? sure::detail::format_double(*v) : std::string();
  };
  for (const sure::DeferralRow& row : rows) {
    csv << sure::detail::format_double(row.quantile) << ','
        << sure::detail::format_double(row.threshold) << ','
        << sure::detail::format_double(row.deferred_fraction) << ','
        << cell(row.retained_accuracy) << ',' << cell(row.tdr_recall) << ','
        << cell(row.fdr_recall) << ',' << cell(row.tdr_precision) << ','
        << cell(row.fdr_precision) << '\n';
  }
  std::cout << "deferral curve written to " << out_path.string() << '\n';
  return 0;
}

int cmd_verify() {
  std::vector<sure::CheckResult> results = sure::run_self_checks();
  bool all_pass = true;
  for (const sure::CheckResult& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": "
              << r.detail << '\n';
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-reconstruction uncertainty lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::string method;
  std::string backbone_dir;
  std::string run_dir;
  std::string scenario;
  std::string quantile_list;
  std::uint64_t seed_value = 0;
  bool seed_set = false;
  std::vector<std::uint64_t> seeds;
  bool parallel = false;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&](const std::uint64_t& v) {
          seed_value = v;
          seed_set = true;
        },
        "seed override");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "write a dataset directory");
  gen->add_option("--config", config_path, "run config json")->required();
  gen->add_option("--out", out, "output directory")->required();
  add_seed(gen);

  CLI::App* pre =
      app.add_subcommand("pretrain", "pretrain and freeze a backbone");
  pre->add_option("--config", config_path, "run config json")->required();
  pre->add_option("--out", out, "output directory")->required();
  add_seed(pre);

  CLI::App* train = app.add_subcommand("train", "run the training pipeline");
  train->add_option("--config", config_path, "run config json")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--method", method, "method tag override");
  train->add_option("--backbone", backbone_dir,
                    "directory with a pretrained backbone checkpoint");
  train
      ->add_option("--seeds", seeds,
                   "fan out one run per seed under <out>/seed-<n>")
      ->delimiter(',');
  train->add_flag("--parallel", parallel, "run seeds concurrently");
  add_seed(train);

  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation variant");
  ablate->add_option("--config", config_path, "run config json")->required();
  ablate->add_option("--out", out, "run directory")->required();
  ablate->add_option("--method", method, "ablation tag")->required();
  ablate->add_option("--seeds", seeds, "fan out per seed")->delimiter(',');
  ablate->add_flag("--parallel", parallel, "run seeds concurrently");
  add_seed(ablate);

  CLI::App* eval =
      app.add_subcommand("eval", "evaluate missing-modality scenarios");
  eval->add_option("--run", run_dir, "run directory")->required();
  eval->add_option("--scenario", scenario,
                   "'full' or 'missing=<indices>' (default: all standard "
                   "scenarios)");
  eval->add_option("--out", out, "metrics output path");

  CLI::App* defer = app.add_subcommand("defer", "write the deferral curve");
  defer->add_option("--run", run_dir, "run directory")->required();
  defer->add_option("--scenario", scenario,
                    "single scenario (default: pooled unimodal)");
  defer->add_option("--quantiles", quantile_list,
                    "comma-separated threshold quantiles");
  defer->add_option("--out", out, "csv output path");

  app.add_subcommand("verify", "run the analytic self-checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::optional<std::uint64_t> seed;
    if (seed_set) seed = seed_value;
    if (gen->parsed()) return cmd_gen_data(config_path, out, seed);
    if (pre->parsed()) return cmd_pretrain(config_path, out, seed);
    if (train->parsed()) {
      return cmd_train(config_path, out, seed, seeds, method, backbone_dir,
                       parallel, false);
    }
    if (ablate->parsed()) {
      return cmd_train(config_path, out, seed, seeds, method, backbone_dir,
                       parallel, true);
    }
    if (eval->parsed()) return cmd_eval(run_dir, scenario, out);
    if (defer->parsed()) {
      return cmd_defer(run_dir, scenario, quantile_list, out);
    }
    return cmd_verify();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
