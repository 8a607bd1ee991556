#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "icm/checkpoint.hpp"
#include "icm/dataset.hpp"
#include "icm/harness.hpp"
#include "icm/remote.hpp"
#include "icm/search.hpp"
#include "icm/synthetic.hpp"

namespace icm::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDatasetError = 3,
  kBackendError = 4,
  kCheckpointError = 5,
};

// Everything needed to rebuild a run: search parameters plus predictor choice.
struct RunSpec {
  SearchConfig search;
  std::string oracle;  // uniform | planted_concept | majority_bias | non_salient | remote
  SyntheticTaskSpec synth;
  BackendConfig backend;
};

inline nlohmann::json to_json(const RunSpec& r) {
  return {{"search", icm::to_json(r.search)},
          {"oracle", r.oracle},
          {"synth",
           {{"size", r.synth.size},
            {"planted_seed", r.synth.planted_seed},
            {"oracle_mode", std::string(to_string(r.synth.oracle_mode))},
            {"smoothing", r.synth.smoothing},
            {"link_fraction", r.synth.link_fraction},
            {"salience", r.synth.salience}}},
          {"backend",
           {{"base_url", r.backend.base_url},
            {"model", r.backend.model_name},
            {"token_env", r.backend.auth_token_env_name},
            {"request_timeout", r.backend.request_timeout},
            {"max_retries", r.backend.max_retries},
            {"retry_base_delay", r.backend.retry_base_delay},
            {"max_in_flight", r.backend.max_in_flight}}}};
}

inline RunSpec run_spec_from_json(const nlohmann::json& j) {
  RunSpec r;
  r.search = search_config_from_json(j.at("search"));
  r.oracle = j.at("oracle").get<std::string>();
  const auto& s = j.at("synth");
  r.synth.size = s.at("size").get<std::size_t>();
  r.synth.planted_seed = s.at("planted_seed").get<std::uint64_t>();
  r.synth.oracle_mode = parse_oracle_mode(s.at("oracle_mode").get<std::string>());
  r.synth.smoothing = s.at("smoothing").get<double>();
  r.synth.link_fraction = s.at("link_fraction").get<double>();
  r.synth.salience = s.at("salience").get<double>();
  const auto& b = j.at("backend");
  r.backend.base_url = b.at("base_url").get<std::string>();
  r.backend.model_name = b.at("model").get<std::string>();
  r.backend.auth_token_env_name = b.at("token_env").get<std::string>();
  r.backend.request_timeout = b.at("request_timeout").get<double>();
  r.backend.max_retries = b.at("max_retries").get<int>();
  r.backend.retry_base_delay = b.at("retry_base_delay").get<double>();
  r.backend.max_in_flight = b.at("max_in_flight").get<std::size_t>();
  return r;
}

// Predictor named by the spec. Concept oracles regenerate their hidden
// labeling from the synthetic parameters and must match the dataset's ids.
inline std::unique_ptr<Predictor> make_predictor(const RunSpec& spec, const Dataset& ds) {
  const std::string& kind = spec.oracle;
  if (kind == "remote") return std::make_unique<RemotePredictor>(ds.label_space(), spec.backend);
  if (kind == "uniform") return std::make_unique<UniformPredictor>(ds.label_space());
  if (kind.empty()) throw ConfigError("no predictor configured: set --oracle or --backend-url");
  SyntheticTaskSpec synth = spec.synth;
  synth.oracle_mode = parse_oracle_mode(kind);
  if (synth.oracle_mode == OracleMode::majority_bias)
    return std::make_unique<MajorityOracle>(ds.label_space(), synth.smoothing);
  synth.size = ds.size();
  synth.validate();
  auto task = generate_synthetic_task(synth);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (task.dataset[i].id != ds[i].id)
      throw ConfigError("oracle '" + kind + "' does not match this dataset (regenerated ids differ)");
  return make_synthetic_oracle(synth, task);
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

struct Paths {
  std::string dataset;
  std::string out;
  std::string checkpoint;
};

inline void append_manifest(const Paths& p, const RunSpec& spec, const std::string& digest,
                            const std::string& backend, const std::string& started, const std::string& outcome) {
  nlohmann::json m = {{"config", to_json(spec)},
                      {"dataset", p.dataset},
                      {"dataset_digest", digest},
                      {"backend", backend},
                      {"started_at", started},
                      {"ended_at", utc_now()},
                      {"outcome", outcome}};
  std::ofstream out(p.out + ".manifest.jsonl", std::ios::app);
  out << m.dump() << '\n';
}

inline nlohmann::json checkpoint_document(const Paths& p, const RunSpec& spec, const std::string& digest,
                                          const IcmRun& run, bool completed) {
  return {{"format", "icm-run/1"},
          {"run", to_json(spec)},
          {"dataset_path", p.dataset},
          {"dataset_digest", digest},
          {"out_path", p.out},
          {"completed", completed},
          {"search", run.checkpoint_json()}};
}

// Shared tail of `label` and `resume`: anneal, complete, emit outputs.
inline int drive(IcmRun& run, const Paths& paths, const RunSpec& spec, const std::string& digest,
                 const Predictor& predictor, std::optional<std::uint64_t> halt_after, std::ostream& out,
                 std::ostream& err) {
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  IcmRun::Hooks hooks;
  hooks.halt_after = halt_after;
  hooks.checkpoint = [&](const IcmRun& r) {
    save_checkpoint(paths.checkpoint, checkpoint_document(paths, spec, digest, r, false));
    err << "icm: step " << r.iteration() << "/" << r.total_iterations() << " U=" << r.state().score.utility
        << " I=" << r.state().index.count() << " labeled=" << r.assignment().labeled_count() << '\n';
  };
  try {
    if (run.run(hooks) == IcmRun::Status::halted) {
      append_manifest(paths, spec, digest, predictor.identity(), started, "aborted-resumable");
      err << "icm: halted at step " << run.iteration() << "; checkpoint " << paths.checkpoint << '\n';
      return kOk;
    }
    run.complete();
  } catch (const BackendError&) {
    append_manifest(paths, spec, digest, predictor.identity(), started, "aborted-resumable");
    throw;
  }

  std::ostringstream labeled;
  write_labeled(labeled, run.dataset(), run.assignment());
  write_atomic(paths.out, labeled.str());

  RunTotals totals{run.state().score, run.forward_passes(),
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
  const Report report = run_report(run.trace(), run.assignment(), run.dataset(), std::nullopt, totals);
  write_atomic(paths.out + ".report.json", to_json(report).dump(2) + "\n");
  save_checkpoint(paths.checkpoint, checkpoint_document(paths, spec, digest, run, true));
  append_manifest(paths, spec, digest, predictor.identity(), started, "completed");
  out << to_flat(report);
  return kOk;
}

struct Options {
  std::string dataset, config, out, checkpoint, labels;
  std::uint64_t seed = 0;
  double alpha = 50.0;
  std::size_t k_init = 8;
  double t0 = 10.0, t_min = 0.01, beta = 0.99;
  std::size_t iterations = 0;
  std::size_t context_budget = kDefaultContextBudget;
  double weight_factor = 100.0;
  std::string oracle;
  std::string backend_url, model;
  std::string token_env = "ICM_BACKEND_TOKEN";
  double request_timeout = 30.0;
  int max_retries = 3;
  double retry_base_delay = 0.5;
  std::size_t max_in_flight = 4;
  std::string scoring_mode = "cached";
  std::size_t fix_iterations = 0;
  std::size_t checkpoint_every = 100;
  std::string init = "random";
  bool no_consistency = false;
  std::size_t size = 8;
  std::uint64_t planted_seed = 0;
  double smoothing = 1.0, link_fraction = 1.0, salience = 0.75;
  std::uint64_t halt_after = 0;

  RunSpec spec() const {
    RunSpec r;
    r.search.k_init = k_init;
    r.search.t0 = t0;
    r.search.t_min = t_min;
    r.search.beta = beta;
    r.search.alpha = alpha;
    r.search.iterations = iterations;
    r.search.weight_factor = weight_factor;
    r.search.seed = seed;
    r.search.fix_iterations = fix_iterations;
    r.search.mode = parse_scoring_mode(scoring_mode);
    r.search.context_budget = context_budget;
    r.search.checkpoint_every = checkpoint_every;
    r.search.init = parse_init_regime(init);
    r.search.use_consistency = !no_consistency;
    r.search.validate();
    r.oracle = oracle.empty() && !backend_url.empty() ? "remote" : oracle;
    r.synth.size = size;
    r.synth.planted_seed = planted_seed;
    r.synth.smoothing = smoothing;
    r.synth.link_fraction = link_fraction;
    r.synth.salience = salience;
    if (!r.oracle.empty() && r.oracle != "remote" && r.oracle != "uniform")
      r.synth.oracle_mode = parse_oracle_mode(r.oracle);
    r.backend.base_url = backend_url;
    r.backend.model_name = model;
    r.backend.auth_token_env_name = token_env;
    r.backend.request_timeout = request_timeout;
    r.backend.max_retries = max_retries;
    r.backend.retry_base_delay = retry_base_delay;
    r.backend.max_in_flight = max_in_flight;
    if (r.oracle == "remote") r.backend.validate();
    return r;
  }
};

inline void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

inline int cmd_label(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.dataset, "--dataset");
  require(o.out, "--out");
  const RunSpec spec = o.spec();
  const Paths paths{o.dataset, o.out, o.checkpoint.empty() ? o.out + ".ckpt" : o.checkpoint};
  const Dataset ds = load_dataset(o.dataset);
  const std::string digest = file_digest(o.dataset);
  auto predictor = make_predictor(spec, ds);
  std::optional<LabelMap> reference;
  if (spec.search.init != InitRegime::random) reference = golden_labels(ds);
  IcmRun run(ds, *predictor, spec.search, std::move(reference));
  return drive(run, paths, spec, digest, *predictor,
               o.halt_after ? std::optional<std::uint64_t>(o.halt_after) : std::nullopt, out, err);
}

inline int cmd_resume(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.checkpoint, "--checkpoint");
  const nlohmann::json doc = load_checkpoint(o.checkpoint);
  RunSpec spec;
  Paths paths;
  std::string digest;
  bool completed = false;
  try {
    if (doc.at("format") != "icm-run/1") throw CheckpointError("not a run checkpoint: " + o.checkpoint);
    spec = run_spec_from_json(doc.at("run"));
    paths = {doc.at("dataset_path").get<std::string>(), doc.at("out_path").get<std::string>(), o.checkpoint};
    digest = doc.at("dataset_digest").get<std::string>();
    completed = doc.at("completed").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (completed) {
    err << "icm: run already complete; nothing to do\n";
    return kOk;
  }
  std::string now;
  try {
    now = file_digest(paths.dataset);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  if (now != digest) throw CheckpointError("dataset " + paths.dataset + " changed since the checkpoint was written");
  const Dataset ds = load_dataset(paths.dataset);
  auto predictor = make_predictor(spec, ds);
  std::optional<LabelMap> reference;
  if (spec.search.init != InitRegime::random) reference = golden_labels(ds);
  IcmRun run(ds, *predictor, spec.search, std::move(reference));
  run.restore(doc.at("search"));
  return drive(run, paths, spec, digest, *predictor,
               o.halt_after ? std::optional<std::uint64_t>(o.halt_after) : std::nullopt, out, err);
}

inline int cmd_synth(const Options& o, std::ostream& out, std::ostream&) {
  require(o.out, "--out");
  SyntheticTaskSpec spec;
  spec.size = o.size;
  spec.planted_seed = o.planted_seed;
  spec.oracle_mode = o.oracle.empty() ? OracleMode::planted_concept : parse_oracle_mode(o.oracle);
  spec.smoothing = o.smoothing;
  spec.link_fraction = o.link_fraction;
  spec.salience = o.salience;
  auto task = generate_synthetic_task(spec);
  write_atomic(o.out, serialize(task.dataset));
  std::ostringstream cfg;
  cfg << "oracle=\"" << to_string(spec.oracle_mode) << "\"\n"
      << "planted-seed=" << spec.planted_seed << "\n"
      << "link-fraction=" << spec.link_fraction << "\n"
      << "smoothing=" << spec.smoothing << "\n"
      << "salience=" << spec.salience << "\n";
  write_atomic(o.out + ".oracle.cfg", cfg.str());
  out << "wrote " << task.dataset.size() << " examples to " << o.out << '\n';
  return kOk;
}

inline int cmd_bruteforce(const Options& o, std::ostream& out, std::ostream&) {
  require(o.dataset, "--dataset");
  const RunSpec spec = o.spec();
  const Dataset ds = load_dataset(o.dataset);
  auto predictor = make_predictor(spec, ds);
  if (!predictor->pure()) throw ConfigError("brute force needs a pure (synthetic) predictor");
  const auto best =
      brute_force_optimum(ds, derive_links(ds), *predictor, spec.search.alpha, spec.search.context_budget, spec.search.seed);
  out << std::setprecision(17) << "U*=" << best.score.utility << "\nP=" << best.score.mutual_predictability
      << "\nI=" << best.score.inconsistency << "\nevaluated=" << best.evaluated << '\n';
  for (std::size_t i : ds.sorted_indices())
    out << ds[i].id << ' ' << ds.label_space().token(*best.assignment.label(i)) << '\n';
  if (!o.out.empty()) {
    std::ostringstream labeled;
    write_labeled(labeled, ds, best.assignment);
    write_atomic(o.out, labeled.str());
  }
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  require(o.dataset, "--dataset");
  require(o.labels, "--labels");
  const Dataset ds = load_dataset(o.dataset);
  std::ifstream in(o.labels);
  if (!in) throw DatasetError("cannot read " + o.labels);
  const Assignment a = read_labels(in, ds);
  const Report report = run_report({}, a, ds);
  out << to_flat(report);
  return kOk;
}

// Parses argv and dispatches. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Label a dataset by internal coherence maximization"};
  app.require_subcommand(1);
  Options o;
  app.set_config("--config", "", "flat key=value file; flags override it");
  app.add_option("--dataset", o.dataset, "input JSONL dataset");
  app.add_option("--out", o.out, "output path");
  app.add_option("--checkpoint", o.checkpoint, "checkpoint path (label: default <out>.ckpt)");
  app.add_option("--labels", o.labels, "labeled JSONL to evaluate");
  app.add_option("--seed", o.seed, "search seed");
  app.add_option("--alpha", o.alpha);
  app.add_option("--k-init", o.k_init, "examples labeled at random before the search");
  app.add_option("--t0", o.t0);
  app.add_option("--t-min", o.t_min);
  app.add_option("--beta", o.beta);
  app.add_option("--iterations", o.iterations, "annealing steps (0: 10 x dataset size)");
  app.add_option("--context-budget", o.context_budget);
  app.add_option("--weight-factor", o.weight_factor);
  app.add_option("--oracle", o.oracle, "uniform | planted_concept | majority_bias | non_salient | remote");
  app.add_option("--backend-url", o.backend_url);
  app.add_option("--model", o.model);
  app.add_option("--token-env", o.token_env, "name of the environment variable holding the backend token");
  app.add_option("--request-timeout", o.request_timeout);
  app.add_option("--max-retries", o.max_retries);
  app.add_option("--retry-base-delay", o.retry_base_delay);
  app.add_option("--max-in-flight", o.max_in_flight);
  app.add_option("--scoring-mode", o.scoring_mode, "cached | exact");
  app.add_option("--fix-iterations", o.fix_iterations, "repair attempts per step (0: 10 per violation, min 8)");
  app.add_option("--checkpoint-every", o.checkpoint_every);
  app.add_option("--init", o.init, "random | golden | worst");
  app.add_flag("--no-consistency", o.no_consistency, "drop the inconsistency term and repair");
  app.add_option("--size", o.size);
  app.add_option("--planted-seed", o.planted_seed);
  app.add_option("--smoothing", o.smoothing);
  app.add_option("--link-fraction", o.link_fraction);
  app.add_option("--salience", o.salience);
  app.add_option("--halt-after", o.halt_after)->group("");

  auto* label = app.add_subcommand("label", "label a dataset")->fallthrough();
  auto* resume = app.add_subcommand("resume", "continue a run from its checkpoint")->fallthrough();
  auto* synth = app.add_subcommand("synth", "write a synthetic planted-concept task")->fallthrough();
  auto* brute = app.add_subcommand("bruteforce", "exhaustive optimum for a small dataset")->fallthrough();
  auto* eval = app.add_subcommand("eval", "score labels against golden labels")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  try {
    if (label->parsed()) return cmd_label(o, out, err);
    if (resume->parsed()) return cmd_resume(o, out, err);
    if (synth->parsed()) return cmd_synth(o, out, err);
    if (brute->parsed()) return cmd_bruteforce(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
  } catch (const ConfigError& e) {
    err << "icm: config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DatasetError& e) {
    err << "icm: dataset error: " << e.what() << '\n';
    return kDatasetError;
  } catch (const EvaluationError& e) {
    err << "icm: dataset error: " << e.what() << '\n';
    return kDatasetError;
  } catch (const BackendError& e) {
    err << "icm: backend error: " << e.what() << '\n';
    return kBackendError;
  } catch (const CheckpointError& e) {
    err << "icm: checkpoint error: " << e.what() << '\n';
    return kCheckpointError;
  } catch (const std::exception& e) {
    err << "icm: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace icm::cli
