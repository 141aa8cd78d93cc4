#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"
#include "loss.hpp"
#include "metric_space.hpp"
#include "model.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "target_dist.hpp"
#include "tasks.hpp"
#include "trainer.hpp"

namespace dist2 {

using nlohmann::json;

enum class TaskKind { regression, codebook };

inline std::string to_string(TaskKind t) { return t == TaskKind::regression ? "regression" : "codebook"; }

/// Either a fixed temperature or "entropy:<nats>" (calibrated per metric).
struct TauSpec {
  std::optional<double> fixed;
  std::optional<double> entropy_nats;

  json to_json() const {
    if (fixed) return *fixed;
    char buf[64];
    std::snprintf(buf, sizeof buf, "entropy:%.17g", *entropy_nats);
    return std::string(buf);
  }

  static TauSpec from_json(const json& j) {
    TauSpec t;
    if (j.is_number()) {
      t.fixed = j.get<double>();
      require(*t.fixed > 0.0, ErrorKind::config, "tau must be positive");
    } else if (j.is_string()) {
      const auto s = j.get<std::string>();
      require(s.rfind("entropy:", 0) == 0, ErrorKind::config, "tau string must look like entropy:<nats>");
      try {
        t.entropy_nats = std::stod(s.substr(8));
      } catch (const std::exception&) {
        throw Error(ErrorKind::config, "bad entropy target in tau '" + s + "'");
      }
      require(*t.entropy_nats > 0.0, ErrorKind::config, "entropy target must be positive");
    } else {
      throw Error(ErrorKind::config, "tau must be a number or entropy:<nats>");
    }
    return t;
  }

  double resolve(const MetricSpec& metric) const {
    return fixed ? *fixed : calibrate_tau_for_entropy(metric, *entropy_nats);
  }
};

struct CodebookSettings {
  std::size_t m = 256;
  std::size_t d = 16;
  std::size_t length = 64;
  double tau_gen = 0.25;
  std::size_t train_sequences = 64;
  std::size_t eval_sequences = 32;

  json to_json() const {
    return {{"m", m}, {"d", d}, {"length", length}, {"tau_gen", tau_gen},
            {"train_sequences", train_sequences}, {"eval_sequences", eval_sequences}};
  }
  static CodebookSettings from_json(const json& j) {
    CodebookSettings c;
    c.m = j.value("m", c.m);
    c.d = j.value("d", c.d);
    c.length = j.value("length", c.length);
    c.tau_gen = j.value("tau_gen", c.tau_gen);
    c.train_sequences = j.value("train_sequences", c.train_sequences);
    c.eval_sequences = j.value("eval_sequences", c.eval_sequences);
    return c;
  }
  friend bool operator==(const CodebookSettings&, const CodebookSettings&) = default;
};

struct RunConfig {
  std::string name;
  TaskKind task = TaskKind::regression;
  LossVariant loss_variant = LossVariant::dist;
  double alpha = 0.1;
  std::optional<TauSpec> tau;
  ModelConfig model;
  std::size_t train_problems = 10;
  std::size_t steps = 400;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  Restriction kl_restriction = Restriction::literal;
  Reduction reduction = Reduction::mean;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  double warmup_frac = 0.05;
  double weight_decay = 0.0;
  std::size_t eval_problems = 200;
  double label_smoothing = 0.1;
  std::int64_t contrastive_radius = 5;
  FractionWeighting fraction_weights = FractionWeighting::significance;
  std::size_t log_every = 0;   // 0: only the final training record
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  CodebookSettings codebook;

  void validate() const {
    require(alpha >= 0.0, ErrorKind::config, "alpha must be >= 0");
    require(steps >= 1, ErrorKind::config, "steps must be >= 1");
    require(!seeds.empty(), ErrorKind::config, "seeds must be nonempty");
    require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
    require(lr >= 0.0, ErrorKind::config, "lr must be >= 0");
    require(warmup_frac >= 0.0 && warmup_frac <= 1.0, ErrorKind::config, "warmup_frac must be in [0, 1]");
    if (loss_variant != LossVariant::sft && loss_variant != LossVariant::vocab &&
        loss_variant != LossVariant::label_smooth)
      require(tau.has_value(), ErrorKind::config, "tau is required for variant " + to_string(loss_variant));
    if (task == TaskKind::regression) {
      require(train_problems >= 1 && train_problems <= 10, ErrorKind::config, "train_problems must be in [1, 10]");
      require(eval_problems >= 1, ErrorKind::config, "eval_problems must be >= 1");
      require(model.vocab_size == static_cast<int>(CharVocab::size()), ErrorKind::config,
              "regression model vocab_size must be " + std::to_string(CharVocab::size()));
      require(static_cast<std::size_t>(model.max_seq_len) >= kRegressionInputs, ErrorKind::config,
              "regression prompts need max_seq_len >= " + std::to_string(kRegressionInputs));
    } else {
      require(model.vocab_size == static_cast<int>(codebook.m + 1), ErrorKind::config,
              "codebook model vocab_size must be m + 1");
      require(static_cast<std::size_t>(model.max_seq_len) >= codebook.length, ErrorKind::config,
              "max_seq_len must cover the codebook sequence length");
      require(codebook.train_sequences >= 1 && codebook.eval_sequences >= 1, ErrorKind::config,
              "codebook sequence counts must be >= 1");
      require(loss_variant == LossVariant::sft || loss_variant == LossVariant::vocab ||
                  loss_variant == LossVariant::dist,
              ErrorKind::config, "codebook task supports sft, vocab and dist");
    }
    model.validate();
  }

  /// Canonical form: every field present, keys sorted.
  json to_json() const {
    json j = {
        {"task", to_string(task)},
        {"loss_variant", to_string(loss_variant)},
        {"alpha", alpha},
        {"model", model.to_json()},
        {"train_problems", train_problems},
        {"steps", steps},
        {"seeds", seeds},
        {"kl_restriction", kl_restriction == Restriction::literal ? "literal" : "renormalized"},
        {"reduction", reduction == Reduction::mean ? "mean" : "sum"},
        {"batch_size", batch_size},
        {"lr", lr},
        {"warmup_frac", warmup_frac},
        {"weight_decay", weight_decay},
        {"eval_problems", eval_problems},
        {"label_smoothing", label_smoothing},
        {"contrastive_radius", contrastive_radius},
        {"fraction_place_weights", fraction_weights == FractionWeighting::significance ? "significance" : "uniform"},
        {"log_every", log_every},
        {"eval_every", eval_every},
        {"codebook", codebook.to_json()},
        {"name", name},
    };
    j["tau"] = tau ? tau->to_json() : json(nullptr);
    return j;
  }

  std::string canonical() const { return to_json().dump(2) + "\n"; }

  static RunConfig from_json(const json& j) {
    require(j.is_object(), ErrorKind::config, "run config must be a JSON object");
    RunConfig c;
    try {
      static const std::vector<std::string> known = {
          "task", "loss_variant", "alpha", "tau", "model", "train_problems", "steps", "seeds", "kl_restriction",
          "reduction", "batch_size", "lr", "warmup_frac", "weight_decay", "eval_problems", "label_smoothing",
          "contrastive_radius", "fraction_place_weights", "log_every", "eval_every", "codebook", "name"};
      for (const auto& [k, v] : j.items())
        require(std::find(known.begin(), known.end(), k) != known.end(), ErrorKind::config, "unknown config key '" + k + "'");
      c.name = j.value("name", std::string());
      const std::string task = j.value("task", std::string("regression"));
      require(task == "regression" || task == "codebook", ErrorKind::config, "task must be regression or codebook");
      c.task = task == "regression" ? TaskKind::regression : TaskKind::codebook;
      c.loss_variant = loss_variant_from_string(j.value("loss_variant", std::string("dist")));
      c.alpha = j.value("alpha", c.alpha);
      if (j.contains("tau") && !j.at("tau").is_null()) c.tau = TauSpec::from_json(j.at("tau"));
      c.codebook = CodebookSettings::from_json(j.value("codebook", json::object()));
      ModelConfig base;
      base.vocab_size = c.task == TaskKind::regression ? static_cast<int>(CharVocab::size())
                                                       : static_cast<int>(c.codebook.m + 1);
      base.max_seq_len = c.task == TaskKind::regression ? 72 : static_cast<int>(c.codebook.length);
      c.model = ModelConfig::from_json(j.value("model", json::object()), base);
      c.train_problems = j.value("train_problems", c.train_problems);
      c.steps = j.value("steps", c.steps);
      if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      const std::string kr = j.value("kl_restriction", std::string("literal"));
      require(kr == "literal" || kr == "renormalized", ErrorKind::config, "kl_restriction must be literal|renormalized");
      c.kl_restriction = kr == "literal" ? Restriction::literal : Restriction::renormalized;
      const std::string rd = j.value("reduction", std::string("mean"));
      require(rd == "mean" || rd == "sum", ErrorKind::config, "reduction must be mean|sum");
      c.reduction = rd == "mean" ? Reduction::mean : Reduction::sum;
      c.batch_size = j.value("batch_size", c.batch_size);
      c.lr = j.value("lr", c.lr);
      c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.eval_problems = j.value("eval_problems", c.eval_problems);
      c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
      c.contrastive_radius = j.value("contrastive_radius", c.contrastive_radius);
      const std::string fw = j.value("fraction_place_weights", std::string("significance"));
      require(fw == "significance" || fw == "uniform", ErrorKind::config,
              "fraction_place_weights must be significance|uniform");
      c.fraction_weights = fw == "significance" ? FractionWeighting::significance : FractionWeighting::uniform;
      c.log_every = j.value("log_every", c.log_every);
      c.eval_every = j.value("eval_every", c.eval_every);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, std::string("bad config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& p) {
    std::ifstream is(p);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open config " + p.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, std::string("config is not JSON: ") + e.what());
    }
    return from_json(j);
  }

  /// Hash of the canonical config with seeds removed; identifies a cell.
  std::string cell_hash() const {
    json j = to_json();
    j.erase("seeds");
    j.erase("name");
    return hex64(fnv1a(j.dump()));
  }
};

// ---------------------------------------------------------------------------
// Metrics.

/// Number formatting used in every emitted artifact.
inline std::string fmt_num(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

struct EvalResult {
  double mae = 0.0, rmse = 0.0;   // regression
  double top1 = 0.0, exp_dist = 0.0, uniform_dist = 0.0;  // codebook
  std::string eval_hash;
};

struct SeedResult {
  std::uint64_t seed = 0;
  EvalResult initial;
  EvalResult final;
  LossReport last_loss;
  std::vector<std::string> lines;  // metrics.jsonl lines
  std::optional<ModelParams> params;  // final model, when RunOptions::keep_params
};

struct CellResult {
  RunConfig config;
  std::vector<SeedResult> seeds;

  std::string key() const {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s|%s|%03zu|%s", to_string(config.task).c_str(),
                  to_string(config.loss_variant).c_str(), config.train_problems, config.cell_hash().c_str());
    return buf;
  }
};

struct RunOptions {
  bool wall_clock = false;
  bool keep_params = false;
  std::size_t workers = 1;
};

inline std::size_t workers_from_env() {
  if (const char* s = std::getenv("DIST2_WORKERS")) {
    const long v = std::strtol(s, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Diagnostic raised when training diverges; carries the offending model.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, ModelParams params, std::uint64_t step, std::uint64_t seed)
      : Error(ErrorKind::numeric, what), params(std::move(params)), step(step), seed(seed) {}
  ModelParams params;
  std::uint64_t step;
  std::uint64_t seed;
};

namespace detail {

inline std::string run_id(const RunConfig& c, std::uint64_t seed) {
  return to_string(c.task) + "-" + to_string(c.loss_variant) + "-p" + std::to_string(c.train_problems) + "-s" +
         std::to_string(seed) + "-" + c.cell_hash().substr(0, 8);
}

/// Everything a seed's run needs, built deterministically from the seed.
struct SeedData {
  std::vector<TrainingExample> train;
  std::vector<RegressionProblem> eval_problems;
  std::optional<CodebookTask> task;
  std::vector<std::vector<TokenId>> eval_sequences;
  std::string eval_hash;
  std::optional<TargetConfig> target;
};

inline SeedData build_seed_data(const RunConfig& c, std::uint64_t seed) {
  SeedData sd;
  if (c.task == TaskKind::regression) {
    auto train = gen_problems(derive_seed(seed, 0x7261), 10);
    train.resize(c.train_problems);
    for (const auto& p : train) sd.train.push_back(regression_example(p, c.fraction_weights));
    sd.eval_problems = gen_problems(derive_seed(seed, 0xe7a1), c.eval_problems);
    sd.eval_hash = hex64(problems_hash(sd.eval_problems));
    const MetricSpec metric(MetricKind::squared_euclidean_scalar, CharVocab::digits());
    if (c.loss_variant != LossVariant::sft)
      sd.target.emplace(c.tau ? c.tau->resolve(metric) : 1.0, metric);
  } else {
    const auto& cb = c.codebook;
    sd.task = gen_codebook_task(derive_seed(seed, 0xcb0), cb.m, cb.d, cb.length, cb.tau_gen);
    for (const auto& s : sample_codebook_sequences(*sd.task, derive_seed(seed, 0x1), cb.train_sequences))
      sd.train.push_back(codebook_example(*sd.task, s));
    sd.eval_sequences = sample_codebook_sequences(*sd.task, derive_seed(seed, 0x2), cb.eval_sequences);
    std::uint64_t h = sd.task->codebook->content_hash();
    for (const auto& s : sd.eval_sequences) h = fnv1a(s.data(), s.size() * sizeof(TokenId), h);
    sd.eval_hash = hex64(h);
    if (c.loss_variant != LossVariant::sft) {
      const MetricSpec metric = sd.task->metric();
      sd.target.emplace(c.tau ? c.tau->resolve(metric) : 1.0, metric);
    }
  }
  return sd;
}

inline EvalResult evaluate(const RunConfig& c, const ModelParams& P, const SeedData& sd) {
  EvalResult r;
  r.eval_hash = sd.eval_hash;
  if (c.task == TaskKind::regression) {
    const auto m = eval_regression(P, sd.eval_problems);
    r.mae = m.mae;
    r.rmse = m.rmse;
  } else {
    const auto m = eval_codebook(P, *sd.task, sd.eval_sequences);
    r.top1 = m.top1;
    r.exp_dist = m.expected_distance;
    r.uniform_dist = uniform_expected_distance(*sd.task, sd.eval_sequences);
  }
  return r;
}

inline void put_eval(json& j, TaskKind task, const EvalResult& e) {
  if (task == TaskKind::regression) {
    j["eval_mae"] = e.mae;
    j["eval_rmse"] = e.rmse;
  } else {
    j["eval_top1"] = e.top1;
    j["eval_expected_distance"] = e.exp_dist;
    j["eval_uniform_distance"] = e.uniform_dist;
  }
  j["eval_hash"] = e.eval_hash;
}

}  // namespace detail

/// Trains one seed of a config and returns its metrics records.
inline SeedResult run_seed(const RunConfig& c, std::uint64_t seed, const RunOptions& opts = {}) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const detail::SeedData sd = detail::build_seed_data(c, seed);
  ModelConfig mc = c.model;
  mc.seed = derive_seed(c.model.seed, seed);
  ModelParams P = ModelParams::initialize(mc);

  ObjectiveConfig oc;
  oc.variant = c.loss_variant;
  oc.alpha = c.alpha;
  oc.restriction = c.kl_restriction;
  oc.reduction = c.reduction;
  oc.label_smoothing = c.label_smoothing;
  oc.contrastive_radius = c.contrastive_radius;
  const Objective objective(oc, sd.target);

  AdamWConfig opt;
  opt.lr = c.lr;
  opt.weight_decay = c.weight_decay;
  const LrSchedule sched{c.lr, c.steps, c.warmup_frac};
  AdamWState state(P.size());
  Rng order_rng(derive_seed(seed, 0x0d));
  Rng aux_rng(derive_seed(seed, 0xa5));

  SeedResult res;
  res.seed = seed;
  const std::string id = detail::run_id(c, seed);
  auto record = [&](const char* kind, std::size_t step) {
    json j = {{"run_id", id},
              {"task", to_string(c.task)},
              {"variant", to_string(c.loss_variant)},
              {"train_problems", c.train_problems},
              {"seed", seed},
              {"step", step},
              {"kind", kind}};
    if (opts.wall_clock)
      j["wall_clock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return j;
  };

  res.initial = detail::evaluate(c, P, sd);
  {
    json j = record("eval", 0);
    detail::put_eval(j, c.task, res.initial);
    res.lines.push_back(j.dump());
  }

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(sd.train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.below(i))]);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<const TrainingExample*> batch(c.batch_size);
  for (std::size_t step = 0; step < c.steps; ++step) {
    for (auto& b : batch) b = &sd.train[next_index()];
    try {
      res.last_loss = train_step(P, batch, objective, state, opt, sched.at(step), aux_rng);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numeric)
        throw DivergenceError(id + " step " + std::to_string(step) + ": " + e.what(), P, step, seed);
      throw;
    }
    const bool last = step + 1 == c.steps;
    if (last || (c.log_every > 0 && (step + 1) % c.log_every == 0)) {
      json j = record("train", step + 1);
      j["ce"] = res.last_loss.ce;
      j["dist"] = res.last_loss.dist;
      j["combined"] = res.last_loss.combined;
      j["alpha"] = c.alpha;
      res.lines.push_back(j.dump());
    }
    if (!last && c.eval_every > 0 && (step + 1) % c.eval_every == 0) {
      json j = record("eval", step + 1);
      detail::put_eval(j, c.task, detail::evaluate(c, P, sd));
      res.lines.push_back(j.dump());
    }
  }
  res.final = detail::evaluate(c, P, sd);
  json j = record("final", c.steps);
  j["ce"] = res.last_loss.ce;
  j["dist"] = res.last_loss.dist;
  j["combined"] = res.last_loss.combined;
  j["alpha"] = c.alpha;
  detail::put_eval(j, c.task, res.final);
  res.lines.push_back(j.dump());
  if (opts.keep_params) res.params = std::move(P);
  return res;
}

/// Caches finished (cell, seed) runs so repeated configurations in a sweep or
/// ablation are trained once. Runs are deterministic, so reuse is exact.
class RunCache {
 public:
  std::optional<SeedResult> get(const RunConfig& c, std::uint64_t seed) const {
    std::lock_guard lk(mu_);
    auto it = map_.find(c.cell_hash() + "#" + std::to_string(seed));
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(const RunConfig& c, const SeedResult& r) {
    std::lock_guard lk(mu_);
    map_[c.cell_hash() + "#" + std::to_string(r.seed)] = r;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, SeedResult> map_;
};

/// Runs every (config, seed) job, with up to opts.workers threads. Results
/// come back in input order regardless of scheduling.
inline std::vector<CellResult> run_cells(const std::vector<RunConfig>& configs, const RunOptions& opts = {},
                                         RunCache* cache = nullptr) {
  struct Job {
    std::size_t cell, slot;
  };
  std::vector<CellResult> cells(configs.size());
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    configs[i].validate();
    cells[i].config = configs[i];
    cells[i].seeds.resize(configs[i].seeds.size());
    for (std::size_t s = 0; s < configs[i].seeds.size(); ++s) jobs.push_back({i, s});
  }
  std::mutex mu;
  std::size_t next = 0;
  std::optional<std::exception_ptr> failure;
  auto worker = [&]() {
    for (;;) {
      Job job;
      {
        std::lock_guard lk(mu);
        if (next >= jobs.size() || failure) return;
        job = jobs[next++];
      }
      const RunConfig& c = configs[job.cell];
      const std::uint64_t seed = c.seeds[job.slot];
      try {
        std::optional<SeedResult> r = cache ? cache->get(c, seed) : std::nullopt;
        if (!r) {
          r = run_seed(c, seed, opts);
          if (cache) cache->put(c, *r);
        }
        cells[job.cell].seeds[job.slot] = std::move(*r);
      } catch (...) {
        std::lock_guard lk(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(opts.workers, jobs.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < n_workers; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(*failure);
  return cells;
}

// ---------------------------------------------------------------------------
// Aggregation and artifacts.

struct CellSummary {
  std::string task, variant;
  std::size_t train_problems = 0;
  std::size_t n = 0;
  MeanStd mae, rmse, top1, exp_dist, uniform_dist;
  std::vector<std::string> eval_hashes;
};

inline CellSummary summarize(const CellResult& cell) {
  CellSummary s;
  s.task = to_string(cell.config.task);
  s.variant = to_string(cell.config.loss_variant);
  s.train_problems = cell.config.train_problems;
  s.n = cell.seeds.size();
  std::vector<double> mae, rmse, top1, ed, ud;
  for (const auto& r : cell.seeds) {
    mae.push_back(r.final.mae);
    rmse.push_back(r.final.rmse);
    top1.push_back(r.final.top1);
    ed.push_back(r.final.exp_dist);
    ud.push_back(r.final.uniform_dist);
    s.eval_hashes.push_back(r.final.eval_hash);
  }
  s.mae = mean_std(mae);
  s.rmse = mean_std(rmse);
  s.top1 = mean_std(top1);
  s.exp_dist = mean_std(ed);
  s.uniform_dist = mean_std(ud);
  return s;
}

inline json summary_json(const std::vector<CellResult>& cells) {
  json arr = json::array();
  for (const auto& cell : cells) {
    const auto s = summarize(cell);
    json runs = json::array();
    for (const auto& r : cell.seeds) {
      json jr = {{"seed", r.seed}};
      detail::put_eval(jr, cell.config.task, r.final);
      runs.push_back(jr);
    }
    json j = {{"task", s.task}, {"variant", s.variant}, {"train_problems", s.train_problems},
              {"config_hash", cell.config.cell_hash()}, {"runs", runs}};
    if (cell.config.task == TaskKind::regression) {
      j["mae"] = {{"mean", s.mae.mean}, {"std", s.mae.std}};
      j["rmse"] = {{"mean", s.rmse.mean}, {"std", s.rmse.std}};
    } else {
      j["top1"] = {{"mean", s.top1.mean}, {"std", s.top1.std}};
      j["expected_distance"] = {{"mean", s.exp_dist.mean}, {"std", s.exp_dist.std}};
      j["uniform_distance"] = {{"mean", s.uniform_dist.mean}, {"std", s.uniform_dist.std}};
    }
    arr.push_back(j);
  }
  return {{"cells", arr}};
}

/// Sort cells by (task, variant, train_problems, config hash).
inline void canonical_order(std::vector<CellResult>& cells) {
  std::stable_sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) { return a.key() < b.key(); });
}

inline std::string table_markdown(const std::vector<CellSummary>& rows) {
  std::ostringstream os;
  const bool regression = rows.empty() || rows.front().task == "regression";
  if (regression) {
    os << "| variant | train_problems | seeds | MAE mean | MAE std | RMSE mean | RMSE std |\n";
    os << "|---|---:|---:|---:|---:|---:|---:|\n";
    for (const auto& r : rows)
      os << "| " << r.variant << " | " << r.train_problems << " | " << r.n << " | " << fmt_num(r.mae.mean, 3) << " | "
         << fmt_num(r.mae.std, 3) << " | " << fmt_num(r.rmse.mean, 3) << " | " << fmt_num(r.rmse.std, 3) << " |\n";
  } else {
    os << "| variant | seeds | top1 mean | top1 std | E[dist] mean | E[dist] std | uniform E[dist] |\n";
    os << "|---|---:|---:|---:|---:|---:|---:|\n";
    for (const auto& r : rows)
      os << "| " << r.variant << " | " << r.n << " | " << fmt_num(r.top1.mean, 4) << " | " << fmt_num(r.top1.std, 4)
         << " | " << fmt_num(r.exp_dist.mean, 4) << " | " << fmt_num(r.exp_dist.std, 4) << " | "
         << fmt_num(r.uniform_dist.mean, 4) << " |\n";
  }
  return os.str();
}

inline std::string table_csv(const std::vector<CellSummary>& rows) {
  std::ostringstream os;
  os << "task,variant,train_problems,seeds,mae_mean,mae_std,rmse_mean,rmse_std,top1_mean,top1_std,exp_dist_mean,"
        "exp_dist_std\n";
  for (const auto& r : rows)
    os << r.task << "," << r.variant << "," << r.train_problems << "," << r.n << "," << fmt_num(r.mae.mean) << ","
       << fmt_num(r.mae.std) << "," << fmt_num(r.rmse.mean) << "," << fmt_num(r.rmse.std) << ","
       << fmt_num(r.top1.mean) << "," << fmt_num(r.top1.std) << "," << fmt_num(r.exp_dist.mean) << ","
       << fmt_num(r.exp_dist.std) << "\n";
  return os.str();
}

/// Line plot of mean MAE against training-problem count, one series per variant.
inline std::string mae_svg(const std::vector<CellSummary>& rows, bool invert_y) {
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : rows) {
    const double x = static_cast<double>(r.train_problems), y = r.mae.mean;
    series[r.variant].push_back({x, y});
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmax == xmin) {
    xmin -= 1;
    xmax += 1;
  }
  if (ymax == ymin) {
    ymin -= 0.01;
    ymax += 0.01;
  }
  const double W = 640, H = 400, L = 70, R = 150, T = 30, B = 50;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) {
    const double f = (y - ymin) / (ymax - ymin);
    return invert_y ? T + f * (H - T - B) : H - B - f * (H - T - B);
  };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << " " << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"13\">"
     << "training problems</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">MAE" << (invert_y ? " (inverted)" : "") << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = ymin + (ymax - ymin) * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << fmt_num(py(y) + 4, 2) << "\" text-anchor=\"end\" font-size=\"11\">"
       << fmt_num(y, 3) << "</text>\n";
  }
  for (const auto& [var, pts0] : series) {
    (void)var;
    for (const auto& [x, y] : pts0) {
      (void)y;
      os << "<text x=\"" << fmt_num(px(x), 2) << "\" y=\"" << H - B + 16
         << "\" text-anchor=\"middle\" font-size=\"11\">" << static_cast<long>(x) << "</text>\n";
    }
    break;
  }
  std::size_t ci = 0;
  for (auto& [var, pts] : series) {
    std::sort(pts.begin(), pts.end());
    const char* col = colors[ci % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      os << (i ? " " : "") << fmt_num(px(pts[i].first), 2) << "," << fmt_num(py(pts[i].second), 2);
    os << "\"/>\n";
    for (const auto& [x, y] : pts)
      os << "<circle cx=\"" << fmt_num(px(x), 2) << "\" cy=\"" << fmt_num(py(y), 2) << "\" r=\"3\" fill=\"" << col
         << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (ci + 1) << "\" font-size=\"12\" fill=\"" << col << "\">"
       << var << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + p.string());
  os << content;
}

inline std::string metrics_text(const std::vector<CellResult>& cells) {
  std::string s;
  for (const auto& c : cells)
    for (const auto& r : c.seeds)
      for (const auto& l : r.lines) s += l + "\n";
  return s;
}

/// Writes metrics.jsonl, summary.json, table.md, table.csv and mae.svg.
inline void write_artifacts(std::vector<CellResult> cells, const std::filesystem::path& out, bool invert_y = true) {
  std::filesystem::create_directories(out);
  canonical_order(cells);
  std::vector<CellSummary> rows;
  for (const auto& c : cells) rows.push_back(summarize(c));
  write_file(out / "metrics.jsonl", metrics_text(cells));
  write_file(out / "summary.json", summary_json(cells).dump(2) + "\n");
  write_file(out / "table.md", table_markdown(rows));
  write_file(out / "table.csv", table_csv(rows));
  write_file(out / "mae.svg", mae_svg(rows, invert_y));
}

inline std::vector<CellResult> run(const RunConfig& c, const RunOptions& opts = {}, RunCache* cache = nullptr) {
  return run_cells({c}, opts, cache);
}

/// All configs must evaluate on the same sets: same task, seeds and
/// evaluation settings.
inline void check_shared_evaluation(const std::vector<RunConfig>& configs) {
  require(!configs.empty(), ErrorKind::config, "sweep needs at least one config");
  const auto& a = configs.front();
  for (const auto& b : configs) {
    require(b.task == a.task && b.seeds == a.seeds, ErrorKind::config,
            "sweep configs disagree on task or seeds, so evaluation sets differ");
    if (a.task == TaskKind::regression)
      require(b.eval_problems == a.eval_problems, ErrorKind::config, "sweep configs disagree on eval_problems");
    else
      require(b.codebook == a.codebook, ErrorKind::config, "sweep configs disagree on codebook settings");
  }
}

inline std::vector<CellResult> sweep(const std::vector<RunConfig>& configs, const RunOptions& opts = {},
                                     RunCache* cache = nullptr) {
  check_shared_evaluation(configs);
  auto cells = run_cells(configs, opts, cache);
  // Per-seed evaluation hashes must agree across cells.
  for (std::size_t s = 0; s < configs.front().seeds.size(); ++s)
    for (const auto& c : cells)
      require(c.seeds[s].final.eval_hash == cells.front().seeds[s].final.eval_hash, ErrorKind::config,
              "evaluation set hash mismatch across sweep cells");
  canonical_order(cells);
  return cells;
}

/// Expands {"base": {...}, "grid": {"loss_variant": [...], "train_problems": [...]}}
/// or a plain array of configs.
inline std::vector<RunConfig> expand_sweep(const json& j) {
  std::vector<RunConfig> out;
  if (j.is_array()) {
    for (const auto& c : j) out.push_back(RunConfig::from_json(c));
    return out;
  }
  require(j.is_object() && j.contains("base"), ErrorKind::config, "sweep file needs a base config or an array");
  std::vector<json> acc = {j.at("base")};
  if (j.contains("grid")) {
    for (const auto& [key, values] : j.at("grid").items()) {
      require(values.is_array() && !values.empty(), ErrorKind::config, "grid entry '" + key + "' must be a nonempty array");
      std::vector<json> next;
      for (const auto& a : acc)
        for (const auto& v : values) {
          json c = a;
          c[key] = v;
          next.push_back(c);
        }
      acc = std::move(next);
    }
  }
  for (const auto& c : acc) out.push_back(RunConfig::from_json(c));
  return out;
}

inline const std::vector<LossVariant>& ablation_variants() {
  static const std::vector<LossVariant> v = {LossVariant::dist, LossVariant::dist_no_place,
                                             LossVariant::dist_no_contrastive, LossVariant::label_smooth,
                                             LossVariant::sft};
  return v;
}

inline std::string ablation_label(LossVariant v) {
  switch (v) {
    case LossVariant::dist: return "dist";
    case LossVariant::dist_no_place: return "- Place value weighting";
    case LossVariant::dist_no_contrastive: return "- Contrastive loss";
    case LossVariant::label_smooth: return "- Distance-aware target";
    case LossVariant::sft: return "sft";
    default: return to_string(v);
  }
}

/// One cell per ablation variant, all on the base config's seeds.
inline std::vector<CellResult> ablate(const RunConfig& base, const RunOptions& opts = {}, RunCache* cache = nullptr) {
  require(base.task == TaskKind::regression, ErrorKind::config, "ablation runs on the regression task");
  std::vector<RunConfig> configs;
  for (auto v : ablation_variants()) {
    RunConfig c = base;
    c.loss_variant = v;
    if (!c.tau && v != LossVariant::sft && v != LossVariant::label_smooth) c.tau = TauSpec{1.0, std::nullopt};
    configs.push_back(c);
  }
  check_shared_evaluation(configs);
  auto cells = run_cells(configs, opts, cache);
  for (const auto& c : cells)
    for (std::size_t s = 0; s < c.seeds.size(); ++s)
      require(c.seeds[s].final.eval_hash == cells.front().seeds[s].final.eval_hash, ErrorKind::config,
              "ablation variants evaluated on different problems");
  return cells;  // kept in ablation row order
}

inline std::string ablation_table(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "| Ablation | MAE mean | MAE std | RMSE mean | RMSE std |\n|---|---:|---:|---:|---:|\n";
  for (const auto& c : cells) {
    const auto s = summarize(c);
    os << "| " << ablation_label(c.config.loss_variant) << " | " << fmt_num(s.mae.mean, 3) << " | "
       << fmt_num(s.mae.std, 3) << " | " << fmt_num(s.rmse.mean, 3) << " | " << fmt_num(s.rmse.std, 3) << " |\n";
  }
  return os.str();
}

inline void write_ablation_artifacts(const std::vector<CellResult>& cells, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  write_file(out / "metrics.jsonl", metrics_text(cells));
  write_file(out / "summary.json", summary_json(cells).dump(2) + "\n");
  write_file(out / "table.md", ablation_table(cells));
}

/// Rebuilds table.md and mae.svg from metrics.jsonl files ("final" records).
inline void report(const std::vector<std::filesystem::path>& files, const std::filesystem::path& out, bool invert_y) {
  require(!files.empty(), ErrorKind::config, "report needs at least one metrics file");
  std::map<std::tuple<std::string, std::string, std::size_t>, std::vector<json>> groups;
  for (const auto& f : files) {
    std::ifstream is(f);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + f.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
        for (const char* k : {"run_id", "seed", "step", "kind", "variant", "task", "train_problems"})
          require(j.contains(k), ErrorKind::io, std::string("missing field ") + k);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::io, f.string() + ":" + std::to_string(lineno) + ": " + e.what());
      } catch (const Error& e) {
        throw Error(ErrorKind::io, f.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (j.at("kind") != "final") continue;
      groups[{j.at("task").get<std::string>(), j.at("variant").get<std::string>(),
              j.at("train_problems").get<std::size_t>()}]
          .push_back(j);
    }
  }
  require(!groups.empty(), ErrorKind::io, "no final records in metrics files");
  std::vector<CellSummary> rows;
  for (const auto& [key, recs] : groups) {
    CellSummary s;
    std::tie(s.task, s.variant, s.train_problems) = key;
    s.n = recs.size();
    std::vector<double> mae, rmse, top1, ed, ud;
    for (const auto& r : recs) {
      mae.push_back(r.value("eval_mae", 0.0));
      rmse.push_back(r.value("eval_rmse", 0.0));
      top1.push_back(r.value("eval_top1", 0.0));
      ed.push_back(r.value("eval_expected_distance", 0.0));
      ud.push_back(r.value("eval_uniform_distance", 0.0));
    }
    s.mae = mean_std(mae);
    s.rmse = mean_std(rmse);
    s.top1 = mean_std(top1);
    s.exp_dist = mean_std(ed);
    s.uniform_dist = mean_std(ud);
    rows.push_back(s);
  }
  std::filesystem::create_directories(out);
  write_file(out / "table.md", table_markdown(rows));
  write_file(out / "mae.svg", mae_svg(rows, invert_y));
}

}  // namespace dist2
