// dist2: train, sweep, ablate and report over the distance-aware objectives.
//
// Exit codes: 0 ok, 1 internal, 2 config, 3 numeric divergence, 4 io,
// 5 selftest failure. Errors are reported as one JSON object on stderr.

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dist2/harness.hpp"

namespace fs = std::filesystem;
using namespace dist2;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::domain:
    case ErrorKind::range:
    case ErrorKind::degenerate_embedding: return 2;
    case ErrorKind::numeric: return 3;
    case ErrorKind::io: return 4;
    default: return 1;
  }
}

void report_error(const std::string& kind, const std::string& msg) {
  std::cerr << json{{"error", kind}, {"message", msg}}.dump() << "\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      require(pos == item.size(), ErrorKind::config, "bad seed '" + item + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::config, "bad seed '" + item + "'");
    }
  }
  require(!out.empty(), ErrorKind::config, "--seeds needs at least one seed");
  return out;
}

json load_json(const fs::path& p) {
  std::ifstream is(p);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, p.string() + " is not JSON: " + e.what());
  }
}

struct Overrides {
  std::string seeds, variant;
  bool full_eval = false;

  void apply(json& j) const {
    if (!seeds.empty()) j["seeds"] = parse_seeds(seeds);
    if (!variant.empty()) j["loss_variant"] = variant;
    if (full_eval) j["eval_problems"] = 1000;
  }
};

void write_config(const fs::path& out, const std::vector<RunConfig>& cs) {
  fs::create_directories(out);
  json arr = json::array();
  for (const auto& c : cs) arr.push_back(c.to_json());
  write_file(out / "config.json", (cs.size() == 1 ? arr[0] : arr).dump(2) + "\n");
}

// Quick in-process checks of the numerics; a subset of the unit tests that
// needs no test framework.
int selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%s %s\n", ok ? "PASS" : "FAIL", name);
    if (!ok) ++failures;
  };
  const auto digits = CharVocab::digits();
  const MetricSpec sq(MetricKind::squared_euclidean_scalar, digits);
  {
    const auto td = build_target(TargetConfig(1.0, sq), digits.token(3));
    double s = 0.0;
    for (double p : td.probs) s += p;
    check("target_normalized", std::abs(s - 1.0) < 1e-12 && td.probs[3] == *std::max_element(td.probs.begin(), td.probs.end()));
  }
  {
    const auto td = build_target(TargetConfig(1e-6, sq), digits.token(7));
    check("target_small_tau_one_hot", td.probs[7] > 1.0 - 1e-12);
  }
  {
    ModelConfig mc{static_cast<int>(CharVocab::size()), 8, 1, 2, 16, 3};
    ModelParams P = ModelParams::initialize(mc);
    const std::vector<TokenId> in = {1, 4, 2, 7, 3};
    Matrix dl(in.size(), static_cast<std::size_t>(mc.vocab_size));
    Rng r(5);
    for (std::size_t i = 0; i < dl.rows() * dl.cols(); ++i) dl.data()[i] = r.normal();
    auto loss = [&](const ModelParams& Q) {
      const Matrix lg = forward(Q, in);
      double s = 0.0;
      for (std::size_t i = 0; i < lg.rows() * lg.cols(); ++i) s += lg.data()[i] * dl.data()[i];
      return s;
    };
    const ModelGrads G = backward(P, in, dl);
    double worst = 0.0;
    for (std::size_t i = 0; i < P.size(); i += 7) {
      ModelParams a = P, b = P;
      a.data()[i] += 1e-5;
      b.data()[i] -= 1e-5;
      const double fd = (loss(a) - loss(b)) / 2e-5;
      worst = std::max(worst, std::abs(fd - G.data()[i]) / std::max(1e-6, std::abs(fd) + std::abs(G.data()[i])));
    }
    check("model_gradient_fd", worst < 1e-5);
  }
  {
    const auto ps = gen_problems(1, 3);
    const auto tx = prompt_text(ps[0]);
    check("prompt_roundtrip", CharVocab::decode(CharVocab::encode(tx)) == tx);
  }
  return failures == 0 ? 0 : 5;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dist2: distance-aware training toolkit"};
  app.require_subcommand(1);
  std::string config, out;
  Overrides ov;
  bool invert = true;
  bool wall_clock = false;
  std::vector<std::string> files;

  auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", config, "config JSON")->required()->check(CLI::ExistingFile);
    sc->add_option("--out", out, "output directory")->required();
    sc->add_option("--seeds", ov.seeds, "comma-separated seeds, e.g. 1,2,3");
    sc->add_option("--variant", ov.variant, "loss variant override");
    sc->add_flag("--full-eval", ov.full_eval, "evaluate on 1000 problems");
    sc->add_flag("--wall-clock", wall_clock, "record elapsed seconds in metrics");
  };
  auto* run_cmd = app.add_subcommand("run", "train one config over its seeds");
  add_common(run_cmd);
  auto* sweep_cmd = app.add_subcommand("sweep", "run a base config over a grid, or an array of configs");
  add_common(sweep_cmd);
  auto* ablate_cmd = app.add_subcommand("ablate", "ablation table over the loss components");
  add_common(ablate_cmd);
  auto* report_cmd = app.add_subcommand("report", "rebuild table.md and mae.svg from metrics files");
  report_cmd->add_option("metrics", files, "metrics.jsonl files")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", out, "output directory")->required();
  report_cmd->add_option("--invert-y", invert, "draw larger MAE lower (default true)");
  auto* self_cmd = app.add_subcommand("selftest", "run internal numeric checks");

  CLI11_PARSE(app, argc, argv);

  RunOptions opts;
  opts.workers = workers_from_env();
  try {
    if (self_cmd->parsed()) return selftest();
    if (report_cmd->parsed()) {
      std::vector<fs::path> ps(files.begin(), files.end());
      report(ps, out, invert);
      return 0;
    }
    opts.wall_clock = wall_clock;
    json j = load_json(config);
    if (run_cmd->parsed() || ablate_cmd->parsed()) {
      ov.apply(j);
      // Ablation default: ten seeds.
      if (ablate_cmd->parsed() && ov.seeds.empty() && !j.contains("seeds"))
        j["seeds"] = std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
      const RunConfig c = RunConfig::from_json(j);
      write_config(out, {c});
      if (run_cmd->parsed())
        write_artifacts(run(c, opts), out);
      else
        write_ablation_artifacts(ablate(c, opts), out);
      return 0;
    }
    if (j.is_object() && j.contains("base")) ov.apply(j["base"]);
    if (j.is_array())
      for (auto& e : j) ov.apply(e);
    const auto cs = expand_sweep(j);
    write_config(out, cs);
    write_artifacts(sweep(cs, opts), out);
    return 0;
  } catch (const DivergenceError& e) {
    fs::create_directories(out);
    ModelParams(e.params).save_checkpoint(fs::path(out) / "diagnostic.json", e.step, e.seed);
    report_error("numeric", std::string(e.what()) + "; diagnostic checkpoint at " + (fs::path(out) / "diagnostic.json").string());
    return 3;
  } catch (const Error& e) {
    report_error(to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
}
