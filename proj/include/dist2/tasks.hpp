#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "metric_space.hpp"
#include "model.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "target_dist.hpp"
#include "trainer.hpp"

namespace dist2 {

// ---------------------------------------------------------------------------
// Character vocabulary for the regression prompts.

class CharVocab {
 public:
  // Digits take ids 0..9 so a digit token's id equals its value.
  static constexpr std::string_view kSymbols = "0123456789.xy;=, -+";
  static constexpr TokenId kBos = static_cast<TokenId>(kSymbols.size());
  static constexpr TokenId kEos = kBos + 1;
  static constexpr TokenId kPad = kBos + 2;
  static constexpr std::size_t kSize = kSymbols.size() + 3;

  static std::size_t size() { return kSize; }

  static TokenId id(char c) {
    const auto pos = kSymbols.find(c);
    require(pos != std::string_view::npos, ErrorKind::domain, std::string("character not in vocabulary: ") + c);
    return static_cast<TokenId>(pos);
  }

  static std::string symbol(TokenId t) {
    if (t == kBos) return "<bos>";
    if (t == kEos) return "<eos>";
    if (t == kPad) return "<pad>";
    require(t >= 0 && static_cast<std::size_t>(t) < kSymbols.size(), ErrorKind::domain, "token outside vocabulary");
    return std::string(1, kSymbols[static_cast<std::size_t>(t)]);
  }

  static std::vector<TokenId> encode(std::string_view s) {
    std::vector<TokenId> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(id(c));
    return out;
  }

  static std::string decode(std::span<const TokenId> ts) {
    std::string s;
    for (TokenId t : ts) s += symbol(t);
    return s;
  }

  /// Digit tokens 0..9 with their values.
  static VocabSubset digits() { return VocabSubset::iota(kSize, 10, true); }
};

/// Fixed-width "d.ddd" rendering of reals in [0, 10).
struct NumericTokenization {
  static constexpr int kFracDigits = 3;
  static constexpr std::size_t kWidth = 5;  // d . d d d

  /// Value in thousandths, rounded half away from zero.
  static std::int64_t to_units(double x) {
    require(std::isfinite(x) && x >= 0.0, ErrorKind::range, "value not renderable");
    const std::int64_t u = std::llround(x * 1000.0);
    require(u <= 9999, ErrorKind::range, "value " + std::to_string(x) + " outside [0, 10) at three decimals");
    return u;
  }

  static std::string render_units(std::int64_t u) {
    require(u >= 0 && u <= 9999, ErrorKind::range, "value outside [0, 10)");
    std::string s = "0.000";
    s[0] = static_cast<char>('0' + u / 1000);
    s[2] = static_cast<char>('0' + (u / 100) % 10);
    s[3] = static_cast<char>('0' + (u / 10) % 10);
    s[4] = static_cast<char>('0' + u % 10);
    return s;
  }

  static std::string render(double x) { return render_units(to_units(x)); }

  static bool well_formed(std::string_view s) {
    if (s.size() != kWidth || s[1] != '.') return false;
    for (std::size_t i : {0u, 2u, 3u, 4u})
      if (s[i] < '0' || s[i] > '9') return false;
    return true;
  }

  static std::int64_t parse_units(std::string_view s) {
    require(well_formed(s), ErrorKind::domain, "malformed number '" + std::string(s) + "'");
    return (s[0] - '0') * 1000 + (s[2] - '0') * 100 + (s[3] - '0') * 10 + (s[4] - '0');
  }

  static double parse(std::string_view s) { return static_cast<double>(parse_units(s)) / 1000.0; }
};

// ---------------------------------------------------------------------------
// Meta linear regression.

struct SupportPoint {
  double x = 0.0;
  double y = 0.0;
};

struct RegressionProblem {
  double slope = 0.0;
  double intercept = 0.0;
  std::vector<SupportPoint> support;
  double query_x = 0.5;
  double truth_y = 0.0;

  static RegressionProblem make(double slope, double intercept, std::vector<double> xs, double query_x = 0.5) {
    RegressionProblem p{slope, intercept, {}, query_x, slope * query_x + intercept};
    for (double x : xs) p.support.push_back({x, slope * x + intercept});
    return p;
  }

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& s : support) pts.push_back({s.x, s.y});
    return {{"slope", slope}, {"intercept", intercept}, {"support", pts}, {"query_x", query_x}, {"truth_y", truth_y}};
  }

  static RegressionProblem from_json(const nlohmann::json& j) {
    RegressionProblem p;
    p.slope = j.at("slope").get<double>();
    p.intercept = j.at("intercept").get<double>();
    for (const auto& s : j.at("support")) p.support.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
    p.query_x = j.at("query_x").get<double>();
    p.truth_y = j.at("truth_y").get<double>();
    return p;
  }
};

struct ProblemRanges {
  double slope_lo = 0.1, slope_hi = 1.0;
  double intercept_lo = 0.0, intercept_hi = 0.5;
  double query_x = 0.5;
};

/// Slopes and intercepts uniform over their ranges; three distinct support
/// x values on the 0.001 grid of [0, 1), never equal to the query point.
inline std::vector<RegressionProblem> gen_problems(std::uint64_t seed, std::size_t n, const ProblemRanges& r = {}) {
  require(n >= 1, ErrorKind::config, "need at least one problem");
  Rng rng(derive_seed(seed, 0x5e9));
  const std::int64_t query_units = std::llround(r.query_x * 1000.0);
  std::vector<RegressionProblem> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double slope = rng.uniform(r.slope_lo, r.slope_hi);
    const double intercept = rng.uniform(r.intercept_lo, r.intercept_hi);
    std::vector<std::int64_t> picked;
    while (picked.size() < 3) {
      const std::int64_t u = rng.between(0, 999);
      if (u == query_units || std::find(picked.begin(), picked.end(), u) != picked.end()) continue;
      picked.push_back(u);
    }
    std::vector<double> xs;
    for (auto u : picked) xs.push_back(static_cast<double>(u) / 1000.0);
    out.push_back(RegressionProblem::make(slope, intercept, xs, r.query_x));
  }
  return out;
}

inline std::string problems_json(std::span<const RegressionProblem> ps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : ps) arr.push_back(p.to_json());
  return arr.dump();
}

inline std::uint64_t problems_hash(std::span<const RegressionProblem> ps) { return fnv1a(problems_json(ps)); }

/// Full token sequence <bos> prompt answer <eos>. The prompt grammar is
///   x=0.123 y=0.456 ; x=0.234 y=0.567 ; x=0.789 y=0.912 ; x=0.500 y=
/// and the answer is the rendered truth_y, e.g. 0.500.
struct RenderedPrompt {
  std::vector<TokenId> tokens;
  std::size_t answer_begin = 0;  // index in tokens of the first answer character
  PositionMask answer_mask;      // true on the digit tokens of the answer
  std::int64_t answer_units = 0;

  std::span<const TokenId> prompt() const { return {tokens.data(), answer_begin}; }
};

inline std::string prompt_text(const RegressionProblem& p) {
  std::string s;
  for (const auto& pt : p.support)
    s += "x=" + NumericTokenization::render(pt.x) + " y=" + NumericTokenization::render(pt.y) + " ; ";
  s += "x=" + NumericTokenization::render(p.query_x) + " y=";
  return s;
}

/// Tokens needed by a rendered regression sequence (inputs exclude <eos>).
inline constexpr std::size_t kRegressionInputs = 1 + 4 * 16 + 5;

inline RenderedPrompt render_prompt(const RegressionProblem& p) {
  RenderedPrompt r;
  r.tokens.push_back(CharVocab::kBos);
  for (TokenId t : CharVocab::encode(prompt_text(p))) r.tokens.push_back(t);
  r.answer_begin = r.tokens.size();
  r.answer_units = NumericTokenization::to_units(p.truth_y);
  for (TokenId t : CharVocab::encode(NumericTokenization::render_units(r.answer_units))) r.tokens.push_back(t);
  r.tokens.push_back(CharVocab::kEos);
  r.answer_mask.flags.assign(r.tokens.size(), false);
  for (std::size_t k : {0u, 2u, 3u, 4u}) r.answer_mask.flags[r.answer_begin + k] = true;
  return r;
}

/// Teacher-forced example; the answer and <eos> are supervised and the
/// answer digits form one numeric span.
inline TrainingExample regression_example(const RegressionProblem& p, FractionWeighting weighting) {
  const RenderedPrompt r = render_prompt(p);
  TrainingExample ex;
  const std::size_t n = r.tokens.size() - 1;
  ex.inputs.assign(r.tokens.begin(), r.tokens.end() - 1);
  ex.targets.assign(n, -1);
  ex.metric_mask.flags.assign(n, false);
  NumericSpan span;
  span.value = r.answer_units;
  span.format = DigitSpanFormat{4, 10};
  span.weights = place_weights_for_decimal(1, 3, weighting);
  for (std::size_t t = 0; t < n; ++t) {
    if (t + 1 >= r.answer_begin) ex.targets[t] = r.tokens[t + 1];
    if (r.answer_mask[t + 1]) {
      ex.metric_mask.flags[t] = true;
      span.rows.push_back(t);
    }
  }
  ex.spans.push_back(std::move(span));
  return ex;
}

/// Allowed tokens per generated answer position: digit . digit digit digit.
inline std::vector<std::vector<TokenId>> answer_constraints() {
  const auto digits = CharVocab::digits().token_ids();
  return {digits, {CharVocab::id('.')}, digits, digits, digits};
}

struct RegressionMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<double> predictions;
};

/// MAE and RMSE with errors summed in sorted order, so the result does not
/// depend on problem order.
inline RegressionMetrics regression_errors(std::span<const double> predictions, std::span<const double> truths) {
  require(!predictions.empty() && predictions.size() == truths.size(), ErrorKind::shape,
          "predictions and truths must be nonempty and aligned");
  std::vector<double> abs_err(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) abs_err[i] = std::abs(predictions[i] - truths[i]);
  std::sort(abs_err.begin(), abs_err.end());
  double s1 = 0.0, s2 = 0.0;
  for (double e : abs_err) {
    s1 += e;
    s2 += e * e;
  }
  const double n = static_cast<double>(abs_err.size());
  return {s1 / n, std::sqrt(s2 / n), std::vector<double>(predictions.begin(), predictions.end())};
}

/// decoder(prompt tokens) -> the five answer tokens.
template <class Decoder>
  requires std::invocable<Decoder&, std::span<const TokenId>>
RegressionMetrics eval_regression(Decoder&& decoder, std::span<const RegressionProblem> problems) {
  require(!problems.empty(), ErrorKind::config, "no evaluation problems");
  std::vector<double> preds, truths;
  for (const auto& p : problems) {
    const RenderedPrompt r = render_prompt(p);
    const std::vector<TokenId> answer = decoder(r.prompt());
    preds.push_back(NumericTokenization::parse(CharVocab::decode(answer)));
    truths.push_back(p.truth_y);
  }
  return regression_errors(preds, truths);
}

inline RegressionMetrics eval_regression(const ModelParams& P, std::span<const RegressionProblem> problems) {
  const auto allowed = answer_constraints();
  return eval_regression(
      [&](std::span<const TokenId> prompt) { return greedy_decode(P, prompt, allowed.size(), allowed); }, problems);
}

// ---------------------------------------------------------------------------
// Synthetic codebook sequences.

/// Codebook tokens occupy ids 0..M-1; id M is <bos>.
struct CodebookTask {
  std::uint64_t seed = 0;
  std::size_t m = 0;
  std::size_t d = 0;
  std::size_t length = 0;
  double tau_gen = 0.25;
  std::shared_ptr<const EmbeddingTable> codebook;

  std::size_t vocab_size() const { return m + 1; }
  TokenId bos() const { return static_cast<TokenId>(m); }
  MetricSpec metric() const {
    return MetricSpec(MetricKind::mse_embedding, VocabSubset::iota(vocab_size(), m, false), codebook);
  }

  /// Generator distribution over the next token given the previous one.
  std::vector<double> transition(std::size_t prev) const {
    const MetricSpec ms = metric();
    std::vector<double> row(m);
    for (std::size_t j = 0; j < m; ++j) row[j] = ms.distance_at(prev, j);
    if (tau_gen <= 0.0) {
      std::vector<double> p(m, 0.0);
      p[static_cast<std::size_t>(std::min_element(row.begin(), row.end()) - row.begin())] = 1.0;
      return p;
    }
    return boltzmann(row, tau_gen);
  }
};

inline std::vector<std::vector<TokenId>> sample_codebook_sequences(const CodebookTask& task, std::uint64_t seed,
                                                                   std::size_t count) {
  Rng rng(derive_seed(seed, 0xc0de));
  std::vector<std::vector<TokenId>> out(count);
  for (auto& seq : out) {
    std::size_t cur = static_cast<std::size_t>(rng.below(task.m));
    seq.push_back(static_cast<TokenId>(cur));
    while (seq.size() < task.length) {
      cur = rng.categorical(task.transition(cur));
      seq.push_back(static_cast<TokenId>(cur));
    }
  }
  return out;
}

/// Seeded N(0,1) codebook (rounded through float32, matching its file form).
inline CodebookTask gen_codebook_task(std::uint64_t seed, std::size_t m, std::size_t d, std::size_t length,
                                      double tau_gen = 0.25) {
  require(m >= 2 && m <= 4096, ErrorKind::config, "codebook size must be in [2, 4096]");
  require(d >= 1 && d <= 64, ErrorKind::config, "codebook dimension must be in [1, 64]");
  require(length >= 2, ErrorKind::config, "sequence length must be >= 2");
  Rng rng(derive_seed(seed, 0xcb));
  std::vector<double> data(m * d);
  for (double& x : data) x = rng.normal();
  CodebookTask t{seed, m, d, length, tau_gen, nullptr};
  t.codebook = std::make_shared<const EmbeddingTable>(EmbeddingTable(m, d, std::move(data)).quantized());
  return t;
}

inline TrainingExample codebook_example(const CodebookTask& task, std::span<const TokenId> seq) {
  TrainingExample ex;
  ex.inputs.push_back(task.bos());
  ex.inputs.insert(ex.inputs.end(), seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin(), seq.end());
  ex.metric_mask.flags.assign(seq.size(), true);
  return ex;
}

struct CodebookMetrics {
  double top1 = 0.0;
  double expected_distance = 0.0;
  std::size_t positions = 0;
};

/// predictor(inputs) -> log-probability rows (one per input). Rows predicting
/// the first token (conditioned only on <bos>) are not scored. The model
/// distribution is renormalized over the codebook tokens.
template <class Predictor>
  requires std::invocable<Predictor&, std::span<const TokenId>>
CodebookMetrics eval_codebook(Predictor&& predictor, const CodebookTask& task,
                              std::span<const std::vector<TokenId>> sequences) {
  const MetricSpec ms = task.metric();
  CodebookMetrics r;
  double dist_sum = 0.0;
  std::size_t hits = 0;
  for (const auto& seq : sequences) {
    const TrainingExample ex = codebook_example(task, seq);
    const Matrix logp = predictor(std::span<const TokenId>(ex.inputs));
    for (std::size_t t = 1; t < seq.size(); ++t) {
      auto row = logp.row(t);
      std::vector<double> sub(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(task.m));
      const double lz = logsumexp(sub);
      const auto truth = static_cast<std::size_t>(seq[t]);
      double e = 0.0;
      for (std::size_t v = 0; v < task.m; ++v) e += std::exp(sub[v] - lz) * ms.distance_at(v, truth);
      dist_sum += e;
      if (argmax_token(sub) == seq[t]) ++hits;
      ++r.positions;
    }
  }
  require(r.positions > 0, ErrorKind::config, "no scorable positions");
  r.top1 = static_cast<double>(hits) / static_cast<double>(r.positions);
  r.expected_distance = dist_sum / static_cast<double>(r.positions);
  return r;
}

inline CodebookMetrics eval_codebook(const ModelParams& P, const CodebookTask& task,
                                     std::span<const std::vector<TokenId>> sequences) {
  return eval_codebook([&](std::span<const TokenId> in) { return log_softmax_rows(forward(P, in)); }, task,
                       sequences);
}

/// Expected distance of the uniform model on the same positions.
inline double uniform_expected_distance(const CodebookTask& task, std::span<const std::vector<TokenId>> sequences) {
  const MetricSpec ms = task.metric();
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& seq : sequences)
    for (std::size_t t = 1; t < seq.size(); ++t) {
      double row = 0.0;
      for (std::size_t v = 0; v < task.m; ++v) row += ms.distance_at(v, static_cast<std::size_t>(seq[t]));
      s += row / static_cast<double>(task.m);
      ++n;
    }
  return s / static_cast<double>(n);
}

}  // namespace dist2
