#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "metric_space.hpp"
#include "numeric.hpp"
#include "rng.hpp"

namespace dist2 {

struct TargetConfig {
  double tau = 1.0;
  MetricSpec metric;

  TargetConfig(double tau_, MetricSpec metric_) : tau(tau_), metric(std::move(metric_)) {
    require(tau > 0.0 && std::isfinite(tau), ErrorKind::config, "tau must be a positive finite real");
  }
};

/// Soft target over the subset tokens, aligned with subset().token_ids().
struct TargetDistribution {
  std::vector<double> probs;
  TokenId target_token = -1;
};

/// exp(-d(v, target)/tau), normalized over the subset.
inline TargetDistribution build_target(const TargetConfig& cfg, TokenId target) {
  const auto row = cfg.metric.distance_row(target);
  return {boltzmann(row, cfg.tau), target};
}

inline std::vector<TargetDistribution> build_target_batch(const TargetConfig& cfg,
                                                          std::span<const TokenId> targets) {
  std::vector<TargetDistribution> out;
  out.reserve(targets.size());
  for (TokenId t : targets) out.push_back(build_target(cfg, t));
  return out;
}

/// Mean target entropy (nats) over the given subset positions at temperature tau.
inline double mean_target_entropy(const MetricSpec& metric, double tau,
                                  std::span<const std::size_t> sample) {
  const TargetConfig cfg(tau, metric);
  double h = 0.0;
  for (std::size_t i : sample) h += entropy(build_target(cfg, metric.subset().token(i)).probs);
  return h / static_cast<double>(sample.size());
}

/// Temperature whose mean target entropy over a calibration sample equals
/// target_nats. Bisection in log(tau); entropy is nondecreasing in tau.
inline double calibrate_tau_for_entropy(const MetricSpec& metric, double target_nats,
                                        std::size_t sample_size = 256, std::uint64_t seed = 0) {
  const std::size_t m = metric.size();
  require(target_nats > 0.0 && target_nats < std::log(static_cast<double>(m)), ErrorKind::config,
          "entropy target must lie in (0, ln M)");
  std::vector<std::size_t> sample(m);
  for (std::size_t i = 0; i < m; ++i) sample[i] = i;
  if (sample_size < m) {
    Rng rng(derive_seed(seed, 0x7a7a));
    for (std::size_t i = 0; i < sample_size; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(m - i));
      std::swap(sample[i], sample[j]);
    }
    sample.resize(sample_size);
  }
  double lo = std::log(1e-8), hi = std::log(1e8);
  require(mean_target_entropy(metric, std::exp(hi), sample) > target_nats, ErrorKind::config,
          "entropy target unreachable for this metric");
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_target_entropy(metric, std::exp(mid), sample) < target_nats)
      lo = mid;
    else
      hi = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

// ---------------------------------------------------------------------------
// Multi-token workarounds: contrastive augmentation and place-value weights.

/// Digit tokens of a fixed-width base-10 span. digit_subset must carry the
/// values 0..base-1.
struct DigitSpanFormat {
  std::size_t width = 1;
  int base = 10;

  std::int64_t max_value() const {
    std::int64_t v = 1;
    for (std::size_t i = 0; i < width; ++i) v *= base;
    return v - 1;
  }

  /// Left-zero-padded digits, most significant first.
  std::vector<int> digits(std::int64_t value) const {
    require(value >= 0 && value <= max_value(), ErrorKind::range,
            "value " + std::to_string(value) + " not representable in " + std::to_string(width) + " digits");
    std::vector<int> out(width);
    for (std::size_t i = width; i-- > 0;) {
      out[i] = static_cast<int>(value % base);
      value /= base;
    }
    return out;
  }
};

struct ContrastivePlan {
  std::int64_t target_value = 0;
  std::int64_t negative_value = 0;
  std::vector<TokenId> target_sequence;
  std::vector<TokenId> negative_sequence;
  std::vector<double> per_position_distance;
};

inline TokenId digit_token(const VocabSubset& digits, int d) {
  const auto& vals = digits.values();
  for (std::size_t i = 0; i < vals.size(); ++i)
    if (vals[i] == static_cast<double>(d)) return digits.token(i);
  throw Error(ErrorKind::domain, "no token carries digit value " + std::to_string(d));
}

/// Position-wise distances of a negative against the target. When the two
/// numbers differ by less than one unit of the base, the whole gap is
/// attributed to the least significant position (so 40 vs 39 gives [0, 1]);
/// otherwise each position gets its plain digit difference.
inline std::vector<double> contrastive_position_distances(std::int64_t target, std::int64_t negative,
                                                          const DigitSpanFormat& fmt) {
  const auto td = fmt.digits(target);
  const auto nd = fmt.digits(negative);
  std::vector<double> dist(fmt.width, 0.0);
  const std::int64_t gap = target > negative ? target - negative : negative - target;
  if (gap < fmt.base) {
    dist.back() = static_cast<double>(gap);
  } else {
    for (std::size_t i = 0; i < fmt.width; ++i) dist[i] = std::abs(td[i] - nd[i]);
  }
  return dist;
}

inline ContrastivePlan make_contrastive_plan(std::int64_t target, std::int64_t negative,
                                             const DigitSpanFormat& fmt, const VocabSubset& digits) {
  ContrastivePlan plan;
  plan.target_value = target;
  plan.negative_value = negative;
  for (int d : fmt.digits(target)) plan.target_sequence.push_back(digit_token(digits, d));
  for (int d : fmt.digits(negative)) plan.negative_sequence.push_back(digit_token(digits, d));
  plan.per_position_distance = contrastive_position_distances(target, negative, fmt);
  return plan;
}

/// Negative drawn uniformly from the representable values within radius of
/// the target, the target itself excluded.
inline ContrastivePlan sample_contrastive(const TargetConfig& cfg, std::int64_t target_value,
                                          std::int64_t radius, Rng& rng, const DigitSpanFormat& fmt) {
  require(radius >= 1, ErrorKind::config, "contrastive radius must be >= 1");
  const std::int64_t hi_bound = fmt.max_value();
  require(hi_bound >= 1, ErrorKind::cannot_sample, "representable range has fewer than 2 values");
  require(target_value >= 0 && target_value <= hi_bound, ErrorKind::range, "target not representable");
  const std::int64_t lo = std::max<std::int64_t>(0, target_value - radius);
  const std::int64_t hi = std::min(hi_bound, target_value + radius);
  // hi - lo >= 1 here because the range holds at least two values.
  std::int64_t pick = rng.between(lo, hi - 1);
  if (pick >= target_value) ++pick;
  return make_contrastive_plan(target_value, pick, fmt, cfg.metric.subset());
}

/// Target over the M subset tokens plus one slot for the negative token.
struct ExtendedTarget {
  std::vector<double> probs;  // size M + 1; last entry is the negative slot
  TokenId negative_token = -1;
};

inline ExtendedTarget extend_with_contrastive(const TargetDistribution& base, const ContrastivePlan& plan,
                                              std::size_t position, const TargetConfig& cfg) {
  require(position < plan.per_position_distance.size(), ErrorKind::range, "contrastive position out of range");
  auto row = cfg.metric.distance_row(base.target_token);
  row.push_back(plan.per_position_distance[position]);
  return {boltzmann(row, cfg.tau), plan.negative_sequence[position]};
}

/// Extended model likelihood: softmax over the subset logits with the
/// negative token's logit appended.
inline std::vector<double> extended_likelihood(std::span<const double> subset_logits, double negative_logit) {
  std::vector<double> z(subset_logits.begin(), subset_logits.end());
  z.push_back(negative_logit);
  auto lp = log_softmax(z);
  for (double& x : lp) x = std::exp(x);
  return lp;
}

struct PlaceWeights {
  std::vector<double> weights;
};

/// Most-significant first: units 1, tens 2, hundreds 3, ..., linear beyond.
inline PlaceWeights place_weights_for(std::size_t span_len) {
  require(span_len >= 1, ErrorKind::domain, "span length must be >= 1");
  PlaceWeights w;
  for (std::size_t i = 0; i < span_len; ++i) w.weights.push_back(static_cast<double>(span_len - i));
  return w;
}

enum class FractionWeighting {
  significance,  // fractional digits continue the linear ranking
  uniform,       // every fractional digit weighs 1
};

/// Weights for the digit positions of a decimal number int_digits.frac_digits.
inline PlaceWeights place_weights_for_decimal(std::size_t int_digits, std::size_t frac_digits,
                                              FractionWeighting mode) {
  require(int_digits >= 1, ErrorKind::domain, "decimal needs an integer part");
  if (mode == FractionWeighting::significance) return place_weights_for(int_digits + frac_digits);
  PlaceWeights w = place_weights_for(int_digits);
  w.weights.insert(w.weights.end(), frac_digits, 1.0);
  return w;
}

}  // namespace dist2
