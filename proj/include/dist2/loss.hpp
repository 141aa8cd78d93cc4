#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "metric_space.hpp"
#include "numeric.hpp"
#include "target_dist.hpp"

namespace dist2 {

/// How the model likelihood is restricted to V_d inside the KL term.
enum class Restriction {
  literal,       // full-vocabulary softmax, restricted without renormalizing
  renormalized,  // softmax renormalized over V_d
};

enum class Reduction { mean, sum };

/// Per-position flags over a token sequence.
struct PositionMask {
  std::vector<bool> flags;

  std::size_t size() const noexcept { return flags.size(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (bool f : flags) n += f ? 1 : 0;
    return n;
  }
  bool operator[](std::size_t i) const { return flags[i]; }
};

struct PositionTerms {
  std::size_t position = 0;
  double ce = 0.0;
  double dist = 0.0;
};

struct LossReport {
  double ce = 0.0;
  double dist = 0.0;
  double combined = 0.0;
  double alpha = 0.0;
  bool ce_empty = false;    // no supervised positions; ce reported as 0
  bool dist_empty = false;  // no masked positions; dist reported as 0
  std::vector<PositionTerms> per_position;
};

/// Scalar loss together with its gradient w.r.t. the raw logits.
struct LossValue {
  double value = 0.0;
  Matrix grad;
  bool empty = false;
};

// ---------------------------------------------------------------------------
// Single-position terms. Inputs are full-vocabulary log-probability rows;
// gradients are w.r.t. the logits that produced them.

struct PositionLoss {
  double value = 0.0;
  std::vector<double> grad;
};

inline std::vector<double> probs_from_log(std::span<const double> logp) {
  std::vector<double> p(logp.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp[i]);
  return p;
}

inline void check_log_probs(std::span<const double> logp) {
  require(all_finite(logp), ErrorKind::numeric, "non-finite log-probability");
}

inline PositionLoss position_ce(std::span<const double> logp, TokenId target) {
  check_log_probs(logp);
  require(target >= 0 && static_cast<std::size_t>(target) < logp.size(), ErrorKind::domain,
          "target token outside vocabulary");
  PositionLoss out{-logp[static_cast<std::size_t>(target)], probs_from_log(logp)};
  out.grad[static_cast<std::size_t>(target)] -= 1.0;
  return out;
}

/// Log of the total model mass on V_d.
inline double subset_log_mass(std::span<const double> logp, const VocabSubset& subset) {
  std::vector<double> z;
  z.reserve(subset.size());
  for (TokenId t : subset.token_ids()) z.push_back(logp[static_cast<std::size_t>(t)]);
  return logsumexp(z);
}

/// sum_v p_d(v) [log p_d(v) - log p_theta(v)] over the subset.
inline PositionLoss position_kl(std::span<const double> logp, std::span<const double> target,
                                const VocabSubset& subset, Restriction restriction) {
  check_log_probs(logp);
  require(target.size() == subset.size(), ErrorKind::shape, "target row size != subset size");
  const double log_z = restriction == Restriction::renormalized ? subset_log_mass(logp, subset) : 0.0;
  PositionLoss out{0.0, probs_from_log(logp)};
  if (restriction == Restriction::renormalized) {
    std::fill(out.grad.begin(), out.grad.end(), 0.0);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      const auto t = static_cast<std::size_t>(subset.token(i));
      out.grad[t] = std::exp(logp[t] - log_z);
    }
  }
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const auto t = static_cast<std::size_t>(subset.token(i));
    const double pd = target[i];
    if (pd > 0.0) out.value += pd * (std::log(pd) - (logp[t] - log_z));
    out.grad[t] -= pd;
  }
  return out;
}

/// KL between an extended target (subset + negative slot) and the extended
/// likelihood formed from the subset logits and the negative token's logit.
inline PositionLoss position_kl_extended(std::span<const double> logp, const ExtendedTarget& target,
                                         const VocabSubset& subset) {
  check_log_probs(logp);
  const std::size_t m = subset.size();
  require(target.probs.size() == m + 1, ErrorKind::shape, "extended target must have M+1 entries");
  require(target.negative_token >= 0 && static_cast<std::size_t>(target.negative_token) < logp.size(),
          ErrorKind::domain, "negative token outside vocabulary");
  std::vector<double> z(m + 1);
  for (std::size_t i = 0; i < m; ++i) z[i] = logp[static_cast<std::size_t>(subset.token(i))];
  z[m] = logp[static_cast<std::size_t>(target.negative_token)];
  const double lse = logsumexp(z);
  PositionLoss out{0.0, std::vector<double>(logp.size(), 0.0)};
  for (std::size_t i = 0; i <= m; ++i) {
    const double lq = z[i] - lse;
    const double pe = target.probs[i];
    if (pe > 0.0) out.value += pe * (std::log(pe) - lq);
    const auto tok = static_cast<std::size_t>(i < m ? subset.token(i) : target.negative_token);
    out.grad[tok] += std::exp(lq) - pe;
  }
  return out;
}

/// Cross-entropy of a one-hot target against p_theta renormalized over V_d.
inline PositionLoss position_subset_ce(std::span<const double> logp, TokenId target, const VocabSubset& subset) {
  check_log_probs(logp);
  const double log_z = subset_log_mass(logp, subset);
  PositionLoss out{-(logp[static_cast<std::size_t>(subset.token(subset.index_of(target)))] - log_z),
                   std::vector<double>(logp.size(), 0.0)};
  for (TokenId t : subset.token_ids())
    out.grad[static_cast<std::size_t>(t)] = std::exp(logp[static_cast<std::size_t>(t)] - log_z);
  out.grad[static_cast<std::size_t>(target)] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Sequence-level objectives.

inline double reduction_scale(std::size_t count, Reduction r) {
  return r == Reduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
}

/// Mean of -log p_theta(target_t) over supervised positions.
inline LossValue cross_entropy(const Matrix& log_probs, std::span<const TokenId> targets,
                               const PositionMask& supervised, Reduction reduction = Reduction::mean) {
  require(targets.size() == log_probs.rows() && supervised.size() == log_probs.rows(), ErrorKind::shape,
          "cross_entropy: rows, targets and mask must align");
  LossValue out{0.0, Matrix(log_probs.rows(), log_probs.cols()), false};
  const std::size_t n = supervised.count();
  if (n == 0) {
    out.empty = true;
    return out;
  }
  const double scale = reduction_scale(n, reduction);
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    if (!supervised[t]) continue;
    auto pl = position_ce(log_probs.row(t), targets[t]);
    out.value += pl.value;
    auto g = out.grad.row(t);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = pl.grad[k] * scale;
  }
  out.value *= scale;
  return out;
}

/// Mean over masked positions of KL(p_d || p_theta|V_d). targets holds one
/// distribution per masked position, in position order.
inline LossValue dist_loss(const Matrix& log_probs, std::span<const TargetDistribution> targets,
                           const PositionMask& mask, const VocabSubset& subset,
                           Restriction restriction = Restriction::literal, Reduction reduction = Reduction::mean) {
  require(mask.size() == log_probs.rows(), ErrorKind::shape, "dist_loss: mask length != rows");
  const std::size_t n = mask.count();
  require(targets.size() == n, ErrorKind::shape,
          "dist_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " masked positions");
  LossValue out{0.0, Matrix(log_probs.rows(), log_probs.cols()), false};
  if (n == 0) {
    out.empty = true;
    return out;
  }
  const double scale = reduction_scale(n, reduction);
  std::size_t k = 0;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    if (!mask[t]) continue;
    const auto& td = targets[k++];
    double s = 0.0;
    for (double p : td.probs) {
      require(p >= 0.0, ErrorKind::contract, "negative target probability");
      s += p;
    }
    require(std::abs(s - 1.0) <= 1e-9, ErrorKind::contract, "target distribution not normalized");
    auto pl = position_kl(log_probs.row(t), td.probs, subset, restriction);
    out.value += pl.value;
    auto g = out.grad.row(t);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = pl.grad[c] * scale;
  }
  out.value *= scale;
  return out;
}

inline double combined_loss(double ce, double dist, double alpha) {
  require(alpha >= 0.0, ErrorKind::config, "alpha must be >= 0");
  return ce + alpha * dist;
}

/// L_CE(V) + alpha * L_CE(V_d), the second term averaged over masked positions.
inline LossValue vocab_loss(const Matrix& log_probs, std::span<const TokenId> targets,
                            const PositionMask& supervised, const PositionMask& mask, const VocabSubset& subset,
                            double alpha, Reduction reduction = Reduction::mean) {
  require(alpha >= 0.0, ErrorKind::config, "alpha must be >= 0");
  LossValue out = cross_entropy(log_probs, targets, supervised, reduction);
  if (alpha == 0.0) return out;
  require(mask.size() == log_probs.rows(), ErrorKind::shape, "vocab_loss: mask length != rows");
  const std::size_t n = mask.count();
  if (n == 0) return out;
  const double scale = alpha * reduction_scale(n, reduction);
  double sub = 0.0;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    if (!mask[t]) continue;
    require(subset.contains(targets[t]), ErrorKind::domain, "masked target outside V_d");
    auto pl = position_subset_ce(log_probs.row(t), targets[t], subset);
    sub += pl.value;
    auto g = out.grad.row(t);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] += pl.grad[c] * scale;
  }
  out.value += sub * scale;
  out.empty = false;
  return out;
}

/// sum_i w_i dist_i / sum_i w_i.
inline double place_weighted_dist_loss(std::span<const double> per_position, const PlaceWeights& weights) {
  require(per_position.size() == weights.weights.size(), ErrorKind::shape,
          "place weights length != number of positions");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < per_position.size(); ++i) {
    num += weights.weights[i] * per_position[i];
    den += weights.weights[i];
  }
  return num / den;
}

/// (1-eps) on the target, eps/(M-1) on every other subset token.
inline TargetDistribution label_smoothing_target(TokenId target, const VocabSubset& subset, double epsilon) {
  require(epsilon >= 0.0 && epsilon < 1.0, ErrorKind::config, "label smoothing epsilon must be in [0, 1)");
  const std::size_t m = subset.size();
  TargetDistribution td{std::vector<double>(m, epsilon / static_cast<double>(m - 1)), target};
  td.probs[subset.index_of(target)] = 1.0 - epsilon;
  return td;
}

}  // namespace dist2
