#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "loss.hpp"
#include "model.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "target_dist.hpp"

namespace dist2 {

enum class LossVariant { sft, vocab, dist, dist_no_place, dist_no_contrastive, label_smooth };

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::sft: return "sft";
    case LossVariant::vocab: return "vocab";
    case LossVariant::dist: return "dist";
    case LossVariant::dist_no_place: return "dist_no_place";
    case LossVariant::dist_no_contrastive: return "dist_no_contrastive";
    case LossVariant::label_smooth: return "label_smooth";
  }
  return "?";
}

inline LossVariant loss_variant_from_string(std::string_view s) {
  for (auto v : {LossVariant::sft, LossVariant::vocab, LossVariant::dist, LossVariant::dist_no_place,
                 LossVariant::dist_no_contrastive, LossVariant::label_smooth})
    if (s == to_string(v)) return v;
  throw Error(ErrorKind::config, "unknown loss variant '" + std::string(s) + "'");
}

/// Variants that build a target row from the metric.
inline bool uses_distance_target(LossVariant v) {
  return v == LossVariant::dist || v == LossVariant::dist_no_place || v == LossVariant::dist_no_contrastive;
}

/// A multi-digit number inside a training sequence.
struct NumericSpan {
  std::vector<std::size_t> rows;  // prediction rows of the digits, most significant first
  std::int64_t value = 0;         // the digits read as one integer
  DigitSpanFormat format;
  PlaceWeights weights;
};

/// One teacher-forced sequence. Row t of the model output is trained against
/// targets[t]; -1 leaves the row unsupervised.
struct TrainingExample {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  PositionMask metric_mask;  // rows whose target lies in V_d
  std::vector<NumericSpan> spans;

  PositionMask supervised() const {
    PositionMask m;
    for (TokenId t : targets) m.flags.push_back(t >= 0);
    return m;
  }
};

struct ObjectiveConfig {
  LossVariant variant = LossVariant::dist;
  double alpha = 0.1;
  Restriction restriction = Restriction::literal;
  Reduction reduction = Reduction::mean;
  double label_smoothing = 0.1;
  std::int64_t contrastive_radius = 5;
  bool keep_per_position = false;
};

/// Batch objective: CE over supervised rows plus alpha times the variant's
/// auxiliary term over metric rows. Target rows per subset token are cached.
class Objective {
 public:
  Objective(ObjectiveConfig cfg, std::optional<TargetConfig> target)
      : cfg_(cfg), target_(std::move(target)) {
    require(cfg_.alpha >= 0.0, ErrorKind::config, "alpha must be >= 0");
    if (cfg_.variant != LossVariant::sft)
      require(target_.has_value(), ErrorKind::config, "variant " + to_string(cfg_.variant) + " needs a metric");
    if (target_) {
      const auto& sub = target_->metric.subset();
      rows_.resize(sub.size());
      for (std::size_t i = 0; i < sub.size(); ++i) {
        const TokenId tok = sub.token(i);
        rows_[i] = cfg_.variant == LossVariant::label_smooth ? label_smoothing_target(tok, sub, cfg_.label_smoothing)
                                                              : build_target(*target_, tok);
      }
    }
  }

  const ObjectiveConfig& config() const noexcept { return cfg_; }
  const std::optional<TargetConfig>& target() const noexcept { return target_; }

  bool place_weighting() const {
    return cfg_.variant == LossVariant::dist || cfg_.variant == LossVariant::dist_no_contrastive ||
           cfg_.variant == LossVariant::label_smooth;
  }
  bool contrastive() const { return cfg_.variant == LossVariant::dist || cfg_.variant == LossVariant::dist_no_place; }

  const TargetDistribution& target_row(TokenId tok) const { return rows_[target_->metric.subset().index_of(tok)]; }

  /// Fills dlogits (one matrix per example) and returns the report.
  LossReport evaluate(std::span<const Matrix> logits, std::span<const TrainingExample* const> batch, Rng& rng,
                      std::vector<Matrix>& dlogits) const {
    require(logits.size() == batch.size(), ErrorKind::shape, "logits/batch size mismatch");
    LossReport rep;
    rep.alpha = cfg_.alpha;
    dlogits.assign(batch.size(), Matrix());

    std::size_t n_ce = 0, n_aux = 0;
    double w_aux = 0.0;
    for (const auto* ex : batch) {
      for (TokenId t : ex->targets) n_ce += t >= 0 ? 1 : 0;
      n_aux += ex->metric_mask.count();
    }

    // Row weights for the auxiliary term and per-span contrastive plans.
    struct RowAux {
      double weight = 1.0;
      const ContrastivePlan* plan = nullptr;
      std::size_t plan_pos = 0;
    };
    std::vector<std::vector<RowAux>> aux(batch.size());
    std::vector<std::vector<ContrastivePlan>> plans(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& ex = *batch[b];
      aux[b].assign(ex.targets.size(), {});
      if (cfg_.variant != LossVariant::sft && cfg_.variant != LossVariant::vocab) {
        plans[b].reserve(ex.spans.size());
        for (const auto& span : ex.spans) {
          if (contrastive())
            plans[b].push_back(sample_contrastive(*target_, span.value, cfg_.contrastive_radius, rng, span.format));
          for (std::size_t k = 0; k < span.rows.size(); ++k) {
            auto& ra = aux[b][span.rows[k]];
            if (place_weighting()) ra.weight = span.weights.weights[k];
            if (contrastive()) {
              ra.plan = &plans[b].back();
              ra.plan_pos = k;
            }
          }
        }
      }
      for (std::size_t t = 0; t < ex.targets.size(); ++t)
        if (ex.metric_mask[t]) w_aux += aux[b][t].weight;
    }

    const bool mean = cfg_.reduction == Reduction::mean;
    const double ce_scale = n_ce == 0 ? 0.0 : (mean ? 1.0 / static_cast<double>(n_ce) : 1.0);
    const double aux_norm = n_aux == 0 ? 0.0 : (mean ? 1.0 / w_aux : 1.0);
    rep.ce_empty = n_ce == 0;
    rep.dist_empty = cfg_.variant == LossVariant::sft || n_aux == 0;
    double ce_sum = 0.0, aux_sum = 0.0;

    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& ex = *batch[b];
      const Matrix& lg = logits[b];
      require(lg.rows() == ex.targets.size(), ErrorKind::shape, "logit rows != targets");
      Matrix& g = dlogits[b];
      g = Matrix(lg.rows(), lg.cols());
      for (std::size_t t = 0; t < lg.rows(); ++t) {
        const bool sup = ex.targets[t] >= 0;
        const bool metric = ex.metric_mask[t] && cfg_.variant != LossVariant::sft;
        if (!sup && !metric) continue;
        const auto logp = log_softmax(lg.row(t));
        PositionTerms terms{t, 0.0, 0.0};
        auto grow = g.row(t);
        if (sup) {
          auto pl = position_ce(logp, ex.targets[t]);
          check_finite(pl.value, b, t, "cross-entropy");
          terms.ce = pl.value;
          ce_sum += pl.value;
          for (std::size_t k = 0; k < grow.size(); ++k) grow[k] += ce_scale * pl.grad[k];
        }
        if (metric) {
          const TokenId y = ex.targets[t];
          const auto& ra = aux[b][t];
          PositionLoss pl;
          if (cfg_.variant == LossVariant::vocab) {
            pl = position_subset_ce(logp, y, target_->metric.subset());
          } else if (ra.plan != nullptr) {
            pl = position_kl_extended(logp, extend_with_contrastive(target_row(y), *ra.plan, ra.plan_pos, *target_),
                                      target_->metric.subset());
          } else {
            pl = position_kl(logp, target_row(y).probs, target_->metric.subset(), cfg_.restriction);
          }
          check_finite(pl.value, b, t, "auxiliary loss");
          const double w = cfg_.variant == LossVariant::vocab ? 1.0 : ra.weight;
          terms.dist = pl.value;
          aux_sum += w * pl.value;
          if (cfg_.alpha != 0.0) {
            const double s = cfg_.alpha * w * aux_norm;
            for (std::size_t k = 0; k < grow.size(); ++k) grow[k] += s * pl.grad[k];
          }
        }
        if (cfg_.keep_per_position) rep.per_position.push_back(terms);
      }
    }
    rep.ce = ce_sum * ce_scale;
    if (!rep.dist_empty)
      rep.dist = aux_sum * aux_norm;
    rep.combined = combined_loss(rep.ce, rep.dist, cfg_.alpha);
    require(std::isfinite(rep.combined), ErrorKind::numeric, "non-finite combined loss");
    return rep;
  }

 private:
  static void check_finite(double v, std::size_t b, std::size_t t, const char* what) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite " << what << " at batch item " << b << ", position " << t;
      throw Error(ErrorKind::numeric, os.str());
    }
  }

  ObjectiveConfig cfg_;
  std::optional<TargetConfig> target_;
  std::vector<TargetDistribution> rows_;
};

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<double> m, v;
  std::uint64_t step = 0;

  explicit AdamWState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// Decoupled weight decay Adam update at learning rate lr.
inline void adamw_update(ModelParams& P, const ModelGrads& G, AdamWState& S, const AdamWConfig& cfg, double lr) {
  require(G.size() == P.size() && S.m.size() == P.size(), ErrorKind::shape, "optimizer state shape mismatch");
  S.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(S.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(S.step));
  auto& p = P.data();
  const auto& g = G.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * cfg.weight_decay * p[i];
    S.m[i] = cfg.beta1 * S.m[i] + (1.0 - cfg.beta1) * g[i];
    S.v[i] = cfg.beta2 * S.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mh = S.m[i] / bc1;
    const double vh = S.v[i] / bc2;
    p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
  }
}

/// Linear warmup over warmup_frac of the steps, then linear decay to zero.
struct LrSchedule {
  double peak = 3e-4;
  std::uint64_t total_steps = 1;
  double warmup_frac = 0.05;

  std::uint64_t warmup_steps() const {
    return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(warmup_frac * static_cast<double>(total_steps))));
  }

  double at(std::uint64_t step) const {
    const std::uint64_t w = warmup_steps();
    if (step < w) return peak * static_cast<double>(step + 1) / static_cast<double>(w);
    if (total_steps <= w) return peak;
    return peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w);
  }
};

/// Loss and summed parameter gradients of one batch, without updating.
inline LossReport batch_gradients(const ModelParams& P, std::span<const TrainingExample* const> batch,
                                  const Objective& objective, Rng& rng, ModelGrads& grads) {
  require(!batch.empty(), ErrorKind::shape, "empty batch");
  std::vector<ForwardCache> caches(batch.size());
  std::vector<Matrix> logits;
  logits.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) logits.push_back(forward(P, batch[b]->inputs, &caches[b]));
  std::vector<Matrix> dlogits;
  LossReport rep = objective.evaluate(logits, batch, rng, dlogits);
  grads.zero();
  for (std::size_t b = 0; b < batch.size(); ++b) grads.add(backward(P, caches[b], dlogits[b]));
  return rep;
}

/// One optimizer update on the batch with the selected objective.
inline LossReport train_step(ModelParams& P, std::span<const TrainingExample* const> batch, const Objective& objective,
                             AdamWState& state, const AdamWConfig& opt, double lr, Rng& rng) {
  if (state.m.empty()) state = AdamWState(P.size());
  ModelGrads grads(P.config());
  LossReport rep = batch_gradients(P, batch, objective, rng, grads);
  adamw_update(P, grads, state, opt, lr);
  return rep;
}

}  // namespace dist2
