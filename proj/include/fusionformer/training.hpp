#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fusionformer/config.hpp"
#include "fusionformer/data.hpp"
#include "fusionformer/errors.hpp"
#include "fusionformer/model.hpp"
#include "fusionformer/tensor.hpp"

namespace fusionformer {

struct LossWeights {
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 1.0;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be nonnegative");
    if (alpha == 0 && beta == 0 && gamma == 0)
      throw ConfigError("at least one loss weight must be positive");
  }
};

struct LossBreakdown {
  Tensor total;  // scalar graph tensor: alpha*CE_p + beta*CE_h + gamma*CE_d
  double persona = 0.0;
  double history = 0.0;
  double pred = 0.0;
};

// Weighted sum of the three masked-mean cross-entropies. A term is only
// evaluated when its weight is nonzero; an active term whose targets are all
// padding raises EmptyLossError.
inline LossBreakdown multi_source_loss(const Tensor& enc_persona_logits,
                                       const Tensor& enc_history_logits,
                                       const Tensor& dec_logits,
                                       const std::vector<int>& persona_targets,
                                       const std::vector<int>& history_targets,
                                       const std::vector<int>& reply_targets,
                                       const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  Tensor total;
  auto accumulate_term = [&total](const Tensor& ce, double weight, double& raw) {
    raw = ce.item();
    Tensor term = scale(ce, weight);
    total = total.defined() ? add(total, term) : term;
  };
  if (w.alpha != 0.0)
    accumulate_term(cross_entropy_rows(enc_persona_logits, persona_targets, Vocab::kPad), w.alpha,
                    out.persona);
  if (w.beta != 0.0)
    accumulate_term(cross_entropy_rows(enc_history_logits, history_targets, Vocab::kPad), w.beta,
                    out.history);
  if (w.gamma != 0.0)
    accumulate_term(cross_entropy_rows(dec_logits, reply_targets, Vocab::kPad), w.gamma, out.pred);
  out.total = total;
  return out;
}

inline LossBreakdown multi_source_loss(const SampleLogits& logits, const BatchItem& item,
                                       const LossWeights& w) {
  return multi_source_loss(logits.persona, logits.history, logits.reply, item.persona.targets,
                           item.history.targets, item.reply.targets, w);
}

// Linear warmup to base_lr, then linear decay to zero at total_steps.
// Fusion-module parameters run at fusion_multiplier times the current rate.
struct LrSchedule {
  double base_lr = 5e-4;
  double warmup_proportion = 0.002;
  long total_steps = 0;
  double fusion_multiplier = 5.0;

  long warmup_steps() const {
    return std::max<long>(1, std::lround(warmup_proportion * static_cast<double>(total_steps)));
  }

  double at(long step, bool is_fusion_param) const {
    if (step < 0) throw ScheduleError("lr_at: negative step");
    if (step > total_steps)
      throw ScheduleError("lr_at: step " + std::to_string(step) + " past total_steps " +
                          std::to_string(total_steps));
    const long warm = warmup_steps();
    double lr;
    if (step <= warm) {
      lr = base_lr * static_cast<double>(step) / static_cast<double>(warm);
    } else {
      lr = base_lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warm);
    }
    return is_fusion_param ? lr * fusion_multiplier : lr;
  }
};

inline double lr_at(long step, const LrSchedule& schedule, bool is_fusion_param) {
  return schedule.at(step, is_fusion_param);
}

inline double global_grad_norm(const std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const NamedParam& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.node()->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

// Scales all gradients so the global norm does not exceed max_norm.
inline void clip_gradients(const std::vector<NamedParam>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (const NamedParam& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double& g : p.tensor.node()->grad) g *= s;
  }
}

// Adam with bias correction; the learning rate comes from the schedule at
// the post-increment step count, so the first update is already nonzero.
class AdamOptimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamOptimizer(std::vector<NamedParam> params, LrSchedule schedule)
      : params_(std::move(params)), schedule_(schedule) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.size(), 0.0);
      v_[i].assign(params_[i].tensor.size(), 0.0);
    }
  }

  long step_count() const { return step_; }
  const LrSchedule& schedule() const { return schedule_; }
  double last_lr(bool fusion) const { return schedule_.at(step_, fusion); }

  void zero_grads() {
    for (NamedParam& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++step_;
    const double lr_regular = schedule_.at(step_, false);
    const double lr_fusion = schedule_.at(step_, true);
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      NamedParam& p = params_[i];
      if (!p.tensor.has_grad()) continue;
      const double lr = p.is_fusion ? lr_fusion : lr_regular;
      auto& value = p.tensor.data();
      const auto& grad = p.tensor.node()->grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t k = 0; k < value.size(); ++k) {
        const double g = grad[k];
        if (!std::isfinite(g))
          throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
        m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g;
        v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g * g;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        value[k] -= lr * mhat / (std::sqrt(vhat) + kEps);
      }
    }
  }

  const std::vector<NamedParam>& params() const { return params_; }

 private:
  std::vector<NamedParam> params_;
  LrSchedule schedule_;
  std::vector<std::vector<double>> m_, v_;
  long step_ = 0;
};

// One Adam update applied to an externally managed optimizer; spec-facing
// convenience over AdamOptimizer::step.
inline void adam_step(AdamOptimizer& opt) { opt.step(); }

struct TrainLogRow {
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_persona = 0.0;
  double loss_history = 0.0;
  double loss_pred = 0.0;
};

inline std::string loss_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "epoch,step,lr,loss_total,loss_persona,loss_history,loss_pred\n";
  for (const TrainLogRow& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt_double(r.lr) + "," +
           fmt_double(r.loss_total) + "," + fmt_double(r.loss_persona) + "," +
           fmt_double(r.loss_history) + "," + fmt_double(r.loss_pred) + "\n";
  }
  return out;
}

struct TrainResult {
  std::vector<TrainLogRow> log;
  long total_steps = 0;
};

// Corpus-level decoder cross-entropy per target token (dropout off).
inline double decoder_per_token_ce(const Model& model, const std::vector<BatchItem>& items) {
  NoGradGuard ng;
  double total = 0.0;
  long count = 0;
  for (const BatchItem& item : items) {
    EncodedState hp = model.encode_source(item.persona, SourceTag::kPersona);
    EncodedState hh = model.encode_source(item.history, SourceTag::kHistory);
    Tensor logits = model.predict_logits(model.decode(item.reply, hp, hh));
    long n_valid = 0;
    for (int t : item.reply.targets)
      if (t != Vocab::kPad) ++n_valid;
    if (n_valid == 0) continue;
    total += cross_entropy_rows(logits, item.reply.targets, Vocab::kPad).item() *
             static_cast<double>(n_valid);
    count += n_valid;
  }
  if (count == 0) throw EmptyLossError("decoder_per_token_ce: no target positions");
  return total / static_cast<double>(count);
}

// Mini-batch training over prepared items. Deterministic given cfg.seed:
// shuffling, dropout and initialization all derive from it. Gradients are
// averaged over the batch, clipped to cfg.grad_clip_norm, then applied with
// the warmup/decay schedule (fusion parameters at the 5x multiplier).
inline TrainResult train_model(Model& model, const std::vector<BatchItem>& items,
                               const RunConfig& cfg) {
  if (items.empty()) throw ConfigError("train: corpus is empty");
  cfg.validate();
  const int n = static_cast<int>(items.size());
  const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule sched{cfg.lr, cfg.warmup_proportion,
                   static_cast<long>(cfg.epochs) * batches_per_epoch, cfg.fusion_lr_multiplier};
  AdamOptimizer opt(model.named_params(), sched);
  LossWeights weights{model.cfg.alpha, model.cfg.beta, model.cfg.gamma};

  Rng rng(cfg.seed);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.total_steps = sched.total_steps;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int begin = b * cfg.batch_size;
      const int end = std::min(n, begin + cfg.batch_size);
      const int count = end - begin;
      opt.zero_grads();
      TrainLogRow row;
      Pass pass = model.train_pass(rng);
      for (int idx = begin; idx < end; ++idx) {
        const BatchItem& item = items[static_cast<size_t>(order[static_cast<size_t>(idx)])];
        SampleLogits logits = model.forward_item(item, pass);
        LossBreakdown loss = multi_source_loss(logits, item, weights);
        backward(scale(loss.total, 1.0 / count));
        row.loss_total += loss.total.item() / count;
        row.loss_persona += loss.persona / count;
        row.loss_history += loss.history / count;
        row.loss_pred += loss.pred / count;
      }
      clip_gradients(opt.params(), cfg.grad_clip_norm);
      opt.step();
      row.epoch = epoch;
      row.step = opt.step_count();
      row.lr = opt.last_lr(false);
      result.log.push_back(row);
    }
  }
  return result;
}

}  // namespace fusionformer
