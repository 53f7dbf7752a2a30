#pragma once

// AdamW training of a scorer on (query, positive, negatives) instances with
// the contrastive softmax loss.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ssmrank/autograd.hpp"
#include "ssmrank/config.hpp"
#include "ssmrank/error.hpp"
#include "ssmrank/model.hpp"
#include "ssmrank/profiler.hpp"
#include "ssmrank/rerank.hpp"

namespace ssmrank {

struct TrainConfig {
  double lr = 1e-3;
  double warmup_fraction = 0.10;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;  // training instances per optimizer step
  std::size_t negatives = 7;   // m, used when sampling the manifest
  std::uint64_t seed = 42;
  std::size_t max_steps = 0;   // 0 = epochs * ceil(instances / batch_size)
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t truncation = 512;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ParameterError("TrainConfig: lr must be finite and >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
      throw ParameterError("TrainConfig: warmup_fraction must be in [0, 1)");
    if (epochs == 0 && max_steps == 0) throw ParameterError("TrainConfig: epochs or max_steps must be positive");
    if (batch_size == 0) throw ParameterError("TrainConfig: batch_size must be positive");
    if (negatives == 0) throw ParameterError("TrainConfig: negatives must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ParameterError("TrainConfig: betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ParameterError("TrainConfig: eps must be positive");
    if (!(weight_decay >= 0.0)) throw ParameterError("TrainConfig: weight_decay must be >= 0");
    TruncationPolicy::custom(truncation);
  }

  static TrainConfig from_kv(KeyValueConfig& kv) { return from_kv(kv, TrainConfig{}); }
  static TrainConfig from_kv(KeyValueConfig& kv, const TrainConfig& base) {
    TrainConfig c = base;
    c.lr = kv.get_double("lr", c.lr);
    c.warmup_fraction = kv.get_double("warmup_fraction", c.warmup_fraction);
    c.epochs = kv.get_uint("epochs", c.epochs);
    c.batch_size = kv.get_uint("batch_size", c.batch_size);
    c.negatives = kv.get_uint("negatives", c.negatives);
    c.seed = kv.get_uint("seed", c.seed);
    c.max_steps = kv.get_uint("max_steps", c.max_steps);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.eps = kv.get_double("eps", c.eps);
    if (kv.has("truncation")) c.truncation = TruncationPolicy::parse(kv.get_string("truncation", "")).limit;
    c.validate();
    return c;
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    auto d = [](double v) {
      std::ostringstream s;
      s.precision(17);
      s << v;
      return s.str();
    };
    auto u = [](std::uint64_t v) { return std::to_string(v); };
    return {{"lr", d(lr)},
            {"warmup_fraction", d(warmup_fraction)},
            {"epochs", u(epochs)},
            {"batch_size", u(batch_size)},
            {"negatives", u(negatives)},
            {"seed", u(seed)},
            {"max_steps", u(max_steps)},
            {"weight_decay", d(weight_decay)},
            {"beta1", d(beta1)},
            {"beta2", d(beta2)},
            {"eps", d(eps)},
            {"truncation", u(truncation)}};
  }

  std::size_t total_steps(std::size_t instances) const {
    if (max_steps > 0) return max_steps;
    return epochs * ((instances + batch_size - 1) / batch_size);
  }
};

/// Learning rate for 1-based step `step` of `total`: linear ramp to `lr` at
/// step floor(warmup * total), then linear decay reaching 0 at `total`.
inline double scheduled_lr(std::size_t step, std::size_t total, double lr, double warmup) {
  if (total == 0) return 0.0;
  const std::size_t w = static_cast<std::size_t>(std::floor(warmup * static_cast<double>(total)));
  if (step <= w) return lr * static_cast<double>(step) / static_cast<double>(w);
  if (step >= total) return 0.0;
  return lr * static_cast<double>(total - step) / static_cast<double>(total - w);
}

/// Decoupled weight decay applies only to parameters flagged `decay`.
class AdamW {
 public:
  AdamW(const ModelParams<double>& params, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.rows(), p.value.cols());
      v_.emplace_back(p.value.rows(), p.value.cols());
    }
  }

  void step(ModelParams<double>& params, double lr) {
    if (params.size() != m_.size()) throw ContractError("AdamW: parameter set changed");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const double wd = p.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
        const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
        p.value[k] -= lr * (update + wd * p.value[k]);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<Matrix<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per step
  std::vector<double> lr_curve;
  std::size_t steps = 0;
  std::size_t tokens = 0;  // tokens processed (forward) over all steps
};

/// Token ids of one instance: positive first, then the negatives.
inline std::vector<std::vector<int>> instance_inputs(const TrainingInstance& inst, const TruncationPolicy& policy) {
  std::vector<std::vector<int>> seqs;
  seqs.push_back(format_input(inst.query, inst.positive, policy));
  for (const auto& n : inst.negatives) seqs.push_back(format_input(inst.query, n, policy));
  return seqs;
}

/// Forward + backward of the mean softmax loss of one batch; gradients are
/// accumulated into params (which are zeroed first). Returns the mean loss.
inline double batch_loss_and_grad(ModelParams<double>& params, const ModelConfig& config,
                                  const std::vector<const std::vector<std::vector<int>>*>& batch,
                                  TimerRegistry* profiler = nullptr) {
  params.zero_grad();
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto* seqs : batch) {
    ag::Tape<double> tape(true, profiler);
    ModelGraph<double> graph(tape, params, config);
    std::vector<ag::Var> scores;
    for (const auto& ids : *seqs) scores.push_back(graph.score(ids));
    ag::Var loss = ag::softmax_ce(tape, scores);
    total += tape.value(loss)(0, 0);
    tape.backward(loss, Matrix<double>(1, 1, inv));
    graph.accumulate_grads(params);
  }
  return total * inv;
}

using StepCallback = std::function<void(std::size_t step, double loss, double lr)>;

inline TrainResult train(const std::vector<TrainingInstance>& data, const TrainConfig& tc, const ModelConfig& mc,
                         ModelParams<double>& params, TimerRegistry* profiler = nullptr,
                         const StepCallback& on_step = {}) {
  if (data.empty()) throw InputError("train: empty dataset");
  tc.validate();
  mc.validate();
  const TruncationPolicy policy = TruncationPolicy::custom(tc.truncation);
  std::vector<std::vector<std::vector<int>>> inputs;
  inputs.reserve(data.size());
  for (const auto& inst : data) inputs.push_back(instance_inputs(inst, policy));

  const std::size_t total = tc.total_steps(data.size());
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  auto reshuffle = [&] {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[detail::bounded_draw(rng, i)]);
    cursor = 0;
  };

  AdamW opt(params, tc);
  TrainResult res;
  for (std::size_t step = 1; step <= total; ++step) {
    std::vector<const std::vector<std::vector<int>>*> batch;
    for (std::size_t b = 0; b < std::min(tc.batch_size, data.size()); ++b) {
      if (cursor == order.size()) reshuffle();
      batch.push_back(&inputs[order[cursor++]]);
      for (const auto& s : *batch.back()) res.tokens += s.size();
    }
    double loss = 0.0;
    try {
      loss = batch_loss_and_grad(params, mc, batch, profiler);
    } catch (const NumericError& e) {
      throw NumericError("train: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericError("train: loss diverged at step " + std::to_string(step));
    for (const auto& p : params)
      if (!all_finite(p.grad))
        throw NumericError("train: non-finite gradient in " + p.name + " at step " + std::to_string(step));
    const double lr = scheduled_lr(step, total, tc.lr, tc.warmup_fraction);
    opt.step(params, lr);
    res.loss_curve.push_back(loss);
    res.lr_curve.push_back(lr);
    res.steps = step;
    if (on_step) on_step(step, loss, lr);
  }
  return res;
}

}  // namespace ssmrank
