#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlkit/corpus.hpp"
#include "ctrlkit/errors.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/rng.hpp"
#include "ctrlkit/tensor.hpp"

namespace ctrlkit {

struct TrainConfig {
  double peak_lr = 0.05;
  std::uint64_t warmup_steps = 100;
  std::uint64_t total_steps = 1000;
  std::size_t batch_size = 16;
  double clip = 0.25;
  double adagrad_eps = 1e-10;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_interval = 0;  // 0: only at the end
  std::uint64_t eval_interval = 100;
  std::size_t eval_records = 256;         // validation records scored per evaluation

  void validate() const {
    if (!(peak_lr > 0.0)) throw ParameterError("peak learning rate must be positive");
    if (!(clip > 0.0)) throw ParameterError("clip threshold must be positive");
    if (!(adagrad_eps > 0.0)) throw ParameterError("adagrad eps must be positive");
    if (batch_size == 0) throw ParameterError("batch size must be positive");
    if (eval_interval == 0) throw ParameterError("eval interval must be positive");
  }
};

template <typename T = float>
struct OptimizerState {
  std::vector<Tensor<T>> accumulators;  // one per parameter, same shapes
  std::uint64_t step = 0;               // completed updates

  static OptimizerState for_model(const Model<T>& model) {
    OptimizerState s;
    for (const auto& p : model.parameters()) s.accumulators.emplace_back(p.shape());
    return s;
  }
};

/// Linear warmup from 0 to the peak rate over `warmup_steps`, constant after.
inline double lr_schedule(std::uint64_t step, const TrainConfig& cfg) {
  if (step >= cfg.warmup_steps) return cfg.peak_lr;
  return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

/// Scales every gradient by c/g when the global L2 norm g exceeds c.
/// Returns g (before clipping). Missing gradients count as zero.
template <typename T>
double clip_global_norm(std::span<Tensor<T>> params, double c) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > c) {
    const T factor = static_cast<T>(c / norm);
    for (auto& p : params)
      for (T& g : p.grad()) g *= factor;
  }
  return norm;
}

/// acc += g^2; theta -= lr * g / (sqrt(acc) + eps), elementwise.
template <typename T>
void adagrad_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr, double eps) {
  if (state.accumulators.size() != params.size()) throw DimensionError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto acc = state.accumulators[i].data();
    auto theta = p.data();
    auto grad = p.grad();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const T g = grad[j];
      acc[j] += g * g;
      theta[j] -= static_cast<T>(lr * g / (std::sqrt(static_cast<double>(acc[j])) + eps));
    }
  }
  ++state.step;
}

/// Mean next-token NLL over a batch of records. Position p predicts token
/// p+1; the code at position 0 is context only, never a target.
template <typename T>
Tensor<T> loss_batch(const Model<T>& model, Tape<T>& tape, std::span<const SequenceRecord* const> batch,
                     bool training = false, DropoutKey key = {}) {
  if (batch.empty()) throw ParameterError("loss_batch: empty batch");
  const std::size_t len = batch.front()->tokens.size();
  std::vector<TokenId> ids;
  std::vector<std::int64_t> targets;
  ids.reserve(batch.size() * len);
  targets.reserve(batch.size() * len);
  for (const SequenceRecord* r : batch) {
    if (r->tokens.size() != len) throw DimensionError("loss_batch: records of different lengths");
    for (std::size_t p = 0; p < len; ++p) {
      ids.push_back(r->tokens[p]);
      targets.push_back(p + 1 < len ? r->tokens[p + 1] : -1);
    }
  }
  auto scores = model.forward(tape, ids, len, training, key);
  return tape.cross_entropy(scores, targets);
}

template <typename T>
Tensor<T> loss_batch(const Model<T>& model, Tape<T>& tape, std::span<const SequenceRecord> records,
                     bool training = false, DropoutKey key = {}) {
  std::vector<const SequenceRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return loss_batch(model, tape, std::span<const SequenceRecord* const>(ptrs), training, key);
}

/// Eval-mode mean NLL (nats per predicted token) over up to `limit` records.
template <typename T>
double evaluate_nll(const Model<T>& model, std::span<const SequenceRecord> records, std::size_t limit = 0,
                    std::size_t batch_size = 16) {
  const std::size_t n = limit ? std::min(limit, records.size()) : records.size();
  if (n == 0) return std::nan("");
  double total = 0;
  std::size_t weight = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    Tape<T> tape(false);
    auto loss = loss_batch(model, tape, records.subspan(start, count), false);
    const std::size_t predicted = count * (records[start].tokens.size() - 1);
    total += static_cast<double>(loss.item()) * static_cast<double>(predicted);
    weight += predicted;
  }
  return total / static_cast<double>(weight);
}

/// Record indices for training step `step`: uniform with replacement,
/// a pure function of (seed, step).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t batch_size,
                                              std::size_t num_records) {
  CounterRng rng(seed, {0xBA7C4ULL, step});
  std::vector<std::size_t> out(batch_size);
  for (auto& i : out) i = static_cast<std::size_t>(rng.below(num_records));
  return out;
}

struct MetricRow {
  std::uint64_t step = 0;
  std::string split;
  double nll = 0;
};

inline std::string format_metric(const MetricRow& m) {
  std::ostringstream os;
  os.precision(6);
  os << m.step << '\t' << m.split << '\t' << std::fixed << m.nll;
  return os.str();
}

struct TrainHooks {
  std::function<void(const MetricRow&)> on_metric;
  std::function<void(std::uint64_t step)> on_checkpoint;
  std::function<void(std::uint64_t step, double loss, double lr, double grad_norm)> on_step;
};

/// Runs updates state.step+1 .. cfg.total_steps. Every random choice is
/// keyed by (seed, step), so resuming from a checkpoint replays the same
/// trajectory bit for bit.
template <typename T>
void train(Model<T>& model, std::span<const SequenceRecord> train_records,
           std::span<const SequenceRecord> validation_records, const TrainConfig& cfg, OptimizerState<T>& state,
           const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_records.empty()) throw ParameterError("no training records");
  auto params = model.parameters();
  if (state.accumulators.empty()) state = OptimizerState<T>::for_model(model);
  double interval_loss = 0;
  std::size_t interval_steps = 0;

  while (state.step < cfg.total_steps) {
    const std::uint64_t step = state.step + 1;
    const auto idx = batch_indices(cfg.seed, step, cfg.batch_size, train_records.size());
    std::vector<const SequenceRecord*> batch;
    for (std::size_t i : idx) batch.push_back(&train_records[i]);

    auto fail = [&](const std::string& what) {
      std::ostringstream os;
      os << what << " at step " << step << " (batch records";
      for (std::size_t i : idx) os << ' ' << i;
      os << ')';
      throw TrainingError(os.str());
    };

    model.zero_grad();
    Tape<T> tape;
    Tensor<T> loss;
    try {
      loss = loss_batch(model, tape, std::span<const SequenceRecord* const>(batch), true,
                        DropoutKey{cfg.seed, step, 0, 0});
    } catch (const NumericError& e) {
      fail(std::string("non-finite loss (") + e.what() + ")");
    }
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) fail("non-finite loss");
    tape.backward(loss);
    tape.clear();

    const double grad_norm = clip_global_norm(std::span<Tensor<T>>(params), cfg.clip);
    const double lr = lr_schedule(step, cfg);
    adagrad_step(std::span<Tensor<T>>(params), state, lr, cfg.adagrad_eps);
    for (const auto& p : params)
      if (!p.all_finite()) throw TrainingError("non-finite parameter after step " + std::to_string(step));

    if (hooks.on_step) hooks.on_step(step, loss_value, lr, grad_norm);
    interval_loss += loss_value;
    ++interval_steps;

    if (step % cfg.eval_interval == 0 || step == cfg.total_steps) {
      if (hooks.on_metric) {
        hooks.on_metric({step, "train", interval_loss / static_cast<double>(interval_steps)});
        if (!validation_records.empty())
          hooks.on_metric({step, "validation", evaluate_nll(model, validation_records, cfg.eval_records)});
      }
      interval_loss = 0;
      interval_steps = 0;
    }
    if (hooks.on_checkpoint &&
        ((cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0) || step == cfg.total_steps))
      hooks.on_checkpoint(step);
  }
  model.zero_grad();
}

// ---- training checkpoints -------------------------------------------------

inline constexpr const char* kStepEntry = "optim.step";
inline constexpr const char* kAccPrefix = "optim.acc.";

template <typename T>
void save_training_checkpoint(const Model<T>& model, const OptimizerState<T>& state, const std::string& path) {
  std::vector<typename Model<T>::Extra> extras;
  extras.push_back({kStepEntry, {}, {static_cast<double>(state.step)}, true});
  const auto named = model.named_parameters();
  for (std::size_t i = 0; i < state.accumulators.size(); ++i) {
    const auto& acc = state.accumulators[i];
    extras.push_back({kAccPrefix + named[i].first, acc.shape(), {acc.data().begin(), acc.data().end()}, false});
  }
  model.save(path, extras);
}

template <typename T>
struct TrainingCheckpoint {
  Model<T> model;
  OptimizerState<T> state;
  std::uint64_t file_hash = 0;
};

template <typename T = float>
TrainingCheckpoint<T> load_training_checkpoint(const std::string& path) {
  auto loaded = Model<T>::load(path);
  TrainingCheckpoint<T> out{std::move(loaded.model), {}, loaded.file_hash};
  if (const auto* step = loaded.extra(kStepEntry)) out.state.step = static_cast<std::uint64_t>(step->values.at(0));
  const auto named = out.model.named_parameters();
  bool any = false;
  for (const auto& [name, p] : named) {
    Tensor<T> acc(p.shape());
    if (const auto* e = loaded.extra(kAccPrefix + name)) {
      if (e->shape != p.shape()) throw FormatError("checkpoint: accumulator shape mismatch for " + name);
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] = static_cast<T>(e->values[i]);
      any = true;
    }
    out.state.accumulators.push_back(std::move(acc));
  }
  if (!any && out.state.step > 0) throw FormatError("checkpoint: step recorded but optimizer state missing");
  return out;
}

}  // namespace ctrlkit
