#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ctrlkit/errors.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/rng.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

enum class PenaltyMode {
  literal,     // x_i / (T * theta) for penalized i, whatever the sign of x_i
  sign_aware,  // positive scores divided by theta, negative multiplied
};

enum class PenaltyScope {
  prompt_and_generated,  // every non-code token in the current window
  generated,             // only tokens produced by this generation
};

inline const char* to_string(PenaltyMode m) { return m == PenaltyMode::literal ? "literal" : "sign_aware"; }
inline const char* to_string(PenaltyScope s) {
  return s == PenaltyScope::prompt_and_generated ? "prompt_and_generated" : "generated";
}

struct SamplerConfig {
  double temperature = 1.0;
  bool greedy = true;
  std::size_t top_k = 0;    // 0 disables
  double nucleus_p = 1.0;   // 1 disables
  double theta = 1.2;
  PenaltyMode penalty_mode = PenaltyMode::literal;
  PenaltyScope penalty_scope = PenaltyScope::prompt_and_generated;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ParameterError("temperature must be > 0");
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) throw ParameterError("nucleus_p must be in (0, 1]");
    if (!(theta >= 1.0) || !std::isfinite(theta)) throw ParameterError("theta must be >= 1");
    if (top_k > 0 && nucleus_p < 1.0) throw ParameterError("top_k and nucleus_p cannot both be active");
  }
};

namespace detail {

// Stable softmax of z.
inline std::vector<double> softmax(std::vector<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite scores");
  double sum = 0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

// Token ids ordered by descending probability, lower id first on ties.
inline std::vector<std::size_t> rank_desc(std::span<const double> probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

inline std::vector<bool> membership(std::span<const TokenId> ids, std::size_t vocab) {
  std::vector<bool> in(vocab, false);
  for (TokenId id : ids)
    if (id >= 0 && static_cast<std::size_t>(id) < vocab) in[static_cast<std::size_t>(id)] = true;
  return in;
}

// Penalized, temperature-scaled scores. With theta == 1 this is exactly x/T.
inline std::vector<double> penalized_logits(std::span<const double> scores, double temperature, double theta,
                                            const std::vector<bool>& penalized, PenaltyMode mode) {
  std::vector<double> z(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double x = scores[i];
    if (!penalized[i]) {
      z[i] = x / (temperature * 1.0);
    } else if (mode == PenaltyMode::literal) {
      z[i] = x / (temperature * theta);
    } else {
      z[i] = (x > 0 ? x / theta : x * theta) / temperature;
    }
  }
  return z;
}

}  // namespace detail

/// p_i = exp(x_i/T) / sum_j exp(x_j/T).
inline std::vector<double> temperature_probs(std::span<const double> scores, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0 (use greedy mode instead)");
  if (scores.empty()) throw DimensionError("temperature_probs: empty score vector");
  std::vector<double> z(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) z[i] = scores[i] / (temperature * 1.0);
  return detail::softmax(std::move(z));
}

/// Scores of tokens in `penalized` are discounted by theta before the
/// temperature softmax.
inline std::vector<double> penalized_probs(std::span<const double> scores, double temperature, double theta,
                                           std::span<const TokenId> penalized, PenaltyMode mode = PenaltyMode::literal) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
  if (!(theta >= 1.0)) throw ParameterError("theta must be >= 1");
  if (scores.empty()) throw DimensionError("penalized_probs: empty score vector");
  auto z = detail::penalized_logits(scores, temperature, theta, detail::membership(penalized, scores.size()), mode);
  return detail::softmax(std::move(z));
}

/// Keeps the k most probable tokens (lower id wins ties) and renormalizes.
/// k == 0 or k >= V returns the input unchanged.
inline std::vector<double> top_k_filter(std::span<const double> probs, std::size_t k) {
  std::vector<double> out(probs.begin(), probs.end());
  if (k == 0 || k >= probs.size()) return out;
  const auto order = detail::rank_desc(probs);
  double kept = 0;
  for (std::size_t r = 0; r < k; ++r) kept += probs[order[r]];
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] = probs[order[r]] / kept;
  return out;
}

/// Smallest k whose top-k cumulative probability strictly exceeds p_t;
/// V when no prefix does.
inline std::size_t nucleus_k(std::span<const double> probs, double p_t) {
  const auto order = detail::rank_desc(probs);
  double cum = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    cum += probs[order[r]];
    if (cum > p_t) return r + 1;
  }
  return probs.size();
}

inline std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Inverse-CDF draw with uniform u in [0, 1).
inline std::size_t sample_index(std::span<const double> probs, double u) {
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  const double target = u * total;
  double cum = 0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    last_nonzero = i;
    cum += probs[i];
    if (target < cum) return i;
  }
  return last_nonzero;
}

/// Number of positions whose n-gram already occurred earlier in `tokens`.
inline std::size_t count_repeated_ngrams(std::span<const TokenId> tokens, std::size_t n = 4) {
  std::set<std::vector<TokenId>> seen;
  std::size_t repeats = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<TokenId> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    if (!seen.insert(std::move(gram)).second) ++repeats;
  }
  return repeats;
}

struct StepDiagnostics {
  TokenId token = 0;
  double prob_pre_penalty = 0;   // under the plain temperature distribution
  double prob_post_penalty = 0;  // under the final (penalized, filtered) distribution
  std::size_t active_k = 0;      // candidates kept by greedy / top-k / nucleus
  bool penalized = false;        // token was in the penalty set
  std::size_t context_len = 0;   // tokens fed to the model, code included
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // prompt followed by generated tokens
  std::size_t prompt_len = 0;
  std::vector<StepDiagnostics> steps;

  std::span<const TokenId> generated() const { return std::span(tokens).subspan(prompt_len); }
};

/// Context for the next forward call: the code pinned at index 0 followed by
/// the most recent L-1 history tokens.
inline std::vector<TokenId> sliding_window(TokenId code, std::span<const TokenId> history, std::size_t context) {
  const std::size_t keep = std::min(history.size(), context - 1);
  std::vector<TokenId> window;
  window.reserve(keep + 1);
  window.push_back(code);
  window.insert(window.end(), history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
  return window;
}

/// One decoding step over final-position scores. `step` keys the random draw.
inline StepDiagnostics decode_step(std::span<const double> scores, std::span<const TokenId> penalty_set,
                                   const SamplerConfig& cfg, std::uint64_t step) {
  const auto in_g = detail::membership(penalty_set, scores.size());
  const auto plain = temperature_probs(scores, cfg.temperature);
  const auto penalized = detail::softmax(
      detail::penalized_logits(scores, cfg.temperature, cfg.theta, in_g, cfg.penalty_mode));
  StepDiagnostics diag;
  std::size_t choice = 0;
  if (cfg.greedy) {
    choice = argmax_lowest(penalized);
    diag.active_k = 1;
    diag.prob_post_penalty = penalized[choice];
  } else {
    std::size_t k = scores.size();
    if (cfg.top_k > 0) k = std::min(cfg.top_k, scores.size());
    if (cfg.nucleus_p < 1.0) k = nucleus_k(penalized, cfg.nucleus_p);
    const auto filtered = top_k_filter(penalized, k);
    CounterRng rng(cfg.seed, {0x5A3F1EULL, step});
    choice = sample_index(filtered, rng.uniform());
    diag.active_k = k;
    diag.prob_post_penalty = filtered[choice];
  }
  diag.token = static_cast<TokenId>(choice);
  diag.prob_pre_penalty = plain[choice];
  diag.penalized = in_g[choice];
  return diag;
}

/// Final-position scores for a window whose first token is the code.
using WindowScorer = std::function<std::vector<double>(std::span<const TokenId> window)>;

/// Autoregressive generation conditioned on `code` over any scorer. Each
/// step scores the sliding window, applies the penalty, then greedy or
/// filtered sampling. Deterministic for a fixed seed.
inline GenerationResult generate_with(const WindowScorer& scorer, std::size_t vocab, std::size_t context, TokenId code,
                                      std::span<const TokenId> prompt, const SamplerConfig& cfg,
                                      std::size_t max_new_tokens,
                                      const std::function<void(const StepDiagnostics&)>& on_step = {}) {
  cfg.validate();
  if (code < 0 || static_cast<std::size_t>(code) >= vocab) throw IndexError("control code id outside vocabulary");
  for (TokenId id : prompt)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw IndexError("prompt token outside vocabulary");
  if (context < 2) throw ContextError("context too short for generation");

  GenerationResult result;
  result.tokens.assign(prompt.begin(), prompt.end());
  result.prompt_len = prompt.size();
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    const auto window = sliding_window(code, result.tokens, context);
    const std::size_t history_start = result.tokens.size() - (window.size() - 1);

    std::vector<TokenId> penalty_set;
    for (std::size_t w = 1; w < window.size(); ++w) {
      const std::size_t h = history_start + w - 1;
      if (cfg.penalty_scope == PenaltyScope::prompt_and_generated || h >= result.prompt_len)
        penalty_set.push_back(window[w]);
    }

    const auto last = scorer(window);
    if (last.size() != vocab) throw DimensionError("scorer returned " + std::to_string(last.size()) + " scores");
    auto diag = decode_step(last, penalty_set, cfg, step);
    diag.context_len = window.size();
    result.tokens.push_back(diag.token);
    result.steps.push_back(diag);
    if (on_step) on_step(diag);
  }
  return result;
}

template <typename T>
WindowScorer model_scorer(const Model<T>& model) {
  return [&model](std::span<const TokenId> window) {
    const auto scores = model.forward(window);
    const std::size_t v = model.config().vocab;
    std::vector<double> last(v);
    for (std::size_t j = 0; j < v; ++j) last[j] = static_cast<double>(scores.at(window.size() - 1, j));
    return last;
  };
}

template <typename T>
GenerationResult generate(const Model<T>& model, TokenId code, std::span<const TokenId> prompt,
                          const SamplerConfig& cfg, std::size_t max_new_tokens,
                          const std::function<void(const StepDiagnostics&)>& on_step = {}) {
  const auto& mc = model.config();
  return generate_with(model_scorer(model), mc.vocab, mc.context, code, prompt, cfg, max_new_tokens, on_step);
}

}  // namespace ctrlkit
