#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctrlkit/errors.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

inline constexpr const char* kAttributionCaveat =
    "Attribution ranks training domains by how likely the model finds this text under each domain code. "
    "It describes correlations learned from the training data and says nothing about whether the text is true.";

struct LoglikBreakdown {
  double loglik = 0;
  std::size_t windows = 0;
};

/// log p(x | code) = sum_i log p(x_i | code, x_<i). Queries longer than L-1
/// are scored as consecutive chunks of L-1 tokens, each with the code
/// pinned in front.
template <typename T>
LoglikBreakdown sequence_loglik_windows(const Model<T>& model, TokenId code, std::span<const TokenId> query) {
  if (query.empty()) throw ParameterError("sequence_loglik: empty query");
  const std::size_t chunk = model.config().context - 1;
  if (chunk == 0) throw ContextError("context too short to score a query");
  LoglikBreakdown out;
  for (std::size_t start = 0; start < query.size(); start += chunk) {
    const std::size_t n = std::min(chunk, query.size() - start);
    std::vector<TokenId> ctx;
    ctx.reserve(n + 1);
    ctx.push_back(code);
    ctx.insert(ctx.end(), query.begin() + static_cast<std::ptrdiff_t>(start),
               query.begin() + static_cast<std::ptrdiff_t>(start + n));
    const auto scores = model.forward(ctx);
    const std::size_t v = scores.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(scores.at(i, j)));
      double sum = 0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(scores.at(i, j)) - mx);
      const auto target = static_cast<std::size_t>(ctx[i + 1]);
      out.loglik += static_cast<double>(scores.at(i, target)) - mx - std::log(sum);
    }
    ++out.windows;
  }
  return out;
}

template <typename T>
double sequence_loglik(const Model<T>& model, TokenId code, std::span<const TokenId> query) {
  return sequence_loglik_windows(model, code, query).loglik;
}

struct AttributionEntry {
  std::string code;
  double loglik = 0;
  double posterior = 0;
};

struct AttributionResult {
  std::vector<AttributionEntry> ranking;  // descending posterior, registry order on ties
  std::vector<TokenId> query;
  std::size_t windows = 0;                 // > 1 when the query exceeded one window
};

struct AttributionOptions {
  // Prior weights over domain codes in registry order; uniform when unset.
  std::optional<std::vector<double>> prior;
  // Rank by per-token average log-likelihood instead of the raw sum.
  bool length_normalize = false;
};

/// Posterior over domain codes, p(c|x) proportional to p(x|c) p(c).
/// Secondary codes never participate.
template <typename T>
AttributionResult attribute_ids(const Model<T>& model, const Tokenizer& tok, std::span<const TokenId> query,
                                const AttributionOptions& opts = {}) {
  if (query.empty()) throw ParameterError("attribution query is empty");
  const auto domains = tok.registry().domain_names();
  if (domains.size() < 2) throw ParameterError("attribution needs at least two domain codes");
  std::vector<double> log_prior(domains.size(), 0.0);
  if (opts.prior) {
    const auto& p = *opts.prior;
    if (p.size() != domains.size())
      throw ParameterError("prior has " + std::to_string(p.size()) + " entries for " + std::to_string(domains.size()) +
                           " domain codes");
    double total = 0;
    for (double w : p) {
      if (!(w >= 0) || !std::isfinite(w)) throw ParameterError("prior weights must be finite and nonnegative");
      total += w;
    }
    if (!(total > 0)) throw ParameterError("prior weights sum to zero");
    for (std::size_t i = 0; i < p.size(); ++i) log_prior[i] = std::log(p[i] / total);
  }

  AttributionResult result;
  result.query.assign(query.begin(), query.end());
  std::vector<double> logits(domains.size());
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto ll = sequence_loglik_windows(model, tok.code_id(domains[i]), query);
    result.windows = ll.windows;
    result.ranking.push_back({domains[i], ll.loglik, 0.0});
    const double evidence = opts.length_normalize ? ll.loglik / static_cast<double>(query.size()) : ll.loglik;
    logits[i] = evidence + log_prior[i];
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (std::size_t i = 0; i < logits.size(); ++i) result.ranking[i].posterior = logits[i] / sum;
  std::stable_sort(result.ranking.begin(), result.ranking.end(),
                   [](const AttributionEntry& a, const AttributionEntry& b) { return a.posterior > b.posterior; });
  return result;
}

template <typename T>
AttributionResult attribute(const Model<T>& model, const Tokenizer& tok, std::string_view text,
                            const AttributionOptions& opts = {}) {
  if (text.empty()) throw ParameterError("attribution query is empty");
  const auto ids = tok.encode(text);
  return attribute_ids(model, tok, ids, opts);
}

}  // namespace ctrlkit
