#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlkit/attribution.hpp"
#include "ctrlkit/model.hpp"
#include "ctrlkit/sampler.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit::api {

using json = nlohmann::ordered_json;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// A loaded checkpoint and the tokenizer stored next to it.
struct ModelBundle {
  Model<float> model;
  Tokenizer tokenizer;
  std::string checkpoint;
  std::uint64_t checkpoint_hash = 0;
};

inline std::filesystem::path tokenizer_dir_for(const std::filesystem::path& checkpoint) {
  return checkpoint.parent_path() / "tokenizer";
}

/// Loads `checkpoint` and the tokenizer directory beside it.
inline std::shared_ptr<const ModelBundle> load_bundle(const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  auto loaded = Model<float>::load(checkpoint.string());
  auto tok = Tokenizer::load(tokenizer_dir_for(checkpoint));
  if (tok.vocab_size() != loaded.model.config().vocab)
    throw FormatError("tokenizer vocabulary (" + std::to_string(tok.vocab_size()) + ") does not match checkpoint (" +
                      std::to_string(loaded.model.config().vocab) + ")");
  return std::make_shared<const ModelBundle>(
      ModelBundle{std::move(loaded.model), std::move(tok), checkpoint.string(), loaded.file_hash});
}

/// An error with an HTTP status and a stable machine-readable code.
struct ApiError : std::runtime_error {
  int status;
  std::string code;
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
};

inline json error_body(const std::string& code, const std::string& message) {
  return json{{"error", json{{"code", code}, {"message", message}}}};
}

inline ApiError bad_request(const std::string& message) { return {400, "invalid_request", message}; }

// ---- requests -------------------------------------------------------------

struct GenerateRequest {
  std::string control_code;
  std::string prompt;
  std::size_t max_new_tokens = 64;
  SamplerConfig sampler;
  bool stream = false;
};

struct AttributeRequest {
  std::string text;
  std::optional<std::vector<double>> prior;
  bool length_normalize = false;
};

inline constexpr std::size_t kMaxNewTokens = 4096;

namespace detail {

inline void reject_unknown_fields(const json& body, std::initializer_list<const char*> known) {
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  for (const auto& [key, _] : body.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw bad_request("unknown field '" + key + "'");
  }
}

template <typename T>
T field(const json& body, const char* name, T fallback) {
  if (!body.contains(name)) return fallback;
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw bad_request(std::string("field '") + name + "' has the wrong type");
  }
}

inline double number_field(const json& body, const char* name, double fallback) {
  if (!body.contains(name)) return fallback;
  if (!body.at(name).is_number()) throw bad_request(std::string("field '") + name + "' must be a number");
  return body.at(name).get<double>();
}

inline std::uint64_t count_field(const json& body, const char* name, std::uint64_t fallback) {
  if (!body.contains(name)) return fallback;
  const auto& v = body.at(name);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw bad_request(std::string("field '") + name + "' must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

}  // namespace detail

inline PenaltyMode parse_penalty_mode(const std::string& s) {
  if (s == "literal") return PenaltyMode::literal;
  if (s == "sign_aware") return PenaltyMode::sign_aware;
  throw bad_request("penalty_mode must be 'literal' or 'sign_aware'");
}

inline PenaltyScope parse_penalty_scope(const std::string& s) {
  if (s == "prompt_and_generated") return PenaltyScope::prompt_and_generated;
  if (s == "generated") return PenaltyScope::generated;
  throw bad_request("penalty_scope must be 'prompt_and_generated' or 'generated'");
}

inline GenerateRequest parse_generate_request(const json& body) {
  detail::reject_unknown_fields(body, {"control_code", "prompt", "max_new_tokens", "temperature", "greedy", "top_k",
                                       "nucleus_p", "theta", "penalty_mode", "penalty_scope", "seed", "stream"});
  GenerateRequest r;
  if (!body.contains("control_code") || !body.at("control_code").is_string())
    throw bad_request("field 'control_code' (string) is required");
  r.control_code = body.at("control_code").get<std::string>();
  r.prompt = detail::field<std::string>(body, "prompt", "");
  r.max_new_tokens = detail::count_field(body, "max_new_tokens", r.max_new_tokens);
  if (r.max_new_tokens > kMaxNewTokens)
    throw bad_request("max_new_tokens must be at most " + std::to_string(kMaxNewTokens));
  auto& s = r.sampler;
  s.temperature = detail::number_field(body, "temperature", s.temperature);
  s.greedy = detail::field<bool>(body, "greedy", s.greedy);
  s.top_k = detail::count_field(body, "top_k", s.top_k);
  s.nucleus_p = detail::number_field(body, "nucleus_p", s.nucleus_p);
  s.theta = detail::number_field(body, "theta", s.theta);
  s.penalty_mode = parse_penalty_mode(detail::field<std::string>(body, "penalty_mode", to_string(s.penalty_mode)));
  s.penalty_scope = parse_penalty_scope(detail::field<std::string>(body, "penalty_scope", to_string(s.penalty_scope)));
  s.seed = detail::count_field(body, "seed", s.seed);
  r.stream = detail::field<bool>(body, "stream", false);
  try {
    s.validate();
  } catch (const ParameterError& e) {
    throw bad_request(e.what());
  }
  return r;
}

inline AttributeRequest parse_attribute_request(const json& body) {
  detail::reject_unknown_fields(body, {"text", "prior", "length_normalize"});
  AttributeRequest r;
  if (!body.contains("text") || !body.at("text").is_string()) throw bad_request("field 'text' (string) is required");
  r.text = body.at("text").get<std::string>();
  if (r.text.empty()) throw bad_request("field 'text' must not be empty");
  if (body.contains("prior") && !body.at("prior").is_null()) {
    const auto& p = body.at("prior");
    if (!p.is_array()) throw bad_request("field 'prior' must be an array of numbers");
    std::vector<double> prior;
    for (const auto& v : p) {
      if (!v.is_number()) throw bad_request("field 'prior' must be an array of numbers");
      prior.push_back(v.get<double>());
    }
    r.prior = std::move(prior);
  }
  r.length_normalize = detail::field<bool>(body, "length_normalize", false);
  return r;
}

// ---- responses ------------------------------------------------------------

inline json model_info(const ModelBundle& b) {
  const auto& c = b.model.config();
  return json{{"checkpoint_hash", hex64(b.checkpoint_hash)},
              {"config_hash", hex64(c.hash())},
              {"parameters", count_params(c)},
              {"config", json{{"d", c.d},
                              {"f", c.f},
                              {"layers", c.layers},
                              {"heads", c.heads},
                              {"vocab", c.vocab},
                              {"context", c.context},
                              {"dropout", c.dropout},
                              {"attn_scale", c.attn_scale == AttnScale::per_head ? "per_head" : "model_dim"}}}};
}

inline json codes_body(const ModelBundle& b) {
  json codes = json::array();
  for (const auto& c : b.tokenizer.registry().codes())
    codes.push_back(json{{"name", c.name}, {"kind", to_string(c.kind)}, {"token_id", b.tokenizer.code_id(c.name)}});
  return json{{"codes", codes}};
}

inline json step_body(const Tokenizer& tok, const StepDiagnostics& s) {
  const TokenId id = s.token;
  return json{{"token_id", id},
              {"text", tok.decode(std::span<const TokenId>(&id, 1))},
              {"prob_pre_penalty", s.prob_pre_penalty},
              {"prob_post_penalty", s.prob_post_penalty},
              {"active_k", s.active_k},
              {"penalized", s.penalized},
              {"context_len", s.context_len}};
}

inline json sampler_echo(const GenerateRequest& r) {
  const auto& s = r.sampler;
  return json{{"max_new_tokens", r.max_new_tokens}, {"temperature", s.temperature},
              {"greedy", s.greedy},                 {"top_k", s.top_k},
              {"nucleus_p", s.nucleus_p},           {"theta", s.theta},
              {"penalty_mode", to_string(s.penalty_mode)},
              {"penalty_scope", to_string(s.penalty_scope)},
              {"seed", s.seed}};
}

inline TokenId resolve_code(const Tokenizer& tok, const std::string& code) {
  if (!tok.registry().find(code)) throw ApiError(404, "unknown_code", "unknown control code '" + code + "'");
  return tok.code_id(code);
}

/// Runs a generation request; `on_step` sees each step as it is produced.
inline json generate(const ModelBundle& b, const GenerateRequest& r,
                     const std::function<void(const json& step)>& on_step = {}) {
  const TokenId code = resolve_code(b.tokenizer, r.control_code);
  const auto prompt = b.tokenizer.encode(r.prompt);
  std::function<void(const StepDiagnostics&)> hook;
  if (on_step) hook = [&](const StepDiagnostics& s) { on_step(step_body(b.tokenizer, s)); };
  const auto result = ctrlkit::generate(b.model, code, prompt, r.sampler, r.max_new_tokens, hook);
  const auto gen = result.generated();
  json steps = json::array();
  for (const auto& s : result.steps) steps.push_back(step_body(b.tokenizer, s));
  return json{{"control_code", r.control_code},
              {"prompt", r.prompt},
              {"prompt_ids", prompt},
              {"text", b.tokenizer.decode(gen)},
              {"token_ids", std::vector<TokenId>(gen.begin(), gen.end())},
              {"steps", steps},
              {"sampler", sampler_echo(r)},
              {"model", model_info(b)}};
}

inline json attribute(const ModelBundle& b, const AttributeRequest& r) {
  AttributionOptions opts;
  opts.prior = r.prior;
  opts.length_normalize = r.length_normalize;
  AttributionResult result;
  try {
    result = ctrlkit::attribute(b.model, b.tokenizer, r.text, opts);
  } catch (const ParameterError& e) {
    throw bad_request(e.what());
  }
  json ranking = json::array();
  for (const auto& e : result.ranking)
    ranking.push_back(json{{"code", e.code}, {"loglik", e.loglik}, {"posterior", e.posterior}});
  return json{{"ranking", ranking},
              {"token_ids", result.query},
              {"windows", result.windows},
              {"length_normalized", r.length_normalize},
              {"caveat", kAttributionCaveat}};
}

}  // namespace ctrlkit::api
