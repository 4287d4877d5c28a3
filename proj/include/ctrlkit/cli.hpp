#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctrlkit/api.hpp"
#include "ctrlkit/corpus.hpp"
#include "ctrlkit/service.hpp"
#include "ctrlkit/synthetic.hpp"
#include "ctrlkit/trainer.hpp"

namespace ctrlkit::cli {

namespace fs = std::filesystem;
using api::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Everything `train` needs, read from a JSON file. Relative paths resolve
/// against the file's directory.
struct TrainJob {
  fs::path tokenizer;
  fs::path train_records;
  fs::path validation_records;  // optional
  fs::path out;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 0;
  bool resume = false;
};

namespace detail {

inline void require_known(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ParameterError(where + " must be a JSON object");
  for (const auto& [k, _] : obj.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ParameterError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& target, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParameterError(std::string("wrong type for '") + key + "' in " + where);
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_relative() ? base / path : path;
}

inline void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << content;
}

}  // namespace detail

inline TrainJob parse_train_job(const json& cfg, const fs::path& base_dir) {
  using detail::read_opt;
  detail::require_known(cfg, "train config",
                        {"tokenizer", "train_records", "validation_records", "out", "model", "train", "init_seed",
                         "resume"});
  TrainJob job;
  for (const char* key : {"tokenizer", "train_records", "out"})
    if (!cfg.contains(key) || !cfg.at(key).is_string())
      throw ParameterError(std::string("train config needs a string '") + key + "'");
  job.tokenizer = detail::resolve(base_dir, cfg.at("tokenizer").get<std::string>());
  job.train_records = detail::resolve(base_dir, cfg.at("train_records").get<std::string>());
  job.out = detail::resolve(base_dir, cfg.at("out").get<std::string>());
  if (cfg.contains("validation_records"))
    job.validation_records = detail::resolve(base_dir, cfg.at("validation_records").get<std::string>());
  read_opt(cfg, "init_seed", job.init_seed, "train config");
  read_opt(cfg, "resume", job.resume, "train config");

  if (cfg.contains("model")) {
    const auto& m = cfg.at("model");
    detail::require_known(m, "model", {"d", "f", "layers", "heads", "dropout", "attn_scale", "ln_eps"});
    read_opt(m, "d", job.model.d, "model");
    read_opt(m, "f", job.model.f, "model");
    read_opt(m, "layers", job.model.layers, "model");
    read_opt(m, "heads", job.model.heads, "model");
    read_opt(m, "dropout", job.model.dropout, "model");
    read_opt(m, "ln_eps", job.model.ln_eps, "model");
    std::string scale = "per_head";
    read_opt(m, "attn_scale", scale, "model");
    if (scale == "per_head")
      job.model.attn_scale = AttnScale::per_head;
    else if (scale == "model_dim")
      job.model.attn_scale = AttnScale::model_dim;
    else
      throw ParameterError("attn_scale must be 'per_head' or 'model_dim'");
  }
  if (cfg.contains("train")) {
    const auto& t = cfg.at("train");
    detail::require_known(t, "train", {"peak_lr", "warmup_steps", "total_steps", "batch_size", "clip", "adagrad_eps",
                                       "seed", "checkpoint_interval", "eval_interval", "eval_records"});
    read_opt(t, "peak_lr", job.train.peak_lr, "train");
    read_opt(t, "warmup_steps", job.train.warmup_steps, "train");
    read_opt(t, "total_steps", job.train.total_steps, "train");
    read_opt(t, "batch_size", job.train.batch_size, "train");
    read_opt(t, "clip", job.train.clip, "train");
    read_opt(t, "adagrad_eps", job.train.adagrad_eps, "train");
    read_opt(t, "seed", job.train.seed, "train");
    read_opt(t, "checkpoint_interval", job.train.checkpoint_interval, "train");
    read_opt(t, "eval_interval", job.train.eval_interval, "train");
    read_opt(t, "eval_records", job.train.eval_records, "train");
  }
  job.train.validate();
  return job;
}

inline fs::path checkpoint_path(const fs::path& out_dir) { return out_dir / "model.ckpt"; }

struct TrainSummary {
  fs::path checkpoint;
  std::uint64_t config_hash = 0;
  std::uint64_t checkpoint_hash = 0;
  std::uint64_t steps = 0;
  std::vector<MetricRow> metrics;
};

/// Trains per `job`, writing model.ckpt, tokenizer/ and metrics.tsv under
/// job.out. With job.resume an existing checkpoint there is continued.
inline TrainSummary run_train_job(const TrainJob& job, std::ostream* log = nullptr) {
  const auto tok = Tokenizer::load(job.tokenizer);
  const auto train_file = read_records(job.train_records.string());
  RecordFile val_file;
  if (!job.validation_records.empty()) {
    val_file = read_records(job.validation_records.string());
    if (val_file.length != train_file.length) throw FormatError("validation records have a different length");
  }
  ModelConfig mc = job.model;
  mc.vocab = static_cast<std::uint32_t>(tok.vocab_size());
  mc.context = static_cast<std::uint32_t>(train_file.length);
  mc.validate();
  for (const auto& r : train_file.records)
    for (TokenId id : r.tokens)
      if (id < 0 || static_cast<std::size_t>(id) >= mc.vocab) throw FormatError("record token outside tokenizer vocabulary");

  fs::create_directories(job.out);
  const auto ckpt = checkpoint_path(job.out);
  Model<float> model{mc, job.init_seed};
  OptimizerState<float> state;
  if (job.resume && fs::exists(ckpt)) {
    auto loaded = load_training_checkpoint<float>(ckpt.string());
    if (!(loaded.model.config() == mc)) throw FormatError("resume: checkpoint config differs from the train config");
    model = std::move(loaded.model);
    state = std::move(loaded.state);
  }
  tok.save(api::tokenizer_dir_for(ckpt));

  TrainSummary summary;
  std::ofstream metrics(job.out / "metrics.tsv", job.resume ? std::ios::app : std::ios::trunc);
  TrainHooks hooks;
  hooks.on_metric = [&](const MetricRow& m) {
    summary.metrics.push_back(m);
    metrics << format_metric(m) << '\n' << std::flush;
    if (log) *log << format_metric(m) << '\n' << std::flush;
  };
  hooks.on_checkpoint = [&](std::uint64_t) { save_training_checkpoint(model, state, ckpt.string()); };
  train(model, std::span<const SequenceRecord>(train_file.records),
        std::span<const SequenceRecord>(val_file.records), job.train, state, hooks);
  if (state.step == 0 || !fs::exists(ckpt)) save_training_checkpoint(model, state, ckpt.string());

  summary.checkpoint = ckpt;
  summary.config_hash = mc.hash();
  summary.checkpoint_hash = Model<float>::load(ckpt.string()).file_hash;
  summary.steps = state.step;
  return summary;
}

inline std::string ranking_table(const json& body) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "code" << std::right << std::setw(16) << "loglik" << std::setw(12) << "posterior"
     << '\n';
  for (const auto& e : body.at("ranking"))
    os << std::left << std::setw(20) << e.at("code").get<std::string>() << std::right << std::fixed
       << std::setprecision(4) << std::setw(16) << e.at("loglik").get<double>() << std::setprecision(6) << std::setw(12)
       << e.at("posterior").get<double>() << '\n';
  if (body.at("windows").get<std::size_t>() > 1)
    os << "(query exceeded one context window; scored in " << body.at("windows").get<std::size_t>() << " windows)\n";
  os << "note: " << body.at("caveat").get<std::string>() << '\n';
  return os.str();
}

/// Runs the command line. Usage errors return 2, runtime failures 1.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ctrlkit: control-code conditional transformer language model toolkit", "ctrlkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ctrlkit 1.0.0");
  std::function<void()> action;

  // bpe-learn
  auto* bpe = app.add_subcommand("bpe-learn", "learn BPE merges from text files");
  std::vector<std::string> bpe_inputs;
  std::string bpe_codes, bpe_out;
  std::size_t bpe_merges = 0, bpe_min = 2;
  bool bpe_json = false;
  bpe->add_option("--input", bpe_inputs, "training text file (repeatable)")->required()->check(CLI::ExistingFile);
  bpe->add_option("--codes", bpe_codes, "control code registry (name<TAB>kind per line)")
      ->required()
      ->check(CLI::ExistingFile);
  bpe->add_option("--merges", bpe_merges, "number of merges to learn")->required();
  bpe->add_option("--min-count", bpe_min, "stop when the best pair occurs fewer times")->capture_default_str();
  bpe->add_option("--out", bpe_out, "output tokenizer directory")->required();
  bpe->add_flag("--json", bpe_json, "machine-readable output");
  bpe->callback([&] {
    action = [&] {
      std::string corpus;
      for (const auto& f : bpe_inputs) corpus += read_text_file(f);
      const auto reg = ControlCodeRegistry::load(bpe_codes);
      const auto tok = learn_bpe(corpus, bpe_merges, bpe_min, reg);
      tok.save(bpe_out);
      const json body{{"tokenizer", bpe_out},
                      {"vocab_size", tok.vocab_size()},
                      {"merges", tok.merges().size()},
                      {"codes", reg.size()}};
      if (bpe_json)
        out << body.dump() << '\n';
      else
        out << "learned " << tok.merges().size() << " merges, vocabulary " << tok.vocab_size() << " -> " << bpe_out
            << '\n';
    };
  });

  // corpus-build
  auto* corp = app.add_subcommand("corpus-build", "tokenize a manifest into training records");
  std::string corp_manifest, corp_tok, corp_out;
  std::size_t corp_len = 64;
  double corp_holdout = 0.05;
  bool corp_json = false;
  corp->add_option("--manifest", corp_manifest, "manifest (code<TAB>path[<TAB>Code@offset,...])")
      ->required()
      ->check(CLI::ExistingFile);
  corp->add_option("--tokenizer", corp_tok, "tokenizer directory")->required()->check(CLI::ExistingDirectory);
  corp->add_option("--length", corp_len, "record length L (code included)")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
  corp->add_option("--holdout", corp_holdout, "validation fraction per domain")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 0.5));
  corp->add_option("--out", corp_out, "output directory")->required();
  corp->add_flag("--json", corp_json, "machine-readable output");
  corp->callback([&] {
    action = [&] {
      const auto tok = Tokenizer::load(corp_tok);
      const auto manifest = load_manifest(corp_manifest, tok.registry());
      const auto streams = domain_streams(tok, manifest);
      const auto split = build_corpus(tok, streams, corp_len, corp_holdout);
      fs::create_directories(corp_out);
      write_records(split.train, corp_len, (fs::path(corp_out) / "train.rec").string());
      write_records(split.validation, corp_len, (fs::path(corp_out) / "validation.rec").string());
      json domains = json::object();
      for (const auto& s : streams) domains[s.domain] = json{{"tokens", s.tokens.size()}, {"train", 0}, {"validation", 0}};
      for (const auto& r : split.train) domains[r.domain]["train"] = domains[r.domain]["train"].get<std::size_t>() + 1;
      for (const auto& r : split.validation)
        domains[r.domain]["validation"] = domains[r.domain]["validation"].get<std::size_t>() + 1;
      const json body{{"length", corp_len},
                      {"train_records", split.train.size()},
                      {"validation_records", split.validation.size()},
                      {"domains", domains}};
      if (corp_json)
        out << body.dump() << '\n';
      else
        out << split.train.size() << " train / " << split.validation.size() << " validation records of length "
            << corp_len << " -> " << corp_out << '\n';
    };
  });

  // train
  auto* tr = app.add_subcommand("train", "train a model from a JSON config");
  std::string tr_config;
  bool tr_json = false;
  tr->add_option("--config", tr_config, "train config JSON")->required()->check(CLI::ExistingFile);
  tr->add_flag("--json", tr_json, "machine-readable output");
  tr->callback([&] {
    action = [&] {
      std::ifstream in(tr_config);
      json cfg;
      try {
        cfg = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ParameterError(std::string("train config is not valid JSON: ") + e.what());
      }
      const auto job = parse_train_job(cfg, fs::path(tr_config).parent_path());
      const auto s = run_train_job(job, tr_json ? nullptr : &out);
      json metrics = json::array();
      for (const auto& m : s.metrics) metrics.push_back(json{{"step", m.step}, {"split", m.split}, {"nll", m.nll}});
      const json body{{"checkpoint", s.checkpoint.string()},
                      {"config_hash", api::hex64(s.config_hash)},
                      {"checkpoint_hash", api::hex64(s.checkpoint_hash)},
                      {"steps", s.steps},
                      {"metrics", metrics}};
      if (tr_json)
        out << body.dump() << '\n';
      else
        out << "checkpoint " << s.checkpoint.string() << " (config " << api::hex64(s.config_hash) << ")\n";
    };
  });

  // generate
  auto* gen = app.add_subcommand("generate", "generate text conditioned on a control code");
  std::string gen_ckpt, gen_code, gen_prompt, gen_mode = "literal", gen_scope = "prompt_and_generated";
  std::size_t gen_max = 64, gen_top_k = 0;
  double gen_temp = 1.0, gen_p = 1.0, gen_theta = 1.2;
  std::uint64_t gen_seed = 0;
  bool gen_sample = false, gen_greedy = false, gen_json = false;
  if (const char* env = std::getenv("CTRLKIT_CHECKPOINT")) gen_ckpt = env;
  gen->add_option("--checkpoint", gen_ckpt, "model checkpoint (default $CTRLKIT_CHECKPOINT)")->check(CLI::ExistingFile);
  gen->add_option("--code", gen_code, "control code")->required();
  gen->add_option("--prompt", gen_prompt, "prompt text");
  gen->add_option("--max-new-tokens", gen_max, "tokens to generate")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{0}, api::kMaxNewTokens));
  gen->add_option("--temperature", gen_temp, "softmax temperature T")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--top-k", gen_top_k, "keep the k most likely tokens (0 disables)")->capture_default_str();
  gen->add_option("--nucleus-p", gen_p, "nucleus threshold p_t (1 disables)")
      ->capture_default_str()
      ->check(CLI::Range(std::numeric_limits<double>::min(), 1.0));
  gen->add_option("--theta", gen_theta, "repetition penalty (1 disables)")
      ->capture_default_str()
      ->check(CLI::Range(1.0, std::numeric_limits<double>::max()));
  gen->add_option("--penalty-mode", gen_mode, "literal | sign_aware")
      ->capture_default_str()
      ->check(CLI::IsMember({"literal", "sign_aware"}));
  gen->add_option("--penalty-scope", gen_scope, "prompt_and_generated | generated")
      ->capture_default_str()
      ->check(CLI::IsMember({"prompt_and_generated", "generated"}));
  gen->add_option("--seed", gen_seed, "sampling seed")->capture_default_str();
  auto* greedy_flag = gen->add_flag("--greedy", gen_greedy, "greedy decoding (default)");
  gen->add_flag("--sample", gen_sample, "sample instead of greedy decoding")->excludes(greedy_flag);
  gen->add_flag("--json", gen_json, "machine-readable output (same body as POST /v1/generate)");
  gen->callback([&] {
    action = [&] {
      if (gen_ckpt.empty()) throw ParameterError("no checkpoint given (--checkpoint or CTRLKIT_CHECKPOINT)");
      const auto bundle = api::load_bundle(gen_ckpt);
      const json req{{"control_code", gen_code}, {"prompt", gen_prompt},  {"max_new_tokens", gen_max},
                     {"temperature", gen_temp},  {"greedy", !gen_sample}, {"top_k", gen_top_k},
                     {"nucleus_p", gen_p},       {"theta", gen_theta},    {"penalty_mode", gen_mode},
                     {"penalty_scope", gen_scope}, {"seed", gen_seed}};
      const auto body = api::generate(*bundle, api::parse_generate_request(req));
      if (gen_json)
        out << body.dump() << '\n';
      else
        out << gen_prompt << body.at("text").get<std::string>() << '\n';
    };
  });

  // attribute
  auto* attr = app.add_subcommand("attribute", "rank domain codes for a text");
  std::string attr_ckpt, attr_text;
  std::vector<double> attr_prior;
  bool attr_norm = false, attr_json = false;
  if (const char* env = std::getenv("CTRLKIT_CHECKPOINT")) attr_ckpt = env;
  attr->add_option("--checkpoint", attr_ckpt, "model checkpoint (default $CTRLKIT_CHECKPOINT)")
      ->check(CLI::ExistingFile);
  attr->add_option("--text", attr_text, "query text")->required();
  attr->add_option("--prior", attr_prior, "prior weights over domain codes, registry order")->delimiter(',');
  attr->add_flag("--length-normalize", attr_norm, "rank by per-token average log-likelihood");
  attr->add_flag("--json", attr_json, "machine-readable output (same body as POST /v1/attribute)");
  attr->callback([&] {
    action = [&] {
      if (attr_ckpt.empty()) throw ParameterError("no checkpoint given (--checkpoint or CTRLKIT_CHECKPOINT)");
      const auto bundle = api::load_bundle(attr_ckpt);
      json req{{"text", attr_text}, {"length_normalize", attr_norm}};
      if (!attr_prior.empty()) req["prior"] = attr_prior;
      const auto body = api::attribute(*bundle, api::parse_attribute_request(req));
      if (attr_json)
        out << body.dump() << '\n';
      else
        out << ranking_table(body);
    };
  });

  // serve
  auto* srv = app.add_subcommand("serve", "run the HTTP JSON service");
  auto opts = service::ServerOptions{};
  std::string srv_ckpt;
  if (const char* env = std::getenv("CTRLKIT_CHECKPOINT")) srv_ckpt = env;
  bool srv_env_ok = true;
  std::string srv_env_error;
  try {
    opts = service::options_from_env(opts);
  } catch (const std::exception& e) {
    srv_env_ok = false;
    srv_env_error = e.what();
  }
  srv->add_option("--checkpoint", srv_ckpt, "model checkpoint (default $CTRLKIT_CHECKPOINT)");
  srv->add_option("--host", opts.host, "bind address")->capture_default_str();
  srv->add_option("--port", opts.port, "port (default $CTRLKIT_PORT or 8787)")->check(CLI::Range(0, 65535));
  srv->add_option("--static-dir", opts.static_dir, "UI assets served at / (default $CTRLKIT_STATIC_DIR)");
  srv->add_option("--max-in-flight", opts.max_in_flight, "concurrent requests before 429")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  srv->callback([&] {
    action = [&] {
      if (!srv_env_ok) throw ParameterError(srv_env_error);
      std::shared_ptr<const api::ModelBundle> bundle;
      if (!srv_ckpt.empty())
        bundle = api::load_bundle(srv_ckpt);
      else
        err << "warning: no checkpoint loaded; model endpoints answer 503\n";
      service::Server server(bundle, opts);
      if (!server.bind(opts.port)) throw std::runtime_error("cannot bind " + opts.host + ":" + std::to_string(opts.port));
      out << "listening on http://" << opts.host << ':' << opts.port << '\n' << std::flush;
      server.run();
    };
  });

  // synth
  auto* syn = app.add_subcommand("synth", "write a synthetic corpus with its manifest and code registry");
  std::string syn_kind = "two-domain", syn_out;
  std::uint64_t syn_seed = 0;
  std::size_t syn_sentences = 31000, syn_words = 16, syn_length = 200000;
  bool syn_json = false;
  syn->add_option("--kind", syn_kind, "two-domain | loop")
      ->capture_default_str()
      ->check(CLI::IsMember({"two-domain", "loop"}));
  syn->add_option("--out", syn_out, "output directory")->required();
  syn->add_option("--seed", syn_seed, "generator seed")->capture_default_str();
  syn->add_option("--sentences", syn_sentences, "sentences per domain (two-domain)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  syn->add_option("--words", syn_words, "vocabulary size (loop, even)")->capture_default_str();
  syn->add_option("--length", syn_length, "walk length in words (loop)")->capture_default_str()->check(CLI::PositiveNumber);
  syn->add_flag("--json", syn_json, "machine-readable output");
  syn->callback([&] {
    action = [&] {
      const fs::path dir(syn_out);
      fs::create_directories(dir);
      json files = json::array();
      std::string manifest;
      ControlCodeRegistry reg;
      if (syn_kind == "two-domain") {
        reg = synth::two_domain_registry();
        const auto text = synth::two_domain_text(syn_seed, syn_sentences, synth::make_lexicon(syn_seed));
        detail::write_text(dir / "forward.txt", text.forward);
        detail::write_text(dir / "reversed.txt", text.reversed);
        manifest = std::string(synth::kForwardCode) + "\tforward.txt\n" + synth::kReversedCode + "\treversed.txt\n";
        files = {"forward.txt", "reversed.txt"};
      } else {
        reg.add(synth::kLoopCode, CodeKind::domain);
        detail::write_text(dir / "loop.txt", synth::loop_text(syn_seed, syn_words, syn_length));
        manifest = std::string(synth::kLoopCode) + "\tloop.txt\n";
        files = {"loop.txt"};
      }
      reg.save((dir / "codes.tsv").string());
      detail::write_text(dir / "manifest.tsv", manifest);
      files.push_back("codes.tsv");
      files.push_back("manifest.tsv");
      const json body{{"kind", syn_kind}, {"dir", syn_out}, {"files", files}};
      if (syn_json)
        out << body.dump() << '\n';
      else
        out << "wrote " << syn_kind << " corpus to " << syn_out << '\n';
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    out << "ctrlkit 1.0.0\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }
  try {
    if (action) action();
  } catch (const api::ApiError& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"ctrlkit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ctrlkit::cli
