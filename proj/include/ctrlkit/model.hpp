#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctrlkit/binary_io.hpp"
#include "ctrlkit/errors.hpp"
#include "ctrlkit/rng.hpp"
#include "ctrlkit/tensor.hpp"
#include "ctrlkit/tokenizer.hpp"

namespace ctrlkit {

enum class AttnScale : std::uint8_t {
  per_head = 0,   // 1/sqrt(d / heads)
  model_dim = 1,  // 1/sqrt(d)
};

struct ModelConfig {
  std::uint32_t d = 64;         // model dimension
  std::uint32_t f = 256;        // feedforward inner dimension
  std::uint32_t layers = 2;
  std::uint32_t heads = 4;
  std::uint32_t vocab = 512;
  std::uint32_t context = 64;   // maximum sequence length L
  double dropout = 0.1;
  AttnScale attn_scale = AttnScale::per_head;
  double ln_eps = 1e-5;

  std::uint32_t head_dim() const { return d / heads; }

  void validate() const {
    if (d == 0 || f == 0 || layers == 0 || heads == 0 || vocab == 0 || context == 0)
      throw ParameterError("model dimensions must be positive");
    if (d % heads != 0) throw ParameterError("d must be divisible by the number of heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must be in [0, 1)");
    if (!(ln_eps > 0.0)) throw ParameterError("layernorm eps must be positive");
  }

  void write(io::ByteWriter& w) const {
    for (std::uint32_t v : {d, f, layers, heads, vocab, context}) w.put(v);
    w.put(dropout);
    w.put(static_cast<std::uint8_t>(attn_scale));
    w.put(ln_eps);
  }

  static ModelConfig read(io::ByteReader& r) {
    ModelConfig c;
    for (std::uint32_t* v : {&c.d, &c.f, &c.layers, &c.heads, &c.vocab, &c.context}) *v = r.get<std::uint32_t>();
    c.dropout = r.get<double>();
    const auto scale = r.get<std::uint8_t>();
    if (scale > 1) throw FormatError("checkpoint: unknown attention scale mode");
    c.attn_scale = static_cast<AttnScale>(scale);
    c.ln_eps = r.get<double>();
    c.validate();
    return c;
  }

  /// FNV-1a of the serialized config; identifies an architecture.
  std::uint64_t hash() const {
    io::ByteWriter w;
    write(w);
    return io::fnv1a(w.bytes().data(), w.bytes().size());
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count. The tied output projection is the token
/// embedding and is counted once.
inline std::uint64_t count_params(const ModelConfig& c) {
  const std::uint64_t d = c.d, f = c.f, v = c.vocab;
  const std::uint64_t per_layer = 4 * d * d + 2 * d * f + 4 * d;
  return v * d + c.layers * per_layer + 2 * d;
}

/// Sinusoidal embedding: entry 2i is sin(pos * 10000^(-2i/d)), entry 2i+1
/// the matching cos.
template <typename T = float>
std::vector<T> positional_embedding(std::size_t position, std::size_t d) {
  std::vector<T> pe(d);
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * freq;
    pe[i] = static_cast<T>(std::sin(angle));
    if (i + 1 < d) pe[i + 1] = static_cast<T>(std::cos(angle));
  }
  return pe;
}

template <typename T = float>
struct LayerParams {
  // Head j uses columns [j*dh, (j+1)*dh) of wq/wk/wv.
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ff_up;    // d x f
  Tensor<T> ff_down;  // f x d
};

template <typename T = float>
struct ModelParams {
  Tensor<T> token_embedding;    // V x d
  Tensor<T> output_projection;  // same storage as token_embedding; scores use its transpose
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain, final_bias;
};

/// Observer for forward calls; receives the token ids of every sequence fed
/// to the network.
using ForwardObserver = std::function<void(std::span<const TokenId> ids, std::size_t seq_len)>;

template <typename T = float>
class Model {
 public:
  using TensorT = Tensor<T>;
  static constexpr const char* kTiedName = "lm_head";
  static constexpr const char* kEmbeddingName = "tok_emb";

  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    allocate();
    initialize(seed);
  }

  // Copies would alias parameter storage; use clone() for an independent model.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  Model clone() const {
    Model m(config_, 0);
    auto src = named_parameters();
    auto dst = m.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i)
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  ModelParams<T>& params() noexcept { return params_; }
  const ModelParams<T>& params() const noexcept { return params_; }

  /// Every distinct parameter tensor with its checkpoint name. The tied
  /// output projection is not listed separately.
  std::vector<std::pair<std::string, TensorT>> named_parameters() const {
    std::vector<std::pair<std::string, TensorT>> out;
    out.emplace_back(kEmbeddingName, params_.token_embedding);
    for (std::size_t i = 0; i < params_.layers.size(); ++i) {
      const auto& l = params_.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      out.emplace_back(p + "attn.wq", l.wq);
      out.emplace_back(p + "attn.wk", l.wk);
      out.emplace_back(p + "attn.wv", l.wv);
      out.emplace_back(p + "attn.wo", l.wo);
      out.emplace_back(p + "ln1.gain", l.ln1_gain);
      out.emplace_back(p + "ln1.bias", l.ln1_bias);
      out.emplace_back(p + "ln2.gain", l.ln2_gain);
      out.emplace_back(p + "ln2.bias", l.ln2_bias);
      out.emplace_back(p + "ff.up", l.ff_up);
      out.emplace_back(p + "ff.down", l.ff_down);
    }
    out.emplace_back("final_ln.gain", params_.final_gain);
    out.emplace_back("final_ln.bias", params_.final_bias);
    return out;
  }

  std::vector<TensorT> parameters() const {
    std::vector<TensorT> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.drop_grad();
  }

  void set_observer(ForwardObserver obs) { observer_ = std::move(obs); }

  /// Multi-head causal self-attention over `x`, which stacks
  /// x.dim(0) / seq_len sequences of length seq_len.
  TensorT masked_attention(Tape<T>& tape, const TensorT& x, const LayerParams<T>& layer, std::size_t seq_len) const {
    const std::size_t dh = config_.head_dim();
    const T scale = T(1) / std::sqrt(T(config_.attn_scale == AttnScale::per_head ? dh : config_.d));
    const std::size_t batch = x.dim(0) / seq_len;
    auto q = tape.matmul(x, layer.wq);
    auto k = tape.matmul(x, layer.wk);
    auto v = tape.matmul(x, layer.wv);
    std::vector<TensorT> sequences;
    sequences.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      auto qb = batch == 1 ? q : tape.slice_rows(q, b * seq_len, seq_len);
      auto kb = batch == 1 ? k : tape.slice_rows(k, b * seq_len, seq_len);
      auto vb = batch == 1 ? v : tape.slice_rows(v, b * seq_len, seq_len);
      std::vector<TensorT> heads;
      heads.reserve(config_.heads);
      for (std::size_t j = 0; j < config_.heads; ++j) {
        auto qh = tape.slice_cols(qb, j * dh, dh);
        auto kh = tape.slice_cols(kb, j * dh, dh);
        auto vh = tape.slice_cols(vb, j * dh, dh);
        auto scores = tape.scale(tape.causal_mask(tape.matmul(qh, tape.transpose(kh))), scale);
        heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
      }
      sequences.push_back(tape.concat_heads(heads));
    }
    auto merged = batch == 1 ? sequences.front() : tape.concat_rows(sequences);
    return tape.matmul(merged, layer.wo);
  }

  /// Scores for every position of every sequence: shape (batch*seq_len) x V.
  /// `ids` stacks batch sequences of equal length seq_len.
  TensorT forward(Tape<T>& tape, std::span<const TokenId> ids, std::size_t seq_len, bool training = false,
                  DropoutKey dropout_key = {}) const {
    if (seq_len == 0 || ids.empty() || ids.size() % seq_len != 0)
      throw DimensionError("forward: " + std::to_string(ids.size()) + " ids is not a whole number of sequences of " +
                           std::to_string(seq_len));
    if (seq_len > config_.context)
      throw ContextError("sequence of " + std::to_string(seq_len) + " tokens exceeds context " +
                         std::to_string(config_.context));
    if (observer_) observer_(ids, seq_len);
    const std::size_t d = config_.d;
    const std::size_t rows = ids.size();

    TensorT pos({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& pe = positions_[r % seq_len];
      std::copy(pe.begin(), pe.end(), pos.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    auto x = tape.add(tape.embed_lookup(params_.token_embedding, ids), pos);

    const T eps = static_cast<T>(config_.ln_eps);
    for (std::size_t i = 0; i < params_.layers.size(); ++i) {
      const auto& l = params_.layers[i];
      DropoutKey key = dropout_key;
      key.layer = i;
      auto xn = tape.layernorm(x, l.ln1_gain, l.ln1_bias, eps);
      auto h = tape.add(masked_attention(tape, xn, l, seq_len), xn);
      key.site = 0;
      h = tape.dropout(h, config_.dropout, training, key);
      auto hn = tape.layernorm(h, l.ln2_gain, l.ln2_bias, eps);
      auto ff = tape.matmul(tape.relu(tape.matmul(hn, l.ff_up)), l.ff_down);
      key.site = 1;
      x = tape.dropout(tape.add(ff, hn), config_.dropout, training, key);
    }
    auto out = tape.layernorm(x, params_.final_gain, params_.final_bias, eps);
    return tape.matmul(out, tape.transpose(params_.output_projection));
  }

  /// Eval-mode forward of a single sequence without recording.
  TensorT forward(std::span<const TokenId> ids) const {
    Tape<T> tape(false);
    return forward(tape, ids, ids.size(), false);
  }

  // ---- checkpoint I/O -------------------------------------------------

  /// Extra named arrays stored next to the parameters (optimizer state).
  struct Extra {
    std::string name;
    Shape shape;            // empty for scalars
    std::vector<double> values;
    bool integer = false;   // stored as i64
  };

  void save(const std::string& path, const std::vector<Extra>& extras = {}) const {
    io::ByteWriter w;
    w.put_bytes("CTRLCKPT");
    w.put(kCheckpointVersion);
    config_.write(w);
    const auto named = named_parameters();
    w.put(static_cast<std::uint32_t>(named.size() + 1 + extras.size()));
    for (const auto& [name, t] : named) {
      put_name(w, name);
      w.put(dtype_code());
      w.put(static_cast<std::uint8_t>(t.rank()));
      for (std::size_t dim : t.shape()) w.put(static_cast<std::uint32_t>(dim));
      w.put_array(t.data().data(), t.numel());
    }
    put_name(w, kTiedName);
    w.put(kDtypeAlias);
    put_name(w, kEmbeddingName);
    for (const auto& e : extras) {
      put_name(w, e.name);
      w.put(e.integer ? kDtypeI64 : kDtypeF64);
      w.put(static_cast<std::uint8_t>(e.shape.size()));
      for (std::size_t dim : e.shape) w.put(static_cast<std::uint32_t>(dim));
      for (double v : e.values) {
        if (e.integer)
          w.put(static_cast<std::int64_t>(v));
        else
          w.put(v);
      }
    }
    w.save(path);
  }

  struct Loaded;
  static Loaded load(const std::string& path);

 private:
  static constexpr std::uint32_t kCheckpointVersion = 1;
  static constexpr std::uint8_t kDtypeF32 = 1, kDtypeF64 = 2, kDtypeI64 = 3, kDtypeAlias = 0xFF;
  static constexpr std::uint8_t dtype_code() { return std::is_same_v<T, float> ? kDtypeF32 : kDtypeF64; }

  static void put_name(io::ByteWriter& w, const std::string& name) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
  }
  static std::string get_name(io::ByteReader& r) { return r.get_bytes(r.get<std::uint16_t>()); }

  void allocate() {
    const std::size_t d = config_.d, f = config_.f;
    params_.token_embedding = TensorT({config_.vocab, d}, true);
    params_.output_projection = params_.token_embedding;
    params_.layers.clear();
    for (std::size_t i = 0; i < config_.layers; ++i) {
      LayerParams<T> l;
      l.wq = TensorT({d, d}, true);
      l.wk = TensorT({d, d}, true);
      l.wv = TensorT({d, d}, true);
      l.wo = TensorT({d, d}, true);
      l.ln1_gain = TensorT::filled({d}, T(1), true);
      l.ln1_bias = TensorT({d}, true);
      l.ln2_gain = TensorT::filled({d}, T(1), true);
      l.ln2_bias = TensorT({d}, true);
      l.ff_up = TensorT({d, f}, true);
      l.ff_down = TensorT({f, d}, true);
      params_.layers.push_back(std::move(l));
    }
    params_.final_gain = TensorT::filled({d}, T(1), true);
    params_.final_bias = TensorT({d}, true);
    positions_.clear();
    for (std::size_t p = 0; p < config_.context; ++p) positions_.push_back(positional_embedding<T>(p, d));
  }

  // normal(0, 0.02) for weight matrices; layernorm gains 1, biases 0.
  void initialize(std::uint64_t seed) {
    std::uint64_t index = 0;
    for (auto& [name, t] : named_parameters()) {
      ++index;
      if (t.rank() != 2) continue;
      CounterRng rng(seed, {index});
      for (auto& v : t.data()) v = static_cast<T>(0.02 * rng.normal());
    }
  }

  ModelConfig config_;
  ModelParams<T> params_;
  std::vector<std::vector<T>> positions_;
  ForwardObserver observer_;
};

template <typename T>
struct Model<T>::Loaded {
  Model<T> model;
  std::vector<Extra> extras;
  std::uint64_t file_hash = 0;

  const Extra* extra(const std::string& name) const {
    for (const auto& e : extras)
      if (e.name == name) return &e;
    return nullptr;
  }
};

template <typename T>
typename Model<T>::Loaded Model<T>::load(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  std::uint64_t file_hash = 0;
  {
    auto raw = io::ByteReader::from_file(path);
    auto bytes = raw.get_bytes(raw.remaining());
    file_hash = io::fnv1a(bytes.data(), bytes.size());
  }
  if (r.get_bytes(8) != "CTRLCKPT") throw FormatError("checkpoint: bad magic");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const auto config = ModelConfig::read(r);
  Loaded out{Model<T>(config, 0), {}, file_hash};
  auto named = out.model.named_parameters();
  std::vector<bool> seen(named.size(), false);
  bool tied = false;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string name = get_name(r);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype == kDtypeAlias) {
      const std::string target = get_name(r);
      if (name != kTiedName || target != kEmbeddingName) throw FormatError("checkpoint: unexpected alias " + name);
      tied = true;
      continue;
    }
    if (dtype != kDtypeF32 && dtype != kDtypeF64 && dtype != kDtypeI64)
      throw FormatError("checkpoint: unknown dtype for " + name);
    Shape shape(r.get<std::uint8_t>());
    for (auto& dim : shape) dim = r.get<std::uint32_t>();
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    for (auto& v : values) {
      if (dtype == kDtypeF32)
        v = r.get<float>();
      else if (dtype == kDtypeF64)
        v = r.get<double>();
      else
        v = static_cast<double>(r.get<std::int64_t>());
    }
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == name; });
    if (it == named.end()) {
      out.extras.push_back({name, shape, std::move(values), dtype == kDtypeI64});
      continue;
    }
    if (it->second.shape() != shape)
      throw FormatError("checkpoint: shape mismatch for " + name + ": " + shape_str(shape) + " vs " +
                        shape_str(it->second.shape()));
    auto data = it->second.data();
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(values[i]);
    seen[static_cast<std::size_t>(it - named.begin())] = true;
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  if (!tied) throw FormatError("checkpoint: missing tied output projection entry");
  for (std::size_t i = 0; i < named.size(); ++i)
    if (!seen[i]) throw FormatError("checkpoint: missing tensor " + named[i].first);
  return out;
}

}  // namespace ctrlkit
