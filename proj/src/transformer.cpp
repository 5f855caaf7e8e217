#include "sbd/transformer.hpp"

#include <cmath>
#include <string>

#include "sbd/rng.hpp"

namespace sbd {

void DenoiserConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || vocab_size <= 0 || max_len <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

template <typename T>
KvCache<T>::KvCache(const DenoiserConfig& cfg)
    : d_model_(static_cast<std::size_t>(cfg.d_model)),
      keys_(cfg.n_layers, Tensor<T>::matrix(0, d_model_)),
      values_(cfg.n_layers, Tensor<T>::matrix(0, d_model_)) {}

template <typename T>
void KvCache<T>::append(const std::vector<Tensor<T>>& k, const std::vector<Tensor<T>>& v,
                        std::size_t rows) {
  if (k.size() != keys_.size() || v.size() != values_.size()) {
    throw StateError("kv cache append: layer count mismatch");
  }
  if (rows == 0) return;
  auto grow = [&](Tensor<T>& slab, const Tensor<T>& add) {
    if (add.rows() < rows || add.cols() != d_model_) throw StateError("kv cache append: bad slab");
    std::vector<T> data(slab.values().begin(), slab.values().end());
    data.insert(data.end(), add.data(), add.data() + rows * d_model_);
    slab = Tensor<T>(Shape{length_ + rows, d_model_}, std::move(data));
  };
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    grow(keys_[l], k[l]);
    grow(values_[l], v[l]);
  }
  length_ += rows;
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Transformer<T>::parameter_layout(
    const DenoiserConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto c = static_cast<std::size_t>(cfg.n_classes());
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"tok_emb", {c, d}});
  out.push_back({"pos_emb", {static_cast<std::size_t>(cfg.max_len), d}});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", {d}});
    out.push_back({p + "ln1.b", {d}});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      out.push_back({p + "attn." + w, {d, d}});
      out.push_back({p + "attn.b" + std::string(w + 1), {d}});
    }
    out.push_back({p + "ln2.g", {d}});
    out.push_back({p + "ln2.b", {d}});
    out.push_back({p + "mlp.w1", {d, 4 * d}});
    out.push_back({p + "mlp.b1", {4 * d}});
    out.push_back({p + "mlp.w2", {4 * d, d}});
    out.push_back({p + "mlp.b2", {d}});
  }
  out.push_back({"ln_f.g", {d}});
  out.push_back({"ln_f.b", {d}});
  out.push_back({"head.w", {d, c}});
  out.push_back({"head.b", {c}});
  return out;
}

template <typename T>
Transformer<T>::Transformer(DenoiserConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, "init"));
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg_.n_layers);
  for (auto& [name, shape] : parameter_layout(cfg_)) {
    Tensor<T> t(shape);
    const bool is_gain = name.ends_with(".g");
    if (is_gain) {
      t.fill(T(1));
    } else if (shape.size() == 2) {
      const bool residual = name.ends_with("attn.wo") || name.ends_with("mlp.w2");
      const double std = 0.02 * (residual ? resid_scale : 1.0);
      for (auto& e : t.values()) e = static_cast<T>(std * rng.normal());
    }
    params_.add(name, std::move(t));
  }
}

template <typename T>
Transformer<T>::Transformer(DenoiserConfig cfg, ParamStore<T> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  const auto layout = parameter_layout(cfg_);
  if (layout.size() != params_.size()) {
    throw ConfigError("parameter count " + std::to_string(params_.size()) +
                      " does not match model config (" + std::to_string(layout.size()) + ")");
  }
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (params_.value(name).shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " +
                        shape_string(params_.value(name).shape()) + ", expected " +
                        shape_string(shape));
    }
  }
}

template <typename T>
std::unique_ptr<DecodeCache> Transformer<T>::new_cache() const {
  return std::make_unique<KvCache<T>>(cfg_);
}

template <typename T>
typename Transformer<T>::Output Transformer<T>::forward(ad::Tape<T>& tape,
                                                        std::span<const Token> tokens,
                                                        std::span<const int> positions,
                                                        const BoolMatrix& allow,
                                                        const KvCache<T>* prefix,
                                                        std::size_t logits_begin,
                                                        std::size_t logits_end) const {
  using namespace ad;
  if (positions.size() != tokens.size()) throw DimensionError("forward: positions/tokens length");
  const auto P = [&](const std::string& name) { return tape.parameter(params_, name); };

  Var x = add(tape, embedding(tape, P("tok_emb"), tokens), embedding(tape, P("pos_emb"), positions));
  Output out;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Var h = layer_norm(tape, x, P(p + "ln1.g"), P(p + "ln1.b"));
    Var q = add_row(tape, matmul(tape, h, P(p + "attn.wq")), P(p + "attn.bq"));
    Var k = add_row(tape, matmul(tape, h, P(p + "attn.wk")), P(p + "attn.bk"));
    Var v = add_row(tape, matmul(tape, h, P(p + "attn.wv")), P(p + "attn.bv"));
    out.keys.push_back(k);
    out.values.push_back(v);
    Var k_all = k, v_all = v;
    if (prefix && prefix->length() > 0) {
      k_all = concat_rows(tape, tape.constant(prefix->keys(l)), k);
      v_all = concat_rows(tape, tape.constant(prefix->values(l)), v);
    }
    Var a = attention(tape, q, k_all, v_all, static_cast<std::size_t>(cfg_.n_heads), allow);
    Var o = add_row(tape, matmul(tape, a, P(p + "attn.wo")), P(p + "attn.bo"));
    x = add(tape, x, o);
    Var h2 = layer_norm(tape, x, P(p + "ln2.g"), P(p + "ln2.b"));
    Var m = gelu(tape, add_row(tape, matmul(tape, h2, P(p + "mlp.w1")), P(p + "mlp.b1")));
    m = add_row(tape, matmul(tape, m, P(p + "mlp.w2")), P(p + "mlp.b2"));
    x = add(tape, x, m);
  }
  Var xs = slice_rows(tape, x, logits_begin, logits_end);
  Var hf = layer_norm(tape, xs, P("ln_f.g"), P("ln_f.b"));
  Var logits = add_row(tape, matmul(tape, hf, P("head.w")), P("head.b"));
  // The mask class is never a target and never emitted.
  out.logits = slice_cols(tape, logits, 0, static_cast<std::size_t>(cfg_.vocab_size));
  return out;
}

template <typename T>
Tensor<double> Transformer<T>::do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                                           const BlockLayout& layout, std::size_t append,
                                           std::size_t n_out) const {
  auto* kv = dynamic_cast<KvCache<T>*>(&cache);
  if (!kv) throw StateError("cache was not created by this model");
  const std::size_t c = kv->length();
  const std::size_t n = tokens.size();

  std::vector<int> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(c + i);
  BoolMatrix allow(n, c + n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c + n; ++j)
      allow.set(i, j, rule_ == AttentionRule::kBidirectional || layout.visible(c + i, j));

  ad::Tape<T> tape(/*record=*/false);
  Output out = forward(tape, tokens, positions, allow, kv, n - n_out, n);
  if (append > 0) {
    std::vector<Tensor<T>> k, v;
    for (std::size_t l = 0; l < out.keys.size(); ++l) {
      k.push_back(tape.value(out.keys[l]));
      v.push_back(tape.value(out.values[l]));
    }
    kv->append(k, v, append);
  }
  return tape.value(out.logits).template cast<double>();
}

template class KvCache<float>;
template class KvCache<double>;
template class Transformer<float>;
template class Transformer<double>;

}  // namespace sbd
