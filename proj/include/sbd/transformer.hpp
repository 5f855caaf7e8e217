#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sbd/autodiff.hpp"
#include "sbd/denoiser.hpp"
#include "sbd/layout.hpp"
#include "sbd/params.hpp"

namespace sbd {

struct DenoiserConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int vocab_size = 0;  // data symbols V; the mask token is V
  int max_len = 0;     // learned positional table length

  int n_classes() const { return vocab_size + 1; }
  Token mask_id() const { return vocab_size; }
  // Throws ConfigError on non-positive sizes or d_model % n_heads != 0.
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

// Which keys a query may see. kBlockCausal is the only correct rule;
// kBidirectional lets finalized blocks look at later ones and exists so the
// oracle suite can check that a broken mask is detected.
enum class AttentionRule { kBlockCausal, kBidirectional };

// Per-layer keys and values of the first length() finalized positions.
template <typename T>
class KvCache final : public DecodeCache {
 public:
  explicit KvCache(const DenoiserConfig& cfg);
  std::size_t length() const override { return length_; }
  const Tensor<T>& keys(std::size_t layer) const { return keys_[layer]; }
  const Tensor<T>& values(std::size_t layer) const { return values_[layer]; }
  // Appends the first `rows` rows of each per-layer slab.
  void append(const std::vector<Tensor<T>>& k, const std::vector<Tensor<T>>& v, std::size_t rows);

 private:
  std::size_t d_model_;
  std::size_t length_ = 0;
  std::vector<Tensor<T>> keys_;
  std::vector<Tensor<T>> values_;
};

// Pre-norm transformer denoiser: token + learned absolute position
// embeddings, n_layers of (LN -> MHA -> residual, LN -> GELU MLP(4d) ->
// residual), final LN, linear head over V + 1 classes. No time input.
template <typename T>
class Transformer final : public Denoiser {
 public:
  struct Output {
    ad::Var logits;               // [rows x V] data-class logits
    std::vector<ad::Var> keys;    // per layer, new rows only
    std::vector<ad::Var> values;
  };

  // Parameters are drawn from N(0, 0.02) (residual projections scaled by
  // 1/sqrt(2 n_layers)); biases zero, norm gains one.
  Transformer(DenoiserConfig cfg, std::uint64_t seed);
  // Adopts existing parameters; names and shapes must match the config.
  Transformer(DenoiserConfig cfg, ParamStore<T> params);

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  void set_attention_rule(AttentionRule rule) { rule_ = rule; }
  AttentionRule attention_rule() const { return rule_; }

  // Records a forward pass on `tape`. Rows carry tokens[i] at positional
  // index positions[i]; `allow` is [n x (prefix + n)] over keys ordered as
  // cached prefix then new rows. Logits are produced for rows
  // [logits_begin, logits_end) only.
  Output forward(ad::Tape<T>& tape, std::span<const Token> tokens,
                 std::span<const int> positions, const BoolMatrix& allow,
                 const KvCache<T>* prefix, std::size_t logits_begin,
                 std::size_t logits_end) const;

  int vocab_size() const override { return cfg_.vocab_size; }
  std::size_t max_len() const override { return static_cast<std::size_t>(cfg_.max_len); }
  std::unique_ptr<DecodeCache> new_cache() const override;

  // Expected parameter names and shapes for `cfg`, in canonical order.
  static std::vector<std::pair<std::string, Shape>> parameter_layout(const DenoiserConfig& cfg);

 protected:
  Tensor<double> do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                             const BlockLayout& layout, std::size_t append,
                             std::size_t n_out) const override;

 private:
  DenoiserConfig cfg_;
  ParamStore<T> params_;
  AttentionRule rule_ = AttentionRule::kBlockCausal;
};

}  // namespace sbd
