#pragma once

// Transformer building blocks and the text / feature encoders.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lovis/optim.hpp"
#include "lovis/tensor.hpp"
#include "lovis/world.hpp"

namespace lovis {

inline constexpr std::size_t kMaxTextLength = 64;

struct TokenizedText {
  std::vector<std::size_t> ids;    // always max_len long, PAD-filled
  std::vector<std::uint8_t> mask;  // 1 on real tokens
  std::size_t length = 0;          // real tokens including [CLS] and [SEP]
};

// [CLS] w_1 … w_n [SEP] padded to max_len; on overflow the words are cut so
// that [SEP] sits at position max_len − 1.
TokenizedText tokenize(const std::vector<std::string>& words, const Vocabulary& vocab,
                       std::size_t max_len = kMaxTextLength);
TokenizedText tokenize_ids(const std::vector<std::size_t>& word_ids, std::size_t max_len = kMaxTextLength);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t n_text = 2;
  std::size_t n_cross = 1;
  std::size_t d_ff = 128;
  std::size_t d_v = 64;
  std::size_t max_len = kMaxTextLength;
  std::size_t vocab_size = 57;
  double init_std = 0.02;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Creates and registers parameters under a common prefix.
class ParamFactory {
 public:
  ParamFactory(ParameterSet& params, std::mt19937_64& rng, double init_std)
      : params_(params), rng_(rng), init_std_(init_std) {}

  Tensor weight(const std::string& name, Shape shape);
  Tensor zeros(const std::string& name, Shape shape);
  Tensor ones(const std::string& name, Shape shape);
  Tensor values(const std::string& name, Shape shape, std::vector<double> init);

 private:
  ParameterSet& params_;
  std::mt19937_64& rng_;
  double init_std_;
};

struct Linear {
  Tensor w;  // in × out
  Tensor b;  // 1 × out, undefined when bias-free

  static Linear make(ParamFactory& f, const std::string& name, std::size_t in, std::size_t out, bool bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm make(ParamFactory& f, const std::string& name, std::size_t d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Projected keys and values of a sequence, reusable across queries.
struct KeyValue {
  Tensor k;
  Tensor v;
};

// Post-norm transformer layer: h = LN(q + MHA(q, kv)), out = LN(h + FFN(h)).
struct AttentionBlock {
  Linear q, k, v, o;
  LayerNorm ln_attn;
  Linear ff_in, ff_out;
  LayerNorm ln_ff;
  std::size_t heads = 1;

  static AttentionBlock make(ParamFactory& f, const std::string& name, const ModelConfig& cfg);

  KeyValue project(const Tensor& kv) const;
  Tensor forward(const Tensor& query, const KeyValue& kv, std::span<const std::uint8_t> key_mask = {},
                 Tensor* probs = nullptr) const;
  Tensor forward(const Tensor& query, const Tensor& kv, std::span<const std::uint8_t> key_mask = {},
                 Tensor* probs = nullptr) const {
    return forward(query, project(kv), key_mask, probs);
  }
  Tensor self(const Tensor& x, std::span<const std::uint8_t> mask = {}, Tensor* probs = nullptr) const {
    return forward(x, x, mask, probs);
  }
};

struct CrossOutput {
  Tensor query;  // updated query-side rows (state and features)
  Tensor text;   // updated key/value-side rows; undefined when not requested
  Tensor attention;  // head-averaged query→key weights of the last layer
};

// Bidirectional cross-modal exchange. The query side attends to the text and
// the text attends to the query side; each then passes its own feed-forward.
struct CrossStack {
  std::vector<AttentionBlock> to_text;    // query rows attend text rows
  std::vector<AttentionBlock> from_text;  // text rows attend query rows

  static CrossStack make(ParamFactory& f, const std::string& name, const ModelConfig& cfg);

  // Key/value projections of `text` for the first layer.
  KeyValue project_text(const Tensor& text) const { return to_text.front().project(text); }

  // When want_text is false the text side of the final layer is skipped; it
  // cannot influence the query output.
  CrossOutput forward(const Tensor& query, const Tensor& text, std::span<const std::uint8_t> text_mask,
                      bool want_text = true, const KeyValue* first_layer_kv = nullptr) const;
};

struct TextEncoding {
  Tensor X;    // one row per real token, or max_len rows when encoded padded
  Tensor cls;  // 1 × d_model, row 0 of X
  TokenizedText tokens;

  std::vector<std::uint8_t> row_mask;  // visibility of each row of X

  std::size_t length() const { return tokens.length; }
};

// Token/position/type embeddings, the text stack and the three feature
// encoders. Type id 0 marks text and 1 marks the visual/orientation stream.
struct Encoders {
  ModelConfig config;
  Tensor tok_emb;
  Tensor pos_emb;
  Tensor type_emb;
  LayerNorm emb_ln;
  std::vector<AttentionBlock> text_layers;
  Linear vo_proj, o_proj, v_proj;
  LayerNorm vo_ln, o_ln, v_ln;

  static Encoders make(ParamFactory& f, const ModelConfig& cfg);

  // Sum of the three embeddings for the real tokens, before layer norm.
  Tensor embed_sum(const TokenizedText& text, bool padded = false) const;
  Tensor embed_text(const TokenizedText& text, bool padded = false) const { return emb_ln(embed_sum(text, padded)); }
  // By default only the real rows are encoded: padded keys get exactly zero
  // attention weight, so the real rows match a padded encoding bit for bit.
  // `padded` runs all max_len rows under the key mask; `layer_probs` collects
  // each layer's head-averaged attention matrix.
  TextEncoding encode_text(const TokenizedText& text, bool padded = false,
                           std::vector<Tensor>* layer_probs = nullptr) const;

  // Rows are LN(W·feature + b + type embedding 1).
  Tensor encode_vision_orientation(const Tensor& V, const Tensor& O) const;
  Tensor encode_orientation(const Tensor& O) const;
  Tensor encode_vision(const Tensor& V) const;

 private:
  Tensor finish_feature(const Tensor& projected, const LayerNorm& ln) const;
};

// Vision (k × d_v) and orientation (k × 128) matrices of a candidate set.
Tensor vision_matrix(const CandidateSet& cands);
Tensor orientation_matrix(const CandidateSet& cands);

}  // namespace lovis
