#include "lovis/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "lovis/errors.hpp"

namespace lovis {

TokenizedText tokenize_ids(const std::vector<std::size_t>& word_ids, std::size_t max_len) {
  if (max_len < 2) throw ContractError("tokenize: max_len must be at least 2");
  TokenizedText out;
  out.ids.assign(max_len, Vocabulary::kPad);
  out.mask.assign(max_len, 0);
  const std::size_t words = std::min(word_ids.size(), max_len - 2);
  out.ids[0] = Vocabulary::kCls;
  std::copy_n(word_ids.begin(), words, out.ids.begin() + 1);
  out.ids[words + 1] = Vocabulary::kSep;
  out.length = words + 2;
  std::fill_n(out.mask.begin(), out.length, 1);
  return out;
}

TokenizedText tokenize(const std::vector<std::string>& words, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::size_t> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  return tokenize_ids(ids, max_len);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (d_model < 2) fail("d_model must be at least 2");
  if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (n_text == 0 || n_text > 9) fail("n_text must be in [1, 9]");
  if (n_cross == 0 || n_cross > 4) fail("n_cross must be in [1, 4]");
  if (d_ff == 0) fail("d_ff must be positive");
  if (d_v == 0) fail("d_v must be positive");
  if (max_len < 2) fail("max_len must be at least 2");
  if (vocab_size < 5) fail("vocab_size too small");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

// ---------------------------------------------------------------------------

Tensor ParamFactory::weight(const std::string& name, Shape shape) {
  return params_.add(name, Tensor::randn(std::move(shape), init_std_, rng_));
}

Tensor ParamFactory::zeros(const std::string& name, Shape shape) {
  return params_.add(name, Tensor::zeros(std::move(shape)));
}

Tensor ParamFactory::ones(const std::string& name, Shape shape) {
  return params_.add(name, Tensor::full(std::move(shape), 1.0));
}

Tensor ParamFactory::values(const std::string& name, Shape shape, std::vector<double> init) {
  return params_.add(name, Tensor::from(std::move(shape), std::move(init)));
}

Linear Linear::make(ParamFactory& f, const std::string& name, std::size_t in, std::size_t out, bool bias) {
  Linear l;
  l.w = f.weight(name + ".w", {in, out});
  if (bias) l.b = f.zeros(name + ".b", {1, out});
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, w);
  return b.defined() ? add_rowvec(y, b) : y;
}

LayerNorm LayerNorm::make(ParamFactory& f, const std::string& name, std::size_t d) {
  return {f.ones(name + ".g", {1, d}), f.zeros(name + ".b", {1, d})};
}

AttentionBlock AttentionBlock::make(ParamFactory& f, const std::string& name, const ModelConfig& cfg) {
  AttentionBlock b;
  const std::size_t d = cfg.d_model;
  b.q = Linear::make(f, name + ".q", d, d);
  // A key bias only shifts every logit of a query row equally; softmax
  // ignores it, so it would be a parameter with identically zero gradient.
  b.k = Linear::make(f, name + ".k", d, d, false);
  b.v = Linear::make(f, name + ".v", d, d);
  b.o = Linear::make(f, name + ".o", d, d);
  b.ln_attn = LayerNorm::make(f, name + ".ln1", d);
  b.ff_in = Linear::make(f, name + ".ff1", d, cfg.d_ff);
  b.ff_out = Linear::make(f, name + ".ff2", cfg.d_ff, d);
  b.ln_ff = LayerNorm::make(f, name + ".ln2", d);
  b.heads = cfg.heads;
  return b;
}

KeyValue AttentionBlock::project(const Tensor& kv) const { return {k(kv), v(kv)}; }

Tensor AttentionBlock::forward(const Tensor& query, const KeyValue& kv, std::span<const std::uint8_t> key_mask,
                               Tensor* probs) const {
  Tensor ctx = attention(q(query), kv.k, kv.v, heads, key_mask, probs);
  Tensor h = ln_attn(add(query, o(ctx)));
  return ln_ff(add(h, ff_out(gelu(ff_in(h)))));
}

CrossStack CrossStack::make(ParamFactory& f, const std::string& name, const ModelConfig& cfg) {
  CrossStack s;
  for (std::size_t i = 0; i < cfg.n_cross; ++i) {
    s.to_text.push_back(AttentionBlock::make(f, name + ".cross" + std::to_string(i) + ".q2t", cfg));
    s.from_text.push_back(AttentionBlock::make(f, name + ".cross" + std::to_string(i) + ".t2q", cfg));
  }
  return s;
}

CrossOutput CrossStack::forward(const Tensor& query, const Tensor& text, std::span<const std::uint8_t> text_mask,
                                bool want_text, const KeyValue* first_layer_kv) const {
  CrossOutput out;
  Tensor y = query;
  Tensor x = text;
  for (std::size_t i = 0; i < to_text.size(); ++i) {
    const bool last = i + 1 == to_text.size();
    Tensor* probs = last ? &out.attention : nullptr;
    Tensor y_next = (i == 0 && first_layer_kv) ? to_text[i].forward(y, *first_layer_kv, text_mask, probs)
                                               : to_text[i].forward(y, x, text_mask, probs);
    if (!last || want_text) x = from_text[i].forward(x, y);
    y = y_next;
  }
  out.query = y;
  if (want_text) out.text = x;
  return out;
}

// ---------------------------------------------------------------------------

Encoders Encoders::make(ParamFactory& f, const ModelConfig& cfg) {
  cfg.validate();
  Encoders e;
  e.config = cfg;
  const std::size_t d = cfg.d_model;
  e.tok_emb = f.weight("text.tok_emb", {cfg.vocab_size, d});
  e.pos_emb = f.weight("text.pos_emb", {cfg.max_len, d});
  e.type_emb = f.weight("text.type_emb", {2, d});
  e.emb_ln = LayerNorm::make(f, "text.emb_ln", d);
  for (std::size_t i = 0; i < cfg.n_text; ++i) {
    e.text_layers.push_back(AttentionBlock::make(f, "text.layer" + std::to_string(i), cfg));
  }
  e.vo_proj = Linear::make(f, "enc.vo", cfg.d_v + kOrientationDim, d);
  e.vo_ln = LayerNorm::make(f, "enc.vo_ln", d);
  e.o_proj = Linear::make(f, "enc.o", kOrientationDim, d);
  e.o_ln = LayerNorm::make(f, "enc.o_ln", d);
  e.v_proj = Linear::make(f, "enc.v", cfg.d_v, d);
  e.v_ln = LayerNorm::make(f, "enc.v_ln", d);
  return e;
}

Tensor Encoders::embed_sum(const TokenizedText& text, bool padded) const {
  if (text.ids.size() > config.max_len) {
    throw DimensionError("embed_text: " + std::to_string(text.ids.size()) + " ids exceed max_len " +
                         std::to_string(config.max_len));
  }
  const std::size_t n = padded ? text.ids.size() : text.length;
  std::vector<std::size_t> ids(text.ids.begin(), text.ids.begin() + n);
  for (std::size_t id : ids) {
    if (id >= config.vocab_size) throw IndexError("embed_text: token id " + std::to_string(id) + " out of range");
  }
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  const std::vector<std::size_t> types(n, 0);
  return add(add(embedding(tok_emb, ids), embedding(pos_emb, positions)), embedding(type_emb, types));
}

TextEncoding Encoders::encode_text(const TokenizedText& text, bool padded, std::vector<Tensor>* layer_probs) const {
  TextEncoding enc;
  enc.tokens = text;
  Tensor x = embed_text(text, padded);
  if (padded) {
    enc.row_mask = text.mask;
  } else {
    enc.row_mask.assign(text.length, 1);
  }
  for (const auto& layer : text_layers) {
    Tensor probs;
    x = layer.self(x, enc.row_mask, layer_probs ? &probs : nullptr);
    if (layer_probs) layer_probs->push_back(probs);
  }
  enc.X = x;
  enc.cls = slice_rows(x, 0, 1);
  return enc;
}

Tensor Encoders::finish_feature(const Tensor& projected, const LayerNorm& ln) const {
  return ln(add_rowvec(projected, slice_rows(type_emb, 1, 1)));
}

Tensor Encoders::encode_vision_orientation(const Tensor& V, const Tensor& O) const {
  if (V.rows() != O.rows()) {
    throw DimensionError("encode_vision_orientation: V " + shape_str(V.shape()) + " and O " + shape_str(O.shape()) +
                         " differ in row count");
  }
  return finish_feature(vo_proj(concat_cols(V, O)), vo_ln);
}

Tensor Encoders::encode_orientation(const Tensor& O) const { return finish_feature(o_proj(O), o_ln); }

Tensor Encoders::encode_vision(const Tensor& V) const { return finish_feature(v_proj(V), v_ln); }

Tensor vision_matrix(const CandidateSet& cands) {
  if (cands.items.empty()) throw ContractError("vision_matrix: empty candidate set");
  const std::size_t d = cands.items.front().vision.size();
  std::vector<double> data;
  data.reserve(cands.size() * d);
  for (const auto& c : cands.items) data.insert(data.end(), c.vision.begin(), c.vision.end());
  return Tensor::from({cands.size(), d}, std::move(data));
}

Tensor orientation_matrix(const CandidateSet& cands) {
  if (cands.items.empty()) throw ContractError("orientation_matrix: empty candidate set");
  std::vector<double> data;
  data.reserve(cands.size() * kOrientationDim);
  for (const auto& c : cands.items) data.insert(data.end(), c.orientation.begin(), c.orientation.end());
  return Tensor::from({cands.size(), kOrientationDim}, std::move(data));
}

}  // namespace lovis
