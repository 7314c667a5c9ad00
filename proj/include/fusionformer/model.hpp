#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fusionformer/config.hpp"
#include "fusionformer/data.hpp"
#include "fusionformer/errors.hpp"
#include "fusionformer/fusion.hpp"
#include "fusionformer/tensor.hpp"

namespace fusionformer {

// Per-call forward context. Dropout fires only while training with an RNG.
struct Pass {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!training || dropout <= 0.0 || rng == nullptr) return x;
    return fusionformer::dropout(x, dropout, *rng, true);
  }
};

inline Tensor clone_values(const Tensor& t, bool requires_grad) {
  return Tensor::from_data(t.shape(), t.data(), requires_grad);
}

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams init(int d) {
    LayerNormParams p;
    p.gain = Tensor({d}, 1.0, true);
    p.bias = Tensor({d}, 0.0, true);
    return p;
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// One multi-head attention with its own projections. The same module runs
// either as bi-attention (queries from the current state, keys/values from
// an auxiliary state, no mask) or as causal self-attention.
struct AttentionModule {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  int n_heads = 1;

  static AttentionModule init(int d, int heads, Rng& rng) {
    AttentionModule m;
    m.n_heads = heads;
    m.w_q = Tensor::randn({d, d}, rng, 0.02, true);
    m.b_q = Tensor({d}, 0.0, true);
    m.w_k = Tensor::randn({d, d}, rng, 0.02, true);
    m.b_k = Tensor({d}, 0.0, true);
    m.w_v = Tensor::randn({d, d}, rng, 0.02, true);
    m.b_v = Tensor({d}, 0.0, true);
    m.w_o = Tensor::randn({d, d}, rng, 0.02, true);
    m.b_o = Tensor({d}, 0.0, true);
    return m;
  }

  // Deep copy; the three attentions of a decoder layer start from the same
  // values and then diverge.
  AttentionModule clone() const {
    AttentionModule m;
    m.n_heads = n_heads;
    m.w_q = clone_values(w_q, true);
    m.b_q = clone_values(b_q, true);
    m.w_k = clone_values(w_k, true);
    m.b_k = clone_values(b_k, true);
    m.w_v = clone_values(w_v, true);
    m.b_v = clone_values(b_v, true);
    m.w_o = clone_values(w_o, true);
    m.b_o = clone_values(b_o, true);
    return m;
  }

  // Queries from h_c [L_c,d], keys/values from h_a [L_a,d]; no mask.
  Tensor bi_attention(const Tensor& h_c, const Tensor& h_a, const Pass& pass = {}) const {
    return attention_impl(h_c, h_a, /*causal=*/false, pass);
  }

  // Causal self-attention over h_c; position i sees positions 0..i.
  Tensor self_attention(const Tensor& h_c, const Pass& pass = {}) const {
    return attention_impl(h_c, h_c, /*causal=*/true, pass);
  }

  Tensor attention_impl(const Tensor& h_c, const Tensor& h_a, bool causal,
                        const Pass& pass) const {
    const int d = w_q.rows();
    if (h_c.ndim() != 2 || h_c.cols() != d || h_a.ndim() != 2 || h_a.cols() != d)
      throw DimensionError("attention: width mismatch, module d=" + std::to_string(d) +
                           " vs inputs " + detail::shape_str(h_c.shape()) + ", " +
                           detail::shape_str(h_a.shape()));
    const int dh = d / n_heads;
    Tensor q = add_rowvec(matmul(h_c, w_q), b_q);
    Tensor k = add_rowvec(matmul(h_a, w_k), b_k);
    Tensor v = add_rowvec(matmul(h_a, w_v), b_v);
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, dh);
      Tensor kh = slice_cols(k, h * dh, dh);
      Tensor vh = slice_cols(v, h * dh, dh);
      Tensor scores = scale(matmul_nt(qh, kh), inv_scale);
      Tensor probs = causal ? causal_softmax_rows(scores) : softmax_rows(scores);
      heads.push_back(matmul(pass.drop(probs), vh));
    }
    Tensor merged = n_heads == 1 ? heads[0] : concat_cols(heads);
    return pass.drop(add_rowvec(matmul(merged, w_o), b_o));
  }

  std::vector<Tensor> parameters() const { return {w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o}; }
};

// Spec-facing aliases for the two attention modes.
inline Tensor mh_bi_attention(const AttentionModule& m, const Tensor& h_c, const Tensor& h_a,
                              const Pass& pass = {}) {
  return m.bi_attention(h_c, h_a, pass);
}
inline Tensor mh_self_attention(const AttentionModule& m, const Tensor& h_c,
                                const Pass& pass = {}) {
  return m.self_attention(h_c, pass);
}

// Position-wise MLP with GELU and inner width 4d.
struct Mlp {
  Tensor w_fc, b_fc, w_proj, b_proj;

  static Mlp init(int d, Rng& rng) {
    Mlp m;
    m.w_fc = Tensor::randn({d, 4 * d}, rng, 0.02, true);
    m.b_fc = Tensor({4 * d}, 0.0, true);
    m.w_proj = Tensor::randn({4 * d, d}, rng, 0.02, true);
    m.b_proj = Tensor({d}, 0.0, true);
    return m;
  }

  Tensor forward(const Tensor& x, const Pass& pass = {}) const {
    Tensor h = gelu(add_rowvec(matmul(x, w_fc), b_fc));
    return pass.drop(add_rowvec(matmul(h, w_proj), b_proj));
  }

  std::vector<Tensor> parameters() const { return {w_fc, b_fc, w_proj, b_proj}; }
};

// Pre-norm block with fully bidirectional self-attention.
struct EncoderBlock {
  LayerNormParams ln1, ln2;
  AttentionModule attn;
  Mlp mlp;

  static EncoderBlock init(int d, int heads, Rng& rng) {
    EncoderBlock b;
    b.ln1 = LayerNormParams::init(d);
    b.attn = AttentionModule::init(d, heads, rng);
    b.ln2 = LayerNormParams::init(d);
    b.mlp = Mlp::init(d, rng);
    return b;
  }

  Tensor forward(const Tensor& x, const Pass& pass = {}) const {
    Tensor h = ln1.forward(x);
    Tensor x2 = add(x, attn.bi_attention(h, h, pass));
    return add(x2, mlp.forward(ln2.forward(x2), pass));
  }
};

// Decoder block: three attentions over the normalized current state (self,
// persona, history), fused into one update, then the GPT2 MLP.
struct DecoderBlock {
  LayerNormParams ln1, ln2;
  AttentionModule self_attn, persona_attn, history_attn;
  FusionParams fusion;

  Mlp mlp;

  static DecoderBlock init(int d, int heads, FusionMethod method, Rng& rng) {
    DecoderBlock b;
    b.ln1 = LayerNormParams::init(d);
    b.self_attn = AttentionModule::init(d, heads, rng);
    b.persona_attn = b.self_attn.clone();
    b.history_attn = b.self_attn.clone();
    b.ln2 = LayerNormParams::init(d);
    b.mlp = Mlp::init(d, rng);
    b.fusion = init_fusion_params(method, d, rng);
    return b;
  }

  Tensor forward(const Tensor& h_c, const Tensor& h_p, const Tensor& h_h,
                 const Pass& pass = {}) const {
    Tensor h = ln1.forward(h_c);
    Tensor a_c = self_attn.self_attention(h, pass);
    Tensor a_p = persona_attn.bi_attention(h, h_p, pass);
    Tensor a_h = history_attn.bi_attention(h, h_h, pass);
    Tensor a_f = fuse(fusion, a_c, a_p, a_h);
    Tensor x2 = add(h_c, a_f);
    return add(x2, mlp.forward(ln2.forward(x2), pass));
  }
};

struct Embeddings {
  Tensor tok, pos, type;

  static Embeddings init(int vocab, int max_positions, int n_types, int d, Rng& rng) {
    Embeddings e;
    e.tok = Tensor::randn({vocab, d}, rng, 0.02, true);
    e.pos = Tensor::randn({max_positions, d}, rng, 0.02, true);
    e.type = Tensor::randn({n_types, d}, rng, 0.02, true);
    return e;
  }
};

enum class SourceTag { kPersona, kHistory };

struct EncodedState {
  Tensor h;  // [L, d]
  SourceTag tag = SourceTag::kPersona;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool is_fusion = false;
};

struct SampleLogits {
  Tensor persona;  // [L_p, vocab]
  Tensor history;  // [L_h, vocab]
  Tensor reply;    // [L_c, vocab]
};

// The full encoder-decoder model. Encoder and decoder own disjoint
// parameters; the prediction layer is the decoder token-embedding table,
// applied to encoder and decoder outputs alike.
struct Model {
  ModelConfig cfg;
  Embeddings enc_emb, dec_emb;
  std::vector<EncoderBlock> enc_blocks;
  LayerNormParams enc_ln_f;
  std::vector<DecoderBlock> dec_blocks;
  LayerNormParams dec_ln_f;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    m.enc_emb = Embeddings::init(cfg.vocab_size, cfg.max_positions, cfg.n_token_types,
                                 cfg.d_model, rng);
    m.dec_emb = Embeddings::init(cfg.vocab_size, cfg.max_positions, cfg.n_token_types,
                                 cfg.d_model, rng);
    for (int i = 0; i < cfg.n_layers; ++i)
      m.enc_blocks.push_back(EncoderBlock::init(cfg.d_model, cfg.n_heads, rng));
    m.enc_ln_f = LayerNormParams::init(cfg.d_model);
    for (int i = 0; i < cfg.n_layers; ++i)
      m.dec_blocks.push_back(DecoderBlock::init(cfg.d_model, cfg.n_heads, cfg.fusion_method, rng));
    m.dec_ln_f = LayerNormParams::init(cfg.d_model);
    return m;
  }

  // Sum of token, position and type lookups from one embedding set.
  Tensor embed(const Embeddings& emb, const std::vector<int>& tokens,
               const std::vector<int>& positions, const std::vector<int>& types) const {
    if (tokens.size() != positions.size() || tokens.size() != types.size())
      throw DimensionError("embed: sequence lengths differ (tokens " +
                           std::to_string(tokens.size()) + ", positions " +
                           std::to_string(positions.size()) + ", types " +
                           std::to_string(types.size()) + ")");
    Tensor t = embedding_rows(emb.tok, tokens, "token");
    Tensor p = embedding_rows(emb.pos, positions, "position");
    Tensor y = embedding_rows(emb.type, types, "type");
    return add(add(t, p), y);
  }

  // Runs the bidirectional encoder stack over an already-embedded source.
  Tensor encode(const Tensor& source_embedding, const Pass& pass = {}) const {
    if (source_embedding.ndim() != 2 || source_embedding.cols() != cfg.d_model)
      throw DimensionError("encode: expected [L," + std::to_string(cfg.d_model) + "], got " +
                           detail::shape_str(source_embedding.shape()));
    if (source_embedding.rows() > cfg.max_positions)
      throw LengthError("encode: length " + std::to_string(source_embedding.rows()) +
                        " exceeds max_positions " + std::to_string(cfg.max_positions));
    Tensor x = pass.drop(source_embedding);
    for (const EncoderBlock& b : enc_blocks) x = b.forward(x, pass);
    return enc_ln_f.forward(x);
  }

  EncodedState encode_source(const SourceSeq& src, SourceTag tag, const Pass& pass = {}) const {
    Tensor e = embed(enc_emb, src.tokens, src.positions, src.types);
    return EncodedState{encode(e, pass), tag};
  }

  // Runs the decoder stack over the reply prefix given both encoded sources.
  Tensor decode(const SourceSeq& reply, const EncodedState& persona, const EncodedState& history,
                const Pass& pass = {}) const {
    if (reply.length() > cfg.max_positions)
      throw LengthError("decode: length " + std::to_string(reply.length()) +
                        " exceeds max_positions " + std::to_string(cfg.max_positions));
    Tensor x = pass.drop(embed(dec_emb, reply.tokens, reply.positions, reply.types));
    for (const DecoderBlock& b : dec_blocks) x = b.forward(x, persona.h, history.h, pass);
    return dec_ln_f.forward(x);
  }

  // Tied prediction head: logits = H * E^T with E the decoder token table.
  Tensor predict_logits(const Tensor& h) const {
    if (h.ndim() != 2 || h.cols() != cfg.d_model)
      throw DimensionError("predict_logits: expected [L," + std::to_string(cfg.d_model) +
                           "], got " + detail::shape_str(h.shape()));
    return matmul_nt(h, dec_emb.tok);
  }

  SampleLogits forward_item(const BatchItem& item, const Pass& pass = {}) const {
    EncodedState hp = encode_source(item.persona, SourceTag::kPersona, pass);
    EncodedState hh = encode_source(item.history, SourceTag::kHistory, pass);
    Tensor dec = decode(item.reply, hp, hh, pass);
    return SampleLogits{predict_logits(hp.h), predict_logits(hh.h), predict_logits(dec)};
  }

  Pass train_pass(Rng& rng) const { return Pass{true, cfg.dropout, &rng}; }

  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    auto push = [&out](const std::string& name, const Tensor& t, bool fusion = false) {
      out.push_back(NamedParam{name, t, fusion});
    };
    auto push_emb = [&push](const std::string& p, const Embeddings& e) {
      push(p + ".tok_emb", e.tok);
      push(p + ".pos_emb", e.pos);
      push(p + ".type_emb", e.type);
    };
    auto push_ln = [&push](const std::string& p, const LayerNormParams& ln) {
      push(p + ".gain", ln.gain);
      push(p + ".bias", ln.bias);
    };
    auto push_attn = [&push](const std::string& p, const AttentionModule& a) {
      push(p + ".w_q", a.w_q);
      push(p + ".b_q", a.b_q);
      push(p + ".w_k", a.w_k);
      push(p + ".b_k", a.b_k);
      push(p + ".w_v", a.w_v);
      push(p + ".b_v", a.b_v);
      push(p + ".w_o", a.w_o);
      push(p + ".b_o", a.b_o);
    };
    auto push_mlp = [&push](const std::string& p, const Mlp& m) {
      push(p + ".w_fc", m.w_fc);
      push(p + ".b_fc", m.b_fc);
      push(p + ".w_proj", m.w_proj);
      push(p + ".b_proj", m.b_proj);
    };

    push_emb("encoder", enc_emb);
    for (size_t i = 0; i < enc_blocks.size(); ++i) {
      const std::string p = "encoder.h" + std::to_string(i);
      push_ln(p + ".ln1", enc_blocks[i].ln1);
      push_attn(p + ".attn", enc_blocks[i].attn);
      push_ln(p + ".ln2", enc_blocks[i].ln2);
      push_mlp(p + ".mlp", enc_blocks[i].mlp);
    }
    push_ln("encoder.ln_f", enc_ln_f);

    push_emb("decoder", dec_emb);
    for (size_t i = 0; i < dec_blocks.size(); ++i) {
      const std::string p = "decoder.h" + std::to_string(i);
      const DecoderBlock& b = dec_blocks[i];
      push_ln(p + ".ln1", b.ln1);
      push_attn(p + ".self_attn", b.self_attn);
      push_attn(p + ".persona_attn", b.persona_attn);
      push_attn(p + ".history_attn", b.history_attn);
      switch (b.fusion.method) {
        case FusionMethod::kSw: push(p + ".fusion.sw", b.fusion.sw, true); break;
        case FusionMethod::kDw: push(p + ".fusion.dw", b.fusion.dw, true); break;
        case FusionMethod::kLinear:
          push(p + ".fusion.lin_w", b.fusion.lin_w, true);
          push(p + ".fusion.lin_b", b.fusion.lin_b, true);
          break;
        default: break;
      }
      push_ln(p + ".ln2", b.ln2);
      push_mlp(p + ".mlp", b.mlp);
    }
    push_ln("decoder.ln_f", dec_ln_f);
    return out;
  }

  void zero_grads() const {
    for (const NamedParam& p : named_params()) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }
};

// Per-layer fusion weights normalized to sum 1, for the weight-inspection
// export. Applies to the sw method directly; dw is averaged over feature
// dimensions after per-dimension normalization.
struct FusionWeightRow {
  int layer = 0;
  double w_current = 0.0;
  double w_persona = 0.0;
  double w_history = 0.0;
};

inline std::vector<FusionWeightRow> fusion_weight_rows(const Model& model) {
  const FusionMethod method = model.cfg.fusion_method;
  if (method != FusionMethod::kSw && method != FusionMethod::kDw)
    throw ContractError(std::string("fusion weight export applies to the sw and dw methods; "
                                    "this model uses '") +
                        to_string(method) + "'");
  std::vector<FusionWeightRow> rows;
  for (size_t i = 0; i < model.dec_blocks.size(); ++i) {
    const FusionParams& f = model.dec_blocks[i].fusion;
    FusionWeightRow row;
    row.layer = static_cast<int>(i);
    if (method == FusionMethod::kSw) {
      const double s = f.sw.data()[0] + f.sw.data()[1] + f.sw.data()[2];
      if (std::fabs(s) <= kFusionWeightEps)
        throw DegenerateWeightsError("layer " + std::to_string(i) + ": weight sum ~ 0");
      row.w_current = f.sw.data()[0] / s;
      row.w_persona = f.sw.data()[1] / s;
      row.w_history = f.sw.data()[2] / s;
    } else {
      const int d = f.dw.cols();
      for (int j = 0; j < d; ++j) {
        const double s = f.dw.at(0, j) + f.dw.at(1, j) + f.dw.at(2, j);
        if (std::fabs(s) <= kFusionWeightEps)
          throw DegenerateWeightsError("layer " + std::to_string(i) + ": weight sum ~ 0 at j=" +
                                       std::to_string(j));
        row.w_current += f.dw.at(0, j) / s / d;
        row.w_persona += f.dw.at(1, j) / s / d;
        row.w_history += f.dw.at(2, j) / s / d;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string fusion_weights_csv(const std::vector<FusionWeightRow>& rows) {
  std::string out = "layer,w_current,w_persona,w_history\n";
  for (const FusionWeightRow& r : rows) {
    out += std::to_string(r.layer) + "," + fmt_double(r.w_current) + "," +
           fmt_double(r.w_persona) + "," + fmt_double(r.w_history) + "\n";
  }
  return out;
}

}  // namespace fusionformer
