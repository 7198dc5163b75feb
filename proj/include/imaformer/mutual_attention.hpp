#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "imaformer/tensor.hpp"
#include "imaformer/vit.hpp"

namespace imaformer {

// representation path: the mutual-attention mechanism or the no-swap baseline
enum class Variant { Imaformer, Vanilla };

inline std::string to_string(Variant v) {
  return v == Variant::Imaformer ? "imaformer" : "vanilla";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "imaformer") return Variant::Imaformer;
  if (s == "vanilla") return Variant::Vanilla;
  throw std::invalid_argument("unknown variant '" + s + "' (expected imaformer or vanilla)");
}

struct ClassPrototype {
  std::size_t class_id = 0;
  TokenSequence tokens;  // elementwise mean over the K support sequences
};

// K-shot prototype: mean of the CLS vectors and of each patch row
inline TokenSequence prototype_tokens(const std::vector<TokenSequence>& support) {
  if (support.empty()) throw std::invalid_argument("prototype_tokens: no support sequences");
  std::vector<Tensor> cls_parts, patch_parts;
  cls_parts.reserve(support.size());
  patch_parts.reserve(support.size());
  for (const auto& seq : support) {
    cls_parts.push_back(seq.cls);
    patch_parts.push_back(seq.patches);
  }
  TokenSequence proto;
  proto.cls = average(cls_parts);
  proto.patches = average(patch_parts);
  return proto;
}

// the combined sequences: P' keeps the prototype CLS over the query's
// patches, Q' keeps the query CLS over the prototype's patches
inline std::pair<TokenSequence, TokenSequence> swap_tokens(const TokenSequence& proto,
                                                           const TokenSequence& query) {
  if (proto.patches.shape() != query.patches.shape() || proto.cls.shape() != query.cls.shape())
    throw std::invalid_argument("swap_tokens: sequence shapes disagree: " +
                                shape_str(proto.patches.shape()) + " vs " +
                                shape_str(query.patches.shape()));
  TokenSequence p_prime{proto.cls, query.patches};
  TokenSequence q_prime{query.cls, proto.patches};
  return {std::move(p_prime), std::move(q_prime)};
}

namespace detail {

// bare form: single-head CLS attention over [cls | patches] followed by the
// FFN, with no normalization or residuals
inline Tensor bare_class_attention(const TokenSequence& seq, const BlockParams& blk,
                                   const ModelConfig& cfg) {
  Tensor tokens = concat_rows({as_row(seq.cls), seq.patches});
  Tensor q = add_bias(matmul(as_row(seq.cls), blk.w_q), blk.b_q);     // {1, d}
  Tensor k = add_bias(matmul(tokens, blk.w_k), blk.b_k);              // {M+1, d}
  Tensor v = add_bias(matmul(tokens, blk.w_v), blk.b_v);              // {M+1, d}
  Tensor weights = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(cfg.dim))), 1);
  Tensor attended = matmul(weights, v);  // {1, d}
  Tensor f = add_bias(matmul(gelu(add_bias(matmul(attended, blk.ffn_w1), blk.ffn_b1)),
                             blk.ffn_w2),
                      blk.ffn_b2);
  return row(f, 0);
}

// default form: the block's multi-head attention with the CLS token as the
// only attention query, inside the usual pre-norm residual structure
inline Tensor block_class_attention(const TokenSequence& seq, const BlockParams& blk,
                                    const ModelConfig& cfg) {
  std::size_t d = cfg.dim, heads = cfg.heads, hd = cfg.head_dim();
  Tensor tokens = concat_rows({as_row(seq.cls), seq.patches});
  Tensor h = layer_norm(tokens, blk.ln1_gamma, blk.ln1_beta, kLayerNormEps);
  Tensor q = add_bias(matmul(slice_rows(h, 0, 1), blk.w_q), blk.b_q);  // {1, d}
  Tensor k = add_bias(matmul(h, blk.w_k), blk.b_k);
  Tensor v = add_bias(matmul(h, blk.w_v), blk.b_v);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t hi = 0; hi < heads; ++hi) {
    Tensor qh = slice_cols(q, hi * hd, (hi + 1) * hd);
    Tensor kh = slice_cols(k, hi * hd, (hi + 1) * hd);
    Tensor vh = slice_cols(v, hi * hd, (hi + 1) * hd);
    Tensor weights = softmax(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(hd))), 1);
    head_outputs.push_back(matmul(weights, vh));
  }
  Tensor att = add_bias(matmul(concat_cols(head_outputs), blk.w_o), blk.b_o);  // {1, d}
  Tensor x1 = add(as_row(seq.cls), att);
  Tensor h2 = layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, kLayerNormEps);
  Tensor f = add_bias(matmul(gelu(add_bias(matmul(h2, blk.ffn_w1), blk.ffn_b1)), blk.ffn_w2),
                      blk.ffn_b2);
  return row(add(x1, f), 0);
}

}  // namespace detail

// Final-layer representation of a (possibly swapped) token sequence. The
// attention query is the CLS token only; keys and values span all M+1 tokens.
// Config flags switch to the bare-equation form or to ordinary full
// self-attention with CLS extraction.
inline Tensor final_class_attention(const TokenSequence& seq, const BlockParams& blk,
                                    const ModelConfig& cfg) {
  if (seq.cls.rank() != 1 || seq.cls.extent(0) != cfg.dim ||
      seq.patches.rank() != 2 || seq.patches.extent(1) != cfg.dim)
    throw std::invalid_argument("final_class_attention: sequence shapes " +
                                shape_str(seq.cls.shape()) + "/" +
                                shape_str(seq.patches.shape()) + " do not match dim " +
                                std::to_string(cfg.dim));
  if (cfg.final_full_self_attention) {
    Tensor tokens = concat_rows({as_row(seq.cls), seq.patches});
    return row(encoder_block(tokens, blk, cfg.heads), 0);
  }
  if (cfg.bare_class_attention) return detail::bare_class_attention(seq, blk, cfg);
  return detail::block_class_attention(seq, blk, cfg);
}

// Per-query result: the N scores plus both sides' enhanced CLS vectors,
// retained for embedding export.
struct EpisodeScoresRow {
  std::vector<Tensor> cls_proto;  // CLS_p_i, prototype CLS over query patches
  std::vector<Tensor> cls_query;  // CLS_q_i, query CLS over prototype patches
  Tensor scores;                  // {N}; each entry in [-N, N]
};

// For each class i: swap tokens with the query, run the final layer on both
// combined sequences. score(j) sums cos(CLS_q_i, CLS_p_j) over all i, the
// cross terms included (diagonal_scores reduces to the i == j term only).
inline EpisodeScoresRow episode_scores(const std::vector<ClassPrototype>& protos,
                                       const TokenSequence& query, const BlockParams& last_block,
                                       const ModelConfig& cfg) {
  std::size_t n = protos.size();
  if (n < 2) throw std::invalid_argument("episode_scores: need at least 2 prototypes");
  EpisodeScoresRow out;
  out.cls_proto.reserve(n);
  out.cls_query.reserve(n);
  for (const auto& proto : protos) {
    auto [p_prime, q_prime] = swap_tokens(proto.tokens, query);
    out.cls_proto.push_back(final_class_attention(p_prime, last_block, cfg));
    out.cls_query.push_back(final_class_attention(q_prime, last_block, cfg));
  }
  std::vector<Tensor> per_class;
  per_class.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (cfg.diagonal_scores) {
      per_class.push_back(cosine_similarity(out.cls_query[j], out.cls_proto[j]));
    } else {
      std::vector<Tensor> terms;
      terms.reserve(n);
      for (std::size_t i = 0; i < n; ++i)
        terms.push_back(cosine_similarity(out.cls_query[i], out.cls_proto[j]));
      per_class.push_back(sum(stack_scalars(terms)));
    }
  }
  out.scores = stack_scalars(per_class);
  return out;
}

// No-swap baseline: every image is encoded by the full L-block backbone and
// scored by a single cosine against each class prototype CLS.
inline Tensor vanilla_scores(const std::vector<Tensor>& protos_cls, const Tensor& query_image,
                             const ModelParams& params, const ModelConfig& cfg) {
  if (protos_cls.size() < 2)
    throw std::invalid_argument("vanilla_scores: need at least 2 prototypes");
  Tensor query_cls = encode_full_cls(query_image, params, cfg);
  std::vector<Tensor> terms;
  terms.reserve(protos_cls.size());
  for (const auto& proto : protos_cls)
    terms.push_back(cosine_similarity(query_cls, proto));
  return stack_scalars(terms);
}

// softmax over temperature-scaled scores; argmax is the prediction
inline Tensor classify(const Tensor& scores, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("classify: temperature must be positive");
  return softmax(scale(scores, tau), 0);
}

// first index attaining the maximum (deterministic tie handling)
inline std::size_t argmax_index(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace imaformer
