#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "imaformer/rng.hpp"
#include "imaformer/tensor.hpp"

namespace imaformer {

inline constexpr double kLayerNormEps = 1e-6;

// Architecture hyperparameters plus the mechanism toggles that change how the
// final layer is applied. `temperature` scales the cosine scores before the
// classification softmax.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t depth = 4;  // L, including the final mutual-attention layer
  std::size_t dim = 64;   // d
  std::size_t heads = 4;
  double mlp_ratio = 2.0;
  double temperature = 10.0;

  // off by default: run the final layer as ordinary full self-attention
  // instead of CLS-query class attention
  bool final_full_self_attention = false;
  // off by default: apply the final class attention without the surrounding
  // pre-norm residual block (single-head, bare FFN output)
  bool bare_class_attention = false;
  // off by default: score(j) = cos(CLS_q_j, CLS_p_j) instead of the full sum
  // over all query-side branches
  bool diagonal_scores = false;

  std::size_t patch_count() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(mlp_ratio * static_cast<double>(dim)); }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
      throw std::invalid_argument("ModelConfig: image_size " + std::to_string(image_size) +
                                  " not divisible by patch_size " + std::to_string(patch_size));
    if (channels == 0) throw std::invalid_argument("ModelConfig: channels must be positive");
    if (depth < 2)
      throw std::invalid_argument("ModelConfig: depth must be at least 2 (one encoding stage "
                                  "plus the final attention layer)");
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw std::invalid_argument("ModelConfig: dim " + std::to_string(dim) +
                                  " not divisible by heads " + std::to_string(heads));
    double hidden = mlp_ratio * static_cast<double>(dim);
    if (hidden < 1.0 || hidden != std::floor(hidden))
      throw std::invalid_argument("ModelConfig: mlp_ratio * dim must be a positive integer");
    if (temperature <= 0.0)
      throw std::invalid_argument("ModelConfig: temperature must be positive");
  }
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// All learnable weights. The final block (index depth-1) is the layer the
// mutual attention mechanism runs in; it shares no weights with the stage-1
// blocks.
struct ModelParams {
  Tensor patch_proj_w;  // (patch_size^2 * channels) x dim
  Tensor patch_proj_b;  // dim
  Tensor cls_token;     // dim
  Tensor pos_embed;     // (M+1) x dim, row 0 belongs to CLS
  std::vector<BlockParams> blocks;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto trunc = [&rng](Shape shape) {
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = rng.truncated_normal(0.02);
      return Tensor(std::move(shape), std::move(v), true);
    };
    std::size_t m = cfg.patch_count();
    std::size_t in = cfg.patch_size * cfg.patch_size * cfg.channels;
    std::size_t h = cfg.hidden_dim();

    ModelParams p;
    p.patch_proj_w = trunc({in, cfg.dim});
    p.patch_proj_b = Tensor::zeros({cfg.dim}, true);
    p.cls_token = trunc({cfg.dim});
    {
      std::vector<double> v((m + 1) * cfg.dim);
      for (auto& x : v) x = rng.normal(0.0, 0.02);
      p.pos_embed = Tensor({m + 1, cfg.dim}, std::move(v), true);
    }
    for (std::size_t b = 0; b < cfg.depth; ++b) {
      BlockParams blk;
      blk.ln1_gamma = Tensor::full({cfg.dim}, 1.0, true);
      blk.ln1_beta = Tensor::zeros({cfg.dim}, true);
      blk.w_q = trunc({cfg.dim, cfg.dim});
      blk.b_q = Tensor::zeros({cfg.dim}, true);
      blk.w_k = trunc({cfg.dim, cfg.dim});
      blk.b_k = Tensor::zeros({cfg.dim}, true);
      blk.w_v = trunc({cfg.dim, cfg.dim});
      blk.b_v = Tensor::zeros({cfg.dim}, true);
      blk.w_o = trunc({cfg.dim, cfg.dim});
      blk.b_o = Tensor::zeros({cfg.dim}, true);
      blk.ln2_gamma = Tensor::full({cfg.dim}, 1.0, true);
      blk.ln2_beta = Tensor::zeros({cfg.dim}, true);
      blk.ffn_w1 = trunc({cfg.dim, h});
      blk.ffn_b1 = Tensor::zeros({h}, true);
      blk.ffn_w2 = trunc({h, cfg.dim});
      blk.ffn_b2 = Tensor::zeros({cfg.dim}, true);
      p.blocks.push_back(std::move(blk));
    }
    return p;
  }

  // Fixed serialization order; also the checkpoint layout.
  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"patch_proj_w", &patch_proj_w},
        {"patch_proj_b", &patch_proj_b},
        {"cls_token", &cls_token},
        {"pos_embed", &pos_embed},
    };
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& blk = blocks[b];
      std::string pfx = "blocks[" + std::to_string(b) + "].";
      out.emplace_back(pfx + "ln1_gamma", &blk.ln1_gamma);
      out.emplace_back(pfx + "ln1_beta", &blk.ln1_beta);
      out.emplace_back(pfx + "w_q", &blk.w_q);
      out.emplace_back(pfx + "b_q", &blk.b_q);
      out.emplace_back(pfx + "w_k", &blk.w_k);
      out.emplace_back(pfx + "b_k", &blk.b_k);
      out.emplace_back(pfx + "w_v", &blk.w_v);
      out.emplace_back(pfx + "b_v", &blk.b_v);
      out.emplace_back(pfx + "w_o", &blk.w_o);
      out.emplace_back(pfx + "b_o", &blk.b_o);
      out.emplace_back(pfx + "ln2_gamma", &blk.ln2_gamma);
      out.emplace_back(pfx + "ln2_beta", &blk.ln2_beta);
      out.emplace_back(pfx + "ffn_w1", &blk.ffn_w1);
      out.emplace_back(pfx + "ffn_b1", &blk.ffn_b1);
      out.emplace_back(pfx + "ffn_w2", &blk.ffn_w2);
      out.emplace_back(pfx + "ffn_b2", &blk.ffn_b2);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    auto mutable_view = const_cast<ModelParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t->numel();
    return n;
  }

  ModelParams clone() const {
    ModelParams copy;
    copy.patch_proj_w = patch_proj_w.clone();
    copy.patch_proj_b = patch_proj_b.clone();
    copy.cls_token = cls_token.clone();
    copy.pos_embed = pos_embed.clone();
    for (const auto& blk : blocks)
      copy.blocks.push_back(BlockParams{
          blk.ln1_gamma.clone(), blk.ln1_beta.clone(), blk.w_q.clone(), blk.b_q.clone(),
          blk.w_k.clone(), blk.b_k.clone(), blk.w_v.clone(), blk.b_v.clone(),
          blk.w_o.clone(), blk.b_o.clone(), blk.ln2_gamma.clone(), blk.ln2_beta.clone(),
          blk.ffn_w1.clone(), blk.ffn_b1.clone(), blk.ffn_w2.clone(), blk.ffn_b2.clone()});
    return copy;
  }
};

// Closed-form parameter count; guards against silently missing tensors.
inline std::size_t expected_parameter_count(const ModelConfig& cfg) {
  std::size_t m = cfg.patch_count();
  std::size_t in = cfg.patch_size * cfg.patch_size * cfg.channels;
  std::size_t h = cfg.hidden_dim();
  std::size_t d = cfg.dim;
  std::size_t per_block = 2 * d              // ln1
                          + 4 * (d * d + d)  // q, k, v, o
                          + 2 * d            // ln2
                          + d * h + h + h * d + d;
  return in * d + d  // patch projection
         + d         // cls token
         + (m + 1) * d
         + cfg.depth * per_block;
}

// CLS kept apart from the patch rows so the mutual-attention swap is a
// structural operation rather than index bookkeeping.
struct TokenSequence {
  Tensor cls;      // {d}
  Tensor patches;  // {M, d}
};

// image {C, H, W} -> {M, patch_size^2 * C}; patches in raster order, each row
// flattened channel-major
inline Tensor patchify(const Tensor& image, std::size_t patch_size) {
  require_rank(image, 3, "patchify");
  std::size_t c = image.extent(0), hh = image.extent(1), ww = image.extent(2);
  if (patch_size == 0 || hh % patch_size != 0 || ww % patch_size != 0)
    throw std::invalid_argument("patchify: image " + shape_str(image.shape()) +
                                " not divisible by patch_size " + std::to_string(patch_size));
  std::size_t rows = hh / patch_size, cols = ww / patch_size;
  std::size_t width = patch_size * patch_size * c;
  std::vector<double> out(rows * cols * width);
  const auto& img = image.data();
  std::size_t r = 0;
  for (std::size_t py = 0; py < rows; ++py)
    for (std::size_t px = 0; px < cols; ++px, ++r) {
      double* dst = out.data() + r * width;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch_size; ++y)
          for (std::size_t x = 0; x < patch_size; ++x)
            *dst++ = img[(ch * hh + py * patch_size + y) * ww + px * patch_size + x];
    }
  return Tensor({rows * cols, width}, std::move(out));
}

// inverse of patchify; used by tests and the augmentation round trip
inline Tensor unpatchify(const Tensor& patches, std::size_t patch_size,
                         std::size_t channels, std::size_t height, std::size_t width) {
  require_rank(patches, 2, "unpatchify");
  std::size_t rows = height / patch_size, cols = width / patch_size;
  std::vector<double> out(channels * height * width);
  const auto& pd = patches.data();
  std::size_t pw = patch_size * patch_size * channels;
  std::size_t r = 0;
  for (std::size_t py = 0; py < rows; ++py)
    for (std::size_t px = 0; px < cols; ++px, ++r) {
      const double* src = pd.data() + r * pw;
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t y = 0; y < patch_size; ++y)
          for (std::size_t x = 0; x < patch_size; ++x)
            out[(ch * height + py * patch_size + y) * width + px * patch_size + x] = *src++;
    }
  return Tensor({channels, height, width}, std::move(out));
}

// linear projection + CLS prepend + positional table
inline TokenSequence embed(const Tensor& patches, const ModelParams& params,
                           const ModelConfig& cfg) {
  std::size_t expected = cfg.patch_size * cfg.patch_size * cfg.channels;
  if (patches.extent(1) != expected)
    throw std::invalid_argument("embed: patch width " + std::to_string(patches.extent(1)) +
                                " does not match projection input " + std::to_string(expected));
  Tensor proj = add_bias(matmul(patches, params.patch_proj_w), params.patch_proj_b);
  std::size_t m = patches.extent(0);
  TokenSequence seq;
  seq.cls = add(params.cls_token, row(params.pos_embed, 0));
  seq.patches = add(proj, slice_rows(params.pos_embed, 1, m + 1));
  return seq;
}

// pre-norm transformer block: x += MHSA(LN(x)); x += FFN(LN(x))
inline Tensor encoder_block(const Tensor& tokens, const BlockParams& blk, std::size_t heads) {
  require_rank(tokens, 2, "encoder_block");
  std::size_t d = tokens.extent(1);
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("encoder_block: dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  std::size_t hd = d / heads;
  Tensor h = layer_norm(tokens, blk.ln1_gamma, blk.ln1_beta, kLayerNormEps);
  Tensor q = add_bias(matmul(h, blk.w_q), blk.b_q);
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
  Tensor att = add_bias(matmul(concat_cols(head_outputs), blk.w_o), blk.b_o);
  Tensor x1 = add(tokens, att);
  Tensor h2 = layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, kLayerNormEps);
  Tensor f = add_bias(matmul(gelu(add_bias(matmul(h2, blk.ffn_w1), blk.ffn_b1)), blk.ffn_w2),
                      blk.ffn_b2);
  return add(x1, f);
}

// patchify -> embed -> blocks[0 .. L-2]; the final block is left to the
// mutual attention stage
inline TokenSequence encode_stage1(const Tensor& image, const ModelParams& params,
                                   const ModelConfig& cfg) {
  if (image.rank() != 3 || image.extent(0) != cfg.channels ||
      image.extent(1) != cfg.image_size || image.extent(2) != cfg.image_size)
    throw std::invalid_argument("encode_stage1: image " + shape_str(image.shape()) +
                                " does not match config");
  TokenSequence seq = embed(patchify(image, cfg.patch_size), params, cfg);
  std::size_t m = seq.patches.extent(0);
  Tensor tokens = concat_rows({as_row(seq.cls), seq.patches});
  for (std::size_t b = 0; b + 1 < cfg.depth; ++b)
    tokens = encoder_block(tokens, params.blocks[b], cfg.heads);
  TokenSequence out;
  out.cls = row(tokens, 0);
  out.patches = slice_rows(tokens, 1, m + 1);
  return out;
}

// all L blocks, no token exchange; the vanilla representation path
inline Tensor encode_full_cls(const Tensor& image, const ModelParams& params,
                              const ModelConfig& cfg) {
  TokenSequence seq = encode_stage1(image, params, cfg);
  Tensor tokens = concat_rows({as_row(seq.cls), seq.patches});
  tokens = encoder_block(tokens, params.blocks[cfg.depth - 1], cfg.heads);
  return row(tokens, 0);
}

}  // namespace imaformer
