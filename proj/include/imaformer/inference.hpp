#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "imaformer/episode.hpp"
#include "imaformer/mutual_attention.hpp"
#include "imaformer/vit.hpp"

namespace imaformer {

// One episode's forward pass. `loss` stays on the tape so a training step can
// run backward on it; evaluation just reads the accuracy.
struct EpisodeForward {
  Tensor loss;  // mean cross-entropy over all queries
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;          // per query
  std::vector<std::vector<double>> raw_scores;   // per query, N values
};

// stage-1 prototypes: encode every support image, average per class
inline std::vector<ClassPrototype> build_prototypes(const ModelParams& params,
                                                    const ModelConfig& cfg,
                                                    const Episode& episode) {
  std::vector<std::vector<TokenSequence>> per_class(episode.way);
  for (const auto& [image, label] : episode.support)
    per_class[label].push_back(encode_stage1(image, params, cfg));
  std::vector<ClassPrototype> protos;
  protos.reserve(episode.way);
  for (std::size_t c = 0; c < episode.way; ++c) {
    if (per_class[c].empty())
      throw std::invalid_argument("build_prototypes: class " + std::to_string(c) +
                                  " has no support images");
    protos.push_back({c, prototype_tokens(per_class[c])});
  }
  return protos;
}

inline EpisodeForward forward_imaformer(const ModelParams& params, const ModelConfig& cfg,
                                        const Episode& episode) {
  std::vector<ClassPrototype> protos = build_prototypes(params, cfg, episode);
  const BlockParams& last_block = params.blocks.back();
  EpisodeForward out;
  std::vector<Tensor> losses;
  losses.reserve(episode.query.size());
  std::size_t correct = 0;
  for (const auto& [image, label] : episode.query) {
    TokenSequence query = encode_stage1(image, params, cfg);
    EpisodeScoresRow row = episode_scores(protos, query, last_block, cfg);
    Tensor probs = classify(row.scores, cfg.temperature);
    losses.push_back(cross_entropy(probs, label));
    std::size_t pred = argmax_index(row.scores.data());
    out.predictions.push_back(pred);
    out.raw_scores.push_back(row.scores.data());
    if (pred == label) ++correct;
  }
  out.loss = average(losses);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(episode.query.size());
  return out;
}

inline EpisodeForward forward_vanilla(const ModelParams& params, const ModelConfig& cfg,
                                      const Episode& episode) {
  std::vector<std::vector<Tensor>> per_class(episode.way);
  for (const auto& [image, label] : episode.support)
    per_class[label].push_back(encode_full_cls(image, params, cfg));
  std::vector<Tensor> protos_cls;
  protos_cls.reserve(episode.way);
  for (std::size_t c = 0; c < episode.way; ++c) {
    if (per_class[c].empty())
      throw std::invalid_argument("forward_vanilla: class " + std::to_string(c) +
                                  " has no support images");
    protos_cls.push_back(average(per_class[c]));
  }
  EpisodeForward out;
  std::vector<Tensor> losses;
  losses.reserve(episode.query.size());
  std::size_t correct = 0;
  for (const auto& [image, label] : episode.query) {
    Tensor scores = vanilla_scores(protos_cls, image, params, cfg);
    Tensor probs = classify(scores, cfg.temperature);
    losses.push_back(cross_entropy(probs, label));
    std::size_t pred = argmax_index(scores.data());
    out.predictions.push_back(pred);
    out.raw_scores.push_back(scores.data());
    if (pred == label) ++correct;
  }
  out.loss = average(losses);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(episode.query.size());
  return out;
}

inline EpisodeForward forward_episode(const ModelParams& params, const ModelConfig& cfg,
                                      const Episode& episode, Variant variant) {
  return variant == Variant::Imaformer ? forward_imaformer(params, cfg, episode)
                                       : forward_vanilla(params, cfg, episode);
}

}  // namespace imaformer
