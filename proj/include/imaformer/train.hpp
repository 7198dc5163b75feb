#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "imaformer/inference.hpp"

namespace imaformer {

// Which parameters receive gradients during meta-training. Everything outside
// the selection is frozen: zero gradient, never touched by the optimizer.
struct FineTunePolicy {
  std::size_t trainable_last_blocks = 0;  // blocks depth-k .. depth-1
  bool train_cls_token = false;
  bool train_pos_embed = false;
  bool train_patch_proj = false;

  static FineTunePolicy all(std::size_t depth) {
    return FineTunePolicy{depth, true, true, true};
  }
};

inline nlohmann::json policy_to_json(const FineTunePolicy& p) {
  return nlohmann::json{{"trainable_last_blocks", p.trainable_last_blocks},
                        {"train_cls_token", p.train_cls_token},
                        {"train_pos_embed", p.train_pos_embed},
                        {"train_patch_proj", p.train_patch_proj}};
}

inline FineTunePolicy policy_from_json(const nlohmann::json& j) {
  FineTunePolicy p;
  p.trainable_last_blocks = j.value("trainable_last_blocks", p.trainable_last_blocks);
  p.train_cls_token = j.value("train_cls_token", p.train_cls_token);
  p.train_pos_embed = j.value("train_pos_embed", p.train_pos_embed);
  p.train_patch_proj = j.value("train_patch_proj", p.train_patch_proj);
  return p;
}

// The selected parameter references, in checkpoint order.
inline std::vector<std::pair<std::string, Tensor*>> trainable_mask(ModelParams& params,
                                                                   const FineTunePolicy& policy) {
  std::size_t depth = params.blocks.size();
  if (policy.trainable_last_blocks > depth)
    throw std::invalid_argument("trainable_mask: policy selects " +
                                std::to_string(policy.trainable_last_blocks) + " blocks, model has " +
                                std::to_string(depth));
  std::size_t first_block = depth - policy.trainable_last_blocks;
  std::vector<std::pair<std::string, Tensor*>> selected;
  for (auto& [name, t] : params.named_tensors()) {
    bool pick = false;
    if (name.rfind("blocks[", 0) == 0) {
      std::size_t idx = std::stoul(name.substr(7));
      pick = idx >= first_block;
    } else if (name.rfind("cls_token", 0) == 0) {
      pick = policy.train_cls_token;
    } else if (name.rfind("pos_embed", 0) == 0) {
      pick = policy.train_pos_embed;
    } else if (name.rfind("patch_proj", 0) == 0) {
      pick = policy.train_patch_proj;
    }
    if (pick) selected.emplace_back(name, t);
  }
  return selected;
}

// requires_grad: true on the selection, false everywhere else
inline void apply_trainable_flags(ModelParams& params, const FineTunePolicy& policy) {
  for (auto& [name, t] : params.named_tensors()) t->set_requires_grad(false);
  for (auto& [name, t] : trainable_mask(params, policy)) t->set_requires_grad(true);
}

inline void set_all_requires_grad(ModelParams& params, bool value) {
  for (auto& [name, t] : params.named_tensors()) t->set_requires_grad(value);
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t episodes_per_epoch = 100;
  std::size_t way = 5, shot = 1, queries_per_class = 5;
  double lr_init = 1e-3;  // desk-scale default for training from random init
  double lr_min = 1e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps_adam = 1e-8;
  std::uint64_t seed = 1;
  FineTunePolicy policy{4, true, true, true};
  Variant variant = Variant::Imaformer;
  bool augment_support = true;
  bool augment_query = true;
  std::size_t val_episodes = 200;

  void validate() const {
    if (!(lr_init >= lr_min && lr_min > 0.0))
      throw std::invalid_argument("TrainConfig: need lr_init >= lr_min > 0");
    if (epochs * episodes_per_epoch < 1)
      throw std::invalid_argument("TrainConfig: need at least one episode");
    if (way < 2 || shot < 1 || queries_per_class < 1)
      throw std::invalid_argument("TrainConfig: episode shape invalid");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"epochs", cfg.epochs},
                        {"episodes_per_epoch", cfg.episodes_per_epoch},
                        {"way", cfg.way},
                        {"shot", cfg.shot},
                        {"queries_per_class", cfg.queries_per_class},
                        {"lr_init", cfg.lr_init},
                        {"lr_min", cfg.lr_min},
                        {"weight_decay", cfg.weight_decay},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"eps_adam", cfg.eps_adam},
                        {"seed", cfg.seed},
                        {"policy", policy_to_json(cfg.policy)},
                        {"variant", to_string(cfg.variant)},
                        {"augment_support", cfg.augment_support},
                        {"augment_query", cfg.augment_query},
                        {"val_episodes", cfg.val_episodes}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.episodes_per_epoch = j.value("episodes_per_epoch", cfg.episodes_per_epoch);
  cfg.way = j.value("way", cfg.way);
  cfg.shot = j.value("shot", cfg.shot);
  cfg.queries_per_class = j.value("queries_per_class", cfg.queries_per_class);
  cfg.lr_init = j.value("lr_init", cfg.lr_init);
  cfg.lr_min = j.value("lr_min", cfg.lr_min);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.eps_adam = j.value("eps_adam", cfg.eps_adam);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("policy")) cfg.policy = policy_from_json(j.at("policy"));
  if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant").get<std::string>());
  cfg.augment_support = j.value("augment_support", cfg.augment_support);
  cfg.augment_query = j.value("augment_query", cfg.augment_query);
  cfg.val_episodes = j.value("val_episodes", cfg.val_episodes);
  return cfg;
}

// First/second moment buffers, allocated only for the trainable selection.
struct OptState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Moments> slots;
  std::size_t step = 0;

  static OptState for_params(const std::vector<std::pair<std::string, Tensor*>>& trainable) {
    OptState state;
    state.slots.reserve(trainable.size());
    for (const auto& [name, t] : trainable)
      state.slots.push_back({std::vector<double>(t->numel(), 0.0),
                             std::vector<double>(t->numel(), 0.0)});
    return state;
  }
};

// decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
inline void adamw_step(const std::vector<std::pair<std::string, Tensor*>>& trainable,
                       OptState& opt, double lr, double weight_decay, double beta1, double beta2,
                       double eps) {
  if (opt.slots.size() != trainable.size())
    throw std::invalid_argument("adamw_step: optimizer state does not match trainable set");
  ++opt.step;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t p = 0; p < trainable.size(); ++p) {
    auto& [name, t] = trainable[p];
    const auto& g = t->grad();
    auto& data = t->data();
    auto& m = opt.slots[p].m;
    auto& v = opt.slots[p].v;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw std::runtime_error("adamw_step: non-finite gradient in " + name);
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      double m_hat = m[i] / bc1;
      double v_hat = v[i] / bc2;
      data[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * data[i]);
    }
  }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_init,
                        double lr_min) {
  if (step > total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " beyond horizon " +
                                std::to_string(total_steps));
  double progress = total_steps == 0 ? 1.0
                                     : static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;  // at the first step of the epoch
};

struct TrainResult {
  ModelParams best_params;
  ModelConfig model;
  std::vector<EpochLog> log;
  double best_val_acc = 0.0;
  std::size_t best_epoch = 0;
};

inline void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& e : log) {
    nlohmann::json j{{"epoch", e.epoch},
                     {"mean_loss", e.mean_loss},
                     {"train_acc", e.train_acc},
                     {"val_acc", e.val_acc},
                     {"lr", e.lr}};
    out << j.dump() << '\n';
  }
}

namespace detail {

inline constexpr std::uint64_t kStreamTrainEpisodes = 101;
inline constexpr std::uint64_t kStreamAugment = 102;
inline constexpr std::uint64_t kStreamValEpisodes = 202;

// mean accuracy over a fixed, seeded episode set; params flags are left
// untouched (caller controls requires_grad)
inline double validation_accuracy(const ModelParams& params, const ModelConfig& model,
                                  const Dataset& val_ds, const TrainConfig& cfg) {
  std::uint64_t stream = derive_seed(cfg.seed, kStreamValEpisodes);
  double total = 0.0;
  for (std::size_t t = 0; t < cfg.val_episodes; ++t) {
    Episode ep = sample_episode(val_ds, cfg.way, cfg.shot, cfg.queries_per_class,
                                derive_seed(stream, t));
    total += forward_episode(params, model, ep, cfg.variant).accuracy;
  }
  return cfg.val_episodes == 0 ? 0.0 : total / static_cast<double>(cfg.val_episodes);
}

}  // namespace detail

// Episodic meta-training. Per episode: sample, augment, forward, backward,
// masked AdamW step at the scheduled learning rate. Per epoch: validation on
// a fixed seeded episode set; the returned params are the best-validation
// snapshot (ties keep the earlier epoch).
inline TrainResult meta_train(const Dataset& train_ds, const Dataset& val_ds,
                              ModelParams params, const ModelConfig& model,
                              const TrainConfig& cfg) {
  model.validate();
  cfg.validate();
  apply_trainable_flags(params, cfg.policy);
  auto trainable = trainable_mask(params, cfg.policy);
  OptState opt = OptState::for_params(trainable);
  std::size_t total_steps = cfg.epochs * cfg.episodes_per_epoch;
  std::uint64_t episode_stream = derive_seed(cfg.seed, detail::kStreamTrainEpisodes);
  std::uint64_t augment_stream = derive_seed(cfg.seed, detail::kStreamAugment);

  TrainResult result;
  result.model = model;
  result.best_val_acc = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, acc_sum = 0.0;
    double epoch_lr = cosine_lr(epoch * cfg.episodes_per_epoch, total_steps, cfg.lr_init,
                                cfg.lr_min);
    for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
      std::size_t step = epoch * cfg.episodes_per_epoch + i;
      std::uint64_t ep_seed = derive_seed(episode_stream, step);
      Episode ep = sample_episode(train_ds, cfg.way, cfg.shot, cfg.queries_per_class, ep_seed);
      Rng aug_rng(derive_seed(augment_stream, step));
      if (cfg.augment_support)
        for (auto& [image, label] : ep.support) image = augment(image, aug_rng);
      if (cfg.augment_query)
        for (auto& [image, label] : ep.query) image = augment(image, aug_rng);

      EpisodeForward fwd = forward_episode(params, model, ep, cfg.variant);
      double loss = fwd.loss.value();
      if (!std::isfinite(loss))
        throw std::runtime_error("meta_train: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", episode seed " +
                                 std::to_string(ep_seed));
      loss_sum += loss;
      acc_sum += fwd.accuracy;
      if (!trainable.empty()) {
        backward(fwd.loss);
        adamw_step(trainable, opt, cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min),
                   cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps_adam);
        for (auto& [name, t] : trainable) t->clear_grad();
      }
    }

    set_all_requires_grad(params, false);
    double val_acc = detail::validation_accuracy(params, model, val_ds, cfg);
    apply_trainable_flags(params, cfg.policy);

    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(cfg.episodes_per_epoch);
    entry.train_acc = acc_sum / static_cast<double>(cfg.episodes_per_epoch);
    entry.val_acc = val_acc;
    entry.lr = epoch_lr;
    result.log.push_back(entry);

    if (val_acc > result.best_val_acc) {
      result.best_val_acc = val_acc;
      result.best_epoch = epoch;
      result.best_params = params.clone();
    }
  }
  if (result.best_params.blocks.empty()) result.best_params = params.clone();
  set_all_requires_grad(result.best_params, false);
  return result;
}

}  // namespace imaformer
