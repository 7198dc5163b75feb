#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "imaformer/train.hpp"

namespace imaformer {

namespace detail {

inline constexpr std::uint64_t kStreamEvalEpisodes = 303;

// runs fn(0..count) across `threads` workers; results are indexed, so the
// reduction order is deterministic regardless of the thread count
inline void parallel_for_indexed(std::size_t count, std::size_t threads,
                                 const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min(threads, count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

struct EvalReport {
  std::size_t tasks = 0;
  std::size_t way = 0, shot = 0, queries_per_class = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 * sample std (Bessel) / sqrt(tasks)
  std::vector<double> per_task_accuracy;
  std::vector<std::uint64_t> per_task_seed;
  std::uint64_t seed = 0;
  Variant variant = Variant::Imaformer;
  nlohmann::json config_echo;
};

// aggregation used by evaluate(); exposed so the CI formula is testable on
// hand-picked inputs
inline EvalReport make_report(std::vector<double> per_task_accuracy) {
  EvalReport report;
  report.tasks = per_task_accuracy.size();
  double mean = 0.0;
  for (double a : per_task_accuracy) mean += a;
  if (report.tasks > 0) mean /= static_cast<double>(report.tasks);
  report.mean_accuracy = mean;
  if (report.tasks > 1) {
    double ss = 0.0;
    for (double a : per_task_accuracy) ss += (a - mean) * (a - mean);
    double sample_std = std::sqrt(ss / static_cast<double>(report.tasks - 1));
    report.ci95 = 1.96 * sample_std / std::sqrt(static_cast<double>(report.tasks));
  }
  report.per_task_accuracy = std::move(per_task_accuracy);
  return report;
}

// T seeded episodes; per-episode accuracy is the fraction of the N*Q queries
// whose argmax score is correct. The episode stream depends only on (seed,
// task index), so both variants see byte-identical episodes.
inline EvalReport evaluate(const ModelParams& params, const ModelConfig& cfg, const Dataset& ds,
                           std::size_t way, std::size_t shot, std::size_t queries_per_class,
                           std::size_t tasks, std::uint64_t seed, Variant variant,
                           std::size_t threads = 1) {
  if (tasks == 0) throw std::invalid_argument("evaluate: need at least one task");
  std::uint64_t stream = derive_seed(seed, detail::kStreamEvalEpisodes);
  std::vector<double> accs(tasks, 0.0);
  std::vector<std::uint64_t> seeds(tasks, 0);
  detail::parallel_for_indexed(tasks, threads, [&](std::size_t t) {
    std::uint64_t ep_seed = derive_seed(stream, t);
    Episode ep = sample_episode(ds, way, shot, queries_per_class, ep_seed);
    accs[t] = forward_episode(params, cfg, ep, variant).accuracy;
    seeds[t] = ep_seed;
  });
  EvalReport report = make_report(std::move(accs));
  report.way = way;
  report.shot = shot;
  report.queries_per_class = queries_per_class;
  report.per_task_seed = std::move(seeds);
  report.seed = seed;
  report.variant = variant;
  report.config_echo = model_config_to_json(cfg);
  return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& report) {
  return nlohmann::json{{"tasks", report.tasks},
                        {"way", report.way},
                        {"shot", report.shot},
                        {"queries_per_class", report.queries_per_class},
                        {"mean_accuracy", report.mean_accuracy},
                        {"ci95", report.ci95},
                        {"seed", report.seed},
                        {"variant", to_string(report.variant)},
                        {"config", report.config_echo},
                        {"per_task_accuracy", report.per_task_accuracy}};
}

// ---------------------------------------------------------------------------
// ablation sweep
// ---------------------------------------------------------------------------

struct AblationCell {
  Variant variant = Variant::Imaformer;
  FineTunePolicy policy;
};

struct AblationRow {
  Variant variant = Variant::Imaformer;
  FineTunePolicy policy;
  double accuracy = 0.0;
  double ci95 = 0.0;
  std::size_t tasks = 0;
  std::uint64_t init_hash = 0;  // FNV-1a over the initial parameter bytes
};

inline std::uint64_t params_hash(const ModelParams& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : params.named_tensors())
    for (double v : t->data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 1099511628211ull;
      }
    }
  return h;
}

// Trains every cell from the same seed-derived initialization (verified via
// init_hash) and evaluates on the test split; rows differ only in the swept
// variant and fine-tune policy.
inline std::vector<AblationRow> ablate(const Dataset& train_ds, const Dataset& val_ds,
                                       const Dataset& test_ds, const ModelConfig& model,
                                       const TrainConfig& base,
                                       const std::vector<AblationCell>& sweep,
                                       std::size_t eval_tasks, std::uint64_t eval_seed,
                                       std::size_t threads = 1) {
  if (sweep.empty()) throw std::invalid_argument("ablate: empty sweep");
  std::vector<AblationRow> rows;
  rows.reserve(sweep.size());
  for (const AblationCell& cell : sweep) {
    ModelParams params = ModelParams::init(model, base.seed);
    AblationRow row;
    row.variant = cell.variant;
    row.policy = cell.policy;
    row.init_hash = params_hash(params);
    TrainConfig cfg = base;
    cfg.variant = cell.variant;
    cfg.policy = cell.policy;
    TrainResult trained = meta_train(train_ds, val_ds, std::move(params), model, cfg);
    EvalReport report = evaluate(trained.best_params, model, test_ds, cfg.way, cfg.shot,
                                 cfg.queries_per_class, eval_tasks, eval_seed, cell.variant,
                                 threads);
    row.accuracy = report.mean_accuracy;
    row.ci95 = report.ci95;
    row.tasks = report.tasks;
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,layers,cls,accuracy,ci95,tasks\n";
  for (const auto& row : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%zu,%s,%.6f,%.6f,%zu\n",
                  to_string(row.variant).c_str(), row.policy.trainable_last_blocks,
                  row.policy.train_cls_token ? "true" : "false", row.accuracy, row.ci95,
                  row.tasks);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA projection (deflated power iteration)
// ---------------------------------------------------------------------------

struct PcaResult {
  std::size_t n = 0, k = 0;
  std::vector<double> coordinates;        // n x k, row-major
  std::vector<double> explained_variance; // k fractions of total variance
  std::vector<double> components;         // k x d, unit rows
};

// center, take the top-k covariance eigenvectors by power iteration with
// deflation (tol 1e-9, max 1000 iterations), project. Rank deficiency beyond
// k yields zero-padded components.
inline PcaResult pca_project(const std::vector<std::vector<double>>& vectors, std::size_t k = 2) {
  std::size_t n = vectors.size();
  if (n < 2) throw std::invalid_argument("pca_project: need at least 2 vectors");
  std::size_t d = vectors[0].size();
  for (const auto& v : vectors)
    if (v.size() != d) throw std::invalid_argument("pca_project: ragged input");

  std::vector<double> mean(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < d; ++j) mean[j] += v[j];
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered[i][j] = vectors[i][j] - mean[j];

  // sample covariance
  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : centered)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += v[a] * v[b];
  for (auto& c : cov) c /= static_cast<double>(n - 1);
  double total_variance = 0.0;
  for (std::size_t j = 0; j < d; ++j) total_variance += cov[j * d + j];

  PcaResult result;
  result.n = n;
  result.k = k;
  result.components.assign(k * d, 0.0);
  result.explained_variance.assign(k, 0.0);

  const double tol = 1e-9;
  const std::size_t max_iters = 1000;
  double rank_floor = std::max(total_variance, 1.0) * 1e-12;
  Rng rng(0x9c4f);
  for (std::size_t comp = 0; comp < k && comp < d; ++comp) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    auto orthonormalize = [&](std::vector<double>& u) {
      for (std::size_t prev = 0; prev < comp; ++prev) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += u[j] * result.components[prev * d + j];
        for (std::size_t j = 0; j < d; ++j) u[j] -= dot * result.components[prev * d + j];
      }
      double norm = 0.0;
      for (double x : u) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.0)
        for (auto& x : u) x /= norm;
      return norm;
    };
    if (orthonormalize(v) == 0.0) break;
    double lambda = 0.0;
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
      std::vector<double> next(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
        next[a] = s;
      }
      double norm = orthonormalize(next);
      if (norm <= rank_floor) {
        lambda = 0.0;
        break;
      }
      double drift = 0.0;
      for (std::size_t j = 0; j < d; ++j) drift += (next[j] - v[j]) * (next[j] - v[j]);
      v = std::move(next);
      lambda = norm;
      if (std::sqrt(drift) < tol) break;
    }
    if (lambda <= rank_floor) break;  // remaining components stay zero-padded
    // Rayleigh quotient for the eigenvalue of the deflated matrix
    double quad = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
      quad += v[a] * s;
    }
    for (std::size_t j = 0; j < d; ++j) result.components[comp * d + j] = v[j];
    result.explained_variance[comp] = total_variance > 0.0 ? quad / total_variance : 0.0;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= quad * v[a] * v[b];
  }

  result.coordinates.assign(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t comp = 0; comp < k; ++comp) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        s += centered[i][j] * result.components[comp * d + j];
      result.coordinates[i * k + comp] = s;
    }
  return result;
}

// ---------------------------------------------------------------------------
// embedding export (query CLS vectors before/after mutual attention)
// ---------------------------------------------------------------------------

struct EmbeddingDump {
  std::vector<std::vector<double>> before;  // vanilla final CLS per query
  std::vector<std::vector<double>> after;   // mean over classes of CLS_q_i per query
  std::vector<std::size_t> labels;
  PcaResult before_pca, after_pca;
};

inline EmbeddingDump compute_embeddings(const ModelParams& params, const ModelConfig& cfg,
                                        const Episode& episode) {
  EmbeddingDump dump;
  std::vector<ClassPrototype> protos = build_prototypes(params, cfg, episode);
  const BlockParams& last_block = params.blocks.back();
  for (const auto& [image, label] : episode.query) {
    dump.labels.push_back(label);
    dump.before.push_back(encode_full_cls(image, params, cfg).data());
    TokenSequence query = encode_stage1(image, params, cfg);
    EpisodeScoresRow row = episode_scores(protos, query, last_block, cfg);
    dump.after.push_back(average(row.cls_query).data());
  }
  dump.before_pca = pca_project(dump.before, 2);
  dump.after_pca = pca_project(dump.after, 2);
  return dump;
}

// CSV: variant,class,pca_x,pca_y (one row per query per variant); the JSON
// sidecar at <path>.json carries explained variance and the raw vectors
inline EmbeddingDump export_embeddings(const ModelParams& params, const ModelConfig& cfg,
                                       const Episode& episode, const std::string& csv_path) {
  EmbeddingDump dump = compute_embeddings(params, cfg, episode);
  std::string csv = "variant,class,pca_x,pca_y\n";
  auto append = [&csv, &dump](const char* variant, const PcaResult& pca) {
    for (std::size_t i = 0; i < dump.labels.size(); ++i) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.9f,%.9f\n", variant, dump.labels[i],
                    pca.coordinates[i * 2], pca.coordinates[i * 2 + 1]);
      csv += buf;
    }
  };
  append("before", dump.before_pca);
  append("after", dump.after_pca);
  detail::write_file(csv_path, csv);

  nlohmann::json sidecar{
      {"episode_seed", episode.seed},
      {"way", episode.way},
      {"shot", episode.shot},
      {"queries_per_class", episode.queries_per_class},
      {"explained_variance",
       {{"before", dump.before_pca.explained_variance},
        {"after", dump.after_pca.explained_variance}}},
      {"raw_vectors", {{"before", dump.before}, {"after", dump.after}}},
      {"labels", dump.labels},
      {"config", model_config_to_json(cfg)}};
  std::ofstream out(csv_path + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + csv_path + ".json for writing");
  out << sidecar.dump(2) << '\n';
  return dump;
}

}  // namespace imaformer
