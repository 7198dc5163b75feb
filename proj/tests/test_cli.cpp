#include "imaformer/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace imaformer;
namespace fs = std::filesystem;

namespace {

// scratch directory per test run
struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() / ("imaformer_cli_" + std::to_string(std::rand()));
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

// micro config file shared by the pipeline tests
std::string write_micro_config(const Scratch& scratch) {
  nlohmann::json j{
      {"model",
       {{"image_size", 16},
        {"channels", 3},
        {"patch_size", 8},
        {"depth", 2},
        {"dim", 8},
        {"heads", 2},
        {"mlp_ratio", 2.0},
        {"temperature", 10.0},
        {"final_full_self_attention", false},
        {"bare_class_attention", false},
        {"diagonal_scores", false}}},
      {"train",
       {{"epochs", 1},
        {"episodes_per_epoch", 2},
        {"way", 2},
        {"shot", 1},
        {"queries_per_class", 2},
        {"lr_init", 1e-3},
        {"lr_min", 1e-5},
        {"seed", 7},
        {"val_episodes", 2},
        {"policy",
         {{"trainable_last_blocks", 2},
          {"train_cls_token", true},
          {"train_pos_embed", true},
          {"train_patch_proj", true}}}}},
      {"data",
       {{"classes", 5},
        {"images_per_class", 16},
        {"channels", 3},
        {"height", 16},
        {"width", 16},
        {"patch_size", 8},
        {"signature_patches", 1},
        {"distractor_patches", 1},
        {"sigma_signature", 0.05},
        {"sigma_background", 0.05},
        {"seed", 50}}},
      {"eval", {{"tasks", 5}, {"queries_per_class", 2}, {"seed", 60}}}};
  std::string path = scratch / "config.json";
  std::ofstream out(path);
  out << j.dump(2);
  return path;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// drops the timestamp line so identically configured runs compare equal
std::string strip_timestamp(const std::string& text) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line))
    if (line.find("\"timestamp\"") == std::string::npos) out << line << '\n';
  return out.str();
}

}  // namespace

TEST(Cli, NoArgumentsPrintsUsage) {
  EXPECT_EQ(run({}), kExitUsage);
}

TEST(Cli, UnknownSubcommandRejected) {
  EXPECT_EQ(run({"frobnicate"}), kExitUsage);
}

TEST(Cli, UnknownFlagRejected) {
  EXPECT_EQ(run({"gen-data", "--out", "/tmp/x.fsds", "--bogus-flag"}), kExitUsage);
}

TEST(Cli, GenDataWritesLoadableDataset) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string out = scratch / "train.fsds";
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", out, "--split", "train"}), kExitOk);
  Dataset ds = load_dataset(out);
  EXPECT_EQ(ds.class_count(), 5u);
  EXPECT_EQ(ds.split, "train");
  EXPECT_TRUE(ds.metadata.contains("run_config"));  // provenance echo
  EXPECT_TRUE(ds.metadata.contains("build"));
}

TEST(Cli, MicroPipelineEndToEnd) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string train_fsds = scratch / "train.fsds";
  std::string val_fsds = scratch / "val.fsds";
  std::string ckpt = scratch / "model.imac";
  std::string log = scratch / "train.jsonl";
  std::string report = scratch / "report.json";
  std::string embed = scratch / "embed.csv";

  ASSERT_EQ(run({"gen-data", "--config", config, "--out", train_fsds, "--split", "train"}),
            kExitOk);
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", val_fsds, "--split", "val", "--seed",
                 "51"}),
            kExitOk);
  ASSERT_EQ(run({"meta-train", "--config", config, "--data", train_fsds, "--val-data", val_fsds,
                 "--out", ckpt, "--log", log}),
            kExitOk);
  ASSERT_TRUE(fs::exists(ckpt));
  ASSERT_TRUE(fs::exists(ckpt + ".meta.json"));

  // one JSONL record per epoch with the required fields
  std::istringstream log_lines(read_file(log));
  std::string line;
  std::size_t records = 0;
  while (std::getline(log_lines, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("epoch") && j.contains("mean_loss") && j.contains("train_acc") &&
                j.contains("val_acc") && j.contains("lr"));
    ++records;
  }
  EXPECT_EQ(records, 1u);

  ASSERT_EQ(run({"evaluate", "--config", config, "--checkpoint", ckpt, "--data", val_fsds,
                 "--out", report}),
            kExitOk);
  nlohmann::json r = nlohmann::json::parse(read_file(report));
  EXPECT_EQ(r.at("report").at("tasks"), 5);
  EXPECT_TRUE(r.contains("config"));
  EXPECT_TRUE(r.contains("build"));
  EXPECT_TRUE(r.contains("timestamp"));

  ASSERT_EQ(run({"export-embeddings", "--config", config, "--checkpoint", ckpt, "--data",
                 val_fsds, "--out", embed, "--episode-seed", "9", "--way", "3", "--shot", "1",
                 "--query", "4"}),
            kExitOk);
  EXPECT_TRUE(fs::exists(embed));
  EXPECT_TRUE(fs::exists(embed + ".json"));
}

TEST(Cli, EvaluateReproducesPaperProtocolShape) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string data = scratch / "test.fsds";
  std::string ckpt = scratch / "model.imac";
  std::string report = scratch / "report.json";
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", data, "--split", "test", "--seed",
                 "52"}),
            kExitOk);
  {
    ModelConfig model;
    model.image_size = 16;
    model.patch_size = 8;
    model.depth = 2;
    model.dim = 8;
    model.heads = 2;
    save_checkpoint(ckpt, model, ModelParams::init(model, 3));
  }
  ASSERT_EQ(run({"evaluate", "--config", config, "--checkpoint", ckpt, "--data", data,
                 "--tasks", "1000", "--query", "10", "--way", "5", "--out", report}),
            kExitOk);
  nlohmann::json r = nlohmann::json::parse(read_file(report));
  EXPECT_EQ(r.at("report").at("tasks"), 1000);
  EXPECT_EQ(r.at("report").at("way"), 5);
  EXPECT_EQ(r.at("report").at("queries_per_class"), 10);
  EXPECT_EQ(r.at("report").at("per_task_accuracy").size(), 1000u);
}

TEST(Cli, AblateWritesCsvTable) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string train_fsds = scratch / "train.fsds";
  std::string val_fsds = scratch / "val.fsds";
  std::string test_fsds = scratch / "test.fsds";
  std::string csv = scratch / "ablation.csv";
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", train_fsds, "--split", "train"}),
            kExitOk);
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", val_fsds, "--split", "val", "--seed",
                 "53"}),
            kExitOk);
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", test_fsds, "--split", "test", "--seed",
                 "54"}),
            kExitOk);
  ASSERT_EQ(run({"ablate", "--config", config, "--train-data", train_fsds, "--val-data",
                 val_fsds, "--test-data", test_fsds, "--out", csv, "--tasks", "4"}),
            kExitOk);
  std::istringstream lines(read_file(csv));
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "variant,layers,cls,accuracy,ci95,tasks");
  std::string row;
  std::size_t rows = 0;
  while (std::getline(lines, row))
    if (!row.empty()) ++rows;
  EXPECT_EQ(rows, 2u);  // default sweep: vanilla + imaformer
}

TEST(Cli, FlagOverridesConfigFile) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string out = scratch / "train.fsds";
  // config seed is 50; the flag must win
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", out, "--seed", "777"}), kExitOk);
  Dataset ds = load_dataset(out);
  EXPECT_EQ(ds.metadata.at("seed").get<std::uint64_t>(), 777u);
}

TEST(Cli, SeedFallsBackToEnvironment) {
  Scratch scratch;
  std::string out = scratch / "train.fsds";
  setenv("IMAFORMER_SEED", "31415", 1);
  ASSERT_EQ(run({"gen-data", "--out", out}), kExitOk);
  unsetenv("IMAFORMER_SEED");
  Dataset ds = load_dataset(out);
  EXPECT_EQ(ds.metadata.at("seed").get<std::uint64_t>(), 31415u);
}

TEST(Cli, MalformedConfigIsBadConfig) {
  Scratch scratch;
  std::string config = scratch / "broken.json";
  std::ofstream(config) << "{ not json";
  EXPECT_EQ(run({"gen-data", "--config", config, "--out", scratch / "x.fsds"}), kExitBadConfig);
}

TEST(Cli, InvalidModelConfigIsBadConfig) {
  Scratch scratch;
  std::string config = scratch / "bad_model.json";
  std::ofstream(config) << R"({"model": {"image_size": 17, "channels": 3, "patch_size": 8,
    "depth": 2, "dim": 8, "heads": 2, "mlp_ratio": 2.0, "temperature": 10.0}})";
  EXPECT_EQ(run({"gen-data", "--config", config, "--out", scratch / "x.fsds"}), kExitBadConfig);
}

TEST(Cli, MissingDataFileIsIoError) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string ckpt = scratch / "model.imac";
  {
    ModelConfig model;
    model.image_size = 16;
    model.patch_size = 8;
    model.depth = 2;
    model.dim = 8;
    model.heads = 2;
    save_checkpoint(ckpt, model, ModelParams::init(model, 3));
  }
  EXPECT_EQ(run({"evaluate", "--config", config, "--checkpoint", ckpt, "--data",
                 scratch / "missing.fsds"}),
            kExitIo);
}

TEST(Cli, IdenticalRunsProduceIdenticalArtifactsModuloTimestamp) {
  Scratch scratch;
  std::string config = write_micro_config(scratch);
  std::string data = scratch / "test.fsds";
  std::string ckpt = scratch / "model.imac";
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", data, "--split", "test"}), kExitOk);
  {
    ModelConfig model;
    model.image_size = 16;
    model.patch_size = 8;
    model.depth = 2;
    model.dim = 8;
    model.heads = 2;
    save_checkpoint(ckpt, model, ModelParams::init(model, 3));
  }
  std::string a = scratch / "a.json";
  std::string b = scratch / "b.json";
  ASSERT_EQ(run({"evaluate", "--config", config, "--checkpoint", ckpt, "--data", data, "--out",
                 a}),
            kExitOk);
  ASSERT_EQ(run({"evaluate", "--config", config, "--checkpoint", ckpt, "--data", data, "--out",
                 b}),
            kExitOk);
  EXPECT_EQ(strip_timestamp(read_file(a)), strip_timestamp(read_file(b)));

  // dataset and CSV artifacts carry no timestamp at all
  std::string data2 = scratch / "test2.fsds";
  ASSERT_EQ(run({"gen-data", "--config", config, "--out", data2, "--split", "test"}), kExitOk);
  EXPECT_EQ(read_file(data), read_file(data2));
}
