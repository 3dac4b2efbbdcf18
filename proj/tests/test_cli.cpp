#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"

using namespace vitlm;
using vitlm::cli::LayeredConfig;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

json last_json_line(const std::string& text) {
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '{') last = line;
  }
  return json::parse(last);
}

json small_model() {
  return {{"model",
           {{"vision", {{"d_vis", 16}, {"n_heads", 2}, {"n_layers", 1}}},
            {"lm", {{"d_lm", 16}, {"n_heads", 2}, {"n_layers", 1}}}}},
          {"train", {{"lr", 3e-3}, {"batch_size", 4}, {"epochs", 1}, {"precision", "f64"}}}};
}

std::set<std::string> listing(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root).string());
  return out;
}

class CliPipeline : public ::testing::Test {
 protected:
  static inline fs::path root;
  static inline fs::path corpus;
  static inline fs::path config;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "vitlm_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    corpus = root / "corpus";
    config = root / "small.json";
    std::ofstream(config) << small_model().dump(2);
    const auto r = run({"synth", "--out", corpus.string(), "--n", "8", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static Result train(const fs::path& out, const std::string& task = "mrg") {
    return run({"train", "--task", task, "--data", (corpus / (task + "_train.jsonl")).string(), "--out",
                out.string(), "--config", config.string(), "--seed", "4"});
  }
};

}  // namespace

// ---------------------------------------------------------------- layered config

TEST(LayeredConfig, PrecedenceAndProvenance) {
  LayeredConfig cfg(json{{"train", {{"lr", 1.0}, {"epochs", 8}}}, {"name", "x"}});
  EXPECT_EQ(cfg.source("train.lr"), "default");
  cfg.merge({{"train", {{"lr", 2.0}, {"epochs", 3}}}}, "file:a.json");
  EXPECT_EQ(cfg.get("train.lr"), 2.0);
  cfg.merge_env([](const char* name) -> const char* {
    return std::string(name) == "VITLM_TRAIN_LR" ? "3.5" : nullptr;
  });
  EXPECT_EQ(cfg.get("train.lr"), 3.5);
  EXPECT_EQ(cfg.source("train.lr"), "env:VITLM_TRAIN_LR");
  EXPECT_EQ(cfg.source("train.epochs"), "file:a.json");
  cfg.set("train.lr", "4e-3");
  EXPECT_EQ(cfg.get("train.lr"), 4e-3);
  EXPECT_EQ(cfg.source("train.lr"), "flag");
  EXPECT_EQ(cfg.nested()["train"]["lr"], 4e-3);
  EXPECT_NE(cfg.describe().find("train.lr = 0.004  (flag)"), std::string::npos);
  EXPECT_EQ(LayeredConfig::env_name("model.lm.lora.rank"), "VITLM_MODEL_LM_LORA_RANK");
}

TEST(LayeredConfig, TypeAndKeyChecks) {
  LayeredConfig cfg(json{{"a", {{"n", 1}, {"dims", {1, 2, 3}}, {"s", "f32"}}}});
  EXPECT_THROW(cfg.set("a.missing", "1"), ConfigError);
  EXPECT_THROW(cfg.merge({{"a", {{"zzz", 1}}}}, "file"), ConfigError);
  EXPECT_THROW(cfg.set("a.n", "\"text\""), ConfigError);
  EXPECT_THROW(cfg.set("a.n", "not json"), ConfigError);
  cfg.set("a.dims", "4,5,6");
  EXPECT_EQ(cfg.get("a.dims"), json({4, 5, 6}));
  cfg.set("a.dims", "[7,8,9]");
  EXPECT_EQ(cfg.get("a.dims"), json({7, 8, 9}));
  cfg.set("a.s", "f64");
  EXPECT_EQ(cfg.get("a.s"), "f64");
}

TEST(LayeredConfig, ResolveChecksPreprocessShape) {
  LayeredConfig cfg(cli::run_defaults());
  EXPECT_NO_THROW(cli::resolve(cfg));
  cfg.set("preprocess.shape", "8,16,16");
  EXPECT_THROW(cli::resolve(cfg), ConfigError);
  cfg.set("model.vision.input_shape", "8,16,16");
  EXPECT_EQ(cli::resolve(cfg).model.vision.input_shape, (Dims3{8, 16, 16}));
}

TEST(CliParsing, DimsAndWindow) {
  EXPECT_EQ(cli::parse_dims("8,32,32"), (Dims3{8, 32, 32}));
  EXPECT_THROW(cli::parse_dims("8,32"), ConfigError);
  EXPECT_THROW(cli::parse_dims("8,0,32"), ConfigError);
  EXPECT_EQ(cli::parse_window("-1000,1000").low_hu, -1000.0f);
  EXPECT_THROW(cli::parse_window("5,1"), ConfigError);
}

// ---------------------------------------------------------------- exit codes

TEST(CliExit, UsageErrors) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"bogus"}, {"train", "--task", "mrg", "--out", "/tmp/x"}, {"selftest", "--nope"}}) {
    const auto r = run(args);
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(last_json_line(r.err)["error"], "usage");
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
  }
}

TEST(CliExit, HelpIsSuccess) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("selftest"), std::string::npos);
}

TEST(CliExit, RuntimeErrorsAreOneLineJson) {
  const auto dir = fs::temp_directory_path() / "vitlm_cli_err";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "bad.nii") << "not a nifti file at all";
  auto r = run({"ingest", "--in", (dir / "bad.nii").string(), "--out", (dir / "c").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  const auto err = json::parse(r.err);
  EXPECT_TRUE(err.contains("error") && err.contains("message"));

  std::ofstream(dir / "rows.jsonl") << R"({"volume_path":"a"})" << "\n";
  r = run({"harmonize", "--in", (dir / "rows.jsonl").string(), "--out", (dir / "o.jsonl").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["error"], "format");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------- pipeline

TEST_F(CliPipeline, SynthLayout) {
  for (const char* f : {"mrg_train.jsonl", "mrg_val.jsonl", "vqa_train.jsonl", "vqa_val.jsonl", "split.json",
                        "findings.jsonl", "reports_raw.jsonl", "volumes/case_0000.nii.gz"}) {
    EXPECT_TRUE(fs::exists(corpus / f)) << f;
  }
  const auto split = json::parse(slurp(corpus / "split.json"));
  EXPECT_EQ(split["train"].size(), 6u);
  EXPECT_EQ(split["val"].size(), 2u);
  const auto rows = read_jsonl(corpus / "mrg_train.jsonl");
  EXPECT_EQ(rows.size(), 18u);
  EXPECT_TRUE(rows[0].contains("findings"));
}

TEST_F(CliPipeline, HarmonizeRoutesRawReports) {
  const auto out = root / "harm" / "sections.jsonl";
  fs::create_directories(out.parent_path());
  const auto r = run({"harmonize", "--in", (corpus / "reports_raw.jsonl").string(), "--out", out.string(),
                      "--lexicon", (fs::path(VITLM_SOURCE_DIR) / "data/organs.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stats = last_json_line(r.err);
  EXPECT_EQ(stats["reports"], 8);
  EXPECT_EQ(stats["dropped"], 0);
  EXPECT_EQ(read_records<ReportRecord>(out).size(), 8u);
}

TEST_F(CliPipeline, IngestWritesCache) {
  const auto out = root / "cache";
  const auto r = run({"ingest", "--in", (corpus / "volumes/case_0001.nii.gz").string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = Checkpoint::load(out);
  EXPECT_EQ(ck.dtype("volume"), "f32");
  const auto vol = ck.get<float>("volume");
  EXPECT_EQ(vol.shape(), (Shape{1, 8, 32, 32}));
  for (float v : vol.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST_F(CliPipeline, TrainGenerateEvalAndDeterminism) {
  const auto run_a = root / "run_a", run_b = root / "run_b";
  const auto before = listing(root);
  auto r = train(run_a);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("train.lr = 0.003  (file:"), std::string::npos);
  EXPECT_NE(r.err.find("train.seed = 4  (flag)"), std::string::npos);
  for (const char* f : {"config.json", "loss.jsonl", "epoch_001", "final"}) EXPECT_TRUE(fs::exists(run_a / f)) << f;
  // Nothing written outside the run directory.
  for (const auto& p : listing(root)) {
    if (!before.count(p)) {
      EXPECT_EQ(p.rfind("run_a", 0), 0u) << p;
    }
  }

  ASSERT_EQ(train(run_b).code, 0);
  auto strip = [](const fs::path& p) {
    std::vector<json> rows = read_jsonl(p);
    for (auto& row : rows) row.erase("seconds");
    return rows;
  };
  EXPECT_EQ(strip(run_a / "loss.jsonl"), strip(run_b / "loss.jsonl"));

  const auto ckpt = (run_a / "final").string();
  const auto data = (corpus / "mrg_val.jsonl").string();
  ASSERT_EQ(run({"eval", "--task", "mrg", "--data", data, "--ckpt", ckpt, "--out", (root / "ev_a").string()}).code, 0);
  r = run({"eval", "--task", "mrg", "--data", data, "--ckpt", (run_b / "final").string(), "--out",
           (root / "ev_b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("chest"), std::string::npos);
  EXPECT_EQ(slurp(root / "ev_a" / "metrics.json"), slurp(root / "ev_b" / "metrics.json"));
  EXPECT_TRUE(fs::exists(root / "ev_a" / "predictions.jsonl"));

  const auto volume = (corpus / "volumes/case_0000.nii.gz").string();
  r = run({"generate", "--ckpt", ckpt, "--volume", volume, "--region", "abdomen"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = r.out;
  r = run({"generate", "--ckpt", ckpt, "--volume", volume, "--region", "abdomen", "--json"});
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["text"].get<std::string>() + "\n", text);
  EXPECT_EQ(run({"generate", "--ckpt", ckpt, "--volume", volume, "--region", "head"}).code, 1);
  EXPECT_EQ(run({"generate", "--ckpt", ckpt, "--volume", volume}).code, 1);
}

TEST_F(CliPipeline, VqaTrainAndGenerateAnswer) {
  const auto out = root / "run_vqa";
  auto r = train(out, "vqa");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ckpt = (out / "final").string();
  r = run({"generate", "--ckpt", ckpt, "--volume", (corpus / "volumes/case_0002.nii.gz").string(), "--question",
           "Is there a cyst in the kidney?", "--options", "yes,no,uncertain,not assessable", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(json::parse(r.out).contains("text"));
  r = run({"eval", "--task", "vqa", "--data", (corpus / "vqa_val.jsonl").string(), "--ckpt", ckpt, "--limit", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("accuracy"), std::string::npos);
  r = run({"eval", "--task", "mrg", "--data", (corpus / "vqa_val.jsonl").string(), "--ckpt", ckpt});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliPipeline, EnvOverridesFileAndFlagOverridesEnv) {
  ::setenv("VITLM_TRAIN_MAX_STEPS", "1", 1);
  auto r = train(root / "run_env");
  ::unsetenv("VITLM_TRAIN_MAX_STEPS");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("train.max_steps = 1  (env:VITLM_TRAIN_MAX_STEPS)"), std::string::npos);
  EXPECT_EQ(read_jsonl(root / "run_env" / "loss.jsonl").size(), 1u);

  ::setenv("VITLM_TRAIN_MAX_STEPS", "1", 1);
  r = run({"train", "--task", "mrg", "--data", (corpus / "mrg_train.jsonl").string(), "--out",
           (root / "run_flag").string(), "--config", config.string(), "--max-steps", "2"});
  ::unsetenv("VITLM_TRAIN_MAX_STEPS");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_jsonl(root / "run_flag" / "loss.jsonl").size(), 2u);

  r = run({"train", "--task", "mrg", "--data", (corpus / "mrg_train.jsonl").string(), "--out",
           (root / "run_bad").string(), "--config", config.string(), "--set", "train.nonsense=1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err.substr(r.err.rfind('{')))["error"], "config");
}
