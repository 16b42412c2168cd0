#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyneval/cli.hpp"

using namespace dyneval;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dyneval_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

nlohmann::json chain(std::size_t length, std::uint64_t chain_seed, std::uint64_t seed) {
  return {{"synthetic",
           {{"alphabet", 8}, {"seed", seed}, {"regimes", {{{"length", length}, {"chain_seed", chain_seed}}}}}}};
}

nlohmann::json small_config() {
  return {{"model", {{"preset", "tiny"}, {"context_length", 32}}},
          {"tokenizer", {{"kind", "symbol"}, {"alphabet", 8}}},
          {"corpora",
           {{"pretrain", chain(20000, 11, 1)},
            {"pretrain_valid", chain(2000, 11, 2)},
            {"finetune", chain(20000, 22, 4)},
            {"finetune_valid", chain(2000, 22, 5)},
            {"eval", chain(600, 22, 3)}}},
          {"pretrain",
           {{"steps", 20},
            {"batch_size", 4},
            {"eval_every", 10},
            {"eval_tokens", 512},
            {"schedule", {{"kind", "warmup_cosine"}, {"warmup_steps", 2}, {"total_steps", 20}, {"max_lr", 3e-3}}}}},
          {"finetune", {{"batch_size", 4}, {"eval_every", 5}, {"eval_tokens", 512}}},
          {"engine", {{"strategy", "txl_stream"}, {"increment", 8}, {"online_lr", 1e-3}}},
          {"checkpoint", "pretrain.ckpt"}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "run.json") {
  std::ofstream(dir / name) << j.dump(2);
  return dir / name;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr) {
  args.insert(args.begin(), "dyneval");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_params(const Params<float>& a, const Params<float>& b) {
  const auto x = a.named_all(), y = b.named_all();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].first != y[i].first || x[i].second.data() != y[i].second.data()) return false;
  return true;
}

}  // namespace

TEST_CASE("overrides set dotted keys", "[harness][config]") {
  nlohmann::json doc{{"engine", {{"online_lr", 1.0}}}};
  apply_override(doc, "engine.online_lr=0.003");
  apply_override(doc, "engine.strategy=static");
  apply_override(doc, "sweep.update_frequency=[1,2]");
  apply_override(doc, "seed=7");
  CHECK(doc["engine"]["online_lr"] == 0.003);
  CHECK(doc["engine"]["strategy"] == "static");
  CHECK(doc["sweep"]["update_frequency"] == nlohmann::json{1, 2});
  CHECK(doc["seed"] == 7);
  CHECK_THROWS_AS(apply_override(doc, "no_equals"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "engine..x=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "seed.x=1"), ConfigError);
}

TEST_CASE("config loading resolves defaults and seeds", "[harness][config]") {
  TempDir dir("config");
  const auto path = write_config(dir.path, small_config());
  const auto c = load_run_config_file(path, {"engine.increment=4"}, 9);
  CHECK(c.engine.increment == 4);
  CHECK(c.seed == 9);
  CHECK(c.pretrain.seed == 9);
  CHECK(c.finetune.seed == 9);
  CHECK(c.out_dir == dir.path / "out");
  CHECK(c.path("checkpoint") == dir.path / "pretrain.ckpt");
  CHECK(c.json.at("engine").at("increment") == 4);

  auto bad = small_config();
  bad["corpora"]["eval"] = {{"manifest", "missing.txt"}};
  CHECK_THROWS_AS(load_run_config(bad, dir.path), ConfigError);
  bad = small_config();
  bad["engine"]["strategy"] = "nope";
  CHECK_THROWS_AS(load_run_config(bad, dir.path), ConfigError);
  bad = small_config();
  bad["corpora"]["eval"] = {{"synthetic", {{"alphabet", 8}, {"regimes", {{{"length", 10}, {"transition", {{1.0}}}}}}}}};
  CHECK_THROWS_AS(load_run_config(bad, dir.path), ConfigError);
}

TEST_CASE("exit codes separate config errors from runtime failures", "[harness][cli]") {
  TempDir dir("exit");
  const auto cfg = write_config(dir.path, small_config()).string();
  CHECK(cli({}) == kExitConfig);
  CHECK(cli({"eval"}) == kExitConfig);
  CHECK(cli({"frobnicate", "--config", cfg}) == kExitConfig);
  CHECK(cli({"eval", "--config", (dir.path / "nope.json").string()}) == kExitConfig);
  std::ofstream(dir.path / "broken.json") << "{ not json";
  CHECK(cli({"eval", "--config", (dir.path / "broken.json").string()}) == kExitConfig);
  CHECK(cli({"eval", "--config", cfg, "--override", "engine.increment=\"x\""}) == kExitConfig);
  // checkpoint does not exist yet
  CHECK(cli({"eval", "--config", cfg}) == kExitConfig);
  std::ofstream(dir.path / "pretrain.ckpt") << "garbage";
  // corrupt checkpoint surfaces while running
  CHECK(cli({"eval", "--config", cfg}) == kExitRuntime);
  std::string help;
  CHECK(cli({"--help"}, &help) == kExitOk);
  CHECK(help.find("export-lora-merged") != std::string::npos);
}

TEST_CASE("early stopping halts one evaluation after the loss rises", "[harness][early-stopping]") {
  EarlyStopping es(1);
  const std::vector<double> losses{3.0, 2.5, 2.0, 2.2, 1.0};
  std::size_t stopped_at = 0;
  for (std::size_t i = 0; i < losses.size(); ++i)
    if (es.update(losses[i])) {
      stopped_at = i;
      break;
    }
  CHECK(stopped_at == 3);
  CHECK(es.best() == 2.0);
  CHECK(es.best_index() == 2);
  CHECK(es.evaluations() == 4);

  EarlyStopping tie(1);
  CHECK_FALSE(tie.update(1.0));
  CHECK(tie.update(1.0));

  EarlyStopping two(2);
  CHECK_FALSE(two.update(1.0));
  CHECK_FALSE(two.update(1.5));
  CHECK(two.update(1.2));
}

TEST_CASE("pretrain, resume, finetune and eval through the CLI", "[harness][pipeline]") {
  TempDir dir("pipeline");
  const auto cfg = write_config(dir.path, small_config()).string();
  const auto out = dir.path / "out";

  SECTION("zero steps writes the initial weights") {
    REQUIRE(cli({"pretrain", "--config", cfg, "--override", "pretrain.steps=0"}) == kExitOk);
    const auto c = load_run_config_file(cfg);
    const auto loaded = load_checkpoint(out / "pretrain.ckpt");
    CHECK(same_params(loaded.params, init_model<float>(model_config(c, 9))));
    CHECK(loaded.meta.at("train_step") == 0);
  }

  SECTION("resume continues the step counter") {
    REQUIRE(cli({"pretrain", "--config", cfg}) == kExitOk);
    CHECK(load_checkpoint(out / "pretrain.ckpt").meta.at("train_step") == 20);
    fs::copy_file(out / "pretrain.ckpt", dir.path / "first.ckpt");
    REQUIRE(cli({"pretrain", "--config", cfg, "--override", "pretrain.resume_from=first.ckpt", "--override",
                 "pretrain.steps=5"}) == kExitOk);
    CHECK(load_checkpoint(out / "pretrain.ckpt").meta.at("train_step") == 25);
    std::ifstream log(out / "pretrain_log.jsonl");
    std::int64_t prev = 0;
    int lines = 0;
    for (std::string line; std::getline(log, line); ++lines) {
      const auto step = nlohmann::json::parse(line).at("step").get<std::int64_t>();
      CHECK(step == prev + 1);
      prev = step;
    }
    CHECK(lines == 25);
  }

  SECTION("finetune amount 0 returns the input, eval artifacts are consistent") {
    REQUIRE(cli({"pretrain", "--config", cfg}) == kExitOk);
    fs::copy_file(out / "pretrain.ckpt", dir.path / "pretrain.ckpt");

    REQUIRE(cli({"finetune", "--config", cfg, "--override", "finetune_amount=0"}) == kExitOk);
    CHECK(same_params(load_checkpoint(out / "finetune.ckpt").params, load_checkpoint(dir.path / "pretrain.ckpt").params));

    // increment larger than the context
    CHECK(cli({"eval", "--config", cfg, "--override", "engine.increment=64"}) == kExitConfig);
    REQUIRE(cli({"eval", "--config", cfg, "--override", "online_lrs=[0.001,0.003]"}) == kExitOk);
    const auto summary = read_json(out / "summary.json");
    std::ifstream is(out / "records.jsonl");
    const auto records = read_records_jsonl(is);
    REQUIRE(records.size() == 600);
    double sum = 0;
    for (const auto& r : records) sum += r.nll;
    CHECK(summary.at("total_nats").get<double>() == sum);
    CHECK(summary.at("lr_sweep").size() == 2);
    CHECK(summary.at("config").at("engine").at("increment") == 8);
    CHECK(read_json(out / "records.config.json") == summary.at("config"));

    const auto first = slurp(out / "records.jsonl");
    REQUIRE(cli({"eval", "--config", cfg, "--override", "online_lrs=[0.001,0.003]"}) == kExitOk);
    CHECK(slurp(out / "records.jsonl") == first);

    REQUIRE(cli({"stats", "--config", cfg}) == kExitOk);
    const auto stats = read_json(out / "stats.json");
    CHECK(stats.at("corpora").at("eval").at("num_docs") == 1);
    CHECK(stats.at("corpora").at("eval").contains("entropy_rate"));
  }
}

TEST_CASE("sweeps record failures and keep going", "[harness][sweep]") {
  TempDir dir("sweep");
  auto j = small_config();
  j["pretrain"]["steps"] = 5;
  j["pretrain"]["schedule"]["total_steps"] = 5;
  j["out_dir"] = ".";
  const auto cfg = write_config(dir.path, j).string();
  REQUIRE(cli({"pretrain", "--config", cfg}) == kExitOk);

  REQUIRE(cli({"sweep", "--config", cfg, "--out", (dir.path / "one").string()}) == kExitOk);
  auto s = read_json(dir.path / "one" / "sweep.json");
  CHECK(s.at("cloud").size() == 1);
  CHECK(s.at("front").size() == 1);
  CHECK(s.at("config").at("checkpoint") == "pretrain.ckpt");

  REQUIRE(cli({"sweep", "--config", cfg, "--out", (dir.path / "ranks").string(), "--override",
               "sweep.lora_rank=[2,500]"}) == kExitOk);
  s = read_json(dir.path / "ranks" / "sweep.json");
  CHECK(s.at("cloud").size() == 1);
  REQUIRE(s.at("failures").size() == 1);
  CHECK(s.at("failures")[0].at("label").at("rank") == 500);

  // static points ignore the update axis
  REQUIRE(cli({"sweep", "--config", cfg, "--out", (dir.path / "grid").string(), "--override",
               "sweep.strategy=[\"static\",\"txl_stream\"]", "--override", "sweep.update_frequency=[1,2]"}) == kExitOk);
  s = read_json(dir.path / "grid" / "sweep.json");
  CHECK(s.at("cloud").size() == 3);
  CHECK(read_json(dir.path / "grid" / "front.json") == s.at("front"));

  CHECK(cli({"sweep", "--config", cfg, "--override", "sweep.preset=[\"small\"]"}) == kExitConfig);
  CHECK(cli({"sweep", "--config", cfg, "--override", "sweep.increment=[64]"}) == kExitConfig);
}

TEST_CASE("LoRA export folds adapters", "[harness][lora]") {
  TempDir dir("export");
  auto j = small_config();
  j["out_dir"] = ".";
  const auto cfg = write_config(dir.path, j).string();
  REQUIRE(cli({"pretrain", "--config", cfg, "--override", "pretrain.steps=0"}) == kExitOk);
  const auto base = load_checkpoint(dir.path / "pretrain.ckpt").params;
  auto lora = attach_lora(base, LoraSpec{2, 2.0, 1});
  for (auto& [name, t] : lora.named_adapters())
    for (auto& v : t.data()) v += 0.01f;
  save_lora_checkpoint(dir.path / "adapter.ckpt", lora);

  CHECK(cli({"export-lora-merged", "--config", cfg}) == kExitConfig);
  REQUIRE(cli({"export-lora-merged", "--config", cfg, "--override", "lora_checkpoint=adapter.ckpt"}) == kExitOk);
  const auto merged = load_checkpoint(dir.path / "merged.ckpt");
  CHECK_FALSE(merged.params.lora.has_value());
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6, 7, 0};
  Tape<float> off(false);
  const auto a = forward(off, lora, tokens).data(), b = forward(off, merged.params, tokens).data();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK_THAT(a[i], Catch::Matchers::WithinAbs(b[i], 1e-4));
}

TEST_CASE("2k pretraining steps on a synthetic stream", "[harness][pretrain][slow]") {
  TempDir dir("progress");
  auto j = small_config();
  j["pretrain"]["steps"] = 2000;
  j["pretrain"]["eval_every"] = 500;
  j["pretrain"]["schedule"] = {{"kind", "warmup_cosine"}, {"warmup_steps", 100}, {"total_steps", 2000}, {"max_lr", 3e-3}};
  const auto c = load_run_config(j, dir.path);
  const auto r = cmd_pretrain(c);
  CHECK_FALSE(r.result.diverged);
  const double first = r.summary.at("initial_train_nll"), last = r.summary.at("final_train_nll");
  INFO("initial " << first << " final " << last);
  CHECK(last < first - 0.5);
}
