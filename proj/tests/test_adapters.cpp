#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "dyneval/adapters.hpp"
#include "dyneval/checkpoint.hpp"

using namespace dyneval;

namespace {

std::vector<int> some_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  std::vector<int> t(n);
  for (auto& x : t) x = pick(rng);
  return t;
}

std::size_t count_instantiated(const Params<float>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p.named_adapters()) n += t.size();
  return n;
}

}  // namespace

TEST_CASE("LoRA trainable count matches the closed form", "[adapters][lora]") {
  const auto base = init_model<float>(model_preset("tiny", 257, 32));
  const auto r4 = attach_lora(base, LoraSpec{4, 4.0, 0});
  CHECK(r4.trainable_count() == 5120);
  CHECK(count_instantiated(r4) == 5120);
  CHECK(lora_trainable_count(base.config, 4) == 5120);
  for (int r : {1, 2, 4, 8, 16}) {
    const auto a = attach_lora(base, LoraSpec{r, double(r), 0});
    const auto b = attach_lora(base, LoraSpec{2 * r, double(2 * r), 0});
    CHECK(a.trainable_count() == lora_trainable_count(base.config, r));
    CHECK(b.trainable_count() == 2 * a.trainable_count());
  }
  for (const auto& [name, t] : r4.named_base()) CHECK_FALSE(t.requires_grad());
}

TEST_CASE("attached adapters leave the forward unchanged", "[adapters][lora]") {
  const auto base = init_model<float>(model_preset("tiny", 257, 32));
  const auto lora = attach_lora(base, LoraSpec{4, 4.0, 3});
  const auto tokens = some_tokens(20, 257, 1);
  Tape<float> off(false);
  CHECK(forward(off, lora, tokens).data() == forward(off, base, tokens).data());
}

TEST_CASE("attach_lora errors", "[adapters][lora][errors]") {
  const auto base = init_model<float>(model_preset("tiny", 257, 32));
  CHECK_THROWS_AS(attach_lora(base, LoraSpec{0, 1.0, 0}), ConfigError);
  CHECK_THROWS_AS(attach_lora(base, LoraSpec{65, 65.0, 0}), ConfigError);
  CHECK_NOTHROW(attach_lora(base, LoraSpec{64, 64.0, 0}));
  CHECK_THROWS_AS(attach_lora(attach_lora(base, LoraSpec{2, 2.0, 0}), LoraSpec{2, 2.0, 0}), ConfigError);
}

TEST_CASE("merging folds adapters into the base weights", "[adapters][lora][merge]") {
  const auto base = init_model<double>(model_preset("tiny", 257, 32));
  auto lora = attach_lora(base, LoraSpec{4, 8.0, 5});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal(0.0, 0.05);
  for (auto& [name, t] : lora.named_adapters())
    for (auto& v : t.data()) v += normal(rng);
  const auto merged = merge_lora(lora);
  CHECK_FALSE(merged.lora.has_value());
  CHECK(merged.named_adapters().empty());
  const auto tokens = some_tokens(16, 257, 4);
  Tape<double> off(false);
  const auto a = forward(off, lora, tokens).data();
  const auto b = forward(off, merged, tokens).data();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK_THAT(a[i], Catch::Matchers::WithinAbs(b[i], 1e-10));
}

TEST_CASE("freeze masks select trainable tensors", "[adapters][freeze]") {
  const auto base = init_model<float>(model_preset("small", 257, 32));
  const auto m = apply_freeze_mask(base, FreezeMask{{2}, false});
  for (const auto& [name, t] : m.named_all()) CHECK(t.requires_grad() == name.starts_with("blocks.2."));

  const auto all = apply_freeze_mask(base, FreezeMask{{0, 1, 2, 3}, true});
  CHECK(all.trainable_count() == base.trainable_count());
  CHECK(all.trainable_count() == count_params(base.config));

  CHECK_THROWS_AS(apply_freeze_mask(base, FreezeMask{}), ConfigError);
  CHECK_THROWS_AS(apply_freeze_mask(base, FreezeMask{{4}, false}), ConfigError);
  CHECK_THROWS_AS(apply_freeze_mask(base, FreezeMask{{-1}, false}), ConfigError);

  const nlohmann::json j = FreezeMask{{0, 3}, true};
  const auto back = j.get<FreezeMask>();
  CHECK(back.blocks == std::set<int>{0, 3});
  CHECK(back.embeddings);
}

TEST_CASE("LoRA-only checkpoints", "[adapters][checkpoint]") {
  const auto base = init_model<float>(model_preset("tiny", 257, 32));
  auto lora = attach_lora(base, LoraSpec{2, 2.0, 7});
  for (auto& [name, t] : lora.named_adapters())
    for (auto& v : t.data()) v += 0.01f;
  const auto dir = std::filesystem::temp_directory_path() / "dyneval_test_adapters";
  std::filesystem::create_directories(dir);
  save_lora_checkpoint(dir / "adapter.ckpt", lora);
  const auto full_size = [&] {
    save_checkpoint(dir / "full.ckpt", base);
    return std::filesystem::file_size(dir / "full.ckpt");
  }();
  CHECK(std::filesystem::file_size(dir / "adapter.ckpt") < full_size / 4);
  const auto back = load_lora_checkpoint(dir / "adapter.ckpt", base);
  REQUIRE(back.lora.has_value());
  CHECK(back.lora->rank == 2);
  const auto x = back.named_all(), y = lora.named_all();
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].first == y[i].first);
    CHECK(x[i].second.data() == y[i].second.data());
    CHECK(x[i].second.requires_grad() == y[i].second.requires_grad());
  }
  std::filesystem::remove_all(dir);
}
