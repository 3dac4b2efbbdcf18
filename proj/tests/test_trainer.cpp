#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vitlm/synth.hpp"
#include "vitlm/trainer.hpp"

using namespace vitlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vision.input_shape = {4, 8, 8};
  c.vision.patch = {2, 4, 4};
  c.vision.d_vis = 16;
  c.vision.n_heads = 2;
  c.vision.n_layers = 1;
  c.vision.pool_stride = {1, 2, 2};
  c.lm.d_lm = 16;
  c.lm.n_heads = 2;
  c.lm.n_layers = 1;
  c.lm.max_seq_len = 48;
  c.seed = 3;
  return c;
}

const std::vector<std::string>& sentences() {
  static const std::vector<std::string> s{"There is a 10 mm lesion in the liver.", "No abnormality detected.",
                                          "There is a 15 mm cyst in the kidney.", "There is a 20 mm nodule in the lung."};
  return s;
}

Vocab small_vocab() {
  auto corpus = sentences();
  PromptTemplates t;
  for (const char* r : {"chest", "abdomen", "pelvis"}) corpus.push_back(t.render_mrg(r));
  return Vocab::build(corpus);
}

template <std::floating_point T>
std::vector<TrainExample<T>> small_dataset(const MultimodalModel<T>& m, std::size_t n, std::uint64_t seed) {
  const auto [D, H, W] = m.config().vision.input_shape;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<TrainExample<T>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<T> v(D * H * W);
    for (auto& x : v) x = static_cast<T>(u(rng));
    const char* region = i % 2 ? "abdomen" : "chest";
    out.push_back({"ex" + std::to_string(i), Tensor<T>({1, D, H, W}, std::move(v)), m.mrg_prompt(region),
                   m.target(sentences()[i % sentences().size()])});
  }
  return out;
}

template <std::floating_point T>
std::map<std::string, std::vector<T>> snapshot(const ParamStore<T>& store) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& e : store.entries()) out[e.name].assign(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------- loss

TEST(MaskedCe, UniformLogitsGiveLogFour) {
  auto logits = Tensor<double>::zeros({3, 4});
  for (const auto& mask : {std::vector<bool>{true, false, false}, std::vector<bool>{true, true, true},
                           std::vector<bool>{false, true, false}}) {
    EXPECT_NEAR(masked_ce_loss(logits, {0, 3, 1}, mask).item(), std::log(4.0), 1e-12);
  }
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(MaskedCe, SaturatedCorrectClassGivesZero) {
  auto logits = Tensor<double>::matrix({{0, 1e4, 0, 0}});
  EXPECT_LT(masked_ce_loss(logits, {1}, {true}).item(), 1e-12);
}

TEST(MaskedCe, TwoPositionsMatchDirectFormula) {
  const std::vector<std::vector<double>> rows{{0.5, -1.0, 2.0}, {1.5, 0.0, -0.5}, {3.0, 3.0, 3.0}};
  auto logits = Tensor<double>::matrix({{0.5, -1.0, 2.0}, {1.5, 0.0, -0.5}, {3.0, 3.0, 3.0}});
  const std::vector<std::size_t> targets{2, 1, 0};
  auto direct = [&](std::size_t i) {
    double z = 0.0;
    for (double v : rows[i]) z += std::exp(v);
    return -(rows[i][targets[i]] - std::log(z));
  };
  const double want = 0.5 * (direct(0) + direct(1));
  EXPECT_NEAR(masked_ce_loss(logits, targets, {true, true, false}).item(), want, 1e-12);
}

TEST(MaskedCe, EmptyMaskAndShapeErrors) {
  auto logits = Tensor<double>::zeros({2, 4});
  EXPECT_THROW(masked_ce_loss(logits, {0, 0}, {false, false}), ContractError);
  EXPECT_THROW(masked_ce_loss(logits, {0}, {true}), DimensionError);
}

TEST(MaskedCe, DualityWithSequenceLogProb) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 3, 1);
  for (const auto& ex : data) {
    auto image = m.encode(ex.volume);
    auto input = assemble_input(ex.prompt, image, ex.target, m.params(), m.config().lm);
    auto [targets, mask] = shifted_targets(input);
    auto logits = lm_forward(input, m.params(), m.config().lm);
    const double ce_sum = masked_ce_sum(logits, targets, mask).item();
    const double ce_mean = masked_ce_loss(logits, targets, mask).item();
    const double lp = m.log_prob(ex.prompt, image, ex.target).item();
    EXPECT_NEAR(lp, -ce_sum, 1e-9);
    EXPECT_NEAR(ce_mean, -lp / static_cast<double>(ex.target.size()), 1e-9);
  }
}

TEST(MaskedCe, ShiftedTargetsScoreTargetTokensOnly) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  ImageContext<double> img{Tensor<double>::zeros({2, 16})};
  TokenSequence target{{7, 8, Vocab::kEos}};
  auto in = assemble_input(m.mrg_prompt("chest"), img, target, m.params(), m.config().lm);
  auto [targets, mask] = shifted_targets(in);
  const std::size_t L = in.length();
  EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 3);
  EXPECT_FALSE(mask[L - 1]);
  EXPECT_EQ(targets[L - 4], 7u);
  EXPECT_EQ(targets[L - 3], 8u);
  EXPECT_EQ(targets[L - 2], static_cast<std::size_t>(Vocab::kEos));
}

// ---------------------------------------------------------------- optimizer

TEST(AdamW, ZeroGradientOnlyDecays) {
  TrainConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.2;
  Tensor<double> p = Tensor<double>::vector({2.0, -3.0}, true);
  p.grad_buffer();
  AdamW<double> opt(c);
  opt.step({{"p", p}});
  EXPECT_DOUBLE_EQ(p.at(0), 2.0 * (1.0 - 0.1 * 0.2));
  EXPECT_DOUBLE_EQ(p.at(1), -3.0 * (1.0 - 0.1 * 0.2));
}

TEST(AdamW, SingleScalarHandStep) {
  TrainConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.01;
  Tensor<double> p = Tensor<double>::scalar(1.0, true);
  p.grad_buffer()[0] = 1.0;
  AdamW<double> opt(c);
  opt.step({{"p", p}});
  // decay 1 -> 0.999; m_hat = 1, v_hat = 1; step 0.1 / (1 + 1e-8)
  EXPECT_NEAR(p.item(), 0.899, 1e-8);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, TwoEqualGradientStepsFollowClosedForm) {
  TrainConfig c;
  c.lr = 0.05;
  c.weight_decay = 0.0;
  const std::vector<double> g{0.5, -2.0, 1e-3};
  const std::vector<double> p0{0.3, 1.0, -0.7};
  Tensor<double> p = Tensor<double>::vector(p0, true);
  AdamW<double> opt(c);
  for (int k = 0; k < 2; ++k) {
    p.clear_grad();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad_buffer()[i] = g[i];
    opt.step({{"p", p}});
  }
  // With constant gradients both bias-corrected moments equal g and g^2.
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double want = p0[i] - 2.0 * c.lr * g[i] / (std::abs(g[i]) + c.eps);
    EXPECT_NEAR(p.at(i), want, 1e-12);
  }
}

TEST(AdamW, SkipsTensorsWithoutGradient) {
  TrainConfig c;
  c.lr = 0.1;
  Tensor<double> p = Tensor<double>::scalar(1.0, true);
  AdamW<double> opt(c);
  opt.step({{"p", p}});
  EXPECT_EQ(p.item(), 1.0);
}

TEST(ClipGradNorm, RescalesAboveThreshold) {
  Tensor<double> a = Tensor<double>::vector({3.0}, true), b = Tensor<double>::vector({4.0}, true);
  a.grad_buffer()[0] = 3.0;
  b.grad_buffer()[0] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({{"a", a}, {"b", b}}, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-6);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-6);
  EXPECT_NEAR(clip_grad_norm<double>({{"a", a}, {"b", b}}, 10.0), 1.0, 1e-6);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.precision = "f16";
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------- counts

TEST(ParamCount, ToyGroups) {
  MultimodalModel<float> m(ModelConfig{}, small_vocab());
  const auto c = param_count(m.params());
  // 64x128 + 128 and 128x128 + 128
  EXPECT_EQ(c.get("projector"), 64u * 128u + 128u + 128u * 128u + 128u);
  EXPECT_EQ(c.get("projector"), 24'832u);
  EXPECT_EQ(m.params().get("lm.blocks.0.attn.q.lora_a").size() + m.params().get("lm.blocks.0.attn.q.lora_b").size(),
            2'048u);
  EXPECT_EQ(c.get("lora"), 2u * 2u * 2'048u);
  EXPECT_EQ(c.trainable(), c.get("vision") + c.get("projector") + c.get("lora"));
  EXPECT_EQ(c.frozen(), c.get("lm_base"));
  std::size_t total = 0;
  for (const auto& e : m.params().entries()) total += e.tensor.size();
  EXPECT_EQ(c.trainable() + c.frozen(), total);
  const auto text = format_param_counts(c);
  EXPECT_NE(text.find("/ 24832 /"), std::string::npos);
}

TEST(ParamCount, HumanCounts) {
  EXPECT_EQ(human_count(2'048), "2.0K");
  EXPECT_EQ(human_count(59'000'000), "59.0M");
  EXPECT_EQ(human_count(1'100'000'000), "1.1B");
  EXPECT_EQ(human_count(999), "999");
}

// ---------------------------------------------------------------- training

TEST(Training, GradientsReachTrainableGroupsOnly) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 2, 2);
  // B = 0 blocks the gradient to A, so give B a value first.
  for (auto& e : m.params().entries()) {
    if (e.name.ends_with(".lora_b")) std::fill(e.tensor.mutable_data().begin(), e.tensor.mutable_data().end(), 0.01);
  }
  Tape<double> tape;
  auto [total, tokens] = batch_ce_sum<double>(m, {&data[0], &data[1]});
  tape.backward(total);
  for (const auto& e : m.params().entries()) {
    if (e.group == ParamGroup::lm_base) {
      EXPECT_FALSE(e.tensor.has_grad()) << e.name;
    } else {
      EXPECT_TRUE(e.tensor.has_grad()) << e.name;
    }
  }
}

TEST(Training, FrozenBaseBitIdenticalAndTrainablesMove) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 6, 3);
  const auto before = snapshot(m.params());
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 3;
  c.epochs = 2;
  train_loop(m, data, c);
  std::map<ParamGroup, bool> moved;
  for (const auto& e : m.params().entries()) {
    const auto& old = before.at(e.name);
    const bool same = std::equal(old.begin(), old.end(), e.tensor.data().begin());
    if (e.group == ParamGroup::lm_base) {
      EXPECT_TRUE(same) << e.name;
    } else {
      moved[e.group] = moved[e.group] || !same;
    }
  }
  EXPECT_TRUE(moved[ParamGroup::vision]);
  EXPECT_TRUE(moved[ParamGroup::projector]);
  EXPECT_TRUE(moved[ParamGroup::lora]);
}

TEST(Training, OneStepLowersLossOnFixedBatch) {
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    ModelConfig mc;
    mc.seed = 100 + trial;
    MultimodalModel<float> m(mc, small_vocab());
    const auto data = small_dataset(m, 4, 10 + trial);
    const double before = mean_ce(m, data);
    TrainConfig c;
    c.lr = 1e-3;
    c.batch_size = 4;
    c.epochs = 1;
    c.seed = trial;
    train_loop(m, data, c);
    EXPECT_LT(mean_ce(m, data), before) << "trial " << trial;
  }
}

TEST(Training, SameSeedReproducesLossLog) {
  auto run = [] {
    MultimodalModel<double> m(tiny_config(), small_vocab());
    const auto data = small_dataset(m, 5, 4);
    TrainConfig c;
    c.lr = 2e-3;
    c.batch_size = 2;
    c.epochs = 2;
    c.seed = 7;
    std::vector<std::pair<double, std::size_t>> out;
    for (const auto& r : train_loop(m, data, c)) out.emplace_back(r.loss, r.tokens);
    return out;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(a, b);
}

TEST(Training, WritesLossLogAndEpochCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "vitlm_train_out";
  std::filesystem::remove_all(dir);
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 4, 5);
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = 2;
  std::size_t epochs_seen = 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t) { ++epochs_seen; };
  train_loop(m, data, c, dir, hooks, {{"task", "mrg"}});
  EXPECT_EQ(epochs_seen, 2u);
  const auto rows = read_jsonl(dir / "loss.jsonl");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[3]["step"], 4);
  for (const char* k : {"step", "loss", "tokens", "seconds"}) EXPECT_TRUE(rows[0].contains(k)) << k;
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_001"));
  auto back = MultimodalModel<double>::load(dir / "epoch_002");
  EXPECT_TRUE(bitwise_equal(back.params().get("projector.fc1.weight"), m.params().get("projector.fc1.weight")));
  std::filesystem::remove_all(dir);
}

TEST(Training, MaxStepsStopsEarly) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 6, 6);
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = 5;
  c.max_steps = 4;
  EXPECT_EQ(train_loop(m, data, c).size(), 4u);
}

TEST(Training, NonFiniteInputAbortsWithBatchIds) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  auto data = small_dataset(m, 2, 7);
  data[1].volume.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig c;
  c.batch_size = 2;
  c.epochs = 1;
  try {
    train_loop(m, data, c);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("ex1"), std::string::npos);
  }
  EXPECT_THROW(train_loop(m, std::vector<TrainExample<double>>{}, c), ContractError);
}

TEST(Training, StopHookEndsRun) {
  MultimodalModel<double> m(tiny_config(), small_vocab());
  const auto data = small_dataset(m, 6, 8);
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 2;
  c.epochs = 5;
  TrainHooks hooks;
  std::size_t epochs = 0;
  hooks.on_epoch = [&](std::size_t) { ++epochs; };
  hooks.stop = [](const LossReport& r) { return r.step == 5; };
  EXPECT_EQ(train_loop(m, data, c, std::nullopt, hooks).size(), 5u);
  EXPECT_EQ(epochs, 2u);
}
