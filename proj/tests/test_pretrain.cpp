#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "axlstm/pretrain.hpp"

using namespace axlstm;
using namespace axlstm::num;
using namespace axlstm::train;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("axlstm_pt_" + name)).string();
}

feat::MaskPlan plan_of(std::vector<uint8_t> bits) {
  feat::MaskPlan p;
  p.total = static_cast<int64_t>(bits.size());
  p.masked = std::move(bits);
  p.ratio = static_cast<double>(p.masked_count()) / static_cast<double>(p.total);
  return p;
}

ReconHeadParams<float> random_head(int dm, int out, Rng& rng) {
  return {Tensor::randn({dm, dm}, rng, 0.1), Tensor::randn({dm}, rng, 0.05),
          Tensor::randn({dm, out}, rng, 0.1), Tensor::randn({out}, rng, 0.05)};
}

}  // namespace

TEST_CASE("zero head reconstructs zeros") {
  ReconHeadParams<float> head{Tensor::zeros({8, 8}), Tensor::zeros({8}), Tensor::zeros({8, 12}),
                              Tensor::zeros({12})};
  Rng rng(1, "data");
  Tensor z = Tensor::randn({5, 8}, rng);
  Tensor y = reconstruct(z, head);
  CHECK(y.shape() == Shape{4, 12});
  for (float v : y.data()) CHECK(v == 0.f);
}

TEST_CASE("reconstruction shape drops the cls row") {
  Rng rng(2, "init");
  auto head = random_head(192, 64, rng);
  Tensor z = Tensor::randn({251, 192}, rng);
  CHECK(reconstruct(z, head).shape() == Shape{250, 64});
}

TEST_CASE("gradients flow through the head") {
  Rng rng(3, "init");
  auto head = random_head(8, 6, rng);
  Tensor z = Tensor::randn({3, 8}, rng);  // 2 tokens + cls
  auto f = [&](const auto& w) {
    using S = std::decay_t<decltype(w.data()[0])>;
    auto hc = head.template cast<S>();
    hc.w_hidden = w;
    auto y = reconstruct(z.cast<S>(), hc);
    return sum_all(mul(y, y));
  };
  CHECK(grad_check(f, head.w_hidden) < 1e-3);
}

TEST_CASE("perfect reconstruction has zero loss") {
  Rng rng(4, "data");
  Tensor x = Tensor::randn({4, 6}, rng);
  CHECK(masked_mse(x, x, plan_of({1, 0, 1, 0})).item() == 0.f);
}

TEST_CASE("unmasked rows cannot move the loss") {
  Rng rng(5, "data");
  Tensor target = Tensor::randn({4, 6}, rng);
  Tensor pred = Tensor::randn({4, 6}, rng);
  auto plan = plan_of({1, 0, 0, 1});
  const float before = masked_mse(pred, target, plan).item();
  Tensor poked = pred.detach();
  for (int64_t j = 0; j < 6; ++j) {
    poked.mutable_data()[1 * 6 + j] += 7.5f;
    poked.mutable_data()[2 * 6 + j] -= 3.25f;
  }
  const float after = masked_mse(poked, target, plan).item();
  CHECK(before == after);
}

TEST_CASE("constant error on the single masked patch gives c^2") {
  Tensor target = Tensor::zeros({2, 5});
  Tensor pred = Tensor::zeros({2, 5});
  for (int64_t j = 0; j < 5; ++j) pred.mutable_data()[j] = 1.5f;  // row 0 off by c=1.5
  auto plan = plan_of({1, 0});
  CHECK(masked_mse(pred, target, plan).item() == doctest::Approx(2.25));
  CHECK_THROWS_AS(masked_mse(pred, target, plan_of({0, 0})), Error);
}

TEST_CASE("loss gradient is exactly zero on unmasked rows") {
  Rng rng(6, "data");
  Tensor target = Tensor::randn({4, 6}, rng);
  Tensor pred = Tensor::randn({4, 6}, rng);
  pred.set_requires_grad(true);
  auto plan = plan_of({0, 1, 0, 1});
  backward(masked_mse(pred, target, plan));
  const auto& g = pred.grad();
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 6; ++j) {
      if (plan.masked[static_cast<size_t>(i)])
        CHECK(g[static_cast<size_t>(i * 6 + j)] != 0.f);
      else
        CHECK(g[static_cast<size_t>(i * 6 + j)] == 0.f);
    }
}

TEST_CASE("schedule endpoints and shape") {
  PretrainConfig cfg;
  cfg.epochs = 25;
  cfg.warmup_epochs = 10;
  cfg.peak_lr = 3e-4;
  const int64_t total = 1000;
  CHECK(lr_schedule(0, total, cfg) == 0.0);
  const int64_t warmup = 400;  // 10/25 of 1000
  CHECK(lr_schedule(warmup, total, cfg) == doctest::Approx(cfg.peak_lr));
  CHECK(std::abs(lr_schedule(total, total, cfg)) < 1e-9);
  // continuous, nonnegative, single peak
  double prev = 0;
  bool rising = true;
  int direction_changes = 0;
  for (int64_t s = 0; s <= total; ++s) {
    const double lr = lr_schedule(s, total, cfg);
    CHECK(lr >= 0.0);
    CHECK(std::abs(lr - prev) < cfg.peak_lr * 4.0 / warmup);
    if (s > 0) {
      const bool now_rising = lr >= prev;
      if (now_rising != rising) {
        ++direction_changes;
        rising = now_rising;
      }
    }
    prev = lr;
  }
  CHECK(direction_changes <= 1);
  CHECK_THROWS_AS(lr_schedule(-1, total, cfg), ConfigError);
}

TEST_CASE("adamw basics") {
  // zero grads, no decay: parameters stay put
  AdamW opt;
  Tensor p = Tensor::from_vector({2}, {1.f, -2.f});
  opt.add_param("w_test", p, true);
  LeafGradMap<float> grads;
  opt.step(grads, 1e-3, 0.0);
  CHECK(p.data()[0] == 1.f);
  CHECK(p.data()[1] == -2.f);

  // unit gradient, first step: update magnitude equals lr
  AdamW opt2;
  Tensor q = Tensor::from_vector({1}, {0.5f});
  opt2.add_param("w_q", q, false);
  LeafGradMap<float> g2;
  g2[q.node().get()] = {1.f};
  opt2.step(g2, 1e-2, 0.0);
  CHECK(q.data()[0] == doctest::Approx(0.5 - 1e-2).epsilon(1e-6));

  // pure decoupled decay
  AdamW opt3;
  Tensor r = Tensor::from_vector({1}, {2.f});
  opt3.add_param("w_r", r, true);
  LeafGradMap<float> g3;
  opt3.step(g3, 0.1, 0.05);
  CHECK(r.data()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.05)));

  // non-finite gradient names the parameter
  AdamW opt4;
  Tensor s = Tensor::from_vector({1}, {0.f});
  opt4.add_param("w_bad", s, false);
  LeafGradMap<float> g4;
  g4[s.node().get()] = {std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_WITH_AS(opt4.step(g4, 1e-3, 0.0), doctest::Contains("w_bad"), Error);
}

TEST_CASE("synthetic dataset is reproducible and normalized") {
  auto a = synth_dataset(8, 123);
  auto b = synth_dataset(8, 123);
  REQUIRE(a.size() == 8);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == b[i].label);
    REQUIRE(a[i].samples.size() == b[i].samples.size());
    for (size_t j = 0; j < a[i].samples.size(); ++j) CHECK(a[i].samples[j] == b[i].samples[j]);
    float peak = 0;
    for (float v : a[i].samples) peak = std::max(peak, std::abs(v));
    CHECK(peak <= 1.0f);
  }
  auto c = synth_dataset(8, 124);
  bool identical = true;
  for (size_t j = 0; j < c[0].samples.size(); ++j)
    identical = identical && c[0].samples[j] == a[0].samples[j];
  CHECK_FALSE(identical);
}

TEST_CASE("single-tone labels match the dominant mel band") {
  // pure tones at band centers; band energy computed from the filterbank
  feat::LogmelConfig lcfg;
  auto fb = feat::mel_filterbank(lcfg, 16000);
  const int n_bins = lcfg.n_fft / 2 + 1;
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto mel_inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double mlo = mel(100.0), mhi = mel(6000.0);
  for (int band = 0; band < kSynthClasses; ++band) {
    const double center = mel_inv(mlo + (mhi - mlo) * (band + 0.5) / kSynthClasses);
    CHECK(synth_band_of(center) == band);
    std::vector<float> tone(32000);
    for (size_t i = 0; i < tone.size(); ++i)
      tone[i] = static_cast<float>(0.5 * std::sin(2.0 * M_PI * center * static_cast<double>(i) / 16000.0));
    auto spec = feat::logmel(tone, 16000);
    // linear-domain energy per band, using the filterbank's center freqs
    std::vector<double> band_energy(kSynthClasses, 0.0);
    for (int m = 0; m < lcfg.n_mels; ++m) {
      double wsum = 0, fsum = 0;
      for (int k = 0; k < n_bins; ++k) {
        const double w = fb[static_cast<size_t>(m) * n_bins + k];
        wsum += w;
        fsum += w * (static_cast<double>(k) * 16000.0 / lcfg.n_fft);
      }
      if (wsum <= 0) continue;
      const int b = synth_band_of(fsum / wsum);
      for (int64_t t = 0; t < spec.frames; ++t)
        band_energy[static_cast<size_t>(b)] += std::exp(spec.at(t, m));
    }
    const int arg = static_cast<int>(std::max_element(band_energy.begin(), band_energy.end()) -
                                     band_energy.begin());
    CHECK(arg == band);
  }
}

TEST_CASE("model checkpoint round trip is bit exact") {
  enc::EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.depth = 1;
  cfg.expansion = 2;
  cfg.head_dim = 16;
  PretrainConfig pcfg;
  pcfg.seed = 9;
  Rng rng(9, "init");
  ModelParams params = init_model(cfg, pcfg.patch, rng);
  params.spec_mean = -4.5f;
  params.spec_std = 3.25f;
  const std::string path = temp_path("model.axls");
  save_model(path, params, cfg, pcfg, 42, {1.0, 0.5});

  LoadedModel lm = load_model(path);
  CHECK(lm.step == 42);
  CHECK(lm.encoder_cfg.d_model == 16);
  CHECK(lm.params.spec_mean == -4.5f);
  CHECK(lm.params.spec_std == 3.25f);
  std::vector<std::pair<std::string, Tensor*>> want;
  params.visit([&](const std::string& n, Tensor& t) { want.emplace_back(n, &t); });
  size_t idx = 0;
  lm.params.visit([&](const std::string& n, Tensor& t) {
    REQUIRE(n == want[idx].first);
    const auto& a = want[idx].second->data();
    REQUIRE(t.numel() == want[idx].second->numel());
    for (size_t i = 0; i < a.size(); ++i) REQUIRE(t.data()[i] == a[i]);
    ++idx;
  });

  // width mismatch is rejected by name
  enc::EncoderConfig other = cfg;
  other.d_model = 32;
  CHECK_THROWS_WITH_AS(load_model(path, &other), doctest::Contains("width"), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("truncated checkpoint is rejected, not partially loaded") {
  enc::EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.depth = 1;
  cfg.expansion = 2;
  cfg.head_dim = 16;
  PretrainConfig pcfg;
  Rng rng(10, "init");
  ModelParams params = init_model(cfg, pcfg.patch, rng);
  const std::string path = temp_path("trunc.axls");
  save_model(path, params, cfg, pcfg, 1, {});
  const auto full_size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full_size - 128);
  CHECK_THROWS_AS(load_model(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("container rejects bad magic and wrong version") {
  const std::string path = temp_path("junk.axls");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
    const uint32_t v = 1;
    out.write(reinterpret_cast<const char*>(&v), 4);
    const uint64_t z = 0;
    out.write(reinterpret_cast<const char*>(&z), 8);
  }
  CHECK_THROWS_WITH_AS(ckpt::load(path), doctest::Contains("magic"), IoError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "AXLS";
    const uint32_t v = 77;
    out.write(reinterpret_cast<const char*>(&v), 4);
    const uint64_t z = 0;
    out.write(reinterpret_cast<const char*>(&z), 8);
  }
  CHECK_THROWS_WITH_AS(ckpt::load(path), doctest::Contains("version"), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("gradients flow through the full micro pipeline") {
  // 2 blocks, d_m = 16, 6 patches, masked MSE: the end-to-end tape.
  enc::EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.depth = 2;
  cfg.expansion = 2;
  cfg.head_dim = 16;
  Rng rng(11, "init");
  feat::PatchConfig patch{4, 16};
  ModelParams params = init_model(cfg, patch, rng);
  Rng rd(12, "data");
  Tensor raw = Tensor::randn({6, 64}, rd);
  Tensor pos = feat::posemb_with_cls(3, 2, 16);
  auto plan = plan_of({1, 0, 1, 0, 1, 0});

  auto f = [&](const auto& r) {
    using S = std::decay_t<decltype(r.data()[0])>;
    auto tokens = feat::build_encoder_input(r, plan, params.embed_w.cast<S>(),
                                            params.embed_b.cast<S>(), params.cls_token.cast<S>(),
                                            params.mask_token.cast<S>(), pos.cast<S>());
    auto z = enc::encode(tokens, cfg, params.encoder.cast<S>(), mlstm::Impl::kComposed);
    auto pred = reconstruct(z, params.head.cast<S>());
    return masked_mse(pred, r, plan);
  };
  CHECK(grad_check(f, raw) < 1e-3);
}

TEST_CASE("one step at zero lr leaves parameters unchanged") {
  PretrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 2;
  cfg.peak_lr = 0.0;
  cfg.weight_decay = 0.0;
  cfg.seed = 5;
  enc::EncoderConfig ecfg;
  ecfg.d_model = 16;
  ecfg.depth = 1;
  ecfg.expansion = 2;
  ecfg.head_dim = 16;
  auto data = synth_dataset(4, 7);

  Rng rng(cfg.seed, "init");
  ModelParams reference = init_model(ecfg, cfg.patch, rng);
  TrainResult result = axlstm::train::train(cfg, ecfg, data);
  bool same = true;
  std::vector<const Tensor*> got, want;
  result.params.visit([&](const std::string&, Tensor& t) { got.push_back(&t); });
  reference.visit([&](const std::string&, Tensor& t) { want.push_back(&t); });
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i)
    for (int64_t j = 0; j < got[i]->numel(); ++j)
      same = same && got[i]->data()[static_cast<size_t>(j)] == want[i]->data()[static_cast<size_t>(j)];
  CHECK(same);
  CHECK(result.losses.size() == 1);
  CHECK(std::isfinite(result.losses[0]));
}

TEST_CASE("training is deterministic and thread-count invariant") {
  PretrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  cfg.peak_lr = 1e-3;
  cfg.seed = 21;
  enc::EncoderConfig ecfg;
  ecfg.d_model = 16;
  ecfg.depth = 1;
  ecfg.expansion = 2;
  ecfg.head_dim = 16;
  auto data = synth_dataset(6, 3);

  const int saved = omp_get_max_threads();
  omp_set_num_threads(2);
  TrainResult a = axlstm::train::train(cfg, ecfg, data);
  omp_set_num_threads(1);
  TrainResult b = axlstm::train::train(cfg, ecfg, data);
  omp_set_num_threads(saved);
  REQUIRE(a.losses.size() == b.losses.size());
  for (size_t i = 0; i < a.losses.size(); ++i) CHECK(a.losses[i] == b.losses[i]);
}

TEST_CASE("training rejects clips shorter than the crop") {
  PretrainConfig cfg;
  cfg.steps = 1;
  enc::EncoderConfig ecfg;
  ecfg.d_model = 16;
  ecfg.depth = 1;
  ecfg.expansion = 2;
  ecfg.head_dim = 16;
  std::vector<SynthClip> data(1);
  data[0].samples.assign(1000, 0.f);
  CHECK_THROWS_AS(axlstm::train::train(cfg, ecfg, data), ConfigError);
}
