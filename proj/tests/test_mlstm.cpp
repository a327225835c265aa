#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "axlstm/mlstm.hpp"
#include "oracle_mlstm.hpp"

using namespace axlstm;
using namespace axlstm::num;
using namespace axlstm::mlstm;

namespace {

double max_rel(const std::vector<float>& got, const std::vector<double>& want) {
  double m = 0;
  for (size_t i = 0; i < got.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(got[i]) - want[i]) / (std::abs(want[i]) + 1e-8));
  return m;
}

double max_rel_ff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) /
                        (std::abs(static_cast<double>(b[i])) + 1e-8));
  return m;
}

Tensor random_seq(int64_t len, int d, uint64_t seed, double scale = 1.0) {
  Rng rng(seed, "data");
  return Tensor::randn({len, d}, rng, scale);
}

}  // namespace

TEST_CASE("zero input, zero params gives zero output") {
  const int d = 4;
  auto p = HeadParams<float>::zeros(d);
  Tensor x = Tensor::zeros({1, d});
  auto r = step(MlstmState<float>::zeros(d), x, p);
  for (float v : r.hidden.data()) CHECK(v == 0.f);
  for (float v : r.state.cell.data()) CHECK(v == 0.f);
  for (float v : r.state.normalizer.data()) CHECK(v == 0.f);

  Tensor seq = Tensor::zeros({5, d});
  auto h = recurrent(seq, p);
  for (float v : h.data()) CHECK(v == 0.f);
}

TEST_CASE("single step with identity projections matches the transcription") {
  // d=2, W_q=W_k=W_v=I, zero biases, zero gate weights so i=f=exp(0)=1.
  const int d = 2;
  auto p = HeadParams<float>::zeros(d);
  for (int i = 0; i < d; ++i) {
    p.w_query.mutable_data()[i * d + i] = 1.f;
    p.w_key.mutable_data()[i * d + i] = 1.f;
    p.w_value.mutable_data()[i * d + i] = 1.f;
  }
  Tensor x = Tensor::from_vector({1, d}, {1.f, 0.f});
  auto r = step(MlstmState<float>::zeros(d), x, p);
  auto ref = oracle::mlstm_unstabilized(x.data().data(), 1, p.view());
  // q=(1,0), k=(1/sqrt(2),0), v=(1,0); C = v k^T; h = 0.5 * C q / max(|n.q|,1)
  CHECK(r.state.cell.at(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(max_rel(r.hidden.data(), ref) < 1e-6);
}

TEST_CASE("stabilized paths match the unstabilized double oracle") {
  const int d = 8;
  const int64_t len = 16;
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed * 31 + 7, "init");
    auto p = HeadParams<float>::random(d, rng);
    Tensor seq = random_seq(len, d, seed + 100);
    auto ref = oracle::mlstm_unstabilized(seq.data().data(), len, p.view());

    auto fused = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kFused);
    CHECK(max_rel(fused.data(), ref) < 1e-5);

    // The float32 composed fold agrees with the oracle per-step at the
    // precision float32 can support.
    auto composed = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kComposed);
    for (int64_t t = 0; t < len; ++t) {
      double num = 0, den = 0;
      for (int j = 0; j < d; ++j) {
        num = std::max(num, std::abs(static_cast<double>(composed.at(t, j)) - ref[t * d + j]));
        den = std::max(den, std::abs(ref[static_cast<size_t>(t * d + j)]));
      }
      CHECK(num / (den + 1e-8) < 1e-5);
    }
  }
}

TEST_CASE("sigmoid gate mode matches the sigmoid transcription") {
  const int d = 6;
  const int64_t len = 12;
  Rng rng(5, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 9);
  auto ref = oracle::mlstm_unstabilized(seq.data().data(), len, p.view(), /*sigmoid_gate=*/true);
  auto fused = recurrent(seq, p, GateType::kSigmoid, nullptr, true, Impl::kFused);
  CHECK(max_rel(fused.data(), ref) < 1e-5);
  auto par = parallel(seq, p, GateType::kSigmoid, true, Impl::kFused);
  CHECK(max_rel(par.data(), ref) < 1e-5);
}

TEST_CASE("recurrent length 1 equals a single step") {
  const int d = 5;
  Rng rng(11, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(1, d, 3);
  auto h1 = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kComposed);
  auto h2 = step(MlstmState<float>::zeros(d), seq, p).hidden;
  for (int j = 0; j < d; ++j) CHECK(h1.at(0, j) == h2.at(0, j));
  auto h3 = parallel(seq, p, GateType::kExponential, true, Impl::kFused);
  CHECK(max_rel_ff(h3.data(), h2.data()) < 1e-5);
}

TEST_CASE("parallel matches recurrent elementwise") {
  for (auto [len, d, seed] : {std::tuple<int64_t, int, uint64_t>{7, 4, 1},
                              {64, 16, 2},
                              {250, 32, 3}}) {
    Rng rng(seed, "init");
    auto p = HeadParams<float>::random(d, rng);
    Tensor seq = random_seq(len, d, seed + 40);
    auto hr = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kFused);
    auto hp = parallel(seq, p, GateType::kExponential, true, Impl::kFused);
    CHECK(max_rel_ff(hp.data(), hr.data()) < 1e-4);
  }
}

TEST_CASE("composed paths agree with the fused kernels") {
  const int d = 16;
  const int64_t len = 64;
  Rng rng(21, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 22);
  auto fused_r = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kFused);
  auto comp_r = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kComposed);
  auto fused_p = parallel(seq, p, GateType::kExponential, true, Impl::kFused);
  auto comp_p = parallel(seq, p, GateType::kExponential, true, Impl::kComposed);
  // float32 compositions vs double-internal kernels: norm-level agreement
  double scale = 0;
  for (float v : fused_r.data()) scale = std::max(scale, std::abs(static_cast<double>(v)));
  double dr = 0, dp = 0;
  for (size_t i = 0; i < fused_r.data().size(); ++i) {
    dr = std::max(dr, std::abs(static_cast<double>(comp_r.data()[i]) - fused_r.data()[i]));
    dp = std::max(dp, std::abs(static_cast<double>(comp_p.data()[i]) - fused_p.data()[i]));
  }
  CHECK(dr / scale < 5e-5);
  CHECK(dp / scale < 5e-5);
}

TEST_CASE("stabilizer keeps extreme gate pre-activations finite") {
  // Gate pre-activations around +/-20; the naive exponential form overflows
  // within a few dozen steps while both stabilized forms stay finite and
  // agree.
  const int d = 16;
  const int64_t len = 500;
  Rng rng(77, "init");
  auto p = HeadParams<float>::random(d, rng);
  {
    // Pre-activations swing around +/-20 with an upward forget-gate drift,
    // so the raw exp form accumulates past the double-precision range.
    auto& wf = p.w_fgate.mutable_data();
    auto& wi = p.w_igate.mutable_data();
    Rng sign(78, "init");
    for (int i = 0; i < d; ++i) {
      wf[i] = (sign.uniform() < 0.5 ? -20.f : 20.f) / std::sqrt(static_cast<float>(d));
      wi[i] = (sign.uniform() < 0.5 ? -20.f : 20.f) / std::sqrt(static_cast<float>(d));
    }
    p.b_fgate.mutable_data()[0] = 20.f;
  }
  Tensor seq = random_seq(len, d, 79);
  auto hr = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kFused);
  auto hp = parallel(seq, p, GateType::kExponential, true, Impl::kFused);
  for (float v : hr.data()) REQUIRE(std::isfinite(v));
  for (float v : hp.data()) REQUIRE(std::isfinite(v));
  CHECK(max_rel_ff(hp.data(), hr.data()) < 1e-3);

  // The oracle's raw exp form overflows on the same input.
  auto ref = oracle::mlstm_unstabilized(seq.data().data(), len, p.view());
  bool oracle_blew_up = false;
  for (double v : ref) oracle_blew_up = oracle_blew_up || !std::isfinite(v);
  CHECK(oracle_blew_up);
}

TEST_CASE("sabotaged stabilizer is caught by the stress check") {
  const int d = 8;
  const int64_t len = 200;
  Rng rng(91, "init");
  auto p = HeadParams<float>::random(d, rng);
  p.b_fgate.mutable_data()[0] = 20.f;  // push the naive form into overflow
  Tensor seq = random_seq(len, d, 92);
  g_sabotage_stabilizer = true;
  auto h = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kFused);
  g_sabotage_stabilizer = false;
  bool finite = true;
  for (float v : h.data()) finite = finite && std::isfinite(v);
  CHECK_FALSE(finite);
}

TEST_CASE("multihead with one head equals the single head run") {
  const int d = 12;
  const int64_t len = 20;
  Rng rng(31, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 32);
  auto solo = parallel(seq, p, GateType::kExponential, true, Impl::kFused);
  auto multi = multihead(seq, {p}, GateType::kExponential, Mode::kParallel);
  for (int64_t i = 0; i < solo.numel(); ++i) CHECK(solo.data()[i] == multi.data()[i]);
}

TEST_CASE("zeroed head stays zero and leaves the other head alone") {
  const int d = 6;
  const int64_t len = 10;
  Rng rng(41, "init");
  auto p1 = HeadParams<float>::zeros(d);
  auto p2 = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, 2 * d, 42);
  auto out = multihead(seq, {p1, p2}, GateType::kExponential, Mode::kRecurrent);
  Tensor right = slice(seq, 1, d, d);
  auto solo = recurrent(right, p2, GateType::kExponential, nullptr, true, Impl::kFused);
  for (int64_t t = 0; t < len; ++t)
    for (int j = 0; j < d; ++j) {
      CHECK(out.at(t, j) == 0.f);
      CHECK(out.at(t, d + j) == solo.at(t, j));
    }
}

TEST_CASE("multihead equals manually stacked per-head runs") {
  const int h = 4, d = 16;
  const int64_t len = 32;
  std::vector<HeadParams<float>> heads;
  Rng rng(51, "init");
  for (int i = 0; i < h; ++i) heads.push_back(HeadParams<float>::random(d, rng));
  Tensor seq = random_seq(len, h * d, 52);
  auto out = multihead(seq, heads, GateType::kExponential, Mode::kRecurrent);
  for (int i = 0; i < h; ++i) {
    auto part = slice(seq, 1, i * d, d);
    auto solo = recurrent(part, heads[static_cast<size_t>(i)], GateType::kExponential, nullptr,
                          true, Impl::kFused);
    for (int64_t t = 0; t < len; ++t)
      for (int j = 0; j < d; ++j) CHECK(out.at(t, i * d + j) == solo.at(t, j));
  }
}

TEST_CASE("permuting heads permutes output channel groups") {
  const int d = 8;
  const int64_t len = 16;
  Rng rng(61, "init");
  auto pa = HeadParams<float>::random(d, rng);
  auto pb = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, 2 * d, 62);
  // Same channel slice fed to the same head parameters must give the same
  // values wherever that head lands in the concatenation.
  auto ab = multihead(seq, {pa, pb}, GateType::kExponential, Mode::kParallel);
  Tensor seq_swapped = concat<float>({slice(seq, 1, d, d), slice(seq, 1, 0, d)}, 1);
  auto ba = multihead(seq_swapped, {pb, pa}, GateType::kExponential, Mode::kParallel);
  for (int64_t t = 0; t < len; ++t)
    for (int j = 0; j < d; ++j) {
      CHECK(ab.at(t, j) == ba.at(t, d + j));
      CHECK(ab.at(t, d + j) == ba.at(t, j));
    }
}

TEST_CASE("gradients flow through a single step") {
  const int d = 4;
  Rng rng(71, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor x = random_seq(1, d, 72);
  auto f = [&](const auto& w) {
    using S = std::decay_t<decltype(w.data()[0])>;
    auto pc = p.template cast<S>();
    pc.w_query = w;
    auto r = step(MlstmState<S>::zeros(d), x.cast<S>(), pc);
    return sum_all(r.hidden);
  };
  CHECK(grad_check(f, p.w_query) < 1e-3);

  auto fx = [&](const auto& xin) {
    using S = std::decay_t<decltype(xin.data()[0])>;
    auto r = step(MlstmState<S>::zeros(d), xin, p.template cast<S>());
    return sum_all(r.hidden);
  };
  CHECK(grad_check(fx, x) < 1e-3);
}

TEST_CASE("gradients flow through an 8-step recurrence") {
  const int d = 4;
  const int64_t len = 8;
  Rng rng(81, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 82);
  auto f = [&](const auto& w) {
    using S = std::decay_t<decltype(w.data()[0])>;
    auto pc = p.template cast<S>();
    pc.w_value = w;
    auto h = recurrent(seq.cast<S>(), pc, GateType::kExponential, nullptr, true, Impl::kComposed);
    return mean_all(mul(h, h));
  };
  CHECK(grad_check(f, p.w_value) < 1e-3);

  auto fg = [&](const auto& w) {
    using S = std::decay_t<decltype(w.data()[0])>;
    auto pc = p.template cast<S>();
    pc.w_fgate = w;
    auto h = recurrent(seq.cast<S>(), pc, GateType::kExponential, nullptr, true, Impl::kComposed);
    return mean_all(mul(h, h));
  };
  CHECK(grad_check(fg, p.w_fgate) < 1e-3);
}

TEST_CASE("gradients flow through the parallel form") {
  const int d = 6;
  const int64_t len = 12;
  Rng rng(83, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 84);
  for (auto gate : {GateType::kExponential, GateType::kSigmoid}) {
    auto f = [&](const auto& w) {
      using S = std::decay_t<decltype(w.data()[0])>;
      auto pc = p.template cast<S>();
      pc.w_fgate = w;
      auto h = parallel(seq.cast<S>(), pc, gate, true, Impl::kComposed);
      return mean_all(mul(h, h));
    };
    CHECK(grad_check(f, p.w_fgate) < 1e-3);
    auto fi = [&](const auto& w) {
      using S = std::decay_t<decltype(w.data()[0])>;
      auto pc = p.template cast<S>();
      pc.w_igate = w;
      auto h = parallel(seq.cast<S>(), pc, gate, true, Impl::kComposed);
      return mean_all(mul(h, h));
    };
    CHECK(grad_check(fi, p.w_igate) < 1e-3);
    auto fseq = [&](const auto& s) {
      using S = std::decay_t<decltype(s.data()[0])>;
      auto h = parallel(s, p.template cast<S>(), gate, true, Impl::kComposed);
      return mean_all(mul(h, h));
    };
    // Input gradients include elements ~1e-6 where float32 rounding bounds
    // the achievable relative agreement.
    CHECK(grad_check(fseq, seq, 3e-4) < 5e-3);
  }
}

TEST_CASE("parallel gradient equals recurrent gradient") {
  const int d = 4;
  const int64_t len = 10;
  Rng rng(85, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(len, d, 86);
  auto grad_of = [&](Mode mode) {
    auto pc = p.template cast<float>();
    pc.w_key = pc.w_key.detach();
    pc.w_key.set_requires_grad(true);
    auto h = mode == Mode::kParallel
                 ? parallel(seq, pc, GateType::kExponential, true, Impl::kComposed)
                 : recurrent(seq, pc, GateType::kExponential, nullptr, true, Impl::kComposed);
    backward(mean_all(mul(h, h)));
    return pc.w_key.grad();
  };
  auto gp = grad_of(Mode::kParallel);
  auto gr = grad_of(Mode::kRecurrent);
  double scale = 0;
  for (float v : gr) scale = std::max(scale, std::abs(static_cast<double>(v)));
  for (size_t i = 0; i < gp.size(); ++i)
    CHECK(std::abs(static_cast<double>(gp[i]) - gr[i]) / (scale + 1e-8) < 1e-4);
}

TEST_CASE("recurrent accepts a nonzero initial state") {
  const int d = 4;
  Rng rng(87, "init");
  auto p = HeadParams<float>::random(d, rng);
  Tensor seq = random_seq(6, d, 88);
  // Running [x0..x5] in one go must equal running [x3..x5] from the state
  // after [x0..x2].
  MlstmState<float> state = MlstmState<float>::zeros(d);
  for (int64_t t = 0; t < 3; ++t) state = step(state, slice(seq, 0, t, 1), p).state;
  Tensor tail = slice(seq, 0, 3, 3);
  auto resumed = recurrent(tail, p, GateType::kExponential, &state, true, Impl::kComposed);
  auto full = recurrent(seq, p, GateType::kExponential, nullptr, true, Impl::kComposed);
  for (int64_t t = 0; t < 3; ++t)
    for (int j = 0; j < d; ++j)
      CHECK(resumed.at(t, j) == doctest::Approx(full.at(t + 3, j)).epsilon(1e-4));
}

TEST_CASE("empty sequence is rejected") {
  auto p = HeadParams<float>::zeros(3);
  Tensor empty = Tensor::zeros({0, 3});
  CHECK_THROWS_AS(recurrent(empty, p), ShapeError);
  CHECK_THROWS_AS(parallel(empty, p), ShapeError);
}
