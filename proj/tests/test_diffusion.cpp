#include <doctest.h>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <cmath>
#include <limits>

#include "dbc/diffusion.hpp"
#include "dbc/error.hpp"
#include "grad_check.hpp"
#include "test_util.hpp"

using namespace dbc;
using namespace dbc::diffusion;
using hp = boost::multiprecision::cpp_dec_float_50;

namespace {

DenoiserSpec small_spec(Architecture arch, std::size_t history = 1) {
  DenoiserSpec s;
  s.architecture = arch;
  s.history = history;
  s.obs_dim = 3 * history;
  s.action_dim = 2;
  s.hidden = 12;
  s.depth = 2;
  s.embed_dim = 8;
  s.time_embed_dim = 6;
  s.steps = 20;
  return s;
}

// Denoiser stand-in whose prediction is fixed by the test.
class FixedDenoiser : public Denoiser {
 public:
  FixedDenoiser(DenoiserSpec s, Matrix cond, Matrix uncond) : Denoiser(s), cond_(std::move(cond)), uncond_(std::move(uncond)) {}
  Matrix encode(const Matrix& obs, std::span<const std::uint8_t>) const override { return Matrix(obs.rows(), 1, 1.0); }
  std::size_t encoding_dim() const override { return 1; }
  Matrix predict(const Matrix& enc, const Matrix&, std::span<const int>) const override {
    return enc(0, 0) == 0.0 ? uncond_ : cond_;
  }
  Matrix forward_train(const Matrix&, std::span<const std::uint8_t>, const Matrix&, std::span<const int>,
                       Tape&) const override {
    return cond_;
  }
  void backward(const Tape&, const Matrix&) override {}
  std::vector<nnet::DenseLayer*> layers() override { return {}; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<FixedDenoiser>(*this); }

 private:
  Matrix cond_, uncond_;
};

}  // namespace

TEST_CASE("schedule endpoints and the single-step case") {
  const auto s = build_schedule(50, 1e-4, 0.02);
  CHECK(s.steps() == 50);
  CHECK(s.beta(1) == 1e-4);
  CHECK(s.beta(50) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s.sigma(10) == doctest::Approx(std::sqrt(s.beta(10))));
  const auto one = build_schedule(1, 1e-4, 0.02);
  CHECK(one.beta(1) == 1e-4);
  CHECK(one.alpha_bar(1) == 1.0 - 1e-4);
  CHECK_THROWS_AS(s.beta(0), DomainError);
  CHECK_THROWS_AS(s.beta(51), DomainError);
}

TEST_CASE("alpha_bar matches a 50-digit product") {
  for (int T : {1, 20, 50}) {
    const auto s = build_schedule(T, 1e-4, 0.02);
    hp prod = 1;
    for (int t = 1; t <= T; ++t) {
      const hp frac = T == 1 ? hp(0) : hp(t - 1) / hp(T - 1);
      const hp beta = hp("1e-4") + (hp("0.02") - hp("1e-4")) * frac;
      prod *= (1 - beta);
      CHECK(std::abs(s.alpha_bar(t) - prod.convert_to<double>()) < 1e-12);
    }
  }
}

TEST_CASE("schedule rejects bad parameters") {
  CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 0.03, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST_CASE("beta-tilde variance choice") {
  const auto s = build_schedule(10, 1e-4, 0.02, SigmaChoice::beta_tilde);
  CHECK(s.sigma(1) == 0.0);
  const double bt = (1 - s.alpha_bar(4)) / (1 - s.alpha_bar(5)) * s.beta(5);
  CHECK(s.sigma(5) == doctest::Approx(std::sqrt(bt)).epsilon(1e-14));
}

TEST_CASE("forward noising") {
  const auto s = build_schedule(50, 1e-4, 0.02);
  const std::vector<double> a = {0.7, -0.3}, zero = {0.0, 0.0};
  const auto x = forward_noise(a, 30, s, zero);
  CHECK(x[0] == std::sqrt(s.alpha_bar(30)) * 0.7);
  CHECK(x[1] == std::sqrt(s.alpha_bar(30)) * -0.3);

  Rng rng(123);
  const int n = 100000;
  double sum[2] = {0, 0}, sq[2] = {0, 0};
  std::vector<double> z(2);
  for (int i = 0; i < n; ++i) {
    rng.fill_normal(z);
    const auto y = forward_noise(a, 50, s, z);
    for (int d = 0; d < 2; ++d) {
      sum[d] += y[d];
      sq[d] += y[d] * y[d];
    }
  }
  const double var_expected = 1 - s.alpha_bar(50);
  for (int d = 0; d < 2; ++d) {
    const double mean = sum[d] / n;
    const double var = sq[d] / n - mean * mean;
    CHECK(std::abs(mean - std::sqrt(s.alpha_bar(50)) * a[d]) < 3 * std::sqrt(var_expected / n));
    CHECK(std::abs(var / var_expected - 1) < 0.05);
  }
}

TEST_CASE("loss is zero when the prediction equals the noise") {
  Rng rng(1);
  const Matrix z = testutil::random_matrix(10, 3, rng);
  CHECK(ddpm_loss(z, z) == 0.0);
  CHECK(ddpm_loss(Matrix(2, 2, 0.0), Matrix(2, 2, 1.0)) == 2.0);
}

TEST_CASE("untrained network on normal targets starts near the action dimension") {
  Rng rng(8);
  auto spec = small_spec(Architecture::basic_mlp);
  spec.hidden = 64;
  auto model = make_denoiser(spec, rng);
  const auto sched = build_schedule(20, 1e-4, 0.02);
  const Matrix actions = testutil::random_matrix(4000, 2, rng);
  const Matrix obs = testutil::random_matrix(4000, 3, rng);
  const auto batch = draw_noised_batch(actions, sched, 0.0, rng);
  Tape tape;
  const double loss = ddpm_loss(model->forward_train(obs, batch.mask, batch.noisy, batch.taus, tape), batch.noise);
  // E||z||^2 = 2 plus whatever the random network adds.
  CHECK(loss > 1.8);
  CHECK(loss < 2.0 * 2.5);
}

TEST_CASE("conditioning dropout rate") {
  Rng rng(77);
  const auto sched = build_schedule(50, 1e-4, 0.02);
  const auto batch = draw_noised_batch(Matrix(10000, 2, 0.0), sched, 0.1, rng);
  std::size_t masked = 0;
  for (auto m : batch.mask) masked += m;
  CHECK(masked >= 800);
  CHECK(masked <= 1200);
  for (int t : batch.taus) {
    CHECK(t >= 1);
    CHECK(t <= 50);
  }
}

TEST_CASE("reverse update") {
  const auto s = build_schedule(50, 1e-4, 0.02);
  const std::vector<double> a = {0.4, -1.1}, zero = {0.0, 0.0};
  std::vector<double> out(2);
  denoise_update(a, zero, 17, s, zero, out);
  CHECK(out[0] == doctest::Approx(0.4 / std::sqrt(s.alpha(17))).epsilon(1e-15));

  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const int tau = static_cast<int>(rng.integer(1, 50));
    const std::vector<double> x = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const std::vector<double> eps = {rng.normal(), rng.normal()};
    const std::vector<double> z = {rng.normal(), rng.normal()};
    denoise_update(x, eps, tau, s, z, out);
    for (int d = 0; d < 2; ++d) {
      const double al = 1 - s.beta(tau), ab = s.alpha_bar(tau);
      const double ref = (x[d] - (1 - al) / std::sqrt(1 - ab) * eps[d]) / std::sqrt(al) + std::sqrt(s.beta(tau)) * z[d];
      CHECK(out[d] == doctest::Approx(ref).epsilon(1e-13));
    }
  }
}

TEST_CASE("guidance combination") {
  const auto spec = small_spec(Architecture::basic_mlp);
  Matrix cond(1, 2), uncond(1, 2);
  cond(0, 0) = 0.3, cond(0, 1) = -1.2;
  uncond(0, 0) = -0.5, uncond(0, 1) = 0.25;
  const FixedDenoiser m(spec, cond, uncond);
  const Matrix enc(1, 1, 1.0), noisy(1, 2, 0.0);
  const int tau[] = {3};
  CHECK(cfg_epsilon(m, enc, noisy, tau, 0.0) == cond);
  const Matrix w1 = cfg_epsilon(m, enc, noisy, tau, 1.0);
  CHECK(w1(0, 0) == doctest::Approx(2 * 0.3 + 0.5));
  CHECK(w1(0, 1) == doctest::Approx(2 * -1.2 - 0.25));
  const Matrix w4 = cfg_epsilon(m, enc, noisy, tau, 4.0);
  CHECK(w4(0, 0) == doctest::Approx(5 * 0.3 - 4 * -0.5));

  const FixedDenoiser same(spec, cond, cond);
  for (double w : {0.0, 1.0, 4.0, 8.0}) {
    const Matrix e = cfg_epsilon(same, enc, noisy, tau, w);
    CHECK(e(0, 0) == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(e(0, 1) == doctest::Approx(-1.2).epsilon(1e-14));
  }
}

TEST_CASE("guidance is a no-op when the observation cannot matter") {
  Rng rng(31);
  auto model = make_denoiser(small_spec(Architecture::basic_mlp), rng);
  // Zero the first-layer weights that read the observation.
  auto* first = model->layers().front();
  for (std::size_t o = 0; o < first->out; ++o)
    for (std::size_t i = 2; i < 5; ++i) first->weight[o * first->in + i] = 0.0;
  const Matrix obs = testutil::random_matrix(4, 3, rng);
  const Matrix noisy = testutil::random_matrix(4, 2, rng);
  const std::vector<int> taus = {1, 5, 9, 20};
  const std::vector<std::uint8_t> mask(4, 0);
  const Matrix enc = model->encode(obs, mask);
  const Matrix c = model->predict(enc, noisy, taus);
  for (double w : {1.0, 4.0, 8.0}) {
    const Matrix e = cfg_epsilon(*model, enc, noisy, taus, w);
    for (std::size_t i = 0; i < e.flat().size(); ++i) CHECK(e.flat()[i] == doctest::Approx(c.flat()[i]).epsilon(1e-12));
  }
}

TEST_CASE("guidance validation") {
  CHECK_NOTHROW(validate(GuidanceConfig{4.0, 0.1}));
  CHECK_THROWS_AS(validate(GuidanceConfig{-1.0, 0.1}), ConfigError);
  CHECK_THROWS_AS(validate(GuidanceConfig{1.0, 1.5}), ConfigError);
}

TEST_CASE("denoiser gradients match finite differences") {
  for (Architecture arch : {Architecture::basic_mlp, Architecture::mlp_sieve})
    for (std::size_t history : {1u, 2u})
      for (std::uint64_t seed : {5u, 6u}) {
        Rng rng(seed);
        auto model = make_denoiser(small_spec(arch, history), rng);
        const auto res = testutil::check_denoiser_gradients(*model, rng);
        CAPTURE(to_string(arch));
        CAPTURE(history);
        CHECK(res.checked > 100);
        CHECK(res.worst_rel < 1e-4);
      }
}

TEST_CASE("masked rows encode to exact zeros; clone and restore predict identically") {
  for (Architecture arch : {Architecture::basic_mlp, Architecture::mlp_sieve}) {
    Rng rng(12);
    const auto spec = small_spec(arch, 2);
    auto model = make_denoiser(spec, rng);
    const Matrix obs = testutil::random_matrix(3, spec.obs_dim, rng);
    const std::vector<std::uint8_t> mask = {0, 1, 0};
    const Matrix enc = model->encode(obs, mask);
    for (double v : enc.row(1)) CHECK(v == 0.0);
    CHECK(model->null_encoding(3).cols() == model->encoding_dim());

    const Matrix noisy = testutil::random_matrix(3, 2, rng);
    const std::vector<int> taus = {1, 7, 20};
    const Matrix y = model->predict(enc, noisy, taus);
    CHECK(model->clone()->predict(enc, noisy, taus) == y);
    std::vector<nnet::DenseLayer> copies;
    for (const auto* l : std::as_const(*model).layers()) copies.push_back(*l);
    auto restored = restore_denoiser(spec, copies);
    CHECK(restored->predict(enc, noisy, taus) == y);
    copies.pop_back();
    CHECK_THROWS(restore_denoiser(spec, copies));

    const std::vector<int> bad = {0, 7, 20};
    CHECK_THROWS_AS(model->predict(enc, noisy, bad), DomainError);
  }
}

TEST_CASE("training steps reduce the loss on a toy problem") {
  Rng rng(21);
  auto spec = small_spec(Architecture::basic_mlp);
  spec.hidden = 32;
  auto model = make_denoiser(spec, rng);
  const auto sched = build_schedule(20, 1e-4, 0.02);
  Matrix obs(64, 3, 0.0), actions(64, 2, 0.5);
  nnet::OptimizerState opt;
  double first = 0, last = 0;
  for (int i = 0; i < 300; ++i) {
    const auto r = ddpm_training_step(*model, obs, actions, sched, 0.1, rng, opt, 1e-3);
    if (i < 20) first += r.loss;
    if (i >= 280) last += r.loss;
  }
  CHECK(last < first);
}

TEST_CASE("non-finite targets fail the training step") {
  Rng rng(1);
  auto model = make_denoiser(small_spec(Architecture::basic_mlp), rng);
  const auto sched = build_schedule(20, 1e-4, 0.02);
  Matrix actions(4, 2, 0.0);
  actions(2, 1) = std::numeric_limits<double>::infinity();
  nnet::OptimizerState opt;
  CHECK_THROWS_AS(ddpm_training_step(*model, Matrix(4, 3, 0.0), actions, sched, 0.0, rng, opt, 1e-3), Error);
}
