#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "l2p/data.hpp"
#include "l2p/ops.hpp"
#include "l2p/trainer.hpp"
#include "test_util.hpp"

using namespace l2p;
namespace fs = std::filesystem;

namespace {

Dataset tiny_dataset(int n, int classes, std::uint64_t seed) {
  const std::string dir =
      (fs::temp_directory_path() / ("l2p_train_" + std::to_string(seed))).string();
  write_synthetic_cifar10(dir, n, std::max(8, n / 4), classes, seed);
  auto ds = load_cifar(dir, 10, "train");
  ds.class_count = classes;
  fs::remove_all(dir);
  return ds;
}

Model tiny_model(std::uint64_t seed, double theta0 = 0.01) {
  return build_model({LayerSpec::conv(4, 3, 2, 1), LayerSpec::relu(), LayerSpec::residual_v1(8, 2),
                      LayerSpec::global_avg_pool(), LayerSpec::flatten(), LayerSpec::linear(10)},
                     {3, 32, 32}, seed, theta0, 0.0);
}

TrainConfig tiny_config(TrainMode mode) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  cfg.milestones = {};
  cfg.momentum = 0.9;
  cfg.nesterov = true;
  cfg.weight_decay = 1e-4;
  cfg.warmup_epochs = 1;
  cfg.mode = mode;
  cfg.adv_train = true;
  cfg.adv = {.eps = 8.0 / 255.0, .steps = 2, .step_size = 0.01, .random_start = true};
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("tau is the shifted harmonic series") {
  const int s = 9;
  CHECK(tau(s, s) == doctest::Approx(1.0));
  CHECK(tau(s + 1, s) == doctest::Approx(1.5));
  // frozen from direct summation: H_10
  CHECK(tau(s + 9, s) == doctest::Approx(2.9289682539682538).epsilon(1e-15));
  CHECK_THROWS_AS(tau(s - 1, s), std::invalid_argument);

  // strictly increasing, pressure vanishing
  double prev = tau(s, s);
  for (int t = s + 1; t < s + 50; ++t) {
    const double cur = tau(t, s);
    CHECK(cur > prev);
    prev = cur;
  }
}

TEST_CASE("regularizer value and gradient") {
  auto m = build_model(mlp_spec({2, 1, 2}, true), {2}, 1, /*theta0=*/1.0);
  REQUIRE(m.params().scalar_count(ParamSet::kTheta) == 1);

  SUBCASE("single theta=1, tau=1 gives g = -1") {
    CHECK(regularizer_value(m, 1.0) == doctest::Approx(-1.0));
  }

  SUBCASE("gradient matches the closed form and finite differences") {
    CHECK(regularizer_grad(4.0, 2.0) == doctest::Approx(-0.125).epsilon(1e-15));
    const double h = 1e-6;
    auto& theta = m.perturb_layers()[0].theta;
    theta.raw_data()[0] = 4.0;
    const double tau_v = 2.0;
    theta.raw_data()[0] = 4.0 + h;
    const double up = regularizer_value(m, tau_v);
    theta.raw_data()[0] = 4.0 - h;
    const double dn = regularizer_value(m, tau_v);
    CHECK((up - dn) / (2 * h) == doctest::Approx(-0.125).epsilon(1e-6));
  }

  SUBCASE("gradient at theta=0 is finite via the eps clamp") {
    const double g = regularizer_grad(0.0, 1.0);
    CHECK(std::isfinite(g));
    CHECK(g == doctest::Approx(-1.0 / (2.0 * std::sqrt(kThetaGradEps))));
  }

  SUBCASE("monotonicity: g decreases in theta, |grad| decreases in theta and tau") {
    CHECK(regularizer_grad(0.5, 1.0) < 0.0);
    CHECK(std::abs(regularizer_grad(1.0, 1.0)) < std::abs(regularizer_grad(0.25, 1.0)));
    CHECK(std::abs(regularizer_grad(1.0, 2.0)) < std::abs(regularizer_grad(1.0, 1.0)));
  }
}

TEST_CASE("w step isolates theta and updates weights") {
  auto m = tiny_model(3);
  auto ds = tiny_dataset(32, 10, 11);
  auto cfg = tiny_config(TrainMode::kL2p);
  cfg.isolation_check = true;
  StepContext ctx;
  ctx.attack_rng = RngStream(1);
  ctx.lr = 0.05;
  ctx.noise_active = true;
  m.set_noise_enabled(true);

  BatchIterator it(ds, {.batch_size = 16, .shuffle_seed = 1, .flip = false, .pad_crop = false}, 0);
  Tensor x;
  std::vector<int> y;
  REQUIRE(it.next(x, y));
  Batch batch{x, y, pgd_batch(m, x, y, cfg.adv, ctx.attack_rng)};

  const auto w0 = m.params().digest(ParamSet::kWeights);
  const auto t0 = m.params().digest(ParamSet::kTheta);
  auto losses = w_step(m, batch, cfg, ctx);
  CHECK(std::isfinite(losses.clean));
  CHECK(std::isfinite(losses.adv));
  CHECK(m.params().digest(ParamSet::kTheta) == t0);
  CHECK(m.params().digest(ParamSet::kWeights) != w0);
  CHECK(ctx.isolation_violations == 0);
  CHECK(ctx.isolation_checks == 1);
}

TEST_CASE("theta step updates theta only, by the stated rule") {
  auto ds = tiny_dataset(32, 10, 13);

  SUBCASE("l2p-r closed form: theta 1, tau 1, gamma 1e-4 -> 1.00005") {
    auto m = tiny_model(5, /*theta0=*/1.0);
    m.set_noise_enabled(true);
    auto cfg = tiny_config(TrainMode::kL2pR);
    cfg.gamma = 1e-4;
    StepContext ctx;
    ctx.noise_active = true;
    ctx.tau_value = 1.0;
    ctx.lr = 123.0;  // must be ignored for the regularizer-only mode
    Batch batch;     // l2p-r never touches the data
    const auto w0 = m.params().digest(ParamSet::kWeights);
    theta_step(m, batch, cfg, ctx);
    for (const auto& pl : m.perturb_layers())
      for (double v : pl.theta.data()) CHECK(v == doctest::Approx(1.00005).epsilon(1e-12));
    CHECK(m.params().digest(ParamSet::kWeights) == w0);
  }

  SUBCASE("pni-style with zero loss gradient leaves theta unchanged") {
    // zero final-linear weights block every gradient path to theta
    auto m = build_model(mlp_spec({4, 3, 2}, true), {4}, 2, 0.5);
    for (auto& v : m.params().at("l3.w").raw_data()) v = 0.0;
    m.set_noise_enabled(true);
    auto cfg = tiny_config(TrainMode::kPniStyle);
    cfg.adv_train = false;
    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    StepContext ctx;
    ctx.noise_active = true;
    ctx.tau_value = 1.0;
    ctx.lr = 0.1;
    RngStream rng(2);
    Batch batch{testutil::random_tensor({8, 4}, rng, false, 0.0, 1.0),
                {0, 1, 0, 1, 0, 1, 0, 1},
                Tensor()};
    const auto t0 = m.params().digest(ParamSet::kTheta);
    theta_step(m, batch, cfg, ctx);
    CHECK(m.params().digest(ParamSet::kTheta) == t0);
  }

  SUBCASE("rejected during warmup") {
    auto m = tiny_model(5);
    auto cfg = tiny_config(TrainMode::kL2p);
    StepContext ctx;
    ctx.noise_active = false;
    Batch batch;
    CHECK_THROWS_AS(theta_step(m, batch, cfg, ctx), std::logic_error);
  }
}

TEST_CASE("training loop behaviour") {
  auto ds = tiny_dataset(48, 10, 17);

  SUBCASE("single warmup-only epoch leaves theta at theta0") {
    auto m = tiny_model(7, 0.01);
    auto cfg = tiny_config(TrainMode::kL2p);
    cfg.epochs = 1;
    cfg.warmup_epochs = 1;
    // warmup must cover all epochs: relax validation by using pni off? keep epochs=1 warmup=1
    cfg.mode = TrainMode::kL2p;
    CHECK_THROWS_AS(train(m, ds, cfg), std::invalid_argument);  // warmup >= epochs rejected
    cfg.epochs = 2;
    auto res = train(m, ds, cfg);
    // after the warmup epoch theta still theta0; after epoch 2 it may move
    CHECK(res.records[0].theta_mean == doctest::Approx(0.01));
    CHECK(res.records[0].theta_min == doctest::Approx(0.01));
  }

  SUBCASE("no-noise modes never alter theta") {
    auto m = tiny_model(9, 0.01);
    auto cfg = tiny_config(TrainMode::kVanilla);
    cfg.alpha = 0.0;
    cfg.beta = 1.0;
    cfg.epochs = 2;
    cfg.warmup_epochs = 0;
    const auto t0 = m.params().digest(ParamSet::kTheta);
    auto res = train(m, ds, cfg);
    CHECK(m.params().digest(ParamSet::kTheta) == t0);
    for (const auto& r : res.records) CHECK(std::isnan(r.clean_loss));
  }

  SUBCASE("fixed seed reproduces bitwise, across modes") {
    for (auto mode : {TrainMode::kL2p, TrainMode::kPniStyle}) {
      CAPTURE(to_string(mode));
      auto cfg = tiny_config(mode);
      cfg.epochs = 3;
      cfg.warmup_epochs = 1;
      cfg.isolation_check = true;
      auto m1 = tiny_model(21);
      auto m2 = tiny_model(21);
      auto r1 = train(m1, ds, cfg);
      auto r2 = train(m2, ds, cfg);
      CHECK(m1.params().digest(ParamSet::kWeights) == m2.params().digest(ParamSet::kWeights));
      CHECK(m1.params().digest(ParamSet::kTheta) == m2.params().digest(ParamSet::kTheta));
      CHECK(r1.isolation_violations == 0);
      CHECK(r1.isolation_checks > 0);
      REQUIRE(r1.records.size() == r2.records.size());
      for (std::size_t i = 0; i < r1.records.size(); ++i)
        CHECK(r1.records[i].theta_mean == r2.records[i].theta_mean);
    }
  }

  SUBCASE("noise is inactive during warmup epochs") {
    auto m = tiny_model(23);
    auto cfg = tiny_config(TrainMode::kL2p);
    cfg.epochs = 3;
    cfg.warmup_epochs = 2;
    std::vector<bool> noise_by_epoch;
    train(m, ds, cfg, [&](const EpochRecord&, Model& model) {
      noise_by_epoch.push_back(model.has_enabled_noise());
    });
    CHECK(noise_by_epoch == std::vector<bool>{false, false, true});
  }

  SUBCASE("per-epoch alternation also trains") {
    auto m = tiny_model(25);
    auto cfg = tiny_config(TrainMode::kL2p);
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.alternation = Alternation::kPerEpoch;
    auto res = train(m, ds, cfg);
    CHECK(res.records.size() == 2);
  }

  SUBCASE("lr schedule follows milestones") {
    auto m = tiny_model(27);
    auto cfg = tiny_config(TrainMode::kNone);
    cfg.adv_train = false;
    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    cfg.epochs = 4;
    cfg.warmup_epochs = 0;
    cfg.lr = 0.1;
    cfg.milestones = {2, 4};
    cfg.lr_decay = 0.1;
    auto res = train(m, ds, cfg);
    CHECK(res.records[0].lr == doctest::Approx(0.1));
    CHECK(res.records[1].lr == doctest::Approx(0.01));
    CHECK(res.records[2].lr == doctest::Approx(0.01));
    CHECK(res.records[3].lr == doctest::Approx(0.001));
  }

  SUBCASE("empty dataset rejected") {
    Dataset empty;
    empty.images = Tensor::zeros({1, 3, 32, 32});
    empty.labels = {};
    empty.class_count = 10;
    auto m = tiny_model(29);
    CHECK_THROWS_AS(train(m, empty, tiny_config(TrainMode::kL2p)), std::invalid_argument);
  }
}

TEST_CASE("epoch records serialize to csv") {
  const std::string path = "epoch_records_test.csv";
  fs::remove(path);
  EpochRecord r;
  r.epoch = 1;
  r.lr = 0.1;
  r.clean_loss = 2.0;
  r.theta_mean = 0.01;
  append_epoch_record_csv(path, r);
  r.epoch = 2;
  r.clean_loss = std::numeric_limits<double>::quiet_NaN();
  r.adv_loss = 1.5;
  append_epoch_record_csv(path, r);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "epoch,lr,clean_loss,adv_loss,theta_mean,theta_min,theta_max");
  auto fields = [](const std::string& s) {
    std::vector<std::string> out;
    std::string tok;
    std::stringstream ss(s);
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
  };
  std::getline(f, line);
  auto row1 = fields(line);
  CHECK(row1[0] == "1");
  CHECK(std::stod(row1[1]) == doctest::Approx(0.1));
  CHECK(std::stod(row1[2]) == doctest::Approx(2.0));
  std::getline(f, line);
  auto row2 = fields(line);
  CHECK(row2[0] == "2");
  CHECK(row2[2].empty());  // empty cell for the unused component
  CHECK(std::stod(row2[3]) == doctest::Approx(1.5));
  fs::remove(path);
}
