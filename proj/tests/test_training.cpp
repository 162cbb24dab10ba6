#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "unifin/model.hpp"
#include "unifin/numcore/grad_check.hpp"
#include "unifin/training/checkpoint.hpp"
#include "unifin/training/losses.hpp"
#include "unifin/training/optim.hpp"

using namespace unifin;
using namespace unifin::training;
using namespace unifin::numcore;
using Catch::Approx;

namespace {

Tensor random_vector(std::size_t n, std::uint64_t seed, double s = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, s);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return Tensor({n}, std::move(v));
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.d_model = 8;
  c.encoder.heads = 2;
  c.encoder.layers = 1;
  c.encoder.macro_group_width = 4;
  c.micro.history = 2;
  return c;
}

}  // namespace

TEST_CASE("quantile loss", "[training][losses]") {
  CHECK(quantile_loss(3.0, 1.0, 0.5) == Approx(1.0));
  CHECK(quantile_loss(3.0, 1.0, 0.9) == Approx(1.8));
  CHECK(quantile_loss(1.0, 3.0, 0.9) == Approx(0.2));
  CHECK(quantile_loss(2.0, 2.0, 0.3) == 0.0);
  CHECK_THROWS_AS(quantile_loss(1.0, 0.0, 0.0), ContractError);
  CHECK_THROWS_AS(quantile_loss(1.0, 0.0, 1.0), ContractError);

  // Convex in the prediction.
  for (double tau : {0.1, 0.5, 0.9})
    for (double a = -2.0; a <= 2.0; a += 0.25)
      for (double b = -2.0; b <= 2.0; b += 0.5) {
        const double mid = quantile_loss(0.3, 0.5 * (a + b), tau);
        CHECK(mid <= 0.5 * (quantile_loss(0.3, a, tau) + quantile_loss(0.3, b, tau)) + 1e-12);
      }

  // The empirical minimizer is the tau-quantile of the targets.
  std::vector<double> y;
  for (int i = 1; i <= 9; ++i) y.push_back(i);
  auto risk = [&](double q) {
    double s = 0.0;
    for (double v : y) s += quantile_loss(v, q, 0.25);
    return s;
  };
  CHECK(risk(3.0) <= risk(2.5));
  CHECK(risk(3.0) <= risk(3.5));
}

TEST_CASE("pinball and forecast loss", "[training][losses]") {
  const std::vector<double> y = {0.5, -1.0, 2.0};
  const Tensor q = Tensor::vector({0.0, 0.0, 3.0});
  const double expect = (quantile_loss(0.5, 0.0, 0.9) + quantile_loss(-1.0, 0.0, 0.9) + quantile_loss(2.0, 3.0, 0.9)) / 3.0;
  CHECK(pinball(q, y, 0.9).item() == Approx(expect).margin(1e-15));
  CHECK_THROWS_AS(pinball(q, {1.0}, 0.5), DimensionError);
  CHECK_THROWS_AS(pinball(Tensor::vector({}), {}, 0.5), EmptyInputError);

  ForecastLossConfig cfg;
  const Tensor exact = Tensor::vector(y);
  CHECK(forecast_loss(y, exact, {exact, exact, exact}, cfg).item() == 0.0);

  ForecastLossConfig point_only;
  point_only.quantile_levels.clear();
  const Tensor p = Tensor::vector({0.0, 0.0, 0.0});
  CHECK(forecast_loss(y, p, {}, point_only).item() == Approx((0.25 + 1.0 + 4.0) / 3.0));
  point_only.unit = 0.5;
  CHECK(forecast_loss(y, p, {}, point_only).item() == Approx(4.0 * (0.25 + 1.0 + 4.0) / 3.0));

  ForecastLossConfig mixed;
  mixed.quantile_levels = {0.1, 0.9};
  mixed.mse_weight = 2.0;
  const Tensor lo = Tensor::vector({-1.0, -2.0, 1.0}), hi = Tensor::vector({1.0, 0.0, 3.0});
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    want += 2.0 * y[i] * y[i] / 3.0 + (quantile_loss(y[i], lo[i], 0.1) + quantile_loss(y[i], hi[i], 0.9)) / 3.0;
  CHECK(forecast_loss(y, p, {lo, hi}, mixed).item() == Approx(want).margin(1e-14));
  CHECK_THROWS_AS(forecast_loss(y, p, {lo}, mixed), DimensionError);
  CHECK_THROWS_AS(forecast_loss({}, Tensor::vector({}), {}, point_only), ContractError);

  const std::vector<double> targets = {0.3, -0.2, 0.05, 0.9};
  CHECK(grad_check([&](const Tensor& t) { return pinball(t, targets, 0.3); }, random_vector(4, 1)) < 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return forecast_loss(targets, t, {t, add_scalar(t, 0.1)}, mixed); }, random_vector(4, 2)) <
        1e-6);
}

TEST_CASE("risk and node losses", "[training][losses]") {
  const Tensor half = Tensor::vector({0.5, 0.5});
  CHECK(risk_loss(half, {1, 0}, {0.5, 0.5}).item() == Approx(std::log(2.0)).margin(1e-9));
  const Tensor perfect = Tensor::vector({1.0 - 1e-12, 1e-12});
  CHECK(risk_loss(perfect, {1, 0}, {1.0, 0.0}).item() < 1e-9);
  CHECK_THROWS_AS(risk_loss(half, {1}, {0.5}), DimensionError);
  CHECK_THROWS_AS(risk_loss(half, {2, 0}, {0.5, 0.5}), ContractError);
  CHECK_THROWS_AS(risk_loss(Tensor::vector({}), {}, {}), EmptyInputError);

  CHECK(node_loss(Tensor::vector({0.5, 0.5, 0.5}), {1, 0, 1}).item() == Approx(std::log(2.0)).margin(1e-9));
  CHECK_THROWS_AS(node_loss(half, {3, 0}), ContractError);
  CHECK(grad_check([](const Tensor& t) { return risk_loss(sigmoid(t), {1, 0, 1}, {0.9, 0.1, 0.4}); }, random_vector(3, 3)) < 1e-6);
}

TEST_CASE("weighted total loss", "[training][losses]") {
  LossWeights w;
  w.forecast = w.risk = w.align = w.rl = 1.0;
  CHECK(total_loss(1.0, 2.0, 3.0, 4.0, w) == 10.0);

  LossWeights d;
  CHECK(total_loss(1.0, 2.0, 3.0, 4.0, d) == Approx(1.0 + 2.0 + 1.5 + 0.4));

  // Linear in each component and homogeneous in the weights.
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng), e = u(rng), k = u(rng);
    LossWeights s{k * d.forecast, k * d.risk, k * d.align, k * d.rl};
    CHECK(total_loss(a, b, c, e, s) == Approx(k * total_loss(a, b, c, e, d)));
    CHECK(total_loss(a + 1.0, b, c, e, d) - total_loss(a, b, c, e, d) == Approx(d.forecast));
  }

  LossComponents parts{Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor(), Tensor::scalar(4.0)};
  CHECK(total_loss(parts, w).item() == 7.0);
  CHECK(total_loss(LossComponents{}, w).item() == 0.0);

  CHECK_THROWS_AS((LossWeights{-1.0, 1.0, 1.0, 1.0}.validate()), ContractError);
  CHECK_THROWS_AS((LossWeights{0.0, 0.0, 0.0, 0.0}.validate()), ContractError);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("warmup cosine schedule", "[training][optim]") {
  ScheduleConfig c{1e-3, 10, 110, 0.01};
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(5, c) == Approx(5e-4));
  CHECK(lr_schedule(10, c) == Approx(1e-3));
  CHECK(lr_schedule(60, c) == Approx(0.5 * (1e-3 + 1e-5)));
  CHECK(lr_schedule(110, c) == Approx(1e-5));
  CHECK(lr_schedule(500, c) == Approx(1e-5));
  for (std::size_t s = 11; s <= 110; ++s) CHECK(lr_schedule(s, c) <= lr_schedule(s - 1, c) + 1e-18);
  // No jump at the end of warmup.
  CHECK(std::abs(lr_schedule(10, c) - lr_schedule(9, c)) <= 1e-4 + 1e-12);
  CHECK(std::abs(lr_schedule(11, c) - lr_schedule(10, c)) < 1e-6);

  ScheduleConfig flat{1e-3, 0, 1, 0.01};
  CHECK(lr_schedule(0, flat) == Approx(1e-3));
  CHECK_THROWS_AS(lr_schedule(0, ScheduleConfig{1e-3, 5, 5, 0.01}), ContractError);
  CHECK_THROWS_AS(lr_schedule(0, ScheduleConfig{0.0, 0, 5, 0.01}), ContractError);
}

TEST_CASE("adamw update", "[training][optim]") {
  AdamWConfig cfg;
  {
    // Zero gradient: only the decoupled decay moves the parameter.
    std::vector<double> p = {2.0, -4.0}, g = {0.0, 0.0};
    AdamState s;
    adamw_step(p, g, s, 0.1, cfg);
    CHECK(p[0] == Approx(2.0 - 0.1 * 0.01 * 2.0));
    CHECK(p[1] == Approx(-4.0 + 0.1 * 0.01 * 4.0));
    CHECK(s.t == 1);
  }
  {
    // First step moves each coordinate by about lr against the gradient sign.
    AdamWConfig nodecay = cfg;
    nodecay.weight_decay = 0.0;
    std::vector<double> p = {0.0, 0.0, 0.0}, g = {3.0, -0.01, 1e3};
    AdamState s;
    adamw_step(p, g, s, 0.05, nodecay);
    CHECK(p[0] == Approx(-0.05).epsilon(1e-6));
    CHECK(p[1] == Approx(0.05).epsilon(1e-4));
    CHECK(p[2] == Approx(-0.05).epsilon(1e-6));
    // Under a constant gradient every step keeps that size.
    for (int i = 0; i < 200; ++i) adamw_step(p, g, s, 0.05, nodecay);
    CHECK(p[0] == Approx(-0.05 * 201).epsilon(1e-5));
  }
  {
    std::vector<double> p = {1.0}, g = {1.0, 2.0};
    AdamState s;
    CHECK_THROWS_AS(adamw_step(p, g, s, 0.1, cfg), DimensionError);
  }
  {
    // Minimizes a quadratic through a ParamStore.
    ParamStore ps(1);
    ps.add("x", {2}, {3.0, -2.0});
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 800; ++i) {
      ps.zero_grad();
      Tape tape;
      Tape::Scope scope(tape);
      Tensor loss = sum(square(add_scalar(ps.get("x"), -1.0)));
      tape.backward(loss);
      opt.step(ps, {"x"}, 0.02);
    }
    CHECK(ps.get("x")[0] == Approx(1.0).margin(1e-3));
    CHECK(ps.get("x")[1] == Approx(1.0).margin(1e-3));
  }
  {
    // Clipping bounds the step and reports the raw norm.
    ParamStore ps(1);
    ps.add("x", {2}, {0.0, 0.0});
    ps.get("x").mutable_grad()[0] = 30.0;
    ps.get("x").mutable_grad()[1] = 40.0;
    AdamW opt;
    CHECK(opt.step(ps, {"x"}, 0.1, 1.0) == Approx(50.0));
    CHECK(opt.state().at("x").m[0] == Approx(0.1 * 0.6));
  }
}

TEST_CASE("model construction and checkpoint blobs", "[training][model][checkpoint]") {
  const auto cfg = tiny_config();
  Model a = Model::create(cfg, 11);
  Model b = Model::create(cfg, 11);
  Model c = Model::create(cfg, 12);
  REQUIRE(a.params.size() == b.params.size());
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    same = same && a.params.tensors()[i].to_vector() == b.params.tensors()[i].to_vector();
    differs = differs || a.params.tensors()[i].to_vector() != c.params.tensors()[i].to_vector();
  }
  CHECK(same);
  CHECK(differs);
  CHECK(a.names_with({"rl."}) == std::vector<std::string>{"rl.policy.w"});
  CHECK(a.names_with({"enc.", "fusion.", "micro.", "macro.", "rl."}).size() == a.params.size());

  ModelConfig bad = cfg;
  bad.modalities = {false, false, false, false};
  CHECK_THROWS_AS(Model::create(bad, 1), ContractError);

  // Bit-exact round trip including optimizer state.
  AdamW opt;
  opt.state()["rl.policy.w"] = AdamState{{0.1, std::nextafter(0.2, 1.0)}, {1e-300, 5e-324}, 42};
  auto entries = snapshot(a, &opt);
  std::stringstream buf;
  write_blob(buf, entries);
  const std::string bytes = buf.str();
  const auto back = read_blob(buf);
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].shape == entries[i].shape);
    CHECK(std::memcmp(back[i].values.data(), entries[i].values.data(), back[i].values.size() * sizeof(double)) == 0);
  }
  AdamW opt2;
  restore(c, &opt2, back);
  for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params.tensors()[i].to_vector() == c.params.tensors()[i].to_vector());
  CHECK(opt2.state().at("rl.policy.w").t == 42);
  CHECK(opt2.state().at("rl.policy.w").v[1] == 5e-324);
  std::stringstream again;
  write_blob(again, snapshot(c, &opt2));
  CHECK(again.str() == bytes);

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream bad_magic(corrupt);
  CHECK_THROWS_AS(read_blob(bad_magic), SchemaError);
  corrupt = bytes;
  corrupt[8] = 9;
  std::stringstream bad_version(corrupt);
  CHECK_THROWS_AS(read_blob(bad_version), SchemaError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_blob(truncated), IoError);

  ModelConfig other = cfg;
  other.encoder.d_model = 12;
  other.encoder.heads = 3;
  Model d = Model::create(other, 11);
  CHECK_THROWS_AS(restore(d, nullptr, back), SchemaError);
}

// ---------------------------------------------------------------------------
// Trainer, configuration and checkpoints
// ---------------------------------------------------------------------------

#include <filesystem>

#include "unifin/training.hpp"

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.synthetic.n_steps = 110;
  c.synthetic.n_assets = 2;
  c.synthetic.graph_nodes = 4;
  c.synthetic.seed = 3;
  c.features.window = 5;
  c.model.encoder.d_model = 8;
  c.model.encoder.heads = 2;
  c.model.encoder.layers = 1;
  c.model.encoder.macro_group_width = 4;
  c.model.encoder.graph_layers = 1;
  c.model.micro.history = 2;
  c.trainer.train.epochs = 4;
  c.trainer.train.stage_split = {1, 1, 1, 1};
  c.trainer.train.micro_batch = 16;
  c.trainer.train.macro_batch = 8;
  c.trainer.train.warmup_steps = 2;
  c.trainer.train.rl_updates_per_epoch = 3;
  c.trainer.rl.episode_length = 8;
  c.trainer.rl.episodes_per_update = 4;
  return c;
}

std::vector<std::vector<double>> values_of(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& t : m.params.tensors()) out.push_back(t.to_vector());
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("unifin_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("stage epoch split", "[training][trainer]") {
  TrainingConfig t;
  CHECK(t.stage_epochs() == std::array<std::size_t, 4>{20, 10, 40, 10});
  t.epochs = 7;
  const auto e = t.stage_epochs();
  CHECK(e[0] + e[1] + e[2] + e[3] == 7);
  t.epochs = 80;
  t.rl_joint = true;
  CHECK(t.stage_epochs() == std::array<std::size_t, 4>{20, 10, 50, 0});
  t.stage_split = {0, 0, 0, 0};
  CHECK_THROWS_AS(t.validate(), ContractError);
}

TEST_CASE("trainer runs stages in order and deterministically", "[training][trainer]") {
  const auto cfg = tiny_run();
  const auto data = make_task_data(cfg, generate_dataset(cfg));

  Model a = Model::create(cfg.model, 5);
  Trainer ta(a, data, cfg.trainer, 5);
  CHECK_THROWS_AS(ta.run_stage(Stage::joint), ScheduleError);
  const auto before = values_of(a);
  const auto uni = ta.run_stage(Stage::unimodal);
  REQUIRE(uni.size() == 1);
  CHECK(uni[0].forecast.has_value());
  CHECK(uni[0].risk.has_value());
  CHECK_FALSE(uni[0].align.has_value());
  CHECK(values_of(a) != before);
  CHECK(a.params.get("rl.policy.w").to_vector() == before.back());
  CHECK_THROWS_AS(ta.run_stage(Stage::unimodal), ScheduleError);

  // The align stage only moves the encoders.
  const auto pre_align = values_of(a);
  const auto al = ta.run_stage(Stage::align);
  REQUIRE(al.size() == 1);
  CHECK(al[0].align.has_value());
  const auto post_align = values_of(a);
  for (std::size_t i = 0; i < a.params.size(); ++i)
    if (a.params.names()[i].rfind("enc.", 0) != 0) CHECK(pre_align[i] == post_align[i]);
  ta.run();
  CHECK(ta.progress().done());
  CHECK(ta.history().size() == 4);
  CHECK(ta.history().back().rl.has_value());

  Model b = Model::create(cfg.model, 5);
  Trainer tb(b, data, cfg.trainer, 5);
  tb.run();
  CHECK(values_of(a) == values_of(b));
  REQUIRE(tb.history().size() == ta.history().size());
  for (std::size_t i = 0; i < tb.history().size(); ++i) CHECK(to_json(tb.history()[i]) == to_json(ta.history()[i]));
}

TEST_CASE("stage with zero epochs leaves the model unchanged", "[training][trainer]") {
  auto cfg = tiny_run();
  cfg.trainer.train.stage_split = {0, 1, 0, 0};
  cfg.trainer.train.epochs = 1;
  const auto data = make_task_data(cfg, generate_dataset(cfg));
  Model m = Model::create(cfg.model, 2);
  Trainer t(m, data, cfg.trainer, 2);
  const auto before = values_of(m);
  CHECK(t.run_stage(Stage::unimodal).empty());
  CHECK(values_of(m) == before);
  CHECK(t.run_stage(Stage::align).size() == 1);
  CHECK(t.run_stage(Stage::joint).empty());
  CHECK(t.run_stage(Stage::rl).empty());
  CHECK(t.progress().done());

  // Without a price-text pair the align stage has nothing to train.
  cfg.model.modalities = {true, false, true, true};
  const auto masked = make_task_data(cfg, generate_dataset(cfg));
  Model p = Model::create(cfg.model, 2);
  Trainer tp(p, masked, cfg.trainer, 2);
  const auto pb = values_of(p);
  const auto logs = tp.run_stage(Stage::align);
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].batches == 0);
  CHECK(values_of(p) == pb);
}

TEST_CASE("joint policy mode trains the policy with the backbone", "[training][trainer]") {
  auto cfg = tiny_run();
  cfg.trainer.train.rl_joint = true;
  cfg.trainer.train.stage_split = {0, 0, 1, 0};
  cfg.trainer.train.epochs = 1;
  const auto data = make_task_data(cfg, generate_dataset(cfg));
  Model m = Model::create(cfg.model, 4);
  Trainer t(m, data, cfg.trainer, 4);
  const auto w0 = m.params.get("rl.policy.w").to_vector();
  const auto logs = t.run();
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].rl.has_value());
  CHECK(m.params.get("rl.policy.w").to_vector() != w0);
}

TEST_CASE("interrupted training resumes bit-exactly", "[training][checkpoint]") {
  const auto cfg = tiny_run();
  const auto data = make_task_data(cfg, generate_dataset(cfg));
  std::vector<EpochLog> full_hist;
  const auto full_dir = scratch("full");
  const Model full = train_model(cfg, data, 9, &full_hist, full_dir);

  const auto dir = scratch("resume");
  train_model(cfg, data, 9, nullptr, dir, false, 2);
  CHECK(load_checkpoint(dir).progress.stage == 2);
  std::vector<EpochLog> hist;
  const Model resumed = train_model(cfg, data, 9, &hist, dir, true);
  CHECK(values_of(resumed) == values_of(full));
  REQUIRE(hist.size() == full_hist.size());
  for (std::size_t i = 0; i < hist.size(); ++i) CHECK(to_json(hist[i]) == to_json(full_hist[i]));
  CHECK(read_file(dir / "params.bin") == read_file(full_dir / "params.bin"));
  CHECK(read_file(dir / "checkpoint.json") == read_file(full_dir / "checkpoint.json"));

  const auto ck = load_checkpoint(dir);
  const Model loaded = model_from_checkpoint(ck);
  CHECK(values_of(loaded) == values_of(full));
  CHECK(ck.progress.done());

  auto other = cfg;
  other.trainer.train.peak_lr = 0.5;
  CHECK_THROWS_AS(train_model(other, data, 9, nullptr, dir, true), ConfigError);

  // Reloaded normalization reproduces the inputs exactly.
  const auto again = make_task_data(cfg, generate_dataset(cfg), &ck.normalization);
  CHECK(again.in.asset == data.in.asset);
  CHECK(again.in.macro == data.in.macro);

  std::filesystem::remove(dir / "params.bin");
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  write_file_atomic(dir / "checkpoint.json", "{\"format\": \"unifin-checkpoint\", \"version\": 99}");
  CHECK_THROWS_AS(load_checkpoint(dir), SchemaError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(full_dir);
}

TEST_CASE("evaluation paths agree", "[training][evaluate]") {
  const auto cfg = tiny_run();
  const auto data = make_task_data(cfg, generate_dataset(cfg));
  const Model m = Model::create(cfg.model, 6);
  const auto p = predict(m, data, Split::test);
  REQUIRE_FALSE(p.macro.empty());
  for (const auto& row : p.macro) {
    const auto r = risk_at(m, data, row.step);
    CHECK(r.score == row.score);
    CHECK(r.contributions == row.contributions);
  }
  const auto [lo, hi] = data.micro_range(Split::test);
  CHECK(p.micro.size() == (hi - lo) * data.n_assets());
  const auto f = forecasts_at(m, data, p.micro.front().step, 1);
  CHECK(f[p.micro.front().asset].point == p.micro.front().point);
  CHECK(forecasts_at(m, data, lo, 3).front().horizon == 3);
  CHECK_THROWS_AS(risk_at(m, data, data.in.steps), IndexError);

  const auto s = score(p, {data.flat_band(), 0.0005, 0.5});
  for (const auto& key : {"micro.directional_accuracy", "micro.mape", "credit.accuracy", "credit.f1", "macro.accuracy", "macro.f1"})
    CHECK(s.count(key) == 1);
  CHECK(s.at("micro.mape") >= 0.0);

  // The training and test ranges do not overlap.
  CHECK(data.micro_range(Split::train).second <= data.micro_range(Split::test).first);
  CHECK(data.macro_range(Split::train).second == data.macro_range(Split::test).first);
}

TEST_CASE("run configuration", "[training][config]") {
  RunConfig c;
  const std::string echo = echo_config(c);
  CHECK(echo.find("train.epochs = 80\n") != std::string::npos);
  CHECK(echo.find("train.micro_batch = 32\n") != std::string::npos);
  CHECK(echo.find("train.macro_batch = 16\n") != std::string::npos);
  CHECK(echo.find("loss.lambda_align = 0.5\n") != std::string::npos);
  CHECK(echo.find("train.rl_mode = staged\n") != std::string::npos);
  std::istringstream in(echo);
  CHECK(echo_config(parse_config(in)) == echo);

  std::istringstream text("# comment\nsynthetic.text_signal = 0.25  # inline\nmodel.modalities = price\ntrain.seeds = 3,4\n\n");
  const auto p = parse_config(text);
  CHECK(p.synthetic.text_signal == 0.25);
  CHECK(p.model.modalities == std::array<bool, 4>{true, false, false, false});
  CHECK(p.seeds == std::vector<std::uint64_t>{3, 4});

  RunConfig o;
  apply_override(o, "rl.beta=2");
  apply_override(o, "align.pairs=price-text,macro-graph");
  CHECK(o.trainer.rl.beta == 2.0);
  CHECK(o.trainer.align.pairs.size() == 2);
  CHECK_THROWS_AS(apply_override(o, "nope.key=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "train.epochs=abc"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "model.modalities=sound"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "train.rl_mode=sometimes"), ConfigError);

  RunConfig bad;
  apply_override(bad, "synthetic.crisis_rate=1.5");
  try {
    bad.validate();
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("synthetic.crisis_rate") != std::string::npos);
  }
  RunConfig warm;
  apply_override(warm, "train.peak_lr=0");
  CHECK_THROWS_AS(warm.validate(), ConfigError);
  CHECK_NOTHROW(RunConfig{}.validate());
}
