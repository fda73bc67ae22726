#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "msat/envs/generate.hpp"
#include "msat/train/ablation.hpp"
#include "msat/train/train.hpp"

using namespace msat;

namespace {

TokenizerConfig tok_cfg(Scheme scheme, const MultiDiscreteSpec& spec, const ObsShape& obs,
                        int32_t d_model, int32_t max_timestep = 256) {
  TokenizerConfig cfg;
  cfg.scheme = scheme;
  cfg.use_pe = true;
  cfg.d_model = d_model;
  cfg.max_timestep = max_timestep;
  cfg.spec = spec;
  cfg.obs = obs;
  return cfg;
}

ModelConfig model_cfg(const MultiDiscreteSpec& spec, int32_t d_model, int32_t layers,
                      int32_t heads, float dropout = 0.1f) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d_model;
  cfg.dropout_embed = cfg.dropout_resid = cfg.dropout_attn = dropout;
  cfg.max_seq_len = 2048;
  cfg.spec = spec;
  return cfg;
}

ContextBatch random_batch(const MultiDiscreteSpec& spec, const ObsShape& obs, int64_t b,
                          int64_t k, Rng& rng, int64_t pad_prefix = 0) {
  ContextBatch batch;
  batch.batch = b;
  batch.context = k;
  batch.spec = spec;
  batch.obs = obs;
  batch.rtg.resize(static_cast<size_t>(b * k));
  batch.states.resize(static_cast<size_t>(b * k * obs.numel()));
  batch.actions.resize(static_cast<size_t>(b * k * spec.n()));
  batch.timesteps.assign(static_cast<size_t>(b * k), 0);
  batch.pad.assign(static_cast<size_t>(b * k), 1);
  for (auto& v : batch.rtg) v = static_cast<float>(rng.normal());
  for (auto& v : batch.states) v = static_cast<float>(rng.uniform());
  for (int64_t i = 0; i < b * k; ++i) {
    for (int32_t j = 0; j < spec.n(); ++j) {
      batch.actions[i * spec.n() + j] = static_cast<int32_t>(rng.randint(0, spec.dims[j]));
    }
  }
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ki = 0; ki < k; ++ki) {
      batch.timesteps[bi * k + ki] = static_cast<int32_t>(ki);
      if (ki < pad_prefix) batch.pad[bi * k + ki] = 0;
    }
  }
  return batch;
}

// Reference loop: mean over unpadded (timestep, component) pairs of
// -log softmax(logits)[target], all in double.
double naive_loss(const std::vector<nn::Var<double>>& logits, const ContextBatch& batch) {
  const int32_t n = batch.spec.n();
  double total = 0;
  int64_t count = 0;
  for (int64_t r = 0; r < batch.batch * batch.context; ++r) {
    if (!batch.pad[static_cast<size_t>(r)]) continue;
    for (int32_t i = 0; i < n; ++i) {
      const auto& lv = logits[static_cast<size_t>(i)].value();
      const int64_t width = batch.spec.dims[i];
      const double* row = lv.data() + r * width;
      double mx = row[0];
      for (int64_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
      double denom = 0;
      for (int64_t j = 0; j < width; ++j) denom += std::exp(row[j] - mx);
      total += std::log(denom) + mx - row[batch.actions[r * n + i]];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("loss: uniform zero logits give the analytic uniform cross-entropy") {
  MultiDiscreteSpec spec({3, 3, 3, 2});
  ObsShape obs{1, 2, 2};
  Rng rng(3);
  ContextBatch batch = random_batch(spec, obs, 2, 4, rng);
  std::vector<nn::Var<float>> logits;
  for (int32_t d : spec.dims) {
    logits.push_back(nn::Var<float>::constant(nn::Tensor<float>({2, 4, d})));
  }
  const double expect = (3 * std::log(3.0) + std::log(2.0)) / 4.0;
  CHECK(action_loss(logits, batch).value()[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("loss: a large margin on the target drives the loss to zero") {
  MultiDiscreteSpec spec({3, 2});
  ObsShape obs{1, 2, 2};
  Rng rng(5);
  ContextBatch batch = random_batch(spec, obs, 1, 3, rng);
  std::vector<nn::Var<float>> logits;
  for (int32_t i = 0; i < spec.n(); ++i) {
    nn::Tensor<float> t({1, 3, spec.dims[i]});
    for (int64_t r = 0; r < 3; ++r) {
      t[r * spec.dims[i] + batch.actions[r * spec.n() + i]] = 50.0f;
    }
    logits.push_back(nn::Var<float>::constant(std::move(t)));
  }
  CHECK(action_loss(logits, batch).value()[0] < 1e-6);
}

TEST_CASE("loss matches a per-element reference loop on random instances") {
  MultiDiscreteSpec spec({3, 3, 3, 2});
  ObsShape obs{1, 2, 2};
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    ContextBatch batch = random_batch(spec, obs, 3, 5, rng, trial % 3);
    std::vector<nn::Var<double>> logits;
    for (int32_t d : spec.dims) {
      nn::Tensor<double> t({3, 5, d});
      for (auto& v : t.flat()) v = rng.normal() * 2;
      logits.push_back(nn::Var<double>::constant(std::move(t)));
    }
    const double got = action_loss(logits, batch).value()[0];
    CHECK(std::abs(got - naive_loss(logits, batch)) < 1e-6);
  }
}

TEST_CASE("loss: appending padded timesteps leaves the value unchanged") {
  MultiDiscreteSpec spec({3, 2});
  ObsShape obs{2, 5, 5};
  Rng rng(9);
  Tokenizer<float> tok(tok_cfg(Scheme::kMsat, spec, obs, 16, 64), rng);
  Transformer<float> model(model_cfg(spec, 16, 2, 2, 0.0f), rng);

  Rng brng(11);
  ContextBatch batch = random_batch(spec, obs, 2, 4, brng);
  ContextBatch extended = batch;
  extended.context = 6;
  const int64_t obs_len = obs.numel();
  // two padded positions appended per sample
  ContextBatch fresh;
  fresh = batch;
  fresh.context = 6;
  fresh.rtg.assign(2 * 6, 0.0f);
  fresh.states.assign(2 * 6 * obs_len, 0.0f);
  fresh.actions.assign(2 * 6 * spec.n(), 0);
  fresh.timesteps.assign(2 * 6, 0);
  fresh.pad.assign(2 * 6, 0);
  for (int64_t bi = 0; bi < 2; ++bi) {
    for (int64_t ki = 0; ki < 4; ++ki) {
      fresh.rtg[bi * 6 + ki] = batch.rtg[bi * 4 + ki];
      std::copy(batch.states.begin() + (bi * 4 + ki) * obs_len,
                batch.states.begin() + (bi * 4 + ki + 1) * obs_len,
                fresh.states.begin() + (bi * 6 + ki) * obs_len);
      for (int32_t j = 0; j < spec.n(); ++j) {
        fresh.actions[(bi * 6 + ki) * spec.n() + j] = batch.actions[(bi * 4 + ki) * spec.n() + j];
      }
      fresh.timesteps[bi * 6 + ki] = batch.timesteps[bi * 4 + ki];
      fresh.pad[bi * 6 + ki] = 1;
    }
  }

  nn::NoGradGuard no_grad;
  auto seq_a = tok.tokenize(batch);
  auto seq_b = tok.tokenize(fresh);
  const float loss_a =
      action_loss(model.action_logits(model.forward(seq_a), seq_a), batch).value()[0];
  const float loss_b =
      action_loss(model.action_logits(model.forward(seq_b), seq_b), fresh).value()[0];
  CHECK(loss_a == loss_b);

  // an all-padded batch is rejected
  ContextBatch empty = batch;
  std::fill(empty.pad.begin(), empty.pad.end(), uint8_t{0});
  auto seq_c = tok.tokenize(empty);
  CHECK_THROWS_AS(action_loss(model.action_logits(model.forward(seq_c), seq_c), empty),
                  ConfigError);
}

TEST_CASE("train_epoch: deterministic traces, lr=0 leaves parameters frozen") {
  auto env = make_env("rooms");
  TrajectoryDataset ds = generate_dataset(*env, 120, 0.1, 3);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.context = 4;
  tc.learning_rate = 1e-3;
  tc.warmup_steps = 1;
  tc.grad_clip_norm = 1.0;
  tc.return_scale = 1.0;

  auto run_once = [&](double lr) {
    TrainConfig cfg = tc;
    cfg.learning_rate = lr;
    Rng init(5);
    Tokenizer<float> tok(tok_cfg(Scheme::kMsat, ds.spec, ds.obs_shape, 16), init);
    Transformer<float> model(model_cfg(ds.spec, 16, 1, 2), init);
    nn::ParamList<float> params;
    tok.collect_params(params);
    model.collect_params(params);
    nn::AdamW<float> opt(&params);
    Rng trng(7);
    int64_t step = 0;
    auto losses = train_epoch(model, tok, ds, cfg, opt, params, trng, step);
    std::vector<float> first_param(params[0].var.value().flat().begin(),
                                   params[0].var.value().flat().end());
    return std::make_pair(losses, first_param);
  };

  auto [l1, p1] = run_once(1e-3);
  auto [l2, p2] = run_once(1e-3);
  REQUIRE(l1.size() == l2.size());
  for (size_t i = 0; i < l1.size(); ++i) CHECK(l1[i] == doctest::Approx(l2[i]).epsilon(1e-6));
  CHECK(p1 == p2);

  Rng init(5);
  Tokenizer<float> tok(tok_cfg(Scheme::kMsat, ds.spec, ds.obs_shape, 16), init);
  Transformer<float> model(model_cfg(ds.spec, 16, 1, 2), init);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);
  std::vector<float> before(params[3].var.value().flat().begin(),
                            params[3].var.value().flat().end());
  nn::AdamW<float> opt(&params);
  TrainConfig frozen = tc;
  frozen.learning_rate = 0.0;
  Rng trng(7);
  int64_t step = 0;
  train_epoch(model, tok, ds, frozen, opt, params, trng, step);
  std::vector<float> after(params[3].var.value().flat().begin(),
                           params[3].var.value().flat().end());
  CHECK(before == after);
}

TEST_CASE("train_epoch: lr=0 on a one-step dataset gives an exactly flat trace") {
  // A single one-step episode makes every sampled window identical; with
  // dropout off and lr=0 the loss repeats bit-for-bit.
  auto env = make_env("rooms");
  TrajectoryDataset ds = generate_dataset(*env, 1, 0.0, 21);
  while (ds.episodes[0].steps.size() > 1) ds.episodes[0].steps.pop_back();
  ds.episodes[0].finalize();

  Rng init(5);
  Tokenizer<float> tok(tok_cfg(Scheme::kMat, ds.spec, ds.obs_shape, 16), init);
  Transformer<float> model(model_cfg(ds.spec, 16, 1, 2, 0.0f), init);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);
  nn::AdamW<float> opt(&params);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.context = 1;
  tc.learning_rate = 0.0;
  tc.warmup_steps = 1;
  tc.return_scale = 1.0;
  Rng trng(7);
  int64_t step = 0;
  std::vector<double> all;
  for (int epoch = 0; epoch < 3; ++epoch) {
    auto losses = train_epoch(model, tok, ds, tc, opt, params, trng, step);
    all.insert(all.end(), losses.begin(), losses.end());
  }
  REQUIRE(all.size() >= 3);
  for (size_t i = 1; i < all.size(); ++i) CHECK(all[i] == all[0]);
}

TEST_CASE("run_ablation: a 3x2x2 matrix yields 12 cells with stats files") {
  auto env = make_env("rooms");
  TrajectoryDataset ds = generate_dataset(*env, 40, 0.1, 33);

  RunConfig base;
  base.env_name = "rooms";
  base.apply_env_defaults();
  base.n_layers = 1;
  base.n_heads = 2;
  base.d_model = 16;
  base.train.epochs = 0;  // evaluate the fresh model only; counting is the point
  base.train.batch_size = 4;
  base.train.context = 2;
  base.train.eval_episodes = 1;

  const auto out = std::filesystem::temp_directory_path() / "msatdt_test_ablate12";
  std::filesystem::remove_all(out);
  auto report = run_ablation(base, {"single", "mat", "msat"}, {true, false}, {1, 2}, ds, out, 2);
  CHECK(report.cells.size() == 12);
  int stats_files = 0;
  for (const auto& cell : report.cells) {
    CHECK(cell.ok);
    if (std::filesystem::exists(std::filesystem::path(cell.dir) / "stats.json")) ++stats_files;
  }
  CHECK(stats_files == 12);
  // one table row per (scheme, pe) group
  const std::string table = report.table();
  CHECK(table.find("M-SAT with PE") != std::string::npos);
  CHECK(table.find("M-SAT No PE") != std::string::npos);
  CHECK(table.find("MAT with PE") != std::string::npos);
  CHECK(table.find("MAT No PE") != std::string::npos);
  CHECK(table.find("Baseline with PE") != std::string::npos);
  CHECK(table.find("Baseline No PE") != std::string::npos);
}

TEST_CASE("train_epoch: a NaN parameter trips the divergence guard") {
  auto env = make_env("rooms");
  TrajectoryDataset ds = generate_dataset(*env, 60, 0.0, 3);
  Rng init(5);
  Tokenizer<float> tok(tok_cfg(Scheme::kMat, ds.spec, ds.obs_shape, 16), init);
  Transformer<float> model(model_cfg(ds.spec, 16, 1, 2), init);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);
  for (auto& p : params) {
    // poison an action head: nothing downstream can mask the NaN
    if (p.name == "model.head0.w") p.var.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  }
  nn::AdamW<float> opt(&params);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.context = 4;
  tc.return_scale = 1.0;
  Rng trng(7);
  int64_t step = 0;
  CHECK_THROWS_AS(train_epoch(model, tok, ds, tc, opt, params, trng, step), DivergenceError);
}

TEST_CASE("train_epoch: a single episode is memorized (overfit smoke test)") {
  auto env = make_env("rooms");
  TrajectoryDataset ds = generate_dataset(*env, 1, 0.0, 11);  // exactly one episode
  REQUIRE(ds.episodes.size() == 1);

  TrainConfig tc;
  tc.batch_size = 8;
  tc.context = 8;
  tc.learning_rate = 3e-3;
  tc.warmup_steps = 1;
  tc.return_scale = 1.0;

  Rng init(13);
  Tokenizer<float> tok(tok_cfg(Scheme::kMsat, ds.spec, ds.obs_shape, 32), init);
  ModelConfig mc = model_cfg(ds.spec, 32, 2, 2, 0.0f);
  Transformer<float> model(mc, init);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);
  nn::AdamW<float> opt(&params);
  Rng trng(17);
  int64_t step = 0;
  double first = 0, last = 0;
  for (int epoch = 0; epoch < 50; ++epoch) {
    auto losses = train_epoch(model, tok, ds, tc, opt, params, trng, step);
    double mean = 0;
    for (double l : losses) mean += l;
    mean /= static_cast<double>(losses.size());
    if (epoch == 0) first = mean;
    last = mean;
  }
  CHECK(last < 0.1 * first);
}

TEST_CASE("build_eval_window: exact rtg bookkeeping and sliding coverage") {
  MultiDiscreteSpec spec({3, 2});
  ObsShape obs{1, 1, 1};
  const double target = 1.2, scale = 2.0;
  std::vector<std::vector<float>> states;
  std::vector<std::vector<int32_t>> actions;
  std::vector<float> rewards;
  Rng rng(19);
  for (int t = 0; t < 12; ++t) {
    states.push_back({static_cast<float>(t) / 12.0f});
    actions.push_back({static_cast<int32_t>(rng.randint(0, 3)), 0});
    rewards.push_back(static_cast<float>(rng.normal()) * 0.1f);
  }

  for (int64_t t = 0; t < 12; ++t) {
    ContextBatch w = build_eval_window(states, actions, rewards, t, 5, target, scale, spec, obs);
    const int64_t len = std::min<int64_t>(t + 1, 5);
    // sliding window covers exactly steps t-len+1..t
    for (int64_t j = 0; j < len; ++j) {
      const int64_t at = 5 - len + j;
      CHECK(w.pad[static_cast<size_t>(at)] == 1);
      CHECK(w.timesteps[static_cast<size_t>(at)] == t - len + 1 + j);
      // conditioning value is exactly (target - prefix reward sum) / scale
      double prefix = 0;
      for (int64_t i = 0; i < t - len + 1 + j; ++i) prefix += static_cast<double>(rewards[i]);
      CHECK(w.rtg[static_cast<size_t>(at)] == static_cast<float>((target - prefix) / scale));
    }
    for (int64_t j = 0; j < 5 - len; ++j) CHECK(w.pad[static_cast<size_t>(j)] == 0);
  }
}

TEST_CASE("evaluate: random-weight model on rooms stays in bounds, mostly times out") {
  auto env = make_env("rooms");
  Rng init(23);
  Tokenizer<float> tok(tok_cfg(Scheme::kMat, env->action_spec(), env->obs_shape(), 16), init);
  Transformer<float> model(model_cfg(env->action_spec(), 16, 1, 2), init);
  TrainConfig tc;
  tc.context = 4;
  tc.eval_target = 1.2;
  tc.return_scale = 1.0;
  std::vector<uint64_t> seeds;
  for (uint64_t s = 1; s <= 12; ++s) seeds.push_back(s);
  EvalStats stats = evaluate(model, tok, *env, tc, seeds, /*jobs=*/2);
  REQUIRE(stats.returns.size() == 12);
  CHECK(stats.mean >= -0.2001);
  CHECK(stats.mean <= 1.0);
  int timeouts = stats.termination.count("timeout") ? stats.termination.at("timeout") : 0;
  CHECK(timeouts > 6);  // a random policy rarely stumbles into the goal

  // stats metadata records the run's target, and results are seed-deterministic
  CHECK(stats.eval_target == 1.2);
  EvalStats again = evaluate(model, tok, *env, tc, seeds, /*jobs=*/1);
  CHECK(again.returns == stats.returns);

  TrainConfig other = tc;
  other.eval_target = 0.0;
  EvalStats low = evaluate(model, tok, *env, other, seeds, 2);
  CHECK(low.eval_target == 0.0);
}

TEST_CASE("expert replay through the env reproduces recorded episode returns exactly") {
  auto env = make_env("corridor");
  TrajectoryDataset ds = generate_dataset(*env, 1, 0.0, 31);
  REQUIRE(ds.episodes.size() == 1);
  const Episode& ep = ds.episodes[0];

  // the first episode of a generation run is seeded with the first draw
  Rng gen(31);
  env->reset(gen.next_u64());
  double total = 0;
  for (const auto& ts : ep.steps) {
    StepResult sr = env->step(ts.action);
    total += static_cast<double>(sr.reward);
    CHECK(sr.reward == ts.reward);
  }
  CHECK(env->done());
  CHECK(total == doctest::Approx(ep.episode_return).epsilon(1e-12));
}
