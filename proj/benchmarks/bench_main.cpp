#include <benchmark/benchmark.h>

#include "msat/envs/corridor.hpp"
#include "msat/envs/generate.hpp"
#include "msat/train/train.hpp"

using namespace msat;

namespace {

TokenizerConfig bench_tok_cfg(Scheme scheme) {
  TokenizerConfig cfg;
  cfg.scheme = scheme;
  cfg.use_pe = true;
  cfg.d_model = 64;
  cfg.max_timestep = 256;
  cfg.spec = MultiDiscreteSpec({3, 3});
  cfg.obs = {3, 7, 7};
  return cfg;
}

ModelConfig bench_model_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.d_model = 64;
  cfg.dropout_embed = cfg.dropout_resid = cfg.dropout_attn = 0.1f;
  cfg.max_seq_len = 1024;
  cfg.spec = MultiDiscreteSpec({3, 3});
  return cfg;
}

ContextBatch bench_batch(const TokenizerConfig& cfg, int64_t b, int64_t k) {
  Rng rng(1);
  ContextBatch batch;
  batch.batch = b;
  batch.context = k;
  batch.spec = cfg.spec;
  batch.obs = cfg.obs;
  batch.rtg.resize(static_cast<size_t>(b * k));
  batch.states.resize(static_cast<size_t>(b * k * cfg.obs.numel()));
  batch.actions.resize(static_cast<size_t>(b * k * cfg.spec.n()));
  batch.timesteps.resize(static_cast<size_t>(b * k));
  batch.pad.assign(static_cast<size_t>(b * k), 1);
  for (auto& v : batch.rtg) v = static_cast<float>(rng.normal());
  for (auto& v : batch.states) v = static_cast<float>(rng.uniform());
  for (int64_t i = 0; i < b * k; ++i) {
    for (int32_t j = 0; j < cfg.spec.n(); ++j) {
      batch.actions[i * cfg.spec.n() + j] = static_cast<int32_t>(rng.randint(0, cfg.spec.dims[j]));
    }
    batch.timesteps[static_cast<size_t>(i)] = static_cast<int32_t>(i % k);
  }
  return batch;
}

void BM_TokenizeMsat(benchmark::State& state) {
  Rng rng(3);
  TokenizerConfig cfg = bench_tok_cfg(Scheme::kMsat);
  Tokenizer<float> tok(cfg, rng);
  ContextBatch batch = bench_batch(cfg, state.range(0), 10);
  nn::NoGradGuard no_grad;
  for (auto _ : state) {
    auto seq = tok.tokenize(batch);
    benchmark::DoNotOptimize(seq.tokens.value().data());
  }
}
BENCHMARK(BM_TokenizeMsat)->Arg(1)->Arg(64);

void BM_ForwardEval(benchmark::State& state) {
  Rng rng(5);
  TokenizerConfig tcfg = bench_tok_cfg(Scheme::kMsat);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(bench_model_cfg(), rng);
  ContextBatch batch = bench_batch(tcfg, state.range(0), 10);
  nn::NoGradGuard no_grad;
  auto seq = tok.tokenize(batch);
  for (auto _ : state) {
    auto hs = model.forward(seq);
    benchmark::DoNotOptimize(hs.hidden.value().data());
  }
}
BENCHMARK(BM_ForwardEval)->Arg(1)->Arg(64);

void BM_TrainStep(benchmark::State& state) {
  Rng rng(7);
  TokenizerConfig tcfg = bench_tok_cfg(Scheme::kMsat);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(bench_model_cfg(), rng);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);
  nn::AdamW<float> opt(&params);
  ContextBatch batch = bench_batch(tcfg, 64, 10);
  Rng drng(9);
  int64_t step = 0;
  for (auto _ : state) {
    auto seq = tok.tokenize(batch);
    auto hs = model.forward(seq, false, true, &drng);
    auto loss = action_loss(model.action_logits(hs, seq), batch);
    nn::backward(loss);
    nn::clip_grad_norm(params, 1.0);
    ++step;
    opt.step(nn::warmup_lr(1e-3, step, 1));
  }
}
BENCHMARK(BM_TrainStep);

void BM_CorridorEpisode(benchmark::State& state) {
  ToyCorridorEnv env;
  uint64_t seed = 0;
  for (auto _ : state) {
    env.reset(++seed);
    while (!env.done()) env.step(env.expert_action());
  }
}
BENCHMARK(BM_CorridorEpisode);

}  // namespace

BENCHMARK_MAIN();
