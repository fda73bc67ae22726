#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "msat/errors.hpp"
#include "msat/train/train.hpp"

namespace msat {

void EvalStats::finalize() {
  std::sort(returns.begin(), returns.end());
  if (returns.empty()) {
    mean = stddev = 0.0;
    return;
  }
  double sum = 0.0;
  for (double r : returns) sum += r;
  mean = sum / static_cast<double>(returns.size());
  double sq = 0.0;
  for (double r : returns) sq += (r - mean) * (r - mean);
  stddev = std::sqrt(sq / static_cast<double>(returns.size()));
}

ContextBatch build_eval_window(const std::vector<std::vector<float>>& states,
                               const std::vector<std::vector<int32_t>>& actions,
                               const std::vector<float>& rewards, int64_t t, int64_t k,
                               double eval_target, double return_scale,
                               const MultiDiscreteSpec& spec, const ObsShape& obs) {
  const int64_t len = std::min(t + 1, k);
  const int64_t first = t + 1 - len;
  const int64_t pad_len = k - len;
  const int64_t obs_len = obs.numel();
  const int32_t n = spec.n();

  ContextBatch batch;
  batch.batch = 1;
  batch.context = k;
  batch.spec = spec;
  batch.obs = obs;
  batch.rtg.assign(static_cast<size_t>(k), 0.0f);
  batch.states.assign(static_cast<size_t>(k * obs_len), 0.0f);
  batch.actions.assign(static_cast<size_t>(k * n), 0);
  batch.timesteps.assign(static_cast<size_t>(k), 0);
  batch.pad.assign(static_cast<size_t>(k), 0);

  // Prefix sums of raw rewards so the conditioning value at step j is exactly
  // (eval_target - sum_{i<j} r_i) / return_scale.
  double before = 0.0;
  for (int64_t i = 0; i < first; ++i) before += static_cast<double>(rewards[static_cast<size_t>(i)]);
  for (int64_t j = 0; j < len; ++j) {
    const int64_t src = first + j;
    const int64_t dst = pad_len + j;
    batch.rtg[static_cast<size_t>(dst)] =
        static_cast<float>((eval_target - before) / return_scale);
    if (src < static_cast<int64_t>(rewards.size())) {
      before += static_cast<double>(rewards[static_cast<size_t>(src)]);
    }
    const auto& st = states[static_cast<size_t>(src)];
    std::copy(st.begin(), st.end(), batch.states.begin() + dst * obs_len);
    const auto& ac = actions[static_cast<size_t>(src)];
    std::copy(ac.begin(), ac.end(), batch.actions.begin() + dst * n);
    batch.timesteps[static_cast<size_t>(dst)] = static_cast<int32_t>(src);
    batch.pad[static_cast<size_t>(dst)] = 1;
  }
  return batch;
}

std::pair<double, std::string> run_episode(const Transformer<float>& model,
                                           const Tokenizer<float>& tokenizer, Env& env,
                                           const TrainConfig& cfg, uint64_t seed,
                                           EpisodeTrace* trace) {
  if (!(env.action_spec() == tokenizer.config().spec) ||
      !(env.obs_shape() == tokenizer.config().obs)) {
    throw ConfigError("env does not match the tokenizer's action/observation spec");
  }
  nn::NoGradGuard no_grad;
  Rng rng = Rng(seed).fork(0x9e37u);

  std::vector<std::vector<float>> states;
  std::vector<std::vector<int32_t>> actions;
  std::vector<float> rewards;
  std::string termination = "timeout";

  std::vector<float> obs = env.reset(seed);
  double total = 0.0;
  while (!env.done()) {
    const int64_t t = static_cast<int64_t>(actions.size());
    states.push_back(obs);
    actions.emplace_back(static_cast<size_t>(tokenizer.config().spec.n()), 0);

    ContextBatch window =
        build_eval_window(states, actions, rewards, t, cfg.context, cfg.eval_target,
                          cfg.return_scale, tokenizer.config().spec, tokenizer.config().obs);
    TokenSequence<float> seq = tokenizer.tokenize(window);
    HiddenStates<float> hidden = model.forward(seq);
    std::vector<nn::Var<float>> logits = model.action_logits(hidden, seq);

    std::vector<std::vector<float>> comp_logits;
    comp_logits.reserve(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
      const auto& lv = logits[i].value();
      const int64_t width = lv.shape()[2];
      const float* row = lv.data() + (cfg.context - 1) * width;  // last state token
      comp_logits.emplace_back(row, row + width);
    }
    std::vector<int32_t> action = sample_action(comp_logits, rng, cfg.greedy_eval);
    actions.back() = action;

    StepResult sr = env.step(action);
    rewards.push_back(sr.reward);
    total += static_cast<double>(sr.reward);
    obs = std::move(sr.observation);
    if (sr.done) {
      const auto it = sr.info.find("termination");
      termination = it != sr.info.end() ? it->second : "done";
    }
  }

  if (trace) {
    trace->states = std::move(states);
    trace->actions = std::move(actions);
    trace->rewards = std::move(rewards);
    trace->termination = termination;
    trace->episode_return = total;
  }
  return {total, termination};
}

EvalStats evaluate(const Transformer<float>& model, const Tokenizer<float>& tokenizer,
                   const Env& env_proto, const TrainConfig& cfg,
                   std::span<const uint64_t> episode_seeds, int jobs) {
  const int64_t n = static_cast<int64_t>(episode_seeds.size());
  std::vector<double> returns(static_cast<size_t>(n));
  std::vector<std::string> terminations(static_cast<size_t>(n));

  jobs = std::max(1, jobs);
  std::atomic<int64_t> next{0};
  auto worker = [&]() {
    auto env = env_proto.clone_fresh();
    while (true) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) break;
      auto [ret, term] =
          run_episode(model, tokenizer, *env, cfg, episode_seeds[static_cast<size_t>(i)]);
      returns[static_cast<size_t>(i)] = ret;
      terminations[static_cast<size_t>(i)] = term;
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  EvalStats stats;
  stats.returns = std::move(returns);
  for (const auto& t : terminations) ++stats.termination[t];
  stats.eval_target = cfg.eval_target;
  stats.greedy = cfg.greedy_eval;
  stats.finalize();
  return stats;
}

}  // namespace msat
