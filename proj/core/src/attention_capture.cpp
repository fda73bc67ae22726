#include "msat/errors.hpp"
#include "msat/interpret/attention.hpp"

namespace msat {

namespace {

// Forward over the window ending at step t (unpadded, so every attention row
// is a proper distribution) and convert the captured tensors into records.
void capture_window(const Transformer<float>& model, const Tokenizer<float>& tokenizer,
                    const EpisodeTrace& trace, const TrainConfig& cfg, int64_t t,
                    const std::string& env_name, uint64_t seed,
                    std::vector<AttentionRecord>& out) {
  nn::NoGradGuard no_grad;
  const int64_t window_len = std::min<int64_t>(t + 1, cfg.context);
  ContextBatch window =
      build_eval_window(trace.states, trace.actions, trace.rewards, t, window_len,
                        cfg.eval_target, cfg.return_scale, tokenizer.config().spec,
                        tokenizer.config().obs);
  TokenSequence<float> seq = tokenizer.tokenize(window);
  HiddenStates<float> hidden = model.forward(seq, /*capture=*/true);

  const int64_t l = seq.length();
  const int32_t heads = model.config().n_heads;
  for (size_t layer = 0; layer < hidden.attention.size(); ++layer) {
    const auto& attn = hidden.attention[layer];  // (1, H, L, L)
    for (int32_t h = 0; h < heads; ++h) {
      AttentionRecord rec;
      rec.layer = static_cast<int32_t>(layer);
      rec.head = h;
      rec.env = env_name;
      rec.seed = seed;
      rec.episode_steps = static_cast<int32_t>(trace.actions.size());
      rec.capture_step = static_cast<int32_t>(t);
      rec.labels = seq.labels[0];
      rec.scores.assign(static_cast<size_t>(l), std::vector<float>(static_cast<size_t>(l)));
      const float* base = attn.data() + static_cast<int64_t>(h) * l * l;
      for (int64_t i = 0; i < l; ++i) {
        std::copy(base + i * l, base + (i + 1) * l, rec.scores[static_cast<size_t>(i)].begin());
      }
      out.push_back(std::move(rec));
    }
  }
}

}  // namespace

std::vector<AttentionRecord> capture_attention(const Transformer<float>& model,
                                               const Tokenizer<float>& tokenizer, Env& env,
                                               const TrainConfig& cfg, uint64_t seed,
                                               bool every_step) {
  EpisodeTrace trace;
  run_episode(model, tokenizer, env, cfg, seed, &trace);
  if (trace.actions.empty()) throw StateError("capture: episode produced no steps");

  std::vector<AttentionRecord> records;
  if (every_step) {
    for (int64_t t = 0; t < static_cast<int64_t>(trace.actions.size()); ++t) {
      capture_window(model, tokenizer, trace, cfg, t, env.name(), seed, records);
    }
  } else {
    capture_window(model, tokenizer, trace, cfg,
                   static_cast<int64_t>(trace.actions.size()) - 1, env.name(), seed, records);
  }
  return records;
}

}  // namespace msat
