#include "msat/train/train.hpp"

#include <cmath>

#include "msat/errors.hpp"

namespace msat {

std::vector<double> train_epoch(Transformer<float>& model, Tokenizer<float>& tokenizer,
                                const TrajectoryDataset& dataset, const TrainConfig& cfg,
                                nn::AdamW<float>& opt, nn::ParamList<float>& params, Rng& rng,
                                int64_t& global_step) {
  cfg.validate();
  if (!(dataset.spec == tokenizer.config().spec)) {
    throw ConfigError("dataset action spec does not match tokenizer");
  }
  const int64_t dataset_steps = dataset.total_steps();
  if (dataset_steps == 0) throw ConfigError("train_epoch: empty dataset");
  const int64_t steps = (dataset_steps + cfg.batch_size * cfg.context - 1) /
                        (cfg.batch_size * cfg.context);

  std::vector<double> losses;
  losses.reserve(static_cast<size_t>(steps));
  for (int64_t s = 0; s < steps; ++s) {
    ContextBatch batch =
        sample_batch(dataset, cfg.batch_size, cfg.context, cfg.return_scale, rng);
    TokenSequence<float> seq = tokenizer.tokenize(batch);
    HiddenStates<float> hidden = model.forward(seq, /*capture=*/false, /*training=*/true, &rng);
    std::vector<nn::Var<float>> logits = model.action_logits(hidden, seq);
    nn::Var<float> loss = action_loss(logits, batch);
    const double loss_value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("training loss is non-finite at global step " +
                            std::to_string(global_step + 1));
    }
    nn::backward(loss);
    nn::clip_grad_norm(params, cfg.grad_clip_norm);
    ++global_step;
    opt.step(nn::warmup_lr(cfg.learning_rate, global_step, cfg.warmup_steps));
    losses.push_back(loss_value);
  }
  return losses;
}

}  // namespace msat
