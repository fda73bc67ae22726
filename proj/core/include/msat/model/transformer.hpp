#pragma once

#include <cmath>

#include "msat/action_spec.hpp"
#include "msat/nn/autodiff.hpp"
#include "msat/nn/optim.hpp"
#include "msat/rng.hpp"
#include "msat/tok/tokenizer.hpp"

namespace msat {

struct ModelConfig {
  int32_t n_layers = 4;
  int32_t n_heads = 4;
  int32_t d_model = 64;
  float dropout_embed = 0.1f;
  float dropout_resid = 0.1f;
  float dropout_attn = 0.1f;
  int64_t max_seq_len = 512;
  MultiDiscreteSpec spec;

  void validate() const {
    spec.validate();
    if (n_layers < 1 || n_heads < 1) throw ConfigError("need at least one layer and head");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    auto check = [](float p) {
      if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout must be in [0,1)");
    };
    check(dropout_embed);
    check(dropout_resid);
    check(dropout_attn);
    if (max_seq_len < 1) throw ConfigError("max_seq_len must be positive");
  }
};

template <typename T>
struct HiddenStates {
  nn::Var<T> hidden;                      // (B, L, d_model)
  std::vector<nn::Tensor<T>> attention;   // per layer (B, n_heads, L, L), capture only
};

// Row-stochastic attention probabilities over batched heads. q,k: (N, L,
// d_head), mask: N*L*L bytes, 1 = key allowed. Masked keys get exact zeros;
// rows with no allowed key come out all-zero.
template <typename T>
nn::Var<T> attention_probs(const nn::Var<T>& q, const nn::Var<T>& k,
                           std::shared_ptr<const std::vector<uint8_t>> mask) {
  const int64_t d_head = q.shape()[2];
  nn::Var<T> scores = nn::scale(nn::bmm(q, k, false, true),
                                static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_head))));
  const auto& ss = scores.shape();
  nn::Var<T> probs = nn::masked_softmax_rows(
      nn::reshape(scores, {ss[0] * ss[1], ss[2]}), std::move(mask));
  return nn::reshape(probs, ss);
}

// Full scaled dot-product attention: softmax(q k^T / sqrt(d_head)) v with the
// boolean mask applied inside the softmax.
template <typename T>
std::pair<nn::Var<T>, nn::Var<T>> attention(const nn::Var<T>& q, const nn::Var<T>& k,
                                            const nn::Var<T>& v,
                                            std::shared_ptr<const std::vector<uint8_t>> mask) {
  nn::Var<T> probs = attention_probs(q, k, std::move(mask));
  return {probs, nn::bmm(probs, v)};
}

// Pre-norm GPT-style causal transformer with per-component action heads read
// from the state-token outputs.
template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    layers_.resize(static_cast<size_t>(cfg_.n_layers));
    for (auto& l : layers_) {
      l.ln1_g = nn::Var<T>::parameter(nn::Tensor<T>::full({d}, T{1}));
      l.ln1_b = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.wq = nn::Var<T>::parameter(nn::normal_init<T>({d, d}, rng));
      l.bq = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.wk = nn::Var<T>::parameter(nn::normal_init<T>({d, d}, rng));
      l.bk = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.wv = nn::Var<T>::parameter(nn::normal_init<T>({d, d}, rng));
      l.bv = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.wo = nn::Var<T>::parameter(nn::normal_init<T>({d, d}, rng));
      l.bo = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.ln2_g = nn::Var<T>::parameter(nn::Tensor<T>::full({d}, T{1}));
      l.ln2_b = nn::Var<T>::parameter(nn::Tensor<T>({d}));
      l.ff1_w = nn::Var<T>::parameter(nn::normal_init<T>({d, 4 * d}, rng));
      l.ff1_b = nn::Var<T>::parameter(nn::Tensor<T>({4 * d}));
      l.ff2_w = nn::Var<T>::parameter(nn::normal_init<T>({4 * d, d}, rng));
      l.ff2_b = nn::Var<T>::parameter(nn::Tensor<T>({d}));
    }
    lnf_g_ = nn::Var<T>::parameter(nn::Tensor<T>::full({d}, T{1}));
    lnf_b_ = nn::Var<T>::parameter(nn::Tensor<T>({d}));
    heads_.resize(static_cast<size_t>(cfg_.spec.n()));
    for (int32_t i = 0; i < cfg_.spec.n(); ++i) {
      heads_[static_cast<size_t>(i)].w =
          nn::Var<T>::parameter(nn::normal_init<T>({d, cfg_.spec.dims[i]}, rng));
      heads_[static_cast<size_t>(i)].b = nn::Var<T>::parameter(nn::Tensor<T>({cfg_.spec.dims[i]}));
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // Causal mask combined with the key-side padding mask, shared by all layers.
  static std::shared_ptr<std::vector<uint8_t>> build_mask(int64_t b, int64_t h, int64_t l,
                                                          const std::vector<uint8_t>& pad) {
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(b * h * l * l), 0);
    uint8_t* pm = mask->data();
    for (int64_t bi = 0; bi < b; ++bi) {
      const uint8_t* prow = pad.data() + bi * l;
      for (int64_t hi = 0; hi < h; ++hi) {
        uint8_t* base = pm + ((bi * h + hi) * l) * l;
        for (int64_t i = 0; i < l; ++i) {
          for (int64_t j = 0; j <= i; ++j) base[i * l + j] = prow[j];
        }
      }
    }
    return mask;
  }

  HiddenStates<T> forward(const TokenSequence<T>& seq, bool capture = false,
                          bool training = false, Rng* dropout_rng = nullptr) const {
    const int64_t b = seq.tokens.shape()[0];
    const int64_t l = seq.tokens.shape()[1];
    const int64_t d = cfg_.d_model;
    const int64_t h = cfg_.n_heads;
    const int64_t dh = d / h;
    if (l > cfg_.max_seq_len) {
      throw ConfigError("sequence length " + std::to_string(l) + " exceeds max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
    }
    if (training && !dropout_rng) throw ConfigError("training forward needs a dropout rng");

    HiddenStates<T> out;
    auto mask = build_mask(b, h, l, seq.pad);

    nn::Var<T> x = seq.tokens;
    if (training) x = nn::dropout(x, cfg_.dropout_embed, *dropout_rng);

    for (const auto& layer : layers_) {
      nn::Var<T> hnorm = nn::layer_norm(x, layer.ln1_g, layer.ln1_b);
      nn::Var<T> flat = nn::reshape(hnorm, {b * l, d});
      auto split_heads = [&](const nn::Var<T>& w, const nn::Var<T>& bias) {
        nn::Var<T> proj = nn::add_bias(nn::matmul(flat, w), bias);
        proj = nn::permute(nn::reshape(proj, {b, l, h, dh}), {0, 2, 1, 3});
        return nn::reshape(proj, {b * h, l, dh});
      };
      nn::Var<T> q = split_heads(layer.wq, layer.bq);
      nn::Var<T> k = split_heads(layer.wk, layer.bk);
      nn::Var<T> v = split_heads(layer.wv, layer.bv);

      nn::Var<T> probs = attention_probs<T>(q, k, mask);
      if (capture) {
        out.attention.push_back(probs.value().reshaped({b, h, l, l}).clone());
      }
      if (training) probs = nn::dropout(probs, cfg_.dropout_attn, *dropout_rng);
      nn::Var<T> ctx = nn::bmm(probs, v);

      nn::Var<T> merged =
          nn::reshape(nn::permute(nn::reshape(ctx, {b, h, l, dh}), {0, 2, 1, 3}), {b * l, d});
      nn::Var<T> attn_out = nn::add_bias(nn::matmul(merged, layer.wo), layer.bo);
      if (training) attn_out = nn::dropout(attn_out, cfg_.dropout_resid, *dropout_rng);
      x = nn::add(x, nn::reshape(attn_out, {b, l, d}));

      nn::Var<T> ff = nn::layer_norm(x, layer.ln2_g, layer.ln2_b);
      ff = nn::reshape(ff, {b * l, d});
      ff = nn::add_bias(nn::matmul(nn::gelu(nn::add_bias(nn::matmul(ff, layer.ff1_w), layer.ff1_b)),
                                   layer.ff2_w),
                        layer.ff2_b);
      if (training) ff = nn::dropout(ff, cfg_.dropout_resid, *dropout_rng);
      x = nn::add(x, nn::reshape(ff, {b, l, d}));
    }
    out.hidden = nn::layer_norm(x, lnf_g_, lnf_b_);
    return out;
  }

  // Gathers the state-token outputs and applies the n affine heads; the i-th
  // result has shape (B, K, N_i).
  std::vector<nn::Var<T>> action_logits(const HiddenStates<T>& hs,
                                        const TokenSequence<T>& seq) const {
    const int64_t b = hs.hidden.shape()[0];
    const int64_t l = hs.hidden.shape()[1];
    const int64_t d = cfg_.d_model;
    const int64_t k = static_cast<int64_t>(seq.state_positions.size());
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(b * k));
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t ki = 0; ki < k; ++ki) {
        const int64_t pos = seq.state_positions[static_cast<size_t>(ki)];
        if (pos < 0 || pos >= l) throw ShapeError("state position out of bounds");
        idx.push_back(bi * l + pos);
      }
    }
    nn::Var<T> gathered = nn::gather_rows(nn::reshape(hs.hidden, {b * l, d}), std::move(idx));
    std::vector<nn::Var<T>> logits;
    logits.reserve(heads_.size());
    for (size_t i = 0; i < heads_.size(); ++i) {
      nn::Var<T> li = nn::add_bias(nn::matmul(gathered, heads_[i].w), heads_[i].b);
      logits.push_back(nn::reshape(li, {b, k, cfg_.spec.dims[i]}));
    }
    return logits;
  }

  void collect_params(nn::ParamList<T>& out) {
    for (size_t li = 0; li < layers_.size(); ++li) {
      auto& l = layers_[li];
      const std::string p = "model.l" + std::to_string(li) + ".";
      out.push_back({p + "ln1.g", l.ln1_g, false});
      out.push_back({p + "ln1.b", l.ln1_b, false});
      out.push_back({p + "attn.wq", l.wq, true});
      out.push_back({p + "attn.bq", l.bq, false});
      out.push_back({p + "attn.wk", l.wk, true});
      out.push_back({p + "attn.bk", l.bk, false});
      out.push_back({p + "attn.wv", l.wv, true});
      out.push_back({p + "attn.bv", l.bv, false});
      out.push_back({p + "attn.wo", l.wo, true});
      out.push_back({p + "attn.bo", l.bo, false});
      out.push_back({p + "ln2.g", l.ln2_g, false});
      out.push_back({p + "ln2.b", l.ln2_b, false});
      out.push_back({p + "ff1.w", l.ff1_w, true});
      out.push_back({p + "ff1.b", l.ff1_b, false});
      out.push_back({p + "ff2.w", l.ff2_w, true});
      out.push_back({p + "ff2.b", l.ff2_b, false});
    }
    out.push_back({"model.lnf.g", lnf_g_, false});
    out.push_back({"model.lnf.b", lnf_b_, false});
    for (size_t i = 0; i < heads_.size(); ++i) {
      out.push_back({"model.head" + std::to_string(i) + ".w", heads_[i].w, true});
      out.push_back({"model.head" + std::to_string(i) + ".b", heads_[i].b, false});
    }
  }

 private:
  struct Layer {
    nn::Var<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    nn::Var<T> ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  struct Head {
    nn::Var<T> w, b;
  };

  ModelConfig cfg_;
  std::vector<Layer> layers_;
  nn::Var<T> lnf_g_, lnf_b_;
  std::vector<Head> heads_;
};

// Per-component categorical draw (or argmax) from one timestep's logits.
// Components are sampled independently.
template <typename T>
std::vector<int32_t> sample_action(const std::vector<std::vector<T>>& component_logits, Rng& rng,
                                   bool greedy) {
  std::vector<int32_t> action;
  action.reserve(component_logits.size());
  for (const auto& logits : component_logits) {
    if (logits.empty()) throw ConfigError("sample_action: empty logits");
    for (T v : logits) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw DivergenceError("sample_action: non-finite logit");
      }
    }
    if (greedy) {
      int32_t best = 0;
      for (size_t j = 1; j < logits.size(); ++j) {
        if (logits[j] > logits[static_cast<size_t>(best)]) best = static_cast<int32_t>(j);
      }
      action.push_back(best);
      continue;
    }
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    std::vector<double> probs(logits.size());
    double sum = 0;
    for (size_t j = 0; j < logits.size(); ++j) {
      probs[j] = std::exp(static_cast<double>(logits[j] - mx));
      sum += probs[j];
    }
    const double u = rng.uniform() * sum;
    double acc = 0;
    int32_t pick = static_cast<int32_t>(logits.size()) - 1;
    for (size_t j = 0; j < probs.size(); ++j) {
      acc += probs[j];
      if (u < acc) {
        pick = static_cast<int32_t>(j);
        break;
      }
    }
    action.push_back(pick);
  }
  return action;
}

}  // namespace msat
