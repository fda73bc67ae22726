#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "msat/model/checkpoint.hpp"
#include "msat/model/transformer.hpp"
#include "msat/train/train.hpp"

using namespace msat;
using nn::Tensor;
using nn::Var;

namespace {

ModelConfig tiny_model_cfg(const MultiDiscreteSpec& spec, int32_t d_model = 16,
                           int32_t layers = 2, int32_t heads = 2) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d_model;
  cfg.dropout_embed = cfg.dropout_resid = cfg.dropout_attn = 0.0f;
  cfg.max_seq_len = 512;
  cfg.spec = spec;
  return cfg;
}

TokenizerConfig tiny_tok_cfg(Scheme scheme, const MultiDiscreteSpec& spec, int32_t d_model = 16,
                             bool use_pe = true) {
  TokenizerConfig cfg;
  cfg.scheme = scheme;
  cfg.use_pe = use_pe;
  cfg.d_model = d_model;
  cfg.max_timestep = 64;
  cfg.spec = spec;
  cfg.obs = {2, 5, 5};
  return cfg;
}

ContextBatch random_batch(const TokenizerConfig& cfg, int64_t b, int64_t k, Rng& rng,
                          int64_t pad_prefix = 0) {
  ContextBatch batch;
  batch.batch = b;
  batch.context = k;
  batch.spec = cfg.spec;
  batch.obs = cfg.obs;
  batch.rtg.resize(static_cast<size_t>(b * k));
  batch.states.resize(static_cast<size_t>(b * k * cfg.obs.numel()));
  batch.actions.resize(static_cast<size_t>(b * k * cfg.spec.n()));
  batch.timesteps.assign(static_cast<size_t>(b * k), 0);
  batch.pad.assign(static_cast<size_t>(b * k), 1);
  for (auto& v : batch.rtg) v = static_cast<float>(rng.normal());
  for (auto& v : batch.states) v = static_cast<float>(rng.uniform());
  for (int64_t i = 0; i < b * k; ++i) {
    for (int32_t j = 0; j < cfg.spec.n(); ++j) {
      batch.actions[i * cfg.spec.n() + j] = static_cast<int32_t>(rng.randint(0, cfg.spec.dims[j]));
    }
  }
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ki = 0; ki < k; ++ki) {
      batch.timesteps[bi * k + ki] = static_cast<int32_t>(ki);
      if (ki < pad_prefix) {
        batch.pad[bi * k + ki] = 0;
        batch.rtg[bi * k + ki] = 0;
        for (int64_t px = 0; px < cfg.obs.numel(); ++px) {
          batch.states[(bi * k + ki) * cfg.obs.numel() + px] = 0;
        }
        for (int32_t j = 0; j < cfg.spec.n(); ++j) {
          batch.actions[(bi * k + ki) * cfg.spec.n() + j] = 0;
        }
      }
    }
  }
  return batch;
}

// Two-loop reference: per query, softmax over allowed keys then a weighted
// sum of values. Independent of the bmm/masked-softmax implementation path.
Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k,
                               const Tensor<double>& v, const std::vector<uint8_t>& mask) {
  const int64_t n = q.shape()[0], l = q.shape()[1], dh = q.shape()[2];
  Tensor<double> out({n, l, dh});
  for (int64_t bi = 0; bi < n; ++bi) {
    for (int64_t i = 0; i < l; ++i) {
      std::vector<double> scores(static_cast<size_t>(l), 0.0);
      double mx = -1e300;
      bool any = false;
      for (int64_t j = 0; j < l; ++j) {
        if (!mask[static_cast<size_t>((bi * l + i) * l + j)]) continue;
        double dot = 0;
        for (int64_t d = 0; d < dh; ++d) {
          dot += q[(bi * l + i) * dh + d] * k[(bi * l + j) * dh + d];
        }
        scores[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
        any = true;
      }
      if (!any) continue;
      double denom = 0;
      for (int64_t j = 0; j < l; ++j) {
        if (mask[static_cast<size_t>((bi * l + i) * l + j)]) {
          denom += std::exp(scores[static_cast<size_t>(j)] - mx);
        }
      }
      for (int64_t j = 0; j < l; ++j) {
        if (!mask[static_cast<size_t>((bi * l + i) * l + j)]) continue;
        const double p = std::exp(scores[static_cast<size_t>(j)] - mx) / denom;
        for (int64_t d = 0; d < dh; ++d) {
          out[(bi * l + i) * dh + d] += p * v[(bi * l + j) * dh + d];
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("attention: one unmasked key returns that key's value; equal keys spread evenly") {
  nn::NoGradGuard no_grad;
  Rng rng(3);
  Tensor<double> q({1, 1, 4}), k({1, 1, 4}), v({1, 1, 4});
  for (auto& x : q.flat()) x = rng.normal();
  for (auto& x : k.flat()) x = rng.normal();
  for (auto& x : v.flat()) x = rng.normal();
  auto mask = std::make_shared<std::vector<uint8_t>>(1, uint8_t{1});
  auto [probs, out] = attention<double>(Var<double>::constant(q), Var<double>::constant(k),
                                        Var<double>::constant(v), mask);
  CHECK(probs.value()[0] == 1.0);
  for (int64_t d = 0; d < 4; ++d) CHECK(out.value()[d] == v[d]);

  Tensor<double> k2({1, 3, 4}), q2({1, 3, 4}), v2({1, 3, 4});
  for (int64_t j = 0; j < 3; ++j) {
    for (int64_t d = 0; d < 4; ++d) {
      k2[j * 4 + d] = 1.0;
      q2[j * 4 + d] = 0.5;
      v2[j * 4 + d] = static_cast<double>(j);
    }
  }
  auto full = std::make_shared<std::vector<uint8_t>>(9, uint8_t{1});
  auto [p2, o2] = attention<double>(Var<double>::constant(q2), Var<double>::constant(k2),
                                    Var<double>::constant(v2), full);
  for (int64_t j = 0; j < 9; ++j) CHECK(p2.value()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("attention matches the naive two-loop reference on random instances") {
  nn::NoGradGuard no_grad;
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = rng.randint(1, 4);
    const int64_t l = rng.randint(1, 9);
    const int64_t dh = rng.randint(2, 9);
    Tensor<double> q({n, l, dh}), k({n, l, dh}), v({n, l, dh});
    for (auto& x : q.flat()) x = rng.normal();
    for (auto& x : k.flat()) x = rng.normal();
    for (auto& x : v.flat()) x = rng.normal();
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n * l * l));
    for (int64_t bi = 0; bi < n; ++bi) {
      for (int64_t i = 0; i < l; ++i) {
        for (int64_t j = 0; j <= i; ++j) (*mask)[(bi * l + i) * l + j] = 1;  // causal
      }
    }
    auto [probs, out] = attention<double>(Var<double>::constant(q), Var<double>::constant(k),
                                          Var<double>::constant(v), mask);
    Tensor<double> expect = naive_attention(q, k, v, *mask);
    for (int64_t i = 0; i < out.value().numel(); ++i) {
      CHECK(std::abs(out.value()[i] - expect[i]) < 1e-6);
    }
    for (int64_t r = 0; r < n * l; ++r) {
      double sum = 0;
      for (int64_t j = 0; j < l; ++j) sum += probs.value()[r * l + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("forward: shape contract, captured rows, padded-query rows") {
  Rng rng(23);
  MultiDiscreteSpec spec({3, 2});
  TokenizerConfig tcfg = tiny_tok_cfg(Scheme::kMsat, spec);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(tiny_model_cfg(spec), rng);
  Rng brng(29);
  ContextBatch batch = random_batch(tcfg, 2, 4, brng, /*pad_prefix=*/1);
  auto seq = tok.tokenize(batch);
  nn::NoGradGuard no_grad;
  auto hs = model.forward(seq, /*capture=*/true);
  CHECK(hs.hidden.shape() == std::vector<int64_t>{2, 16, 16});
  REQUIRE(hs.attention.size() == 2);

  const int64_t l = 16;
  for (const auto& attn : hs.attention) {
    CHECK(attn.shape() == std::vector<int64_t>{2, 2, l, l});
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t h = 0; h < 2; ++h) {
        for (int64_t i = 0; i < l; ++i) {
          double sum = 0;
          for (int64_t j = 0; j < l; ++j) {
            const float w = attn[((b * 2 + h) * l + i) * l + j];
            if (j > i) CHECK(w == 0.0f);                // causal
            if (!seq.pad[b * l + j]) CHECK(w == 0.0f);  // padded key
            sum += w;
          }
          if (seq.pad[static_cast<size_t>(b * l + i)]) {
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
          } else {
            CHECK(sum == 0.0);  // padded query attends to nothing
          }
        }
      }
    }
  }

  ModelConfig small = tiny_model_cfg(spec);
  small.max_seq_len = 8;
  Transformer<float> clipped(small, rng);
  CHECK_THROWS_AS(clipped.forward(seq), ConfigError);
}

TEST_CASE("causality: suffix modifications never change earlier action logits") {
  Rng rng(31);
  MultiDiscreteSpec spec({3, 2});
  for (Scheme scheme : {Scheme::kSingle, Scheme::kMat, Scheme::kMsat}) {
    TokenizerConfig tcfg = tiny_tok_cfg(scheme, spec);
    Tokenizer<float> tok(tcfg, rng);
    Transformer<float> model(tiny_model_cfg(spec), rng);
    Rng brng(37 + static_cast<uint64_t>(scheme));
    ContextBatch batch = random_batch(tcfg, 2, 5, brng);
    auto seq = tok.tokenize(batch);
    nn::NoGradGuard no_grad;
    auto base_logits = model.action_logits(model.forward(seq), seq);

    for (int probe = 0; probe < 10; ++probe) {
      const int64_t k_cut = brng.randint(0, 5);
      const int64_t pos_cut = seq.state_positions[static_cast<size_t>(k_cut)];
      auto tampered = seq;
      nn::Tensor<float> tokens = seq.tokens.value().clone();
      const int64_t l = tokens.shape()[1];
      const int64_t d = tokens.shape()[2];
      for (int64_t b = 0; b < 2; ++b) {
        for (int64_t p = pos_cut + 1; p < l; ++p) {
          for (int64_t j = 0; j < d; ++j) {
            tokens[(b * l + p) * d + j] = static_cast<float>(brng.normal() * 3);
          }
        }
      }
      tampered.tokens = nn::Var<float>::constant(tokens);
      auto new_logits = model.action_logits(model.forward(tampered), tampered);

      for (size_t head = 0; head < base_logits.size(); ++head) {
        const auto& a = base_logits[head].value();
        const auto& b = new_logits[head].value();
        const int64_t width = a.shape()[2];
        for (int64_t bi = 0; bi < 2; ++bi) {
          for (int64_t ki = 0; ki <= k_cut; ++ki) {
            for (int64_t j = 0; j < width; ++j) {
              CHECK(a[(bi * 5 + ki) * width + j] == b[(bi * 5 + ki) * width + j]);
            }
          }
        }
      }
    }
  }
}

TEST_CASE("action_logits: shapes and zero hidden with zero-init head biases") {
  Rng rng(41);
  MultiDiscreteSpec spec({3, 3});
  TokenizerConfig tcfg = tiny_tok_cfg(Scheme::kMat, spec);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(tiny_model_cfg(spec), rng);
  Rng brng(43);
  ContextBatch batch = random_batch(tcfg, 1, 10, brng);
  auto seq = tok.tokenize(batch);
  nn::NoGradGuard no_grad;
  auto logits = model.action_logits(model.forward(seq), seq);
  REQUIRE(logits.size() == 2);
  CHECK(logits[0].shape() == std::vector<int64_t>{1, 10, 3});
  CHECK(logits[1].shape() == std::vector<int64_t>{1, 10, 3});

  HiddenStates<float> zero_hidden;
  zero_hidden.hidden = nn::Var<float>::constant(nn::Tensor<float>({1, seq.length(), 16}));
  auto zero_logits = model.action_logits(zero_hidden, seq);
  for (const auto& lv : zero_logits) {
    for (float v : lv.value().flat()) CHECK(v == 0.0f);
  }
}

TEST_CASE("sample_action: greedy, shift invariance, Monte Carlo frequencies") {
  Rng rng(47);
  CHECK(sample_action<float>({{0.1f, 2.0f, 0.3f}}, rng, true) == std::vector<int32_t>{1});
  CHECK(sample_action<float>({{0.1f + 5, 2.0f + 5, 0.3f + 5}}, rng, true) ==
        std::vector<int32_t>{1});

  int zeros = 0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    const auto a = sample_action<float>({{0.0f, 0.0f}}, rng, false);
    zeros += a[0] == 0;
  }
  CHECK(static_cast<double>(zeros) / trials == doctest::Approx(0.5).epsilon(0.02));

  CHECK_THROWS_AS(
      sample_action<float>({{std::numeric_limits<float>::quiet_NaN(), 0.0f}}, rng, false),
      DivergenceError);
}

TEST_CASE("forward is deterministic in eval mode") {
  Rng rng(53);
  MultiDiscreteSpec spec({3, 2});
  TokenizerConfig tcfg = tiny_tok_cfg(Scheme::kMsat, spec);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(tiny_model_cfg(spec), rng);
  Rng brng(59);
  ContextBatch batch = random_batch(tcfg, 2, 6, brng);
  auto seq1 = tok.tokenize(batch);
  auto seq2 = tok.tokenize(batch);
  nn::NoGradGuard no_grad;
  auto a = model.action_logits(model.forward(seq1), seq1);
  auto b = model.action_logits(model.forward(seq2), seq2);
  for (size_t i = 0; i < a.size(); ++i) {
    for (int64_t j = 0; j < a[i].value().numel(); ++j) {
      CHECK(a[i].value()[j] == b[i].value()[j]);
    }
  }
}

TEST_CASE("full-model gradient check on sampled parameter elements (all schemes)") {
  MultiDiscreteSpec spec({3, 2});
  for (Scheme scheme : {Scheme::kSingle, Scheme::kMat, Scheme::kMsat}) {
    Rng rng(61);
    TokenizerConfig tcfg = tiny_tok_cfg(scheme, spec, 8);
    tcfg.max_timestep = 8;
    ModelConfig mcfg = tiny_model_cfg(spec, 8, 1, 1);
    Tokenizer<double> tok(tcfg, rng);
    Transformer<double> model(mcfg, rng);
    nn::ParamList<double> params;
    tok.collect_params(params);
    model.collect_params(params);

    Rng brng(67);
    ContextBatch batch = random_batch(tcfg, 1, 2, brng, /*pad_prefix=*/1);
    auto build = [&] {
      auto seq = tok.tokenize(batch);
      auto logits = model.action_logits(model.forward(seq), seq);
      return action_loss<double>(logits, batch);
    };

    nn::zero_grads(params);
    auto loss = build();
    nn::backward(loss);

    const double h = 1e-5;
    Rng pick(71);
    for (auto& p : params) {
      const auto analytic = p.var.grad().clone();
      const int64_t numel = p.var.value().numel();
      for (int sampled = 0; sampled < std::min<int64_t>(3, numel); ++sampled) {
        const int64_t i = pick.randint(0, numel);
        double* data = p.var.mutable_value().data();
        const double keep = data[i];
        data[i] = keep + h;
        const double up = build().value()[0];
        data[i] = keep - h;
        const double down = build().value()[0];
        data[i] = keep;
        const double fd = (up - down) / (2 * h);
        const double rel =
            std::abs(analytic[i] - fd) / std::max({std::abs(analytic[i]), std::abs(fd), 1e-4});
        INFO("scheme=", scheme_name(scheme), " param=", p.name, " elem=", i,
             " analytic=", analytic[i], " fd=", fd);
        CHECK(rel < 1e-4);
      }
    }
  }
}

TEST_CASE("checkpoint: save/load round trip and corruption detection") {
  Rng rng(73);
  MultiDiscreteSpec spec({3, 2});
  TokenizerConfig tcfg = tiny_tok_cfg(Scheme::kMsat, spec);
  Tokenizer<float> tok(tcfg, rng);
  Transformer<float> model(tiny_model_cfg(spec), rng);
  nn::ParamList<float> params;
  tok.collect_params(params);
  model.collect_params(params);

  const auto dir = std::filesystem::temp_directory_path() / "msatdt_test_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  nlohmann::json config = {{"note", "test"}};
  save_checkpoint(path, config, params);

  Rng rng2(99);
  Tokenizer<float> tok2(tcfg, rng2);
  Transformer<float> model2(tiny_model_cfg(spec), rng2);
  nn::ParamList<float> params2;
  tok2.collect_params(params2);
  model2.collect_params(params2);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.config.at("note") == "test");
  restore_params(params2, loaded);

  Rng brng(79);
  ContextBatch batch = random_batch(tcfg, 1, 3, brng);
  nn::NoGradGuard no_grad;
  auto s1 = tok.tokenize(batch);
  auto s2 = tok2.tokenize(batch);
  auto a = model.action_logits(model.forward(s1), s1);
  auto b = model2.action_logits(model2.forward(s2), s2);
  for (size_t i = 0; i < a.size(); ++i) {
    for (int64_t j = 0; j < a[i].value().numel(); ++j) {
      CHECK(a[i].value()[j] == b[i].value()[j]);
    }
  }

  SUBCASE("payload corruption is caught") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    char byte;
    f.seekg(-100, std::ios::end);
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x10);
    f.seekp(-100, std::ios::end);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), ChecksumError);
  }
  SUBCASE("truncation is caught") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 64);
    CHECK_THROWS_AS(load_checkpoint(path), TruncatedError);
  }
  SUBCASE("bad magic is rejected") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("NOTMAGIC", 8);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
}
