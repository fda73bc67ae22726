#pragma once

#include <charconv>
#include <string>
#include <vector>

#include "msat/action_spec.hpp"
#include "msat/data/context.hpp"
#include "msat/nn/autodiff.hpp"
#include "msat/nn/optim.hpp"

namespace msat {

enum class Scheme { kSingle, kMat, kMsat };

inline std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kSingle: return "single";
    case Scheme::kMat: return "mat";
    case Scheme::kMsat: return "msat";
  }
  throw ConfigError("bad scheme");
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "single") return Scheme::kSingle;
  if (s == "mat") return Scheme::kMat;
  if (s == "msat") return Scheme::kMsat;
  throw ConfigError("unknown scheme '" + s + "' (valid: single, mat, msat)");
}

struct TokenizerConfig {
  Scheme scheme = Scheme::kMsat;
  bool use_pe = true;
  int32_t d_model = 64;
  int32_t max_timestep = 256;  // PE table rows
  MultiDiscreteSpec spec;
  ObsShape obs;

  // Action tokens emitted per timestep.
  int32_t tokens_per_action() const { return scheme == Scheme::kSingle ? 1 : spec.n(); }
  int32_t tokens_per_step() const { return 2 + tokens_per_action(); }

  void validate() const {
    spec.validate();
    if (d_model < 8 || d_model % 2 != 0) throw ConfigError("d_model must be even and >= 8");
    if (max_timestep < 1) throw ConfigError("max_timestep must be >= 1");
    if (spec.n() > 9) throw ConfigError("label grammar supports at most 9 action components");
    if (obs.numel() <= 0) throw ConfigError("obs shape not set");
  }
};

// Token label grammar: r<t>, s<t>, a<i><t> with component index i in 1..n.
// The component index is a single digit, so "a117" reads as a, i=1, t=17.
struct TokenLabel {
  enum class Kind { kRtg, kState, kAction };
  Kind kind = Kind::kRtg;
  int32_t t = 0;
  int32_t comp = 0;  // 1-based, actions only

  std::string str() const {
    switch (kind) {
      case Kind::kRtg: return "r" + std::to_string(t);
      case Kind::kState: return "s" + std::to_string(t);
      case Kind::kAction: return "a" + std::to_string(comp) + std::to_string(t);
    }
    throw ConfigError("bad label kind");
  }

  static TokenLabel parse(const std::string& text) {
    auto number = [&](size_t from) {
      int32_t value = 0;
      const auto res =
          std::from_chars(text.data() + from, text.data() + text.size(), value);
      if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || value < 0) {
        throw ConfigError("bad token label '" + text + "'");
      }
      return value;
    };
    if (text.size() < 2) throw ConfigError("bad token label '" + text + "'");
    if (text[0] == 'r') return {Kind::kRtg, number(1), 0};
    if (text[0] == 's') return {Kind::kState, number(1), 0};
    if (text[0] == 'a' && text.size() >= 3 && text[1] >= '1' && text[1] <= '9') {
      return {Kind::kAction, number(2), text[1] - '0'};
    }
    throw ConfigError("bad token label '" + text + "'");
  }

  bool operator==(const TokenLabel&) const = default;
};

// Flattened, labelled token stream entering the transformer. Token order per
// timestep is (RTG, state, a1..am); state_positions lists the state-token
// offsets, identical across the batch.
template <typename T>
struct TokenSequence {
  nn::Var<T> tokens;                              // (B, L, d_model)
  std::vector<std::vector<TokenLabel>> labels;    // [B][L]
  std::vector<uint8_t> pad;                       // B*L, 1 = real
  std::vector<int64_t> state_positions;           // K entries
  int64_t batch = 0;
  int64_t context = 0;
  int64_t tokens_per_step = 0;

  int64_t length() const { return context * tokens_per_step; }
};

// Concatenated per-component one-hot encoding, width d_action.
inline std::vector<float> one_hot(std::span<const int32_t> action, const MultiDiscreteSpec& spec) {
  if (static_cast<int32_t>(action.size()) != spec.n()) {
    throw ConfigError("one_hot: action has " + std::to_string(action.size()) +
                      " components, spec expects " + std::to_string(spec.n()));
  }
  std::vector<float> out(static_cast<size_t>(spec.d_action()), 0.0f);
  int64_t offset = 0;
  for (int32_t i = 0; i < spec.n(); ++i) {
    if (action[i] < 0 || action[i] >= spec.dims[i]) {
      throw ConfigError("one_hot: component " + std::to_string(i) + " value " +
                        std::to_string(action[i]) + " outside [0, " +
                        std::to_string(spec.dims[i]) + ")");
    }
    out[static_cast<size_t>(offset + action[i])] = 1.0f;
    offset += spec.dims[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer: fixed conv state encoder, affine RTG encoder, and one of three
// action tokenisation schemes (single / mat / msat), plus the interleave step
// with optional learned per-timestep positional encoding.
// ---------------------------------------------------------------------------

template <typename T>
class Tokenizer {
 public:
  static constexpr int kConvChannels = 16;

  Tokenizer(TokenizerConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d = cfg_.d_model;
    const int64_t c = cfg_.obs.c, h = cfg_.obs.h, w = cfg_.obs.w;
    conv1_w_ = nn::Var<T>::parameter(nn::normal_init<T>({c * 9, kConvChannels}, rng));
    conv1_b_ = nn::Var<T>::parameter(nn::Tensor<T>({kConvChannels}));
    conv2_w_ = nn::Var<T>::parameter(nn::normal_init<T>({kConvChannels * 9, kConvChannels}, rng));
    conv2_b_ = nn::Var<T>::parameter(nn::Tensor<T>({kConvChannels}));
    state_fc_w_ = nn::Var<T>::parameter(nn::normal_init<T>({h * w * kConvChannels, d}, rng));
    state_fc_b_ = nn::Var<T>::parameter(nn::Tensor<T>({d}));
    rtg_w_ = nn::Var<T>::parameter(nn::normal_init<T>({1, d}, rng));
    rtg_b_ = nn::Var<T>::parameter(nn::Tensor<T>({d}));

    const int64_t act_in = action_input_width();
    act1_w_ = nn::Var<T>::parameter(nn::normal_init<T>({act_in, d}, rng));
    act1_b_ = nn::Var<T>::parameter(nn::Tensor<T>({d}));
    act2_w_ = nn::Var<T>::parameter(nn::normal_init<T>({d, d}, rng));
    act2_b_ = nn::Var<T>::parameter(nn::Tensor<T>({d}));
    if (cfg_.scheme == Scheme::kMat) {
      comp_embed_ = nn::Var<T>::parameter(nn::normal_init<T>({cfg_.spec.n(), cfg_.spec.max_dim()}, rng));
    }
    if (cfg_.use_pe) {
      pe_ = nn::Var<T>::parameter(nn::normal_init<T>({cfg_.max_timestep, d}, rng));
    }
  }

  const TokenizerConfig& config() const { return cfg_; }

  // Width of the per-action MLP input for the active scheme.
  int64_t action_input_width() const {
    switch (cfg_.scheme) {
      case Scheme::kSingle: return cfg_.spec.d_action();
      case Scheme::kMat: return cfg_.spec.max_dim();
      case Scheme::kMsat: return cfg_.d_model + cfg_.spec.d_action();
    }
    throw ConfigError("bad scheme");
  }

  // states (B,K,C,H,W) -> (B,K,d_model) through the shared conv encoder.
  nn::Var<T> encode_states(const ContextBatch& batch) const {
    check_batch(batch);
    const int64_t bk = batch.batch * batch.context;
    const int64_t c = cfg_.obs.c, h = cfg_.obs.h, w = cfg_.obs.w;
    nn::Var<T> x = nn::Var<T>::constant(to_tensor(batch.states, {bk, c, h, w}));
    x = nn::relu(nn::add_bias(nn::matmul(nn::im2col_3x3(x), conv1_w_), conv1_b_));
    // (bk*h*w, 16) rows are in (n,y,x) order; second conv needs NCHW planes.
    x = nn::permute(nn::reshape(x, {bk, h, w, kConvChannels}), {0, 3, 1, 2});
    x = nn::relu(nn::add_bias(nn::matmul(nn::im2col_3x3(x), conv2_w_), conv2_b_));
    x = nn::reshape(x, {bk, h * w * kConvChannels});
    x = nn::add_bias(nn::matmul(x, state_fc_w_), state_fc_b_);
    return nn::reshape(x, {batch.batch, batch.context, cfg_.d_model});
  }

  // rtg (B,K) -> (B,K,d_model) via a single affine map.
  nn::Var<T> encode_rtg(const ContextBatch& batch) const {
    const int64_t bk = batch.batch * batch.context;
    nn::Var<T> x = nn::Var<T>::constant(to_tensor(batch.rtg, {bk, 1}));
    x = nn::add_bias(nn::matmul(x, rtg_w_), rtg_b_);
    return nn::reshape(x, {batch.batch, batch.context, cfg_.d_model});
  }

  // Action tokens for the configured scheme: (B, K, m, d_model).
  nn::Var<T> encode_actions(const ContextBatch& batch, const nn::Var<T>& state_emb) const {
    switch (cfg_.scheme) {
      case Scheme::kSingle: return encode_actions_single(batch);
      case Scheme::kMat: return encode_actions_mat(batch);
      case Scheme::kMsat: return encode_actions_msat(batch, state_emb);
    }
    throw ConfigError("bad scheme");
  }

  // One token per timestep from the full-width one-hot action.
  nn::Var<T> encode_actions_single(const ContextBatch& batch) const {
    check_batch(batch);
    const int64_t bk = batch.batch * batch.context;
    const int64_t da = cfg_.spec.d_action();
    nn::Tensor<T> oh({bk, da});
    for (int64_t i = 0; i < bk; ++i) {
      fill_one_hot_full(oh.data() + i * da, &batch.actions[i * cfg_.spec.n()]);
    }
    nn::Var<T> x = action_mlp(nn::Var<T>::constant(std::move(oh)));
    return nn::reshape(x, {batch.batch, batch.context, 1, cfg_.d_model});
  }

  // n tokens per timestep; component one-hot zero-padded to max_i N_i plus a
  // learned component-index embedding, shared MLP. No state information.
  nn::Var<T> encode_actions_mat(const ContextBatch& batch) const {
    check_batch(batch);
    if (cfg_.scheme != Scheme::kMat) throw ConfigError("tokenizer not configured for mat");
    const int64_t bk = batch.batch * batch.context;
    const int32_t n = cfg_.spec.n();
    const int64_t width = cfg_.spec.max_dim();
    nn::Tensor<T> oh({bk * n, width});
    std::vector<int64_t> comp_idx(static_cast<size_t>(bk * n));
    for (int64_t i = 0; i < bk; ++i) {
      for (int32_t j = 0; j < n; ++j) {
        const int32_t value = batch.actions[i * n + j];
        if (value < 0 || value >= cfg_.spec.dims[j]) {
          throw ConfigError("action component " + std::to_string(j) + " out of range");
        }
        oh.data()[(i * n + j) * width + value] = T{1};
        comp_idx[static_cast<size_t>(i * n + j)] = j;
      }
    }
    nn::Var<T> x = nn::add(nn::Var<T>::constant(std::move(oh)),
                           nn::gather_rows(comp_embed_, std::move(comp_idx)));
    x = action_mlp(x);
    return nn::reshape(x, {batch.batch, batch.context, n, cfg_.d_model});
  }

  // n tokens per timestep; each action token fuses the timestep's state
  // embedding with the full-width one-hot restricted to its own block.
  nn::Var<T> encode_actions_msat(const ContextBatch& batch, const nn::Var<T>& state_emb) const {
    check_batch(batch);
    if (cfg_.scheme != Scheme::kMsat) throw ConfigError("tokenizer not configured for msat");
    const auto& se_shape = state_emb.shape();
    if (se_shape.size() != 3 || se_shape[0] != batch.batch || se_shape[1] != batch.context ||
        se_shape[2] != cfg_.d_model) {
      throw ShapeError("encode_actions_msat: state embedding does not match batch");
    }
    const int64_t bk = batch.batch * batch.context;
    const int32_t n = cfg_.spec.n();
    const int64_t da = cfg_.spec.d_action();

    nn::Tensor<T> oh({batch.batch, batch.context, n, da});
    int64_t block_start[16] = {0};
    for (int32_t j = 1; j < n; ++j) block_start[j] = block_start[j - 1] + cfg_.spec.dims[j - 1];
    for (int64_t i = 0; i < bk; ++i) {
      for (int32_t j = 0; j < n; ++j) {
        const int32_t value = batch.actions[i * n + j];
        if (value < 0 || value >= cfg_.spec.dims[j]) {
          throw ConfigError("action component " + std::to_string(j) + " out of range");
        }
        oh.data()[(i * n + j) * da + block_start[j] + value] = T{1};
      }
    }
    nn::Var<T> state_tiled =
        nn::repeat_axis(nn::reshape(state_emb, {batch.batch, batch.context, 1, cfg_.d_model}), 2, n);
    nn::Var<T> x = nn::concat<T>({state_tiled, nn::Var<T>::constant(std::move(oh))}, 3);
    x = action_mlp(nn::reshape(x, {bk * n, cfg_.d_model + da}));
    return nn::reshape(x, {batch.batch, batch.context, n, cfg_.d_model});
  }

  // Full tokenisation: per-timestep groups (RTG, state, actions), optional
  // positional encoding shared by all tokens of a timestep, labels and mask.
  TokenSequence<T> tokenize(const ContextBatch& batch) const {
    nn::Var<T> state_emb = encode_states(batch);
    nn::Var<T> rtg_emb = encode_rtg(batch);
    nn::Var<T> act_emb = encode_actions(batch, state_emb);
    return interleave(rtg_emb, state_emb, act_emb, batch);
  }

  TokenSequence<T> interleave(const nn::Var<T>& rtg_tok, const nn::Var<T>& state_tok,
                              const nn::Var<T>& action_toks, const ContextBatch& batch) const {
    const int64_t b = batch.batch, k = batch.context;
    const int64_t m = action_toks.shape()[2];
    const int64_t group = 2 + m;
    const int64_t d = cfg_.d_model;

    nn::Var<T> grouped = nn::concat<T>(
        {nn::reshape(rtg_tok, {b, k, 1, d}), nn::reshape(state_tok, {b, k, 1, d}), action_toks}, 2);

    if (cfg_.use_pe) {
      std::vector<int64_t> rows(static_cast<size_t>(b * k));
      for (int64_t i = 0; i < b * k; ++i) {
        const int32_t t = batch.timesteps[static_cast<size_t>(i)];
        if (t < 0 || t >= cfg_.max_timestep) {
          throw ConfigError("timestep " + std::to_string(t) + " outside PE table of size " +
                            std::to_string(cfg_.max_timestep));
        }
        rows[static_cast<size_t>(i)] = t;
      }
      nn::Var<T> pe_rows = nn::gather_rows(pe_, std::move(rows));
      grouped = nn::add(grouped, nn::repeat_axis(nn::reshape(pe_rows, {b, k, 1, d}), 2, group));
    }

    TokenSequence<T> seq;
    seq.tokens = nn::reshape(grouped, {b, k * group, d});
    seq.batch = b;
    seq.context = k;
    seq.tokens_per_step = group;
    seq.pad.resize(static_cast<size_t>(b * k * group));
    seq.labels.resize(static_cast<size_t>(b));
    for (int64_t bi = 0; bi < b; ++bi) {
      auto& row = seq.labels[static_cast<size_t>(bi)];
      row.reserve(static_cast<size_t>(k * group));
      for (int64_t ki = 0; ki < k; ++ki) {
        const int32_t t = batch.timesteps[static_cast<size_t>(bi * k + ki)];
        const uint8_t real = batch.pad[static_cast<size_t>(bi * k + ki)];
        row.push_back({TokenLabel::Kind::kRtg, t, 0});
        row.push_back({TokenLabel::Kind::kState, t, 0});
        for (int64_t a = 0; a < m; ++a) {
          row.push_back({TokenLabel::Kind::kAction, t, static_cast<int32_t>(a + 1)});
        }
        for (int64_t g = 0; g < group; ++g) {
          seq.pad[static_cast<size_t>((bi * k + ki) * group + g)] = real;
        }
      }
    }
    seq.state_positions.resize(static_cast<size_t>(k));
    for (int64_t ki = 0; ki < k; ++ki) seq.state_positions[static_cast<size_t>(ki)] = ki * group + 1;
    return seq;
  }

  void collect_params(nn::ParamList<T>& out) {
    out.push_back({"tok.conv1.w", conv1_w_, true});
    out.push_back({"tok.conv1.b", conv1_b_, false});
    out.push_back({"tok.conv2.w", conv2_w_, true});
    out.push_back({"tok.conv2.b", conv2_b_, false});
    out.push_back({"tok.state_fc.w", state_fc_w_, true});
    out.push_back({"tok.state_fc.b", state_fc_b_, false});
    out.push_back({"tok.rtg.w", rtg_w_, true});
    out.push_back({"tok.rtg.b", rtg_b_, false});
    out.push_back({"tok.act1.w", act1_w_, true});
    out.push_back({"tok.act1.b", act1_b_, false});
    out.push_back({"tok.act2.w", act2_w_, true});
    out.push_back({"tok.act2.b", act2_b_, false});
    if (comp_embed_.defined()) out.push_back({"tok.comp_embed", comp_embed_, false});
    if (pe_.defined()) out.push_back({"tok.pe", pe_, false});
  }

 private:
  static nn::Tensor<T> to_tensor(const std::vector<float>& v, std::vector<int64_t> shape) {
    nn::Tensor<T> t(std::move(shape));
    if (t.numel() != static_cast<int64_t>(v.size())) throw ShapeError("batch buffer size mismatch");
    T* p = t.data();
    for (size_t i = 0; i < v.size(); ++i) p[i] = static_cast<T>(v[i]);
    return t;
  }

  void check_batch(const ContextBatch& batch) const {
    if (!(batch.spec == cfg_.spec)) throw ConfigError("batch action spec does not match tokenizer");
    if (!(batch.obs == cfg_.obs)) {
      throw ShapeError("batch obs shape does not match tokenizer");
    }
  }

  void fill_one_hot_full(T* row, const int32_t* action) const {
    int64_t offset = 0;
    for (int32_t j = 0; j < cfg_.spec.n(); ++j) {
      const int32_t value = action[j];
      if (value < 0 || value >= cfg_.spec.dims[j]) {
        throw ConfigError("action component " + std::to_string(j) + " out of range");
      }
      row[offset + value] = T{1};
      offset += cfg_.spec.dims[j];
    }
  }

  nn::Var<T> action_mlp(const nn::Var<T>& x) const {
    return nn::add_bias(nn::matmul(nn::relu(nn::add_bias(nn::matmul(x, act1_w_), act1_b_)), act2_w_),
                        act2_b_);
  }

  TokenizerConfig cfg_;
  nn::Var<T> conv1_w_, conv1_b_, conv2_w_, conv2_b_, state_fc_w_, state_fc_b_;
  nn::Var<T> rtg_w_, rtg_b_;
  nn::Var<T> act1_w_, act1_b_, act2_w_, act2_b_;
  nn::Var<T> comp_embed_;  // mat only
  nn::Var<T> pe_;          // present iff use_pe
};

}  // namespace msat
