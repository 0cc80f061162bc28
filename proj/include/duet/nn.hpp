#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

inline void append_params(ParamList& out, const std::string& prefix, std::initializer_list<NamedTensor> items) {
  for (const auto& it : items) out.push_back({prefix + "." + it.name, it.tensor});
}

// Stable name hash for per-parameter init streams.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Uniform(-s, s) init, deterministic in (shape, seed).
inline Tensor init_params(Shape shape, std::uint64_t seed, double s = 0.08) {
  if (s <= 0.0) throw ContractError("init scale must be positive");
  Rng rng(seed);
  std::vector<double> v(detail::numel_of(shape));
  for (auto& x : v) x = rng.uniform(-s, s);
  return Tensor::from(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

// Single-layer LSTM cell parameters. Gate rows are packed [input, forget,
// candidate, output], each block of size h.
struct LstmParams {
  Tensor w_x;  // 4h x in
  Tensor w_h;  // 4h x h
  Tensor b;    // 4h

  static LstmParams create(std::size_t input_size, std::size_t hidden_size, std::uint64_t seed) {
    LstmParams p;
    p.w_x = init_params({4 * hidden_size, input_size}, derive_seed(seed, 1));
    p.w_h = init_params({4 * hidden_size, hidden_size}, derive_seed(seed, 2));
    p.b = Tensor::zeros({4 * hidden_size});
    return p;
  }

  std::size_t hidden_size() const { return w_h.dim(1); }
  std::size_t input_size() const { return w_x.dim(1); }

  ParamList parameters(const std::string& prefix) const {
    return {{prefix + ".w_x", w_x}, {prefix + ".w_h", w_h}, {prefix + ".b", b}};
  }
};

struct LstmState {
  Tensor h;
  Tensor c;

  static LstmState zero(std::size_t hidden_size) {
    return {Tensor::zeros({hidden_size}), Tensor::zeros({hidden_size})};
  }
};

inline LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& p) {
  const std::size_t h = p.hidden_size();
  if (x.rank() != 1 || x.dim(0) != p.input_size())
    throw ShapeError("lstm input " + detail::shape_str(x.shape()) + " vs expected (" +
                     std::to_string(p.input_size()) + ")");
  if (state.h.dim(0) != h || state.c.dim(0) != h) throw ShapeError("lstm state does not match hidden size");

  Tensor gates = add(add(matmul(p.w_x, x), matmul(p.w_h, state.h)), p.b);
  Tensor gi = sigmoid(slice(gates, 0, 0, h));
  Tensor gf = sigmoid(slice(gates, 0, h, h));
  Tensor gg = duet::tanh(slice(gates, 0, 2 * h, h));
  Tensor go = sigmoid(slice(gates, 0, 3 * h, h));

  Tensor c_next = add(mul(gf, state.c), mul(gi, gg));
  Tensor h_next = mul(go, duet::tanh(c_next));
  return {h_next, c_next};
}

struct LstmTrace {
  Tensor outputs;  // h x T, column j is the state after consuming token j
  LstmState final_state;
};

// Runs the cell over a sequence of already-built input vectors.
inline LstmTrace lstm_run(const std::vector<Tensor>& inputs, const LstmParams& p) {
  if (inputs.empty()) throw ContractError("lstm_run over empty sequence");
  LstmState s = LstmState::zero(p.hidden_size());
  std::vector<Tensor> hs;
  hs.reserve(inputs.size());
  for (const auto& x : inputs) {
    s = lstm_step(x, s, p);
    hs.push_back(s.h);
  }
  return {stack_columns(hs), s};
}

// Embeds a token sequence and runs the cell over it.
inline LstmTrace lstm_encode(std::span<const int> tokens, const Tensor& embedding, const LstmParams& p) {
  if (tokens.empty()) throw ContractError("lstm_encode over empty sequence");
  Tensor embedded = embedding_lookup(embedding, tokens);
  std::vector<Tensor> inputs;
  inputs.reserve(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j) inputs.push_back(column(embedded, j));
  return lstm_run(inputs, p);
}

// ---------------------------------------------------------------------------
// additive attention
// ---------------------------------------------------------------------------

// Scoring-vector attention: z = w_a^T tanh(W_m M + (W_q q) 1^T),
// weights = softmax(z), attended = M weights.
struct AttentionParams {
  Tensor w_m;  // a x d_mem
  Tensor w_q;  // a x d_query
  Tensor w_a;  // a

  static AttentionParams create(std::size_t d_mem, std::size_t d_query, std::size_t a, std::uint64_t seed) {
    AttentionParams p;
    p.w_m = init_params({a, d_mem}, derive_seed(seed, 1));
    p.w_q = init_params({a, d_query}, derive_seed(seed, 2));
    p.w_a = init_params({a}, derive_seed(seed, 3));
    return p;
  }

  ParamList parameters(const std::string& prefix) const {
    return {{prefix + ".w_m", w_m}, {prefix + ".w_q", w_q}, {prefix + ".w_a", w_a}};
  }
};

struct Attention {
  Tensor weights;   // n, nonnegative, sums to 1
  Tensor attended;  // d_mem
};

inline Attention attend(const Tensor& memory, const Tensor& query, const AttentionParams& p) {
  if (memory.rank() != 2) throw ContractError("attention memory must be a d x n matrix");
  Tensor scores = duet::tanh(add(matmul(p.w_m, memory), matmul(p.w_q, query)));
  Tensor z = matmul(p.w_a, scores);  // row-vector times a x n
  Tensor weights = softmax(z);
  return {weights, matmul(memory, weights)};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_norm = 0.0;  // global-norm gradient clip; 0 disables
};

// Bias-corrected Adam over a fixed parameter list. Moments live here, keyed
// by list position; the same instance must own a parameter set for the whole
// phase.
class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      params_[i].tensor.set_requires_grad(true);
      slots_[i].m.assign(params_[i].tensor.numel(), 0.0);
      slots_[i].v.assign(params_[i].tensor.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Applies one update from the gradients currently stored on the parameters.
  // A NaN gradient anywhere rejects the whole update before mutating state.
  void step() {
    for (auto& p : params_)
      for (double g : p.tensor.grad())
        if (std::isnan(g)) throw DomainError("NaN gradient on " + p.name + "; update rejected");

    double clip = 1.0;
    if (cfg_.max_norm > 0.0) {
      double sq = 0.0;
      for (auto& p : params_)
        for (double g : p.tensor.grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.max_norm) clip = cfg_.max_norm / norm;
    }

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto vals = params_[i].tensor.values_mut();
      const auto grads = params_[i].tensor.grad();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < vals.size(); ++j) {
        const double g = grads[j] * clip;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        vals[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      }
    }
  }

  std::size_t step_count() const { return step_; }
  const ParamList& params() const { return params_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  ParamList params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  std::size_t step_ = 0;
};

}  // namespace duet
