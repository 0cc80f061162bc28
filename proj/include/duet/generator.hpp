#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/eval.hpp"
#include "duet/nn.hpp"
#include "duet/rng.hpp"
#include "duet/vocab.hpp"

namespace duet {

// Generative answer decoder: an LSTM conditioned on the dialog embedding,
// trained by teacher-forced MLE and sampled through Gumbel-Softmax with the
// straight-through estimator.
struct GeneratorParams {
  Tensor embedding;  // e x V, shared by this model's encoder and decoder
  EncoderParams encoder;
  LstmParams decoder;  // in = e, hidden d
  Tensor w_out;        // V x d
  Tensor b_out;        // V
  Tensor w_h0;         // d x d, e_t -> initial h
  Tensor w_c0;         // d x d, e_t -> initial c

  static GeneratorParams create(std::size_t e, std::size_t d, std::size_t d_img, std::size_t vocab,
                                std::uint64_t seed) {
    GeneratorParams p;
    p.embedding = init_params({e, vocab}, derive_seed(seed, 1));
    p.encoder = EncoderParams::create(e, d, d_img, derive_seed(seed, 2));
    p.decoder = LstmParams::create(e, d, derive_seed(seed, 3));
    p.w_out = init_params({vocab, d}, derive_seed(seed, 4));
    p.b_out = Tensor::zeros({vocab});
    p.w_h0 = init_params({d, d}, derive_seed(seed, 5));
    p.w_c0 = init_params({d, d}, derive_seed(seed, 6));
    return p;
  }

  std::size_t vocab_size() const { return w_out.dim(0); }
  std::size_t hidden_size() const { return decoder.hidden_size(); }

  ParamList parameters() const {
    ParamList out{{"embedding.table", embedding}};
    for (auto& p : encoder.parameters("encoder")) out.push_back(p);
    for (auto& p : decoder.parameters("decoder")) out.push_back(p);
    out.push_back({"out.w", w_out});
    out.push_back({"out.b", b_out});
    out.push_back({"init.w_h0", w_h0});
    out.push_back({"init.w_c0", w_c0});
    return out;
  }
};

struct GumbelConfig {
  double temperature = 0.5;
  std::size_t max_answer_len = 8;
  std::uint64_t seed = 0;
};

// Discrete forward result plus the relaxed simplex vectors that carry the
// backward pass. tokens[j] == argmax(relaxed[j]) always.
struct SampledAnswer {
  std::vector<int> tokens;
  std::vector<Tensor> relaxed;
};

struct GumbelSample {
  int token = -1;
  Tensor one_hot;  // constant indicator of the argmax
  Tensor relaxed;  // differentiable through the logits
};

inline std::vector<double> sample_gumbel_noise(std::size_t k, Rng& rng) {
  std::vector<double> g(k);
  for (auto& v : g) {
    double u = rng.uniform01();
    // clamp away from {0, 1} so the double log stays finite
    u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
    v = -std::log(-std::log(u));
  }
  return g;
}

// relaxed = softmax((logits + g) / tau). Raw decoder logits stand in for
// log p; the softmax shift-invariance makes the two equivalent.
inline GumbelSample gumbel_softmax_sample(const Tensor& logits, double tau, std::span<const double> noise) {
  if (logits.rank() != 1 || logits.dim(0) < 2) throw ContractError("gumbel sampling needs a K>=2 logit vector");
  if (tau <= 0.0) throw ContractError("temperature must be positive");
  if (noise.size() != logits.dim(0)) throw ShapeError("noise length does not match logits");

  GumbelSample s;
  Tensor shifted = add(logits, Tensor::from(logits.shape(), std::vector<double>(noise.begin(), noise.end())));
  s.relaxed = softmax(scale(shifted, 1.0 / tau));

  const auto rv = s.relaxed.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < rv.size(); ++i)
    if (rv[i] > rv[best]) best = i;
  s.token = static_cast<int>(best);
  std::vector<double> hot(rv.size(), 0.0);
  hot[best] = 1.0;
  s.one_hot = Tensor::from(logits.shape(), std::move(hot));
  return s;
}

inline GumbelSample gumbel_softmax_sample(const Tensor& logits, double tau, Rng& rng) {
  return gumbel_softmax_sample(logits, tau, sample_gumbel_noise(logits.numel(), rng));
}

// Straight-through embedding: forward pass uses the hard token's column,
// backward flows through table . relaxed.
inline Tensor st_embedding(const Tensor& table, int token, const Tensor& relaxed) {
  Tensor soft = matmul(table, relaxed);
  std::vector<int> idx{token};
  Tensor hard = column(embedding_lookup(table, idx), 0);
  return add(soft, detach(sub(hard, soft)));
}

namespace detail {

inline LstmState decoder_init(const Tensor& e_t, const GeneratorParams& p) {
  return {matmul(p.w_h0, e_t), matmul(p.w_c0, e_t)};
}

inline void check_tokens(std::span<const int> tokens, std::size_t vocab, const char* what) {
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw IndexError(std::string(what) + ": token " + std::to_string(t) + " outside vocabulary");
}

}  // namespace detail

// Teacher-forced total log-likelihood of `tokens` given e_t, as a graph
// scalar; divide by length for the mean.
inline Tensor sequence_log_likelihood(const Tensor& e_t, std::span<const int> tokens,
                                      const GeneratorParams& p) {
  if (tokens.empty()) throw ContractError("log-likelihood of empty sequence");
  detail::check_tokens(tokens, p.vocab_size(), "sequence");

  LstmState state = detail::decoder_init(e_t, p);
  Tensor total = Tensor::scalar(0.0);
  std::vector<int> prev{Vocabulary::kStart};
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    Tensor x = column(embedding_lookup(p.embedding, prev), 0);
    state = lstm_step(x, state, p.decoder);
    Tensor log_probs = log_softmax(add(matmul(p.w_out, state.h), p.b_out));
    total = add(total, slice(log_probs, 0, static_cast<std::size_t>(tokens[j]), 1));
    prev[0] = tokens[j];
  }
  return total;
}

// Mean negative log-likelihood per position, teacher-forced from e_t.
// gt_tokens must be nonempty and END-terminated.
inline Tensor mle_loss(const Tensor& e_t, std::span<const int> gt_tokens, const GeneratorParams& p) {
  if (gt_tokens.empty()) throw ContractError("mle_loss over empty answer");
  if (gt_tokens.back() != Vocabulary::kEnd) throw ContractError("answer must end with the END token");
  Tensor total = sequence_log_likelihood(e_t, gt_tokens, p);
  return scale(total, -1.0 / static_cast<double>(gt_tokens.size()));
}

// StraightThrough feeds the hard token's embedding forward (production
// contract); Relaxed feeds the soft mixture forward, which makes the whole
// sample differentiable end to end and is what finite-difference checks run
// against.
enum class SampleMode { StraightThrough, Relaxed };

// Autoregressive Gumbel-Softmax sampling with injected per-step noise.
// Gradients reach every step's logits through the relaxed vectors. Stops
// after END or max length.
inline SampledAnswer sample_answer(const Tensor& e_t, const GeneratorParams& p, const GumbelConfig& cfg,
                                   std::span<const std::vector<double>> noise,
                                   SampleMode mode = SampleMode::StraightThrough) {
  if (cfg.max_answer_len == 0) throw ContractError("max answer length must be positive");
  if (noise.size() < cfg.max_answer_len) throw ContractError("need one noise vector per possible step");
  SampledAnswer out;
  LstmState state = detail::decoder_init(e_t, p);
  std::vector<int> start{Vocabulary::kStart};
  Tensor x = column(embedding_lookup(p.embedding, start), 0);
  for (std::size_t step = 0; step < cfg.max_answer_len; ++step) {
    state = lstm_step(x, state, p.decoder);
    Tensor logits = add(matmul(p.w_out, state.h), p.b_out);
    GumbelSample s = gumbel_softmax_sample(logits, cfg.temperature, noise[step]);
    out.tokens.push_back(s.token);
    out.relaxed.push_back(s.relaxed);
    if (s.token == Vocabulary::kEnd) break;
    x = mode == SampleMode::StraightThrough ? st_embedding(p.embedding, s.token, s.relaxed)
                                            : matmul(p.embedding, s.relaxed);
  }
  return out;
}

inline SampledAnswer sample_answer(const Tensor& e_t, const GeneratorParams& p, const GumbelConfig& cfg,
                                   Rng& rng, SampleMode mode = SampleMode::StraightThrough) {
  std::vector<std::vector<double>> noise(cfg.max_answer_len);
  for (auto& n : noise) n = sample_gumbel_noise(p.vocab_size(), rng);
  return sample_answer(e_t, p, cfg, noise, mode);
}

enum class ScoreNorm { MeanLogLikelihood, SumLogLikelihood };

// Ranks candidates by teacher-forced log-likelihood. Mean per-token
// normalization by default; sum is the config switch.
inline CandidateScores score_candidates(const Tensor& e_t, const std::vector<std::vector<int>>& candidates,
                                        int gt_index, const GeneratorParams& p,
                                        ScoreNorm norm = ScoreNorm::MeanLogLikelihood) {
  if (candidates.empty()) throw ContractError("score_candidates over empty list");
  CandidateScores cs;
  cs.gt_index = gt_index;
  cs.scores.reserve(candidates.size());
  for (const auto& cand : candidates) {
    if (cand.empty()) throw ContractError("empty candidate");
    const double total = sequence_log_likelihood(e_t, cand, p).value();
    cs.scores.push_back(norm == ScoreNorm::MeanLogLikelihood ? total / static_cast<double>(cand.size())
                                                             : total);
  }
  return cs;
}

}  // namespace duet
