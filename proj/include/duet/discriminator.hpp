#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/eval.hpp"
#include "duet/generator.hpp"
#include "duet/nn.hpp"

namespace duet {

// Discriminative ranker: a self-attentive LSTM answer encoder f(.) scored
// against the dialog embedding by inner product, trained with the multi-class
// N-pair loss.
struct DiscriminatorParams {
  Tensor embedding;  // e x V, shared by this model's encoder and answer encoder
  EncoderParams encoder;
  LstmParams ans_lstm;  // in = e, hidden d
  // 1-hidden-layer MLP scoring each step's output; hidden width d/2, tanh
  Tensor mlp_w1;  // (d/2) x d
  Tensor mlp_b1;  // d/2
  Tensor mlp_w2;  // d/2

  static DiscriminatorParams create(std::size_t e, std::size_t d, std::size_t d_img, std::size_t vocab,
                                    std::uint64_t seed) {
    DiscriminatorParams p;
    const std::size_t hidden = std::max<std::size_t>(1, d / 2);
    p.embedding = init_params({e, vocab}, derive_seed(seed, 1));
    p.encoder = EncoderParams::create(e, d, d_img, derive_seed(seed, 2));
    p.ans_lstm = LstmParams::create(e, d, derive_seed(seed, 3));
    p.mlp_w1 = init_params({hidden, d}, derive_seed(seed, 4));
    p.mlp_b1 = Tensor::zeros({hidden});
    p.mlp_w2 = init_params({hidden}, derive_seed(seed, 5));
    return p;
  }

  std::size_t hidden_size() const { return ans_lstm.hidden_size(); }
  std::size_t vocab_size() const { return embedding.dim(1); }

  ParamList parameters() const {
    ParamList out{{"embedding.table", embedding}};
    for (auto& p : encoder.parameters("encoder")) out.push_back(p);
    for (auto& p : ans_lstm.parameters("ans_lstm")) out.push_back(p);
    out.push_back({"ans_att.w1", mlp_w1});
    out.push_back({"ans_att.b1", mlp_b1});
    out.push_back({"ans_att.w2", mlp_w2});
    return out;
  }
};

struct AnswerEmbedding {
  Tensor embedding;  // f(a), d-vector
  Tensor attention;  // per-step weights, sums to 1
};

namespace detail {

// Per-step MLP scores over LSTM outputs -> softmax over steps -> weighted sum.
inline AnswerEmbedding pool_answer(const LstmTrace& trace, const DiscriminatorParams& p) {
  Tensor hidden = duet::tanh(add(matmul(p.mlp_w1, trace.outputs), p.mlp_b1));
  Tensor scores = matmul(p.mlp_w2, hidden);  // one score per step
  Tensor weights = softmax(scores);
  return {matmul(trace.outputs, weights), weights};
}

}  // namespace detail

inline AnswerEmbedding embed_answer(std::span<const int> tokens, const DiscriminatorParams& p) {
  if (tokens.empty()) throw ContractError("embed_answer over empty sequence");
  return detail::pool_answer(lstm_encode(tokens, p.embedding, p.ans_lstm), p);
}

// Embeds a generator sample through the discriminator's table with the
// straight-through contract: hard tokens forward, the relaxed mixture in
// backward, so gradients reach the generator. Relaxed mode feeds the soft
// mixture forward as well; finite-difference checks of the sampling path run
// against that variant.
inline AnswerEmbedding embed_answer_st(const SampledAnswer& sampled, const DiscriminatorParams& p,
                                       SampleMode mode = SampleMode::StraightThrough) {
  if (sampled.tokens.empty()) throw ContractError("embed_answer_st over empty sample");
  if (sampled.tokens.size() != sampled.relaxed.size())
    throw ContractError("sample tokens/relaxed length mismatch");
  std::vector<Tensor> inputs;
  inputs.reserve(sampled.tokens.size());
  for (std::size_t j = 0; j < sampled.tokens.size(); ++j)
    inputs.push_back(mode == SampleMode::StraightThrough
                         ? st_embedding(p.embedding, sampled.tokens[j], sampled.relaxed[j])
                         : matmul(p.embedding, sampled.relaxed[j]));
  return detail::pool_answer(lstm_run(inputs, p.ans_lstm), p);
}

inline Tensor score(const Tensor& e_t, const AnswerEmbedding& f_a) {
  if (e_t.shape() != f_a.embedding.shape())
    throw ShapeError("score dims: " + detail::shape_str(e_t.shape()) + " vs " +
                     detail::shape_str(f_a.embedding.shape()));
  return dot(e_t, f_a.embedding);
}

// log(1 + sum_i exp(s_i^- - s^gt)) + lambda (|f_gt|^2 + mean_i |f_i^-|^2).
// The sum runs over the N-1 negatives.
inline Tensor npair_loss(const Tensor& e_t, std::span<const int> gt_tokens,
                         const std::vector<std::vector<int>>& negatives, const DiscriminatorParams& p,
                         double lambda) {
  if (negatives.empty()) throw ContractError("npair_loss needs at least one negative (N >= 2)");
  std::vector<int> gt_vec(gt_tokens.begin(), gt_tokens.end());
  for (const auto& neg : negatives)
    if (neg == gt_vec) throw ContractError("negative answer identical to the ground truth");

  AnswerEmbedding f_gt = embed_answer(gt_tokens, p);
  Tensor s_gt = score(e_t, f_gt);

  std::vector<Tensor> margins{Tensor::scalar(0.0)};
  Tensor reg = sum(mul(f_gt.embedding, f_gt.embedding));
  Tensor neg_norms = Tensor::scalar(0.0);
  for (const auto& neg : negatives) {
    AnswerEmbedding f_n = embed_answer(neg, p);
    margins.push_back(sub(score(e_t, f_n), s_gt));
    neg_norms = add(neg_norms, sum(mul(f_n.embedding, f_n.embedding)));
  }
  Tensor loss = log_sum_exp(concat(0, margins));
  if (lambda != 0.0) {
    reg = add(reg, scale(neg_norms, 1.0 / static_cast<double>(negatives.size())));
    loss = add(loss, scale(reg, lambda));
  }
  return loss;
}

// D's retrieval scoring: inner product against each candidate's embedding.
inline CandidateScores rank_candidates_d(const Tensor& e_t, const std::vector<std::vector<int>>& candidates,
                                         int gt_index, const DiscriminatorParams& p) {
  if (candidates.empty()) throw ContractError("rank_candidates_d over empty list");
  CandidateScores cs;
  cs.gt_index = gt_index;
  cs.scores.reserve(candidates.size());
  for (const auto& cand : candidates) cs.scores.push_back(score(e_t, embed_answer(cand, p)).value());
  return cs;
}

}  // namespace duet
