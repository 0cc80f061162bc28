#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duet/nn.hpp"
#include "duet/tensor.hpp"

namespace duet {

// One round's encoder input. History entry 0 is the caption; entry i is
// question i concatenated with answer i (both END-terminated, so the END of
// the question separates the two).
struct EncoderInput {
  Tensor image;                           // d_img x k spatial features
  std::vector<std::vector<int>> history;  // t sequences, t >= 1
  std::vector<int> question;
};

// History-conditioned image-attentive encoder: the question attends over the
// encoded history, then [question; attended history] attends over projected
// image regions, and the three pieces fuse into a tanh embedding.
struct EncoderParams {
  LstmParams q_lstm;       // question encoder, in = e, hidden d
  LstmParams h_lstm;       // history-round encoder, in = e, hidden d
  Tensor img_proj;         // d x d_img region projection
  AttentionParams att_h;   // memory d, query d
  AttentionParams att_v;   // memory d, query 2d
  Tensor w_e;              // d x 3d fusion

  static EncoderParams create(std::size_t e, std::size_t d, std::size_t d_img, std::uint64_t seed) {
    EncoderParams p;
    p.q_lstm = LstmParams::create(e, d, derive_seed(seed, 1));
    p.h_lstm = LstmParams::create(e, d, derive_seed(seed, 2));
    p.img_proj = init_params({d, d_img}, derive_seed(seed, 3));
    p.att_h = AttentionParams::create(d, d, d, derive_seed(seed, 4));
    p.att_v = AttentionParams::create(d, 2 * d, d, derive_seed(seed, 5));
    p.w_e = init_params({d, 3 * d}, derive_seed(seed, 6));
    return p;
  }

  std::size_t hidden_size() const { return q_lstm.hidden_size(); }

  ParamList parameters(const std::string& prefix) const {
    ParamList out;
    for (auto& p : q_lstm.parameters(prefix + ".q_lstm")) out.push_back(p);
    for (auto& p : h_lstm.parameters(prefix + ".h_lstm")) out.push_back(p);
    out.push_back({prefix + ".img_proj", img_proj});
    for (auto& p : att_h.parameters(prefix + ".att_h")) out.push_back(p);
    for (auto& p : att_v.parameters(prefix + ".att_v")) out.push_back(p);
    out.push_back({prefix + ".w_e", w_e});
    return out;
  }
};

struct DialogEncoding {
  Tensor embedding;          // e_t, d-vector, entries in (-1, 1)
  Tensor history_attention;  // t-vector on the simplex
  Tensor image_attention;    // k-vector on the simplex
};

inline DialogEncoding encode_round(const EncoderInput& input, const Tensor& embedding_table,
                                   const EncoderParams& p) {
  if (input.history.empty()) throw ContractError("encoder needs at least the caption round");
  if (input.question.empty()) throw ContractError("encoder needs a nonempty question");
  if (input.image.rank() != 2 || input.image.dim(0) != p.img_proj.dim(1))
    throw ShapeError("image features " + detail::shape_str(input.image.shape()) + " vs projection " +
                     detail::shape_str(p.img_proj.shape()));

  Tensor m_q = lstm_encode(input.question, embedding_table, p.q_lstm).final_state.h;

  std::vector<Tensor> history_cols;
  history_cols.reserve(input.history.size());
  for (const auto& round : input.history) {
    if (round.empty()) throw ContractError("empty history round");
    history_cols.push_back(lstm_encode(round, embedding_table, p.h_lstm).final_state.h);
  }
  Tensor m_h = stack_columns(history_cols);

  Attention hist = attend(m_h, m_q, p.att_h);

  Tensor regions = matmul(p.img_proj, input.image);  // d x k
  Attention img = attend(regions, concat(0, {m_q, hist.attended}), p.att_v);

  Tensor fused = duet::tanh(matmul(p.w_e, concat(0, {m_q, hist.attended, img.attended})));
  return {fused, hist.weights, img.weights};
}

inline std::vector<DialogEncoding> encode_batch(std::span<const EncoderInput> inputs,
                                                const Tensor& embedding_table, const EncoderParams& p) {
  if (inputs.empty()) throw ContractError("encode_batch of zero inputs");
  std::vector<DialogEncoding> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(encode_round(in, embedding_table, p));
  return out;
}

}  // namespace duet
