#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/data.hpp"
#include "duet/discriminator.hpp"
#include "duet/eval.hpp"
#include "duet/generator.hpp"
#include "duet/rng.hpp"

namespace duet {

// Phase-3 regimes: Transfer keeps D frozen; Gan1 trains D adversarially on
// the single generated sample (L_D = -L_G); Gan2 keeps the N-pair structure
// and appends the generated sample as one extra negative.
enum class TransferMode { Transfer, Gan1, Gan2 };

inline const char* transfer_mode_name(TransferMode m) {
  switch (m) {
    case TransferMode::Transfer: return "transfer";
    case TransferMode::Gan1: return "gan1";
    case TransferMode::Gan2: return "gan2";
  }
  throw ContractError("bad TransferMode");
}

inline TransferMode transfer_mode_from(const std::string& s) {
  if (s == "transfer") return TransferMode::Transfer;
  if (s == "gan1") return TransferMode::Gan1;
  if (s == "gan2") return TransferMode::Gan2;
  throw ContractError("unknown mode \"" + s + "\" (transfer|gan1|gan2)");
}

struct TransferConfig {
  double alpha = 0.5;  // MLE mixing weight in L_G + alpha L_MLE
  std::size_t g_pretrain_epochs = 20;
  std::size_t d_pretrain_epochs = 30;
  std::size_t transfer_epochs = 5;
  TransferMode mode = TransferMode::Transfer;
  double tau = 0.5;
  double lr = 4e-4;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  double lambda = 0.002;        // L2 embedding regularizer
  std::size_t n_negatives = 0;  // D-pretraining negatives per example; 0 = all candidates
  std::size_t max_answer_len = 8;
  double val_fraction = 0.1;
  double max_grad_norm = 0.0;
  ScoreNorm score_norm = ScoreNorm::MeanLogLikelihood;
  TiePolicy tie_policy = TiePolicy::FavorGroundTruth;
};

// ---------------------------------------------------------------------------
// losses and single steps
// ---------------------------------------------------------------------------

// 1-pair logistic loss log(1 + exp(s_gt - s_hat)) in D's metric space. The
// sampled answer enters through embed_answer_st, so with D frozen the
// gradient still reaches the generator through the relaxed vectors.
inline Tensor perceptual_loss(const Tensor& e_t, const SampledAnswer& sampled,
                              std::span<const int> gt_tokens, const DiscriminatorParams& d,
                              SampleMode mode = SampleMode::StraightThrough) {
  AnswerEmbedding f_gt = embed_answer(gt_tokens, d);
  AnswerEmbedding f_hat = embed_answer_st(sampled, d, mode);
  Tensor margin = sub(score(e_t, f_gt), score(e_t, f_hat));
  return log_sum_exp(concat(0, {Tensor::scalar(0.0), margin}));
}

struct TransferExample {
  EncoderInput input;
  std::vector<int> gt_tokens;
  std::vector<std::vector<int>> negatives;  // dataset negatives, used by Gan2
};

struct TransferStepStats {
  double loss_g = 0.0;
  double loss_mle = 0.0;
};

// One Adam step on L_G + alpha L_MLE w.r.t. the generator only. The
// discriminator contributes activations, never receives an update here.
inline TransferStepStats transfer_step(std::span<const TransferExample> batch, GeneratorParams& g,
                                       Adam& g_opt, const DiscriminatorParams& d,
                                       const TransferConfig& cfg, Rng& rng) {
  if (batch.empty()) throw ContractError("transfer_step over empty batch");
  g_opt.zero_grad();
  GumbelConfig gcfg{cfg.tau, cfg.max_answer_len, 0};
  TransferStepStats stats;
  {
    Tape tape;
    Tensor total = Tensor::scalar(0.0);
    for (const auto& ex : batch) {
      DialogEncoding enc_g = encode_round(ex.input, g.embedding, g.encoder);
      SampledAnswer sampled = sample_answer(enc_g.embedding, g, gcfg, rng);
      DialogEncoding enc_d = encode_round(ex.input, d.embedding, d.encoder);
      Tensor l_g = perceptual_loss(enc_d.embedding, sampled, ex.gt_tokens, d);
      Tensor l_mle = mle_loss(enc_g.embedding, ex.gt_tokens, g);
      stats.loss_g += l_g.value();
      stats.loss_mle += l_mle.value();
      total = add(total, add(l_g, scale(l_mle, cfg.alpha)));
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));
    if (std::isnan(total.value())) throw DomainError("NaN transfer loss; step aborted");
    tape.backward(total);
  }
  g_opt.step();
  stats.loss_g /= static_cast<double>(batch.size());
  stats.loss_mle /= static_cast<double>(batch.size());
  return stats;
}

namespace detail {

// Samples one answer per example with the generator frozen (pure forward).
inline std::vector<SampledAnswer> sample_batch(std::span<const TransferExample> batch,
                                               const GeneratorParams& g, const TransferConfig& cfg,
                                               Rng& rng) {
  GumbelConfig gcfg{cfg.tau, cfg.max_answer_len, 0};
  std::vector<SampledAnswer> out;
  out.reserve(batch.size());
  for (const auto& ex : batch)
    out.push_back(sample_answer(encode_round(ex.input, g.embedding, g.encoder).embedding, g, gcfg, rng));
  return out;
}

}  // namespace detail

// Adversarial D update: one step on L_D = -L_G, i.e. push the ground truth
// up and the generated sample down. G is untouched.
inline double gan1_d_step(std::span<const TransferExample> batch, const GeneratorParams& g,
                          DiscriminatorParams& d, Adam& d_opt, const TransferConfig& cfg, Rng& rng) {
  if (batch.empty()) throw ContractError("gan1_d_step over empty batch");
  auto samples = detail::sample_batch(batch, g, cfg, rng);
  d_opt.zero_grad();
  double mean_loss = 0.0;
  {
    Tape tape;
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      DialogEncoding enc_d = encode_round(batch[i].input, d.embedding, d.encoder);
      AnswerEmbedding f_gt = embed_answer(batch[i].gt_tokens, d);
      AnswerEmbedding f_hat = embed_answer(samples[i].tokens, d);
      Tensor margin = sub(score(enc_d.embedding, f_gt), score(enc_d.embedding, f_hat));
      Tensor l_g = log_sum_exp(concat(0, {Tensor::scalar(0.0), margin}));
      total = add(total, scale(l_g, -1.0));
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));
    mean_loss = total.value();
    if (std::isnan(mean_loss)) throw DomainError("NaN gan1 loss; step aborted");
    tape.backward(total);
  }
  d_opt.step();
  return mean_loss;
}

// Structure-preserving D update: N-pair loss over the dataset negatives with
// the generated sample appended as one more negative. A sample that collides
// with the ground truth token-for-token is skipped (it is labeled both
// positive and negative, so it carries no usable signal).
inline double gan2_d_step(std::span<const TransferExample> batch, const GeneratorParams& g,
                          DiscriminatorParams& d, Adam& d_opt, const TransferConfig& cfg, Rng& rng) {
  if (batch.empty()) throw ContractError("gan2_d_step over empty batch");
  auto samples = detail::sample_batch(batch, g, cfg, rng);
  d_opt.zero_grad();
  double mean_loss = 0.0;
  {
    Tape tape;
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      DialogEncoding enc_d = encode_round(batch[i].input, d.embedding, d.encoder);
      std::vector<std::vector<int>> negatives = batch[i].negatives;
      if (samples[i].tokens != batch[i].gt_tokens) negatives.push_back(samples[i].tokens);
      total = add(total, npair_loss(enc_d.embedding, batch[i].gt_tokens, negatives, d, cfg.lambda));
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));
    mean_loss = total.value();
    if (std::isnan(mean_loss)) throw DomainError("NaN gan2 loss; step aborted");
    tape.backward(total);
  }
  d_opt.step();
  return mean_loss;
}

// ---------------------------------------------------------------------------
// evaluation over dataset splits
// ---------------------------------------------------------------------------

struct RoundRef {
  std::size_t dialog = 0;
  std::size_t round = 0;
};

struct DataSplit {
  std::vector<RoundRef> train;
  std::vector<RoundRef> val;
};

// Deterministic split: the last ceil(val_fraction * n) dialogs (whole
// dialogs, never individual rounds) form the validation set.
inline DataSplit split_rounds(const Dataset& data, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ContractError("val_fraction must be in [0, 1)");
  const std::size_t n = data.dialogs.size();
  std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n == 0 ? 0 : n - 1;
  DataSplit split;
  for (std::size_t di = 0; di < n; ++di) {
    auto& dst = di < n - n_val ? split.train : split.val;
    for (std::size_t ri = 0; ri < data.dialogs[di].rounds.size(); ++ri) dst.push_back({di, ri});
  }
  return split;
}

inline RetrievalReport evaluate_generator_on(const Dataset& data, std::span<const RoundRef> refs,
                                             const GeneratorParams& g,
                                             ScoreNorm norm = ScoreNorm::MeanLogLikelihood,
                                             TiePolicy policy = TiePolicy::FavorGroundTruth) {
  if (refs.empty()) throw ContractError("evaluate over empty split");
  std::vector<int> ranks;
  ranks.reserve(refs.size());
  for (const auto& ref : refs) {
    const Dialog& dlg = data.dialogs[ref.dialog];
    const Round& round = dlg.rounds[ref.round];
    EncoderInput in = make_encoder_input(dlg, data.features, ref.round);
    DialogEncoding enc = encode_round(in, g.embedding, g.encoder);
    CandidateScores cs = score_candidates(enc.embedding, round.candidate_tokens, round.gt_index, g, norm);
    ranks.push_back(rank_of_gt(cs, policy));
  }
  return aggregate(ranks, data.candidates_per_round);
}

inline RetrievalReport evaluate_discriminator_on(const Dataset& data, std::span<const RoundRef> refs,
                                                 const DiscriminatorParams& d,
                                                 TiePolicy policy = TiePolicy::FavorGroundTruth) {
  if (refs.empty()) throw ContractError("evaluate over empty split");
  std::vector<int> ranks;
  ranks.reserve(refs.size());
  for (const auto& ref : refs) {
    const Dialog& dlg = data.dialogs[ref.dialog];
    const Round& round = dlg.rounds[ref.round];
    EncoderInput in = make_encoder_input(dlg, data.features, ref.round);
    DialogEncoding enc = encode_round(in, d.embedding, d.encoder);
    CandidateScores cs = rank_candidates_d(enc.embedding, round.candidate_tokens, round.gt_index, d);
    ranks.push_back(rank_of_gt(cs, policy));
  }
  return aggregate(ranks, data.candidates_per_round);
}

// ---------------------------------------------------------------------------
// training orchestration
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::string phase;  // pretrain_g | pretrain_d | transfer
  std::string model;  // g | d
  std::string split;  // val
  std::size_t epoch = 0;
  RetrievalReport report;
  bool has_loss = false;
  double mean_loss = 0.0;  // the model's mean training loss this epoch
  bool has_parts = false;
  double mean_loss_g = 0.0;    // transfer phase: perceptual part
  double mean_loss_mle = 0.0;  // transfer phase: MLE part
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

// One line-delimited log record. mean_loss is null for a model that received
// no updates that epoch (D during a frozen transfer phase).
inline nlohmann::json metrics_record_to_json(const MetricsRecord& r) {
  nlohmann::json j{{"phase", r.phase},          {"model", r.model},
                   {"epoch", r.epoch},          {"split", r.split},
                   {"mrr", r.report.mrr},       {"r1", r.report.r_at_1},
                   {"r5", r.report.r_at_5},     {"r10", r.report.r_at_10},
                   {"mean_rank", r.report.mean_rank}};
  j["mean_loss"] = r.has_loss ? nlohmann::json(r.mean_loss) : nlohmann::json(nullptr);
  if (r.has_parts) {
    j["mean_loss_g"] = r.mean_loss_g;
    j["mean_loss_mle"] = r.mean_loss_mle;
  }
  return j;
}

struct ModelDims {
  std::size_t embed = 300;
  std::size_t hidden = 512;
  std::size_t vocab = 0;
};

// Runs the three training phases over one dataset. Every phase derives its
// RNG streams from (seed, phase, epoch), so resuming a later phase from
// checkpoints replays exactly what an uninterrupted run would have done.
class Trainer {
 public:
  Trainer(const Dataset& data, ModelDims dims, TransferConfig cfg)
      : data_(&data), cfg_(cfg), split_(split_rounds(data, cfg.val_fraction)) {
    if (data.dialogs.empty()) throw ContractError("empty dataset");
    if (dims.vocab == 0) throw ContractError("vocab size must be set");
    if (split_.val.empty())
      throw ContractError("validation split is empty; need >= 2 dialogs and val_fraction > 0");
    g_ = GeneratorParams::create(dims.embed, dims.hidden, data.features.d_img, dims.vocab,
                                 derive_seed(cfg.seed, 0x47));
    d_ = DiscriminatorParams::create(dims.embed, dims.hidden, data.features.d_img, dims.vocab,
                                     derive_seed(cfg.seed, 0x44));
  }

  GeneratorParams& generator() { return g_; }
  const GeneratorParams& generator() const { return g_; }
  DiscriminatorParams& discriminator() { return d_; }
  const DiscriminatorParams& discriminator() const { return d_; }
  const DataSplit& split() const { return split_; }
  const TransferConfig& config() const { return cfg_; }

  RetrievalReport evaluate_generator(std::span<const RoundRef> refs) const {
    return evaluate_generator_on(*data_, refs, g_, cfg_.score_norm, cfg_.tie_policy);
  }
  RetrievalReport evaluate_discriminator(std::span<const RoundRef> refs) const {
    return evaluate_discriminator_on(*data_, refs, d_, cfg_.tie_policy);
  }

  // Phase 1: teacher-forced MLE pretraining of G.
  void pretrain_generator(const MetricsSink& sink) {
    Adam opt(g_.parameters(), adam_config());
    for (std::size_t epoch = 0; epoch < cfg_.g_pretrain_epochs; ++epoch) {
      Rng order_rng(derive_seed(cfg_.seed, kPhaseG, epoch));
      const auto order = shuffled_train(order_rng);
      double loss_sum = 0.0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size) {
        const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch_size);
        opt.zero_grad();
        Tape tape;
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t i = b0; i < b1; ++i) {
          const auto [dlg, round] = at(order[i]);
          EncoderInput in = make_encoder_input(*dlg, data_->features, order[i].round);
          total = add(total, mle_loss(encode_round(in, g_.embedding, g_.encoder).embedding,
                                      round->answer_tokens, g_));
        }
        total = scale(total, 1.0 / static_cast<double>(b1 - b0));
        loss_sum += total.value() * static_cast<double>(b1 - b0);
        if (std::isnan(total.value())) throw DomainError("NaN MLE loss; step aborted");
        tape.backward(total);
        opt.step();
      }
      if (sink)
        sink(MetricsRecord{"pretrain_g", "g", "val", epoch, evaluate_generator(split_.val), true,
                           loss_sum / static_cast<double>(order.size())});
    }
  }

  // Phase 2: N-pair pretraining of D against dataset negatives.
  void pretrain_discriminator(const MetricsSink& sink) {
    Adam opt(d_.parameters(), adam_config());
    for (std::size_t epoch = 0; epoch < cfg_.d_pretrain_epochs; ++epoch) {
      Rng order_rng(derive_seed(cfg_.seed, kPhaseD, epoch));
      Rng neg_rng(derive_seed(cfg_.seed, kPhaseD + 1, epoch));
      const auto order = shuffled_train(order_rng);
      double loss_sum = 0.0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size) {
        const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch_size);
        opt.zero_grad();
        Tape tape;
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t i = b0; i < b1; ++i) {
          const auto [dlg, round] = at(order[i]);
          EncoderInput in = make_encoder_input(*dlg, data_->features, order[i].round);
          total = add(total, npair_loss(encode_round(in, d_.embedding, d_.encoder).embedding,
                                        round->answer_tokens, pick_negatives(*round, neg_rng), d_,
                                        cfg_.lambda));
        }
        total = scale(total, 1.0 / static_cast<double>(b1 - b0));
        loss_sum += total.value() * static_cast<double>(b1 - b0);
        if (std::isnan(total.value())) throw DomainError("NaN N-pair loss; step aborted");
        tape.backward(total);
        opt.step();
      }
      if (sink)
        sink(MetricsRecord{"pretrain_d", "d", "val", epoch, evaluate_discriminator(split_.val), true,
                           loss_sum / static_cast<double>(order.size())});
    }
  }

  // Phase 3: knowledge transfer (or one of the GAN ablations). In Transfer
  // mode D's parameter bytes are invariant across the whole phase.
  void transfer_phase(const MetricsSink& sink) {
    Adam g_opt(g_.parameters(), adam_config());
    std::optional<Adam> d_opt;
    if (cfg_.mode != TransferMode::Transfer) d_opt.emplace(d_.parameters(), adam_config());
    else
      for (auto& p : d_.parameters()) p.tensor.set_requires_grad(false);

    for (std::size_t epoch = 0; epoch < cfg_.transfer_epochs; ++epoch) {
      Rng order_rng(derive_seed(cfg_.seed, kPhaseT, epoch));
      Rng g_rng(derive_seed(cfg_.seed, kPhaseT + 1, epoch));
      Rng d_rng(derive_seed(cfg_.seed, kPhaseT + 2, epoch));
      const auto order = shuffled_train(order_rng);
      double g_sum = 0.0, mle_sum = 0.0, d_sum = 0.0;
      std::size_t d_steps = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch_size) {
        const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch_size);
        std::vector<TransferExample> batch;
        batch.reserve(b1 - b0);
        for (std::size_t i = b0; i < b1; ++i) {
          const auto [dlg, round] = at(order[i]);
          TransferExample ex;
          ex.input = make_encoder_input(*dlg, data_->features, order[i].round);
          ex.gt_tokens = round->answer_tokens;
          if (cfg_.mode == TransferMode::Gan2) ex.negatives = all_negatives(*round);
          batch.push_back(std::move(ex));
        }
        TransferStepStats stats = transfer_step(batch, g_, g_opt, d_, cfg_, g_rng);
        g_sum += stats.loss_g * static_cast<double>(batch.size());
        mle_sum += stats.loss_mle * static_cast<double>(batch.size());
        if (cfg_.mode == TransferMode::Gan1) {
          d_sum += gan1_d_step(batch, g_, d_, *d_opt, cfg_, d_rng);
          ++d_steps;
        } else if (cfg_.mode == TransferMode::Gan2) {
          d_sum += gan2_d_step(batch, g_, d_, *d_opt, cfg_, d_rng);
          ++d_steps;
        }
      }
      if (sink) {
        const auto n = static_cast<double>(order.size());
        sink(MetricsRecord{"transfer", "g", "val", epoch, evaluate_generator(split_.val), true,
                           (g_sum + cfg_.alpha * mle_sum) / n, true, g_sum / n, mle_sum / n});
        MetricsRecord d_rec{"transfer", "d", "val", epoch, evaluate_discriminator(split_.val)};
        if (d_steps > 0) {
          d_rec.has_loss = true;
          d_rec.mean_loss = d_sum / static_cast<double>(d_steps);
        }
        sink(d_rec);
      }
    }
  }

  // All three phases back to back.
  void run_all(const MetricsSink& sink) {
    pretrain_generator(sink);
    pretrain_discriminator(sink);
    transfer_phase(sink);
  }

 private:
  static constexpr std::uint64_t kPhaseG = 101, kPhaseD = 211, kPhaseT = 307;

  AdamConfig adam_config() const {
    AdamConfig a;
    a.lr = cfg_.lr;
    a.max_norm = cfg_.max_grad_norm;
    return a;
  }

  std::pair<const Dialog*, const Round*> at(const RoundRef& ref) const {
    const Dialog& dlg = data_->dialogs[ref.dialog];
    return {&dlg, &dlg.rounds[ref.round]};
  }

  std::vector<RoundRef> shuffled_train(Rng& rng) const {
    std::vector<RoundRef> order = split_.train;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
    return order;
  }

  std::vector<std::vector<int>> all_negatives(const Round& round) const {
    std::vector<std::vector<int>> negs;
    negs.reserve(round.candidate_tokens.size() - 1);
    for (std::size_t ci = 0; ci < round.candidate_tokens.size(); ++ci)
      if (ci != static_cast<std::size_t>(round.gt_index)) negs.push_back(round.candidate_tokens[ci]);
    return negs;
  }

  std::vector<std::vector<int>> pick_negatives(const Round& round, Rng& rng) const {
    auto negs = all_negatives(round);
    if (cfg_.n_negatives == 0 || cfg_.n_negatives >= negs.size()) return negs;
    // partial Fisher-Yates keeps the draw deterministic in the stream
    for (std::size_t i = 0; i < cfg_.n_negatives; ++i) {
      const std::size_t pick = i + static_cast<std::size_t>(rng.below(negs.size() - i));
      std::swap(negs[i], negs[pick]);
    }
    negs.resize(cfg_.n_negatives);
    return negs;
  }

  const Dataset* data_;
  TransferConfig cfg_;
  DataSplit split_;
  GeneratorParams g_;
  DiscriminatorParams d_;
};

}  // namespace duet
