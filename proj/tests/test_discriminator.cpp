#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "duet/discriminator.hpp"
#include "duet/gradcheck.hpp"

using namespace duet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(detail::numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

DiscriminatorParams tiny_discriminator(std::uint64_t seed = 91, std::size_t vocab = 8) {
  return DiscriminatorParams::create(4, 6, 2, vocab, seed);
}

// plain-double reference for the self-attentive answer encoder
namespace ref {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<std::vector<double>> lstm_outputs(const std::vector<int>& tokens, const DiscriminatorParams& p) {
  const std::size_t h = p.ans_lstm.hidden_size();
  std::vector<double> hh(h, 0.0), cc(h, 0.0);
  std::vector<std::vector<double>> outs;
  for (int tok : tokens) {
    std::vector<double> pre(4 * h, 0.0);
    for (std::size_t r = 0; r < 4 * h; ++r) {
      double acc = p.ans_lstm.b.at(r);
      for (std::size_t c = 0; c < p.embedding.dim(0); ++c)
        acc += p.ans_lstm.w_x.at(r, c) * p.embedding.at(c, static_cast<std::size_t>(tok));
      for (std::size_t c = 0; c < h; ++c) acc += p.ans_lstm.w_h.at(r, c) * hh[c];
      pre[r] = acc;
    }
    std::vector<double> h_next(h), c_next(h);
    for (std::size_t r = 0; r < h; ++r) {
      const double gi = sig(pre[r]), gf = sig(pre[h + r]);
      const double gg = std::tanh(pre[2 * h + r]), go = sig(pre[3 * h + r]);
      c_next[r] = gf * cc[r] + gi * gg;
      h_next[r] = go * std::tanh(c_next[r]);
    }
    hh = h_next;
    cc = c_next;
    outs.push_back(hh);
  }
  return outs;
}

std::pair<std::vector<double>, std::vector<double>> embed(const std::vector<int>& tokens,
                                                          const DiscriminatorParams& p) {
  auto outs = lstm_outputs(tokens, p);
  const std::size_t T = outs.size(), hidden = p.mlp_w1.dim(0), d = outs[0].size();
  std::vector<double> u(T, 0.0);
  for (std::size_t j = 0; j < T; ++j)
    for (std::size_t r = 0; r < hidden; ++r) {
      double pre = p.mlp_b1.at(r);
      for (std::size_t c = 0; c < d; ++c) pre += p.mlp_w1.at(r, c) * outs[j][c];
      u[j] += p.mlp_w2.at(r) * std::tanh(pre);
    }
  double mx = u[0];
  for (double v : u) mx = std::max(mx, v);
  double z = 0.0;
  std::vector<double> w(T);
  for (std::size_t j = 0; j < T; ++j) {
    w[j] = std::exp(u[j] - mx);
    z += w[j];
  }
  for (auto& v : w) v /= z;
  std::vector<double> f(d, 0.0);
  for (std::size_t j = 0; j < T; ++j)
    for (std::size_t c = 0; c < d; ++c) f[c] += outs[j][c] * w[j];
  return {f, w};
}

}  // namespace ref

}  // namespace

TEST_CASE("embed_answer: single token gets attention 1 and the raw LSTM output") {
  DiscriminatorParams p = tiny_discriminator();
  std::vector<int> one{5};
  AnswerEmbedding f = embed_answer(one, p);
  REQUIRE(f.attention.numel() == 1);
  CHECK(f.attention.at(0) == 1.0);

  auto trace = lstm_encode(one, p.embedding, p.ans_lstm);
  for (std::size_t i = 0; i < f.embedding.numel(); ++i)
    CHECK(f.embedding.at(i) == Catch::Approx(trace.final_state.h.at(i)).margin(1e-15));

  std::vector<int> empty;
  CHECK_THROWS_AS(embed_answer(empty, p), ContractError);
}

TEST_CASE("embed_answer: zero MLP weights mean uniform step attention") {
  DiscriminatorParams p = tiny_discriminator(17);
  p.mlp_w1 = Tensor::zeros(p.mlp_w1.shape());
  p.mlp_b1 = Tensor::zeros(p.mlp_b1.shape());
  p.mlp_w2 = Tensor::zeros(p.mlp_w2.shape());
  std::vector<int> tokens{4, 6, 2};
  AnswerEmbedding f = embed_answer(tokens, p);
  for (std::size_t j = 0; j < 3; ++j) CHECK(f.attention.at(j) == Catch::Approx(1.0 / 3).margin(1e-15));
}

TEST_CASE("embed_answer matches the scalar reference on a tiny instance") {
  DiscriminatorParams p = tiny_discriminator(23);
  std::vector<int> tokens{4, 6, 7, 2};
  AnswerEmbedding f = embed_answer(tokens, p);
  auto [f_ref, w_ref] = ref::embed(tokens, p);
  for (std::size_t j = 0; j < w_ref.size(); ++j)
    CHECK(f.attention.at(j) == Catch::Approx(w_ref[j]).margin(1e-13));
  for (std::size_t i = 0; i < f_ref.size(); ++i)
    CHECK(f.embedding.at(i) == Catch::Approx(f_ref[i]).margin(1e-13));

  double total = 0.0;
  for (std::size_t j = 0; j < w_ref.size(); ++j) total += f.attention.at(j);
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("score is the inner product") {
  DiscriminatorParams p = tiny_discriminator(29);
  Rng rng(5);

  AnswerEmbedding fa{Tensor::from({4}, {1, 0, 0, 0}), Tensor::scalar(1.0)};
  Tensor e_orth = Tensor::from({4}, {0, 3, -2, 1});
  CHECK(score(e_orth, fa).value() == 0.0);

  Tensor e = random_tensor({4}, rng);
  AnswerEmbedding fb{random_tensor({4}, rng), Tensor::scalar(1.0)};
  double manual = 0.0;
  for (std::size_t i = 0; i < 4; ++i) manual += e.at(i) * fb.embedding.at(i);
  CHECK(score(e, fb).value() == Catch::Approx(manual).epsilon(1e-14));
  CHECK(score(scale(e, 2.0), fb).value() == Catch::Approx(2.0 * manual).epsilon(1e-12));

  Tensor wrong = random_tensor({5}, rng);
  CHECK_THROWS_AS(score(wrong, fb), ShapeError);
}

TEST_CASE("npair_loss closed forms") {
  DiscriminatorParams p = tiny_discriminator(31);
  std::vector<int> gt{4, Vocabulary::kEnd};
  std::vector<std::vector<int>> negs{{5, Vocabulary::kEnd}, {6, Vocabulary::kEnd}, {7, Vocabulary::kEnd}};

  // all scores tie when e_t is the zero vector
  Tensor e_zero = Tensor::zeros({6});
  CHECK(npair_loss(e_zero, gt, negs, p, 0.0).value() == Catch::Approx(std::log(4.0)).margin(1e-12));

  // the loss is always positive
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor e = random_tensor({6}, rng, -3, 3);
    CHECK(npair_loss(e, gt, negs, p, 0.0).value() > 0.0);
  }

  // overwhelming ground-truth margin drives the loss to zero: solve for a
  // query e with <e, f_gt - f_neg_i> = 100 for every negative
  AnswerEmbedding f_gt = embed_answer(gt, p);
  const std::size_t d = f_gt.embedding.numel(), m = negs.size();
  std::vector<std::vector<double>> diff(m, std::vector<double>(d));
  for (std::size_t i = 0; i < m; ++i) {
    AnswerEmbedding f_n = embed_answer(negs[i], p);
    for (std::size_t c = 0; c < d; ++c) diff[i][c] = f_gt.embedding.at(c) - f_n.embedding.at(c);
  }
  // gram solve: e = D^T (D D^T)^{-1} (100,...)
  std::vector<std::vector<double>> gram(m, std::vector<double>(m + 1, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t c = 0; c < d; ++c) gram[i][j] += diff[i][c] * diff[j][c];
    gram[i][m] = 100.0;
  }
  for (std::size_t col = 0; col < m; ++col) {  // gaussian elimination, partial pivot
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(gram[r][col]) > std::abs(gram[piv][col])) piv = r;
    std::swap(gram[col], gram[piv]);
    REQUIRE(std::abs(gram[col][col]) > 1e-12);
    for (std::size_t r = 0; r < m; ++r) {
      if (r == col) continue;
      const double factor = gram[r][col] / gram[col][col];
      for (std::size_t c = col; c <= m; ++c) gram[r][c] -= factor * gram[col][c];
    }
  }
  std::vector<double> e_vals(d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double coef = gram[i][m] / gram[i][i];
    for (std::size_t c = 0; c < d; ++c) e_vals[c] += coef * diff[i][c];
  }
  Tensor e_sep = Tensor::from({d}, e_vals);
  const double s_gt = score(e_sep, f_gt).value();
  for (const auto& n : negs)
    CHECK(score(e_sep, embed_answer(n, p)).value() == Catch::Approx(s_gt - 100.0).margin(1e-6));
  CHECK(npair_loss(e_sep, gt, negs, p, 0.0).value() < 1e-12);

  // contracts
  std::vector<std::vector<int>> none;
  CHECK_THROWS_AS(npair_loss(e_zero, gt, none, p, 0.0), ContractError);
  std::vector<std::vector<int>> dup{{4, Vocabulary::kEnd}};
  CHECK_THROWS_AS(npair_loss(e_zero, gt, dup, p, 0.0), ContractError);
}

TEST_CASE("npair_loss with one negative equals the binary logistic loss") {
  DiscriminatorParams p = tiny_discriminator(37);
  Rng rng(11);
  std::vector<int> gt{4, Vocabulary::kEnd};
  std::vector<std::vector<int>> neg{{6, 7, Vocabulary::kEnd}};
  for (int rep = 0; rep < 10; ++rep) {
    Tensor e = random_tensor({6}, rng, -2, 2);
    const double s_gt = score(e, embed_answer(gt, p)).value();
    const double s_neg = score(e, embed_answer(neg[0], p)).value();
    const double expect = std::log(1.0 + std::exp(s_neg - s_gt));
    CHECK(npair_loss(e, gt, neg, p, 0.0).value() == Catch::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("npair_loss matches direct scalar evaluation with regularizer") {
  DiscriminatorParams p = tiny_discriminator(41);
  Rng rng(13);
  std::vector<int> gt{5, Vocabulary::kEnd};
  std::vector<std::vector<int>> negs{{6, Vocabulary::kEnd}, {7, 4, Vocabulary::kEnd}};
  const double lambda = 0.002;

  Tensor e = random_tensor({6}, rng);
  const AnswerEmbedding f_gt = embed_answer(gt, p);
  const double s_gt = score(e, f_gt).value();

  double sum_exp = 0.0, mean_neg_norm = 0.0;
  for (const auto& n : negs) {
    AnswerEmbedding f_n = embed_answer(n, p);
    sum_exp += std::exp(score(e, f_n).value() - s_gt);
    double nn = 0.0;
    for (std::size_t i = 0; i < f_n.embedding.numel(); ++i) nn += f_n.embedding.at(i) * f_n.embedding.at(i);
    mean_neg_norm += nn;
  }
  mean_neg_norm /= static_cast<double>(negs.size());
  double gt_norm = 0.0;
  for (std::size_t i = 0; i < f_gt.embedding.numel(); ++i) gt_norm += f_gt.embedding.at(i) * f_gt.embedding.at(i);

  const double expect = std::log(1.0 + sum_exp) + lambda * (gt_norm + mean_neg_norm);
  CHECK(npair_loss(e, gt, negs, p, lambda).value() == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("npair_loss passes grad_check through the answer encoder") {
  Rng rng(17);
  DiscriminatorParams base = tiny_discriminator(43);
  std::vector<int> gt{4, Vocabulary::kEnd};
  std::vector<std::vector<int>> negs{{5, Vocabulary::kEnd}, {6, 2}};

  auto f = [&](std::span<const Tensor> ins) {
    DiscriminatorParams p;
    p.embedding = ins[0];
    p.ans_lstm = LstmParams{ins[1], ins[2], ins[3]};
    p.mlp_w1 = ins[4];
    p.mlp_b1 = ins[5];
    p.mlp_w2 = ins[6];
    p.encoder = base.encoder;
    return npair_loss(ins[7], gt, negs, p, 0.002);
  };
  std::vector<Tensor> ins{base.embedding, base.ans_lstm.w_x, base.ans_lstm.w_h, base.ans_lstm.b,
                          base.mlp_w1,    base.mlp_b1,       base.mlp_w2,       random_tensor({6}, rng)};
  CHECK(grad_check(f, ins) < 1e-4);
}

TEST_CASE("rank_candidates_d: duplicates tie and order permutes with the list") {
  DiscriminatorParams p = tiny_discriminator(47);
  Rng rng(19);
  Tensor e = random_tensor({6}, rng);

  std::vector<std::vector<int>> cands{{4, Vocabulary::kEnd}, {5, Vocabulary::kEnd}, {4, Vocabulary::kEnd}};
  CandidateScores cs = rank_candidates_d(e, cands, 0, p);
  CHECK(cs.scores[0] == cs.scores[2]);

  std::vector<std::vector<int>> rev(cands.rbegin(), cands.rend());
  CandidateScores rs = rank_candidates_d(e, rev, 2, p);
  CHECK(rs.scores[0] == cs.scores[2]);
  CHECK(rs.scores[1] == cs.scores[1]);
  CHECK(rs.scores[2] == cs.scores[0]);
}

TEST_CASE("embed_answer_st: hard values forward, soft gradient backward") {
  DiscriminatorParams p = tiny_discriminator(59);
  std::vector<int> tokens{4, 6, Vocabulary::kEnd};
  SampledAnswer sampled;
  sampled.tokens = tokens;
  Rng rng(3);
  for (int tok : tokens) {
    std::vector<double> rv(8);
    for (auto& x : rv) x = rng.uniform(0.01, 0.2);
    rv[static_cast<std::size_t>(tok)] = 2.0;
    double total = 0.0;
    for (double x : rv) total += x;
    for (auto& x : rv) x /= total;
    Tensor r = Tensor::from({8}, rv);
    r.set_requires_grad(true);
    sampled.relaxed.push_back(r);
  }

  // forward identity with the plain hard-token path
  AnswerEmbedding st = embed_answer_st(sampled, p);
  AnswerEmbedding hard = embed_answer(tokens, p);
  for (std::size_t i = 0; i < st.embedding.numel(); ++i)
    CHECK(st.embedding.at(i) == hard.embedding.at(i));

  // under a tape, gradients reach the relaxed vectors
  for (auto& r : sampled.relaxed) r.zero_grad();
  {
    Tape tape;
    tape.backward(sum(embed_answer_st(sampled, p).embedding));
  }
  double norm = 0.0;
  for (const auto& r : sampled.relaxed)
    for (double gv : r.grad()) norm += gv * gv;
  CHECK(norm > 0.0);
}

TEST_CASE("npair training separates a two-context toy task") {
  DiscriminatorParams p = tiny_discriminator(53);
  Rng rng(23);
  Tensor e_a = random_tensor({6}, rng);
  Tensor e_b = random_tensor({6}, rng);
  std::vector<int> yes{4, Vocabulary::kEnd}, no{5, Vocabulary::kEnd};

  AdamConfig cfg;
  cfg.lr = 0.02;
  Adam opt(p.parameters(), cfg);
  for (int step = 0; step < 120; ++step) {
    opt.zero_grad();
    Tape tape;
    Tensor loss = add(npair_loss(detach(e_a), yes, {no}, p, 0.002),
                      npair_loss(detach(e_b), no, {yes}, p, 0.002));
    tape.backward(loss);
    opt.step();
  }

  std::vector<std::vector<int>> cands{yes, no};
  CHECK(rank_of_gt(rank_candidates_d(e_a, cands, 0, p)) == 1);
  CHECK(rank_of_gt(rank_candidates_d(e_b, cands, 1, p)) == 1);
}
