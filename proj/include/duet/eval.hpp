#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/error.hpp"

namespace duet {

// Per-round retrieval scores: one float per candidate plus the ground-truth
// position. The unit every retrieval metric is computed from.
struct CandidateScores {
  std::vector<double> scores;
  int gt_index = -1;
};

// Tie handling is a policy choice: FavorGroundTruth counts only
// strictly-better candidates, Pessimistic also counts ties against the
// ground truth. The choice is logged in every report.
enum class TiePolicy { FavorGroundTruth, PessimisticGroundTruth };

inline const char* tie_policy_name(TiePolicy p) {
  return p == TiePolicy::FavorGroundTruth ? "favor_gt" : "pessimistic";
}

inline int rank_of_gt(const CandidateScores& cs, TiePolicy policy = TiePolicy::FavorGroundTruth) {
  if (cs.scores.empty()) throw ContractError("rank_of_gt over empty scores");
  if (cs.gt_index < 0 || static_cast<std::size_t>(cs.gt_index) >= cs.scores.size())
    throw ContractError("gt index " + std::to_string(cs.gt_index) + " out of range");
  for (double s : cs.scores)
    if (std::isnan(s)) throw ContractError("NaN candidate score");

  const double gt = cs.scores[static_cast<std::size_t>(cs.gt_index)];
  int rank = 1;
  for (std::size_t i = 0; i < cs.scores.size(); ++i) {
    if (i == static_cast<std::size_t>(cs.gt_index)) continue;
    if (cs.scores[i] > gt) ++rank;
    else if (policy == TiePolicy::PessimisticGroundTruth && cs.scores[i] == gt) ++rank;
  }
  return rank;
}

struct RetrievalReport {
  double mrr = 0.0;
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double r_at_10 = 0.0;
  double mean_rank = 0.0;
  std::size_t rounds = 0;
};

inline RetrievalReport aggregate(const std::vector<int>& ranks, std::size_t n_candidates) {
  if (ranks.empty()) throw ContractError("aggregate over zero ranks");
  RetrievalReport r;
  r.rounds = ranks.size();
  for (int rank : ranks) {
    if (rank < 1 || static_cast<std::size_t>(rank) > n_candidates)
      throw ContractError("rank " + std::to_string(rank) + " outside [1, " + std::to_string(n_candidates) + "]");
    r.mrr += 1.0 / rank;
    r.mean_rank += rank;
    if (rank <= 1) r.r_at_1 += 1;
    if (rank <= 5) r.r_at_5 += 1;
    if (rank <= 10) r.r_at_10 += 1;
  }
  const auto count = static_cast<double>(ranks.size());
  r.mrr /= count;
  r.mean_rank /= count;
  r.r_at_1 /= count;
  r.r_at_5 /= count;
  r.r_at_10 /= count;
  return r;
}

// Aligned table in the usual column order: MRR, R@1, R@5, R@10, Mean.
inline std::string format_report(const RetrievalReport& r, const std::string& label) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-16s %6s %6s %6s %6s %6s\n", "Model", "MRR", "R@1", "R@5", "R@10", "Mean");
  std::string out = buf;
  std::snprintf(buf, sizeof(buf), "%-16s %6.4f %6.2f %6.2f %6.2f %6.2f\n", label.c_str(), r.mrr,
                100.0 * r.r_at_1, 100.0 * r.r_at_5, 100.0 * r.r_at_10, r.mean_rank);
  out += buf;
  return out;
}

inline nlohmann::json report_to_json(const RetrievalReport& r) {
  return {{"mrr", r.mrr},           {"r1", r.r_at_1},   {"r5", r.r_at_5},
          {"r10", r.r_at_10},       {"mean_rank", r.mean_rank}, {"rounds", r.rounds}};
}

}  // namespace duet
