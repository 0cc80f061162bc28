#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "duet/checkpoint.hpp"
#include "duet/encoder.hpp"
#include "duet/rng.hpp"
#include "duet/vocab.hpp"

namespace duet {

struct Round {
  std::string question;
  std::string answer;
  std::vector<std::string> candidates;
  int gt_index = -1;

  // filled by make_dataset
  std::vector<int> question_tokens;
  std::vector<int> answer_tokens;
  std::vector<std::vector<int>> candidate_tokens;
};

struct Dialog {
  std::string image_id;
  std::string caption;
  std::vector<Round> rounds;

  std::vector<int> caption_tokens;
};

// Image id -> d_img x k feature matrix; dimensions are uniform across entries.
struct FeatureStore {
  std::size_t d_img = 0;
  std::size_t regions = 0;
  std::unordered_map<std::string, Tensor> features;

  void put(const std::string& id, Tensor t) {
    if (t.rank() != 2) throw ShapeError("feature matrix must be rank 2");
    if (features.empty()) {
      d_img = t.dim(0);
      regions = t.dim(1);
    } else if (t.dim(0) != d_img || t.dim(1) != regions) {
      throw ShapeError("inconsistent feature dims for " + id);
    }
    features[id] = std::move(t);
  }

  const Tensor& get(const std::string& id) const {
    auto it = features.find(id);
    if (it == features.end()) throw IndexError("no features for image id \"" + id + "\"");
    return it->second;
  }
};

struct Dataset {
  std::vector<Dialog> dialogs;
  FeatureStore features;
  std::size_t rounds_per_dialog = 0;
  std::size_t candidates_per_round = 0;
};

// ---------------------------------------------------------------------------
// tokenization + invariant validation
// ---------------------------------------------------------------------------

// Tokenizes every dialog against the vocabulary and enforces the structural
// invariants. Throws ParseError with the dialog index on any violation.
inline Dataset make_dataset(std::vector<Dialog> dialogs, FeatureStore features, const Vocabulary& vocab) {
  Dataset ds;
  ds.features = std::move(features);
  for (std::size_t di = 0; di < dialogs.size(); ++di) {
    Dialog& d = dialogs[di];
    const std::string where = "dialog " + std::to_string(di);
    if (ds.features.features.find(d.image_id) == ds.features.features.end())
      throw ParseError(where + ": dangling feature id \"" + d.image_id + "\"");
    if (d.rounds.empty()) throw ParseError(where + ": no rounds");
    if (di == 0 && ds.rounds_per_dialog == 0) {
      ds.rounds_per_dialog = d.rounds.size();
      ds.candidates_per_round = d.rounds[0].candidates.size();
      if (ds.candidates_per_round < 2) throw ParseError(where + ": needs at least 2 candidates");
    }
    if (d.rounds.size() != ds.rounds_per_dialog)
      throw ParseError(where + ": has " + std::to_string(d.rounds.size()) + " rounds, dataset uses " +
                       std::to_string(ds.rounds_per_dialog));

    d.caption_tokens = preprocess(d.caption, TextKind::Caption, vocab);
    for (std::size_t ri = 0; ri < d.rounds.size(); ++ri) {
      Round& r = d.rounds[ri];
      const std::string rwhere = where + " round " + std::to_string(ri);
      if (r.candidates.size() != ds.candidates_per_round)
        throw ParseError(rwhere + ": candidate count " + std::to_string(r.candidates.size()) +
                         " differs from dataset-wide " + std::to_string(ds.candidates_per_round));
      if (r.gt_index < 0 || static_cast<std::size_t>(r.gt_index) >= r.candidates.size())
        throw ParseError(rwhere + ": gt index " + std::to_string(r.gt_index) + " out of range");

      r.question_tokens = preprocess(r.question, TextKind::Question, vocab);
      r.answer_tokens = preprocess(r.answer, TextKind::Answer, vocab);
      r.candidate_tokens.clear();
      r.candidate_tokens.reserve(r.candidates.size());
      for (const auto& c : r.candidates) r.candidate_tokens.push_back(preprocess(c, TextKind::Answer, vocab));

      if (r.candidate_tokens[static_cast<std::size_t>(r.gt_index)] != r.answer_tokens)
        throw ParseError(rwhere + ": candidate at gt index is not token-identical to the answer");
      for (std::size_t ci = 0; ci < r.candidate_tokens.size(); ++ci)
        if (ci != static_cast<std::size_t>(r.gt_index) && r.candidate_tokens[ci] == r.answer_tokens)
          throw ParseError(rwhere + ": ground truth appears more than once in the candidate list");
    }
  }
  ds.dialogs = std::move(dialogs);
  return ds;
}

// History for round t: caption, then one q+a sequence per earlier round.
inline EncoderInput make_encoder_input(const Dialog& d, const FeatureStore& features, std::size_t round) {
  if (round >= d.rounds.size()) throw IndexError("round " + std::to_string(round) + " out of range");
  EncoderInput in;
  in.image = features.get(d.image_id);
  in.history.push_back(d.caption_tokens);
  for (std::size_t i = 0; i < round; ++i) {
    std::vector<int> merged = d.rounds[i].question_tokens;
    merged.insert(merged.end(), d.rounds[i].answer_tokens.begin(), d.rounds[i].answer_tokens.end());
    in.history.push_back(std::move(merged));
  }
  in.question = d.rounds[round].question_tokens;
  return in;
}

// ---------------------------------------------------------------------------
// dialog file: one JSON object per line
// ---------------------------------------------------------------------------

inline void save_dialogs(const std::string& path, const std::vector<Dialog>& dialogs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (const auto& d : dialogs) {
    nlohmann::json j;
    j["image_id"] = d.image_id;
    j["caption"] = d.caption;
    auto& rounds = j["rounds"] = nlohmann::json::array();
    for (const auto& r : d.rounds)
      rounds.push_back({{"question", r.question},
                        {"answer", r.answer},
                        {"candidates", r.candidates},
                        {"gt_index", r.gt_index}});
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<Dialog> parse_dialogs(std::istream& is, const std::string& name) {
  std::vector<Dialog> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      Dialog d;
      d.image_id = j.at("image_id").get<std::string>();
      d.caption = j.at("caption").get<std::string>();
      for (const auto& rj : j.at("rounds")) {
        Round r;
        r.question = rj.at("question").get<std::string>();
        r.answer = rj.at("answer").get<std::string>();
        r.candidates = rj.at("candidates").get<std::vector<std::string>>();
        r.gt_index = rj.at("gt_index").get<int>();
        d.rounds.push_back(std::move(r));
      }
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(name + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Dialog> load_dialogs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  return parse_dialogs(is, path);
}

// ---------------------------------------------------------------------------
// feature file: binary container
//   magic "DUETFEAT" | u32 version | u32 d_img | u32 k | u32 count
//   per image: u32 id_len | id bytes | f64 values[d_img * k] (row-major, LE)
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kFeatureMagic[8] = {'D', 'U', 'E', 'T', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;
}  // namespace detail

inline void save_features(const std::string& path, const FeatureStore& store) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(detail::kFeatureMagic, sizeof(detail::kFeatureMagic));
  detail::write_le(os, detail::kFeatureVersion);
  detail::write_le(os, static_cast<std::uint32_t>(store.d_img));
  detail::write_le(os, static_cast<std::uint32_t>(store.regions));
  detail::write_le(os, static_cast<std::uint32_t>(store.features.size()));
  // map order is unspecified; write sorted for reproducible bytes
  std::map<std::string, const Tensor*> sorted;
  for (const auto& [id, t] : store.features) sorted.emplace(id, &t);
  for (const auto& [id, t] : sorted) {
    detail::write_le(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (double v : t->values()) detail::write_le(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("write failed for " + path);
}

inline FeatureStore load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kFeatureMagic, 8) != 0) throw ParseError(path + ": not a feature file");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != detail::kFeatureVersion) throw ParseError(path + ": unsupported version");
  const auto d_img = detail::read_le<std::uint32_t>(is);
  const auto k = detail::read_le<std::uint32_t>(is);
  const auto count = detail::read_le<std::uint32_t>(is);
  if (d_img == 0 || k == 0) throw ParseError(path + ": zero feature dims");

  FeatureStore store;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto id_len = detail::read_le<std::uint32_t>(is);
    std::string id(id_len, '\0');
    is.read(id.data(), id_len);
    std::vector<double> values(static_cast<std::size_t>(d_img) * k);
    for (auto& v : values) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
    if (!is) throw ParseError(path + ": truncated at image " + std::to_string(e));
    store.put(id, Tensor::from({d_img, k}, std::move(values)));
  }
  return store;
}

inline Dataset load_dataset(const std::string& dialog_path, const std::string& feature_path,
                            const Vocabulary& vocab) {
  return make_dataset(load_dialogs(dialog_path), load_features(feature_path), vocab);
}

// ---------------------------------------------------------------------------
// vocabulary file (JSON array, index order)
// ---------------------------------------------------------------------------

inline void save_vocab(const std::string& path, const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  nlohmann::json j;
  j["tokens"] = vocab.tokens();
  os << j.dump(2) << "\n";
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
    auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<start>" || tokens[2] != "<end>" ||
        tokens[3] != "<unk>")
      throw ParseError(path + ": reserved tokens missing or reordered");
    Vocabulary v;
    for (std::size_t i = 4; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// synthetic dialog corpus
// ---------------------------------------------------------------------------

// Template-grammar corpus where every answer is a deterministic function of
// the image regions, the question template, and (for follow-up rounds) one
// earlier round, so solving it requires both image attention and history.
//
// Each image has k regions with distinct shapes; a region's feature vector is
// the one-hot pair (color, shape) plus bounded noise. Odd rounds ask the
// color of a shape, even rounds ask whether the color just discussed is dark.
struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_dialogs = 200;
  std::size_t vocab_size = 50;
  std::size_t k = 4;
  std::size_t n_candidates = 20;
  std::size_t n_rounds = 6;
};

struct SynthOutput {
  std::vector<Dialog> dialogs;
  FeatureStore features;
  Vocabulary vocab;
  std::vector<std::string> color_words;
  std::vector<std::string> shape_words;
  double noise = 0.1;
};

namespace detail {
inline const std::vector<std::string>& synth_template_words() {
  static const std::vector<std::string> words{"there", "is", "a", "what", "color",
                                              "the",   "it", "dark", "yes", "no"};
  return words;
}
}  // namespace detail

inline SynthOutput synth_generate(const SynthConfig& cfg) {
  if (cfg.n_dialogs == 0 || cfg.k == 0 || cfg.n_rounds == 0) throw ContractError("synth sizes must be positive");
  if (cfg.n_candidates < 2) throw ContractError("synth needs at least 2 candidates");
  const std::size_t n_template = detail::synth_template_words().size();
  if (cfg.vocab_size < 4 + n_template + 4)
    throw ContractError("vocab_size must be at least " + std::to_string(4 + n_template + 4));

  const std::size_t n_content = cfg.vocab_size - 4 - n_template;
  const std::size_t n_colors = (n_content + 1) / 2;
  const std::size_t n_shapes = n_content / 2;
  if (n_shapes < cfg.k)
    throw ContractError("vocab too small for k=" + std::to_string(cfg.k) + " distinct shapes per image");

  SynthOutput out;
  for (std::size_t i = 0; i < n_colors; ++i) out.color_words.push_back("color" + std::to_string(i));
  for (std::size_t i = 0; i < n_shapes; ++i) out.shape_words.push_back("shape" + std::to_string(i));

  std::vector<std::string> vocab_words = detail::synth_template_words();
  vocab_words.insert(vocab_words.end(), out.color_words.begin(), out.color_words.end());
  vocab_words.insert(vocab_words.end(), out.shape_words.begin(), out.shape_words.end());
  out.vocab = Vocabulary::from_tokens(vocab_words);

  const std::size_t d_img = n_colors + n_shapes;
  const auto dark = [](std::size_t color) { return color % 2 == 0; };

  Rng rng(cfg.seed);
  for (std::size_t di = 0; di < cfg.n_dialogs; ++di) {
    Dialog d;
    d.image_id = "img" + std::to_string(di);

    // distinct shapes per region via partial Fisher-Yates
    std::vector<std::size_t> shape_pool(n_shapes);
    for (std::size_t i = 0; i < n_shapes; ++i) shape_pool[i] = i;
    std::vector<std::size_t> region_shape(cfg.k), region_color(cfg.k);
    for (std::size_t j = 0; j < cfg.k; ++j) {
      const std::size_t pick = j + static_cast<std::size_t>(rng.below(n_shapes - j));
      std::swap(shape_pool[j], shape_pool[pick]);
      region_shape[j] = shape_pool[j];
      region_color[j] = static_cast<std::size_t>(rng.below(n_colors));
    }

    std::vector<double> feat(d_img * cfg.k);
    for (std::size_t j = 0; j < cfg.k; ++j)
      for (std::size_t i = 0; i < d_img; ++i) {
        double v = rng.uniform(-0.1, 0.1);
        if (i == region_color[j]) v += 1.0;
        if (i == n_colors + region_shape[j]) v += 1.0;
        feat[i * cfg.k + j] = v;
      }
    out.features.put(d.image_id, Tensor::from({d_img, cfg.k}, std::move(feat)));

    d.caption = "there is a " + out.color_words[region_color[0]] + " " + out.shape_words[region_shape[0]];

    std::size_t last_region = 0;
    for (std::size_t r = 1; r <= cfg.n_rounds; ++r) {
      Round round;
      if (r % 2 == 1) {
        const std::size_t j = ((r - 1) / 2) % cfg.k;
        last_region = j;
        round.question = "what color is the " + out.shape_words[region_shape[j]];
        round.answer = out.color_words[region_color[j]];
      } else {
        round.question = "is it dark";
        round.answer = dark(region_color[last_region]) ? "yes" : "no";
      }

      // candidate pool: every possible answer string
      std::vector<std::string> pool = out.color_words;
      pool.push_back("yes");
      pool.push_back("no");
      round.candidates.assign(cfg.n_candidates, "");
      const auto gt_pos = static_cast<std::size_t>(rng.below(cfg.n_candidates));
      for (std::size_t ci = 0; ci < cfg.n_candidates; ++ci) {
        if (ci == gt_pos) {
          round.candidates[ci] = round.answer;
          continue;
        }
        std::string pick = pool[static_cast<std::size_t>(rng.below(pool.size()))];
        while (pick == round.answer) pick = pool[static_cast<std::size_t>(rng.below(pool.size()))];
        round.candidates[ci] = pick;
      }
      round.gt_index = static_cast<int>(gt_pos);
      d.rounds.push_back(std::move(round));
    }
    out.dialogs.push_back(std::move(d));
  }
  return out;
}

// Scripted rule with full knowledge of the generating process; achieves
// R@1 = 1.0 on synth data because the bounded noise never flips a one-hot.
inline std::string synth_oracle_answer(const SynthOutput& task, const Dialog& d, std::size_t round_idx) {
  const std::size_t n_colors = task.color_words.size();
  const std::size_t n_shapes = task.shape_words.size();
  const Tensor& feat = task.features.get(d.image_id);
  const std::size_t k = feat.dim(1);

  auto region_argmax = [&](std::size_t j, std::size_t lo, std::size_t n) {
    std::size_t best = 0;
    double best_v = feat.at(lo, j);
    for (std::size_t i = 1; i < n; ++i)
      if (feat.at(lo + i, j) > best_v) {
        best_v = feat.at(lo + i, j);
        best = i;
      }
    return best;
  };

  const std::size_t r = round_idx + 1;
  if (r % 2 == 1) {
    const auto words = tokenize(d.rounds[round_idx].question);
    const std::string& shape_word = words.back();
    for (std::size_t j = 0; j < k; ++j)
      if (task.shape_words[region_argmax(j, n_colors, n_shapes)] == shape_word)
        return task.color_words[region_argmax(j, 0, n_colors)];
    throw ContractError("oracle: no region with shape " + shape_word);
  }
  // follow-up: the color answered in the previous round decides dark/light
  const std::string prev_color = d.rounds[round_idx - 1].answer;
  for (std::size_t i = 0; i < n_colors; ++i)
    if (task.color_words[i] == prev_color) return i % 2 == 0 ? "yes" : "no";
  throw ContractError("oracle: unknown color " + prev_color);
}

}  // namespace duet
