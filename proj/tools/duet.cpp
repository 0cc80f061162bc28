// duet: operator entry point for the grounded-dialog training pipeline.
//
// Subcommands: build-vocab, synth-data, pretrain-g, pretrain-d, transfer,
// evaluate, generate. Every run writes its fully-resolved config into the
// run directory so any result can be reproduced bit-for-bit from it.

#include <CLI11.hpp>

#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "duet/duet.hpp"

namespace fs = std::filesystem;
using namespace duet;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  std::string out;
};

void attach_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (flat key-value)");
  cmd->add_option("--set", args.sets, "override: key=value, repeatable")->take_all();
  cmd->add_option("--seed", args.seed, "RNG seed override");
  cmd->add_option("--out", args.out, "run directory (default: runs/<cmd>-<timestamp>-s<seed>)");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg.load_file(args.config_path);
  for (const auto& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractError("--set needs key=value, got \"" + kv + "\"");
    cfg.set_kv(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  return cfg;
}

fs::path make_run_dir(const CommonArgs& args, const RunConfig& cfg, const std::string& command) {
  fs::path dir;
  if (!args.out.empty()) {
    dir = args.out;
  } else {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&now));
    dir = fs::path("runs") / (command + "-" + stamp + "-s" + std::to_string(cfg.seed));
  }
  fs::create_directories(dir);
  std::ofstream os(dir / "config.json");
  os << cfg.to_json().dump(2) << "\n";
  return dir;
}

void require_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw ContractError("config key \"" + key + "\" is required for this command");
  if (!fs::exists(path)) throw ContractError("config key \"" + key + "\": no such file " + path);
}

struct LoadedData {
  Vocabulary vocab;
  Dataset dataset;
};

LoadedData load_data(const RunConfig& cfg) {
  require_file(cfg.vocab, "vocab");
  require_file(cfg.dialogs, "dialogs");
  require_file(cfg.features, "features");
  LoadedData out{load_vocab(cfg.vocab), {}};
  out.dataset = load_dataset(cfg.dialogs, cfg.features, out.vocab);
  return out;
}

ModelDims dims_of(const RunConfig& cfg, const Vocabulary& vocab) {
  return ModelDims{cfg.embed, cfg.hidden, static_cast<std::size_t>(vocab.size())};
}

std::vector<std::vector<double>> snapshot_params(const ParamList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

void restore_params(ParamList& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto vals = params[i].tensor.values_mut();
    std::copy(snap[i].begin(), snap[i].end(), vals.begin());
  }
}

// Metrics sink that appends JSONL and tracks the best G/D checkpoints by
// validation MRR.
class MetricsWriter {
 public:
  MetricsWriter(const fs::path& dir) : os_(dir / "metrics.jsonl", std::ios::app) {
    if (!os_) throw IoError("cannot open metrics log in " + dir.string());
  }

  void operator()(const MetricsRecord& rec) {
    os_ << metrics_record_to_json(rec).dump() << "\n";
    os_.flush();
    std::cout << "[" << rec.phase << "] epoch " << rec.epoch << " " << rec.model
              << " val MRR " << rec.report.mrr << " R@1 " << rec.report.r_at_1;
    if (rec.has_loss) std::cout << " loss " << rec.mean_loss;
    std::cout << "\n";
  }

 private:
  std::ofstream os_;
};

RetrievalReport run_report(const RunConfig& cfg, const LoadedData& data, const std::string& which,
                           const GeneratorParams* g, const DiscriminatorParams* d) {
  DataSplit split = split_rounds(data.dataset, cfg.val_fraction);
  std::vector<RoundRef> refs;
  if (cfg.eval_split == "val") refs = split.val;
  else if (cfg.eval_split == "train") refs = split.train;
  else if (cfg.eval_split == "all") {
    refs = split.train;
    refs.insert(refs.end(), split.val.begin(), split.val.end());
  } else {
    throw ContractError("eval_split must be val, train or all");
  }
  if (which == "g")
    return evaluate_generator_on(data.dataset, refs, *g, cfg.parse_score_norm(), cfg.parse_tie_policy());
  return evaluate_discriminator_on(data.dataset, refs, *d, cfg.parse_tie_policy());
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_build_vocab(const RunConfig& cfg, const fs::path& dir) {
  require_file(cfg.dialogs, "dialogs");
  auto dialogs = load_dialogs(cfg.dialogs);
  std::vector<std::string> corpus;
  for (const auto& d : dialogs) {
    corpus.push_back(d.caption);
    for (const auto& r : d.rounds) {
      corpus.push_back(r.question);
      corpus.push_back(r.answer);
    }
  }
  Vocabulary v = build_vocab(corpus, static_cast<int>(cfg.min_count));
  save_vocab((dir / "vocab.json").string(), v);
  std::cout << "vocabulary: " << v.size() << " tokens (min_count " << cfg.min_count << ") -> "
            << (dir / "vocab.json").string() << "\n";
  return 0;
}

int cmd_synth_data(const RunConfig& cfg, const fs::path& dir) {
  SynthConfig sc{cfg.seed,    cfg.synth_dialogs,    cfg.synth_vocab,
                 cfg.synth_k, cfg.synth_candidates, cfg.synth_rounds};
  SynthOutput out = synth_generate(sc);
  save_dialogs((dir / "dialogs.jsonl").string(), out.dialogs);
  save_features((dir / "features.bin").string(), out.features);
  save_vocab((dir / "vocab.json").string(), out.vocab);
  std::cout << "synthetic corpus: " << out.dialogs.size() << " dialogs, vocab " << out.vocab.size()
            << ", " << out.features.regions << " regions x " << out.features.d_img << " dims -> "
            << dir.string() << "\n";
  return 0;
}

int cmd_pretrain_g(const RunConfig& cfg, const fs::path& dir) {
  LoadedData data = load_data(cfg);
  Trainer trainer(data.dataset, dims_of(cfg, data.vocab), cfg.transfer_config());
  if (!cfg.init_g.empty()) {
    require_file(cfg.init_g, "init_g");
    ParamList gp = trainer.generator().parameters();
    load_into(gp, cfg.init_g);
  }

  MetricsWriter writer(dir);
  double best_mrr = -1.0;
  std::vector<std::vector<double>> best;
  trainer.pretrain_generator([&](const MetricsRecord& rec) {
    writer(rec);
    if (rec.model == "g" && rec.report.mrr > best_mrr) {
      best_mrr = rec.report.mrr;
      best = snapshot_params(trainer.generator().parameters());
    }
  });

  save_checkpoint((dir / "g_mle.ckpt").string(), trainer.generator().parameters());
  if (!best.empty()) {
    ParamList gp = trainer.generator().parameters();
    auto final_snap = snapshot_params(gp);
    restore_params(gp, best);
    save_checkpoint((dir / "g_mle_best.ckpt").string(), gp);
    restore_params(gp, final_snap);
  }
  std::cout << "saved " << (dir / "g_mle.ckpt").string() << " (best val MRR " << best_mrr << ")\n";
  return 0;
}

int cmd_pretrain_d(const RunConfig& cfg, const fs::path& dir) {
  LoadedData data = load_data(cfg);
  Trainer trainer(data.dataset, dims_of(cfg, data.vocab), cfg.transfer_config());
  if (!cfg.init_d.empty()) {
    require_file(cfg.init_d, "init_d");
    ParamList dp = trainer.discriminator().parameters();
    load_into(dp, cfg.init_d);
  }

  MetricsWriter writer(dir);
  double best_mrr = -1.0;
  std::vector<std::vector<double>> best;
  trainer.pretrain_discriminator([&](const MetricsRecord& rec) {
    writer(rec);
    if (rec.model == "d" && rec.report.mrr > best_mrr) {
      best_mrr = rec.report.mrr;
      best = snapshot_params(trainer.discriminator().parameters());
    }
  });

  save_checkpoint((dir / "d_np.ckpt").string(), trainer.discriminator().parameters());
  if (!best.empty()) {
    ParamList dp = trainer.discriminator().parameters();
    auto final_snap = snapshot_params(dp);
    restore_params(dp, best);
    save_checkpoint((dir / "d_np_best.ckpt").string(), dp);
    restore_params(dp, final_snap);
  }
  std::cout << "saved " << (dir / "d_np.ckpt").string() << " (best val MRR " << best_mrr << ")\n";
  return 0;
}

int cmd_transfer(const RunConfig& cfg, const fs::path& dir) {
  LoadedData data = load_data(cfg);
  require_file(cfg.init_g, "init_g");
  require_file(cfg.init_d, "init_d");
  Trainer trainer(data.dataset, dims_of(cfg, data.vocab), cfg.transfer_config());
  {
    ParamList gp = trainer.generator().parameters();
    load_into(gp, cfg.init_g);
    ParamList dp = trainer.discriminator().parameters();
    load_into(dp, cfg.init_d);
  }

  MetricsWriter writer(dir);
  double best_mrr = -1.0;
  std::vector<std::vector<double>> best;
  trainer.transfer_phase([&](const MetricsRecord& rec) {
    writer(rec);
    if (rec.model == "g" && rec.report.mrr > best_mrr) {
      best_mrr = rec.report.mrr;
      best = snapshot_params(trainer.generator().parameters());
    }
  });

  save_checkpoint((dir / "g_dis.ckpt").string(), trainer.generator().parameters());
  if (!best.empty()) {
    ParamList gp = trainer.generator().parameters();
    auto final_snap = snapshot_params(gp);
    restore_params(gp, best);
    save_checkpoint((dir / "g_dis_best.ckpt").string(), gp);
    restore_params(gp, final_snap);
  }
  if (cfg.transfer_config().mode != TransferMode::Transfer)
    save_checkpoint((dir / "d_final.ckpt").string(), trainer.discriminator().parameters());
  std::cout << "saved " << (dir / "g_dis.ckpt").string() << " (mode " << cfg.mode << ", best val MRR "
            << best_mrr << ")\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const fs::path& dir) {
  LoadedData data = load_data(cfg);
  RetrievalReport report;
  std::string label;
  if (cfg.eval_model == "g") {
    require_file(cfg.init_g, "init_g");
    GeneratorParams g = GeneratorParams::create(cfg.embed, cfg.hidden, data.dataset.features.d_img,
                                                static_cast<std::size_t>(data.vocab.size()), 0);
    ParamList gp = g.parameters();
    load_into(gp, cfg.init_g);
    report = run_report(cfg, data, "g", &g, nullptr);
    label = "G (" + cfg.eval_split + ")";
  } else if (cfg.eval_model == "d") {
    require_file(cfg.init_d, "init_d");
    DiscriminatorParams d = DiscriminatorParams::create(cfg.embed, cfg.hidden, data.dataset.features.d_img,
                                                        static_cast<std::size_t>(data.vocab.size()), 0);
    ParamList dp = d.parameters();
    load_into(dp, cfg.init_d);
    report = run_report(cfg, data, "d", nullptr, &d);
    label = "D (" + cfg.eval_split + ")";
  } else {
    throw ContractError("eval_model must be g or d");
  }

  const std::string table = format_report(report, label);
  std::cout << table;
  std::ofstream ts(dir / "report.txt");
  ts << table;
  nlohmann::json j{{"model", cfg.eval_model},
                   {"split", cfg.eval_split},
                   {"tie_policy", cfg.tie_policy},
                   {"score_norm", cfg.score_norm},
                   {"metrics", report_to_json(report)}};
  std::ofstream js(dir / "report.json");
  js << j.dump(2) << "\n";
  return 0;
}

int cmd_generate(const RunConfig& cfg, const fs::path& dir) {
  LoadedData data = load_data(cfg);
  require_file(cfg.init_g, "init_g");
  GeneratorParams g = GeneratorParams::create(cfg.embed, cfg.hidden, data.dataset.features.d_img,
                                              static_cast<std::size_t>(data.vocab.size()), 0);
  ParamList gp = g.parameters();
  load_into(gp, cfg.init_g);

  if (cfg.generate_dialog >= data.dataset.dialogs.size())
    throw ContractError("generate_dialog index out of range");
  const Dialog& dlg = data.dataset.dialogs[cfg.generate_dialog];

  std::ofstream os(dir / "generations.jsonl");
  GumbelConfig gcfg{cfg.tau, cfg.max_answer_len, cfg.seed};
  for (std::size_t ri = 0; ri < dlg.rounds.size(); ++ri) {
    EncoderInput in = make_encoder_input(dlg, data.dataset.features, ri);
    DialogEncoding enc = encode_round(in, g.embedding, g.encoder);
    std::cout << dlg.image_id << " round " << ri << "\n  Q:  " << dlg.rounds[ri].question
              << "\n  GT: " << dlg.rounds[ri].answer << "\n";
    nlohmann::json rec{{"image_id", dlg.image_id},
                       {"round", ri},
                       {"question", dlg.rounds[ri].question},
                       {"gt_answer", dlg.rounds[ri].answer}};
    auto& samples = rec["samples"] = nlohmann::json::array();
    for (std::size_t s = 0; s < cfg.samples; ++s) {
      // one noise stream per sample index: same config reproduces the set
      Rng rng(derive_seed(cfg.seed, 0x5A, s * 1000 + ri));
      SampledAnswer ans = sample_answer(enc.embedding, g, gcfg, rng);
      const std::string text = data.vocab.decode(ans.tokens);
      std::cout << "  z" << (s + 1) << ": " << text << "\n";
      samples.push_back({{"noise_seed_index", s}, {"text", text}});
    }
    os << rec.dump() << "\n";
  }
  std::cout << "wrote " << (dir / "generations.jsonl").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"duet: discriminator-to-generator knowledge transfer for grounded dialog"};
  app.require_subcommand(1);

  CommonArgs args;
  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&, const fs::path&);
  };
  const Command commands[] = {
      {"build-vocab", "build a min-count vocabulary from a dialog file", cmd_build_vocab},
      {"synth-data", "generate the synthetic benchmark corpus", cmd_synth_data},
      {"pretrain-g", "phase 1: MLE pretraining of the generator", cmd_pretrain_g},
      {"pretrain-d", "phase 2: N-pair pretraining of the discriminator", cmd_pretrain_d},
      {"transfer", "phase 3: knowledge transfer (or gan1/gan2 ablation)", cmd_transfer},
      {"evaluate", "retrieval metrics for a checkpoint", cmd_evaluate},
      {"generate", "sample answers with distinct noise draws", cmd_generate},
  };
  for (const auto& c : commands) attach_common(app.add_subcommand(c.name, c.help), args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = resolve_config(args);
    const std::string name = app.get_subcommands().front()->get_name();
    const fs::path dir = make_run_dir(args, cfg, name);
    for (const auto& c : commands)
      if (name == c.name) return c.fn(cfg, dir);
    std::cerr << "unknown command " << name << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
