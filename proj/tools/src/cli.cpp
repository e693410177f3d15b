#include "expnet_cli/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "expnet/data.hpp"
#include "expnet/errors.hpp"
#include "expnet/gradcheck.hpp"
#include "expnet/metrics.hpp"
#include "expnet_cli/run_config.hpp"

namespace fs = std::filesystem;

namespace expnet::cli {

namespace {

/// A check ran to completion and failed.
class CheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("cannot parse " + path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
  static const std::regex pattern(R"((\d+)\.\.(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) throw ConfigError("--objects expects MIN..MAX, got '" + text + "'");
  return {std::stoul(m[1]), std::stoul(m[2])};
}

ModelConfig fit_model_to_data(ModelConfig model, const TrainingData& data) {
  model.vocab_size = data.vocab.size();
  model.d_feature = data.train.front().features.cols();
  model.validate();
  return model;
}

Vocabulary vocab_from_extra(const nlohmann::json& extra, const std::string& ckpt) {
  if (!extra.contains("vocab")) throw DataError("checkpoint " + ckpt + " carries no vocabulary");
  return Vocabulary::from_json(extra["vocab"]);
}

const std::vector<SceneSample>& pick_split(const DataDir& dir, const std::string& split) {
  if (split == "train") return dir.data.train;
  if (split == "val") return dir.data.val;
  if (split == "test") return dir.test;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

struct MetricsSink {
  std::ofstream file;
  std::ostream& out;
  std::string stage;

  MetricsSink(const std::string& path, bool append, std::ostream& o, std::string s) : out(o), stage(std::move(s)) {
    file.open(path, append ? std::ios::app : std::ios::trunc);
    if (!file) throw DataError("cannot write metrics file " + path);
  }

  void operator()(const EpochMetrics& m) {
    auto j = m.to_json();
    j["stage"] = stage;
    file << j.dump() << '\n';
    file.flush();
    out << stage << " epoch " << m.epoch << " train_loss " << fixed(m.train_loss) << " val_loss " << fixed(m.loss)
        << " val_acc " << fixed(m.accuracy) << " val_cider_d " << fixed(m.cider_d) << " lr " << m.lr << '\n';
  }
};

nlohmann::json checkpoint_extra(const std::string& stage, const Vocabulary& vocab, const TrainResult& result,
                                const TrainConfig& config) {
  return {{"stage", stage},
          {"vocab", vocab.to_json()},
          {"best_epoch", result.best_epoch},
          {"best_score", result.best_score},
          {"train_config", to_json(config)}};
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t samples = 2500;
  std::uint64_t seed = 1;
  std::string objects = "1..3";
  double noise = DatasetSpec{}.noise;
  std::size_t refs = DatasetSpec{}.refs_per_scene;
  std::size_t min_freq = 1;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  if (fs::exists(a.out) && !fs::is_directory(a.out)) throw ConfigError(a.out + " exists and is not a directory");
  if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force) {
    throw ConfigError("output directory " + a.out + " is not empty (pass --force to overwrite)");
  }
  fs::create_directories(a.out);
  DatasetSpec spec;
  std::tie(spec.min_objects, spec.max_objects) = parse_range(a.objects);
  spec.noise = a.noise;
  spec.refs_per_scene = a.refs;
  const auto ds = generate_dataset(a.samples, a.seed, spec);
  std::vector<std::string> captions;
  for (const auto& s : ds.train) captions.insert(captions.end(), s.refs.begin(), s.refs.end());
  if (captions.empty()) throw ConfigError("training split is empty; increase --samples");
  const auto vocab = Vocabulary::build(captions, a.min_freq);

  const fs::path dir(a.out);
  write_jsonl((dir / "train.jsonl").string(), ds.train);
  write_jsonl((dir / "val.jsonl").string(), ds.val);
  write_jsonl((dir / "test.jsonl").string(), ds.test);
  write_features((dir / "test.features").string(), ds.test);
  write_json_file((dir / "vocab.json").string(), vocab.to_json());
  out << "train " << ds.train.size() << "\nval " << ds.val.size() << "\ntest " << ds.test.size() << "\nvocab "
      << vocab.size() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::string metrics;
  bool fine_tune = false;
};

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

int cmd_train_xe(const TrainArgs& a, std::ostream& out) {
  auto cfg = config_or_default(a.config);
  const auto dir = load_data_dir(a.data);
  cfg.xe.fine_tune = cfg.xe.fine_tune || a.fine_tune;
  CaptionModel model(fit_model_to_data(cfg.model, dir.data), cfg.seed);
  TrainHooks hooks;
  hooks.state_path = a.out + ".state";
  hooks.resume_path = a.resume;
  MetricsSink sink(a.metrics.empty() ? a.out + ".metrics.jsonl" : a.metrics, !a.resume.empty(), out, "xe");
  hooks.on_epoch = std::ref(sink);
  const auto result = train_xe(model, dir.data, cfg.xe, hooks);
  save_model(a.out, model, checkpoint_extra("xe", dir.data.vocab, result, cfg.xe));
  out << "saved " << a.out << " (best epoch " << result.best_epoch << ")\n";
  return kExitOk;
}

int cmd_train_scst(const TrainArgs& a, std::ostream& out) {
  if (a.resume.empty()) throw ConfigError("train-scst needs --resume pointing at an XE checkpoint");
  auto cfg = config_or_default(a.config);
  const auto dir = load_data_dir(a.data);
  cfg.scst.fine_tune = cfg.scst.fine_tune || a.fine_tune;

  const auto sidecar = read_json_file(a.resume + ".json");
  TrainHooks hooks;
  hooks.state_path = a.out + ".state";
  std::optional<CaptionModel> model;
  if (sidecar.contains("trainer")) {
    model.emplace(model_config_from_json(sidecar.at("model")), cfg.seed);
    hooks.resume_path = a.resume;
  } else {
    nlohmann::json extra;
    model.emplace(load_model(a.resume, &extra));
    if (extra.value("stage", std::string()) != "xe") throw ConfigError(a.resume + " is not an XE checkpoint");
    if (!(vocab_from_extra(extra, a.resume) == dir.data.vocab)) {
      throw ConfigError("vocabulary of " + a.resume + " differs from " + a.data + "/vocab.json");
    }
  }
  const auto idf = build_idf(reference_words(dir.data.train));
  MetricsSink sink(a.metrics.empty() ? a.out + ".metrics.jsonl" : a.metrics, !hooks.resume_path.empty(), out, "scst");
  hooks.on_epoch = std::ref(sink);
  const auto result = train_scst(*model, dir.data, cfg.scst, &idf, hooks);
  save_model(a.out, *model, checkpoint_extra("scst", dir.data.vocab, result, cfg.scst));
  out << "saved " << a.out << " (best epoch " << result.best_epoch << ")\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "test";
  std::size_t beam = 2;
};

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
  if (a.beam < 1) throw ConfigError("--beam must be at least 1");
  const auto model = load_model(a.ckpt);
  const auto dir = load_data_dir(a.data);
  const auto& samples = pick_split(dir, a.split);
  const auto e = evaluate(model, samples, dir.data.vocab, a.beam);
  out << nlohmann::json{{"split", a.split},   {"images", samples.size()}, {"beam", a.beam},
                        {"cider_d", e.cider_d}, {"bleu1", e.bleu1},         {"bleu4", e.bleu4},
                        {"loss", e.loss},       {"accuracy", e.accuracy}}
             .dump()
      << '\n';
  return kExitOk;
}

struct CaptionArgs {
  std::string ckpt;
  std::string features;
  std::size_t beam = 2;
};

int cmd_caption(const CaptionArgs& a, std::ostream& out) {
  if (a.beam < 1) throw ConfigError("--beam must be at least 1");
  nlohmann::json extra;
  const auto model = load_model(a.ckpt, &extra);
  const auto vocab = vocab_from_extra(extra, a.ckpt);
  for (const auto& s : load_features(a.features)) {
    out << s.id << '\t' << vocab.decode(model.beam_search(s.features, a.beam)) << '\n';
  }
  return kExitOk;
}

int cmd_grad_check(const std::string& config_path, std::ostream& out) {
  const auto cfg = config_or_default(config_path);
  const auto report = check_model_gradients(tiny_model_config(), cfg.grad_check);
  for (const auto& p : report.parameters) {
    out << std::left << std::setw(44) << p.name << " entries " << std::setw(4) << p.entries << " max_rel_error "
        << std::scientific << std::setprecision(3) << p.max_rel_error << std::defaultfloat << '\n';
  }
  out << "max_rel_error " << std::scientific << std::setprecision(3) << report.max_rel_error << std::defaultfloat
      << " tolerance " << cfg.grad_check.tolerance << " seconds " << fixed(report.seconds, 2) << '\n';
  if (!report.passed) throw CheckFailure("gradient check failed");
  out << "gradient check passed\n";
  return kExitOk;
}

struct AblateArgs {
  std::string config;
  std::string data;
  std::string grid = "base,static64,dynamic1,dynamic16";
  std::string out;
  std::size_t epochs = 0;
};

std::string kind_label(LayerKind layer, const ExpansionMode& mode) {
  if (layer == LayerKind::BaselineAttention) return "base";
  return mode.kind == ExpansionKind::Static ? "static" : "dynamic";
}

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  auto cfg = config_or_default(a.config);
  if (a.epochs) cfg.xe.epochs = a.epochs;
  const auto cells = parse_grid(a.grid);
  const auto dir = load_data_dir(a.data);
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw DataError("cannot write " + a.out);
    file << kAblationHeader << '\n';
  }
  out << kAblationHeader << '\n';
  std::vector<std::pair<double, std::string>> ranking;
  for (const auto& cell : cells) {
    const auto mc = cell.apply(fit_model_to_data(cfg.model, dir.data));
    CaptionModel model(mc, cfg.seed);
    train_xe(model, dir.data, cfg.xe);
    const auto e = evaluate(model, dir.data.val, dir.data.vocab, cfg.beam);
    std::ostringstream row;
    row << kind_label(mc.enc_layer_kind, mc.enc_mode) << ','
        << kind_label(mc.dec_layer_kind, mc.dec_mode()) << ','
        << (mc.enc_layer_kind == LayerKind::Expansion ? mc.enc_mode.n_e : 0) << ','
        << (mc.dec_layer_kind == LayerKind::Expansion ? mc.dec_n_e : 0) << ',' << fixed(e.cider_d, 6) << ','
        << fixed(e.bleu4, 6);
    out << row.str() << '\n';
    if (file) file << row.str() << '\n';
    ranking.emplace_back(e.cider_d, cell.label);
  }
  std::stable_sort(ranking.begin(), ranking.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
  out << "ordering by cider_d:";
  for (std::size_t i = 0; i < ranking.size(); ++i) out << (i ? " > " : " ") << ranking[i].second;
  out << '\n';
  return kExitOk;
}

}  // namespace

ModelConfig AblationCell::apply(ModelConfig base) const {
  base.enc_layer_kind = enc_layer;
  if (enc_layer == LayerKind::Expansion) base.enc_mode = enc_mode;
  base.dec_layer_kind = dec_layer;
  if (dec_layer == LayerKind::Expansion) base.dec_n_e = dec_n_e;
  base.validate();
  return base;
}

std::vector<AblationCell> parse_grid(const std::string& spec) {
  static const std::regex side(R"((base)|(static|dynamic)(\d+))", std::regex::icase);
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  std::vector<AblationCell> cells;
  std::stringstream list(spec);
  std::string item;
  while (std::getline(list, item, ',')) {
    item = lower(item);
    if (item.empty()) throw ConfigError("empty cell in grid '" + spec + "'");
    AblationCell cell;
    cell.label = item;
    const auto slash = item.find('/');
    const std::string enc = item.substr(0, slash);
    const std::string dec = slash == std::string::npos ? "base" : item.substr(slash + 1);
    std::smatch m;
    if (!std::regex_match(enc, m, side)) throw ConfigError("cannot parse grid cell '" + item + "'");
    if (m[2].matched) {
      cell.enc_layer = LayerKind::Expansion;
      cell.enc_mode = {m[2] == "static" ? ExpansionKind::Static : ExpansionKind::DynamicBidirectional,
                       std::stoul(m[3])};
      if (cell.enc_mode.n_e == 0) throw ConfigError("grid cell '" + item + "' has N_E = 0");
    }
    if (!std::regex_match(dec, m, side)) throw ConfigError("cannot parse grid cell '" + item + "'");
    if (m[2].matched) {
      if (m[2] == "static") throw ConfigError("grid cell '" + item + "': a decoder cannot use static expansion");
      cell.dec_layer = LayerKind::Expansion;
      cell.dec_n_e = std::stoul(m[3]);
      if (cell.dec_n_e == 0) throw ConfigError("grid cell '" + item + "' has N_E = 0");
    }
    cells.push_back(cell);
  }
  if (cells.empty()) throw ConfigError("ablation grid is empty");
  return cells;
}

DataDir load_data_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory " + dir + " does not exist");
  const fs::path root(dir);
  for (const char* name : {"train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"}) {
    if (!fs::exists(root / name)) throw DataError("data file " + (root / name).string() + " does not exist");
  }
  DataDir out;
  out.data.train = read_jsonl((root / "train.jsonl").string());
  out.data.val = read_jsonl((root / "val.jsonl").string());
  out.test = read_jsonl((root / "test.jsonl").string());
  out.data.vocab = Vocabulary::from_json(read_json_file((root / "vocab.json").string()));
  if (out.data.train.empty()) throw DataError("training split in " + dir + " is empty");
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Expansion-network image captioning toolkit", "expnet"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic scene/caption dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--samples", gen.samples, "Number of scenes")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--objects", gen.objects, "Objects per scene as MIN..MAX")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Feature noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--refs", gen.refs, "Reference captions per scene (1-5)")->capture_default_str();
  gen_cmd->add_option("--min-freq", gen.min_freq, "Vocabulary frequency threshold")->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs xe, scst;
  auto add_train = [&](const char* name, const char* help, TrainArgs& t) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", t.config, "Run config JSON");
    cmd->add_option("--data", t.data, "Dataset directory")->required();
    cmd->add_option("--out", t.out, "Output checkpoint path")->required();
    cmd->add_option("--resume", t.resume, "Checkpoint or trainer state to resume from");
    cmd->add_option("--metrics", t.metrics, "Metrics JSON-lines path (default OUT.metrics.jsonl)");
    cmd->add_flag("--fine-tune", t.fine_tune, "Append the fixed small learning-rate phase");
    return cmd;
  };
  auto* xe_cmd = add_train("train-xe", "Cross-entropy training", xe);
  auto* scst_cmd = add_train("train-scst", "Self-critical CIDEr-D optimization", scst);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a split");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--beam", ev.beam, "Beam width")->capture_default_str();

  CaptionArgs cap;
  auto* cap_cmd = app.add_subcommand("caption", "Caption every image of a feature container");
  cap_cmd->add_option("--ckpt", cap.ckpt, "Model checkpoint")->required();
  cap_cmd->add_option("--features", cap.features, "Feature container file")->required();
  cap_cmd->add_option("--beam", cap.beam, "Beam width")->capture_default_str();

  std::string grad_config;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient check on the tiny model");
  grad_cmd->add_option("--config", grad_config, "Run config JSON");

  AblateArgs abl;
  auto* abl_cmd = app.add_subcommand("ablate", "Train and score every cell of a layer-kind grid");
  abl_cmd->add_option("--config", abl.config, "Run config JSON");
  abl_cmd->add_option("--data", abl.data, "Dataset directory")->required();
  abl_cmd->add_option("--grid", abl.grid, "Comma-separated cells ENC[/DEC]")->capture_default_str();
  abl_cmd->add_option("--out", abl.out, "CSV output path");
  abl_cmd->add_option("--epochs", abl.epochs, "XE epochs per cell (overrides config)");

  // CLI11 consumes arguments from the back and expects no program name.
  std::vector<std::string> reversed;
  if (args.size() > 1) reversed.assign(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out);
    if (xe_cmd->parsed()) return cmd_train_xe(xe, out);
    if (scst_cmd->parsed()) return cmd_train_scst(scst, out);
    if (eval_cmd->parsed()) return cmd_evaluate(ev, out);
    if (cap_cmd->parsed()) return cmd_caption(cap, out);
    if (grad_cmd->parsed()) return cmd_grad_check(grad_config, out);
    if (abl_cmd->parsed()) return cmd_ablate(abl, out);
  } catch (const CheckFailure& e) {
    err << "check failed: " << e.what() << '\n';
    return kExitCheck;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    err << "data does not fit the model: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "filesystem error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace expnet::cli
