#include "llama/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "llama/checkpoint.hpp"
#include "llama/errors.hpp"
#include "llama/eval.hpp"
#include "llama/footprint.hpp"
#include "llama/generator.hpp"
#include "llama/model.hpp"
#include "llama/tokenizer.hpp"
#include "llama/trainer.hpp"

namespace llama {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr const char* kDefaultCheckpoint = "model.llmc";

struct Options {
  std::string config;
  std::string checkpoint = kDefaultCheckpoint;
  std::string tokenizer;
  std::string corpus;
  std::string tasks;
  std::string out;
  std::string prompt;
  std::string preset;
  std::string log;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<double> lr;
  std::optional<std::int64_t> batch_tokens;
  std::optional<std::int64_t> seq_len;
  std::optional<std::int64_t> vocab;
  std::optional<double> temperature;
  std::optional<std::int64_t> max_new_tokens;
  std::optional<double> gpu_hours;
  double gpu_watts = 400.0;
  double pue = 1.1;
  double intensity = 0.385;
  std::int64_t log_every = 50;
  bool independent_encoding = false;
};

// Settings assembled from defaults, then the config file, then flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool warmup_set = false;
  bool seq_len_set = false;
  std::int64_t vocab = 512;
  double temperature = 0.0;
  std::int64_t max_new_tokens = 64;
  std::uint64_t seed = 0;
};

std::string read_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing required path for ") + what);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(std::string("cannot read ") + what + " file '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing required path for ") + what);
  if (!std::filesystem::is_regular_file(path)) throw UsageError(std::string(what) + " file '" + path + "' not found");
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << bytes;
  if (!out) throw InputError("failed writing '" + path + "'");
}

template <typename T>
T json_value(const nlohmann::json& j, const std::string& key) {
  try {
    if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError("");
    }
    return j.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

void apply_train_json(const nlohmann::json& doc, RunConfig& rc) {
  if (!doc.is_object()) throw ConfigError("config 'train' must be an object");
  TrainConfig& t = rc.train;
  for (const auto& [key, value] : doc.items()) {
    if (key == "max_lr") t.max_lr = json_value<double>(value, key);
    else if (key == "min_lr_ratio") t.min_lr_ratio = json_value<double>(value, key);
    else if (key == "total_steps") t.total_steps = json_value<std::int64_t>(value, key);
    else if (key == "warmup_steps") {
      t.warmup_steps = json_value<std::int64_t>(value, key);
      rc.warmup_set = true;
    } else if (key == "weight_decay") t.weight_decay = json_value<double>(value, key);
    else if (key == "clip_norm") t.clip_norm = json_value<double>(value, key);
    else if (key == "beta1") t.beta1 = json_value<double>(value, key);
    else if (key == "beta2") t.beta2 = json_value<double>(value, key);
    else if (key == "adam_eps") t.adam_eps = json_value<double>(value, key);
    else if (key == "batch_tokens") t.batch_tokens = json_value<std::int64_t>(value, key);
    else if (key == "seq_len") {
      t.seq_len = json_value<std::int64_t>(value, key);
      rc.seq_len_set = true;
    } else throw ConfigError("unknown config key 'train." + key + "'");
  }
}

RunConfig build_run_config(const Options& o) {
  RunConfig rc;
  rc.model.max_seq_len = 128;
  rc.train.max_lr = 3e-3;
  rc.train.total_steps = 500;
  rc.train.batch_tokens = 1024;

  if (!o.config.empty()) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_file(o.config, "config"));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (key == "model") rc.model = model_config_from_json(value, rc.model);
      else if (key == "train") apply_train_json(value, rc);
      else if (key == "seed") rc.seed = json_value<std::uint64_t>(value, key);
      else if (key == "vocab_size") rc.vocab = json_value<std::int64_t>(value, key);
      else if (key == "temperature") rc.temperature = json_value<double>(value, key);
      else if (key == "max_new_tokens") rc.max_new_tokens = json_value<std::int64_t>(value, key);
      else throw ConfigError("unknown config key '" + key + "'");
    }
  }

  if (o.seed) rc.seed = *o.seed;
  if (o.steps) rc.train.total_steps = *o.steps;
  if (o.lr) rc.train.max_lr = *o.lr;
  if (o.batch_tokens) rc.train.batch_tokens = *o.batch_tokens;
  if (o.seq_len) {
    rc.train.seq_len = *o.seq_len;
    rc.seq_len_set = true;
  }
  if (o.vocab) rc.vocab = *o.vocab;
  if (o.temperature) rc.temperature = *o.temperature;
  if (o.max_new_tokens) rc.max_new_tokens = *o.max_new_tokens;

  rc.train.seed = rc.seed;
  if (!rc.warmup_set) rc.train.warmup_steps = std::min<std::int64_t>(2000, rc.train.total_steps / 10);
  if (rc.temperature < 0) throw ConfigError("temperature must be non-negative");
  if (rc.max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
  return rc;
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Tokenizer resolve_tokenizer(const Options& o, const Checkpoint& ckpt) {
  if (!o.tokenizer.empty()) return Tokenizer::from_string(read_file(o.tokenizer, "tokenizer"));
  if (ckpt.tokenizer) return Tokenizer::from_string(*ckpt.tokenizer);
  throw UsageError("checkpoint carries no tokenizer; pass --tokenizer");
}

int run_tokenizer_train(const Options& o, std::ostream& out) {
  const RunConfig rc = build_run_config(o);
  if (o.out.empty()) throw UsageError("tokenizer-train needs --out");
  const std::string text = read_file(o.corpus, "corpus");
  const Tokenizer tok = Tokenizer::train({text}, rc.vocab);
  tok.save_file(o.out);
  out << "tokenizer: " << tok.vocab_size() << " tokens, " << tok.merges().size() << " merges -> " << o.out << "\n";
  return kExitOk;
}

int run_train(const Options& o, std::ostream& out) {
  RunConfig rc = build_run_config(o);
  const std::string text = read_file(o.corpus, "corpus");
  const Tokenizer tok =
      o.tokenizer.empty() ? Tokenizer::train({text}, rc.vocab) : Tokenizer::from_string(read_file(o.tokenizer, "tokenizer"));
  const auto tokens = tok.encode(text, true);

  rc.model.vocab_size = tok.vocab_size();
  rc.model.validate();
  if (!rc.seq_len_set) {
    rc.train.seq_len = std::min<std::int64_t>(rc.model.max_seq_len, static_cast<std::int64_t>(tokens.size()) - 1);
    if (rc.train.seq_len < 1) throw InputError("corpus encodes to fewer than 2 tokens");
  }
  rc.train.validate();

  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log);
    if (!log) throw InputError("cannot write '" + o.log + "'");
  }
  auto weights = ModelWeights<float>::init(rc.model, rc.seed);
  auto on_step = [&](const LossRecord& r) {
    if (log.is_open()) {
      log << nlohmann::json{{"step", r.step}, {"tokens_seen", r.tokens_seen}, {"loss", r.loss}, {"lr", r.lr},
                            {"grad_norm", r.grad_norm}}
                 .dump()
          << "\n";
    }
    const bool last = r.step + 1 == rc.train.total_steps;
    if (o.log_every > 0 && (r.step % o.log_every == 0 || last)) {
      out << "step " << r.step << " tokens " << r.tokens_seen << " loss " << format_fixed(r.loss, 4) << " lr "
          << r.lr << "\n";
    }
  };
  Trainer trainer(rc.model, weights, rc.train);
  double final_loss = 0.0;
  for (std::int64_t s = 0; s < rc.train.total_steps; ++s) {
    const auto r = trainer.step(tokens);
    final_loss = r.loss;
    on_step(r);
  }
  const std::string path = o.out.empty() ? kDefaultCheckpoint : o.out;
  save_checkpoint(path, Checkpoint{rc.model, trainer.weights(), tok.to_string()});
  out << "saved " << path << " (params " << count_params(rc.model) << ", final loss " << format_fixed(final_loss, 4)
      << ")\n";
  return kExitOk;
}

int run_generate(const Options& o, std::ostream& out) {
  const RunConfig rc = build_run_config(o);
  require_file(o.checkpoint, "checkpoint");
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const Tokenizer tok = resolve_tokenizer(o, ckpt);
  if (tok.vocab_size() != ckpt.config.vocab_size) {
    throw UsageError("tokenizer has " + std::to_string(tok.vocab_size()) + " tokens, checkpoint expects " +
                     std::to_string(ckpt.config.vocab_size));
  }
  SampleParams params;
  params.mode = rc.temperature > 0 ? SampleMode::kTemperature : SampleMode::kGreedy;
  if (rc.temperature > 0) params.temperature = rc.temperature;
  params.max_new_tokens = rc.max_new_tokens;
  params.seed = rc.seed;
  params.validate();
  const auto prompt = tok.encode(o.prompt, true);
  const Generation g = generate(ckpt.config, ckpt.weights, prompt, params, &tok);
  out << o.prompt << g.text << "\n";
  if (!o.out.empty()) write_file(o.out, transcript_record(o.prompt, g, params).dump() + "\n");
  return kExitOk;
}

int run_eval_command(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = build_run_config(o);
  require_file(o.checkpoint, "checkpoint");
  const std::string task_text = read_file(o.tasks, "tasks");
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const Tokenizer tok = resolve_tokenizer(o, ckpt);
  const TaskFile file = parse_tasks(task_text);
  for (const auto& w : file.warnings) err << "warning: " << w << "\n";

  EvalParams params;
  params.max_new_tokens = rc.max_new_tokens;
  params.scoring.joint_encoding = !o.independent_encoding;
  params.model_name = std::filesystem::path(o.checkpoint).filename().string();
  params.task_file_hash = file.hash;
  const EvalReport report = run_eval(LanguageModel{ckpt.config, ckpt.weights, tok}, file.tasks, params);
  const std::string json = to_json(report).dump(2) + "\n";
  if (o.out.empty()) {
    out << json;
  } else {
    write_file(o.out, json);
    out << "accuracy " << format_fixed(report.accuracy, 4) << " (" << report.correct << "/" << report.items.size()
        << ") -> " << o.out << "\n";
  }
  return kExitOk;
}

void print_preset(const ModelPreset& p, std::ostream& out) {
  const auto count = count_params(p.config);
  const double deviation = 100.0 * (static_cast<double>(count) - p.reported_params) / p.reported_params;
  out << p.name << ": params " << count << ", reported " << format_fixed(p.reported_params / 1e9, 1)
      << "B, deviation " << (deviation >= 0 ? "+" : "") << format_fixed(deviation, 2) << "% (vocab "
      << p.config.vocab_size << ")\n";
}

int run_params(const Options& o, std::ostream& out) {
  const RunConfig rc = build_run_config(o);
  if (!o.preset.empty()) {
    print_preset(find_preset(o.preset), out);
  } else if (!o.config.empty()) {
    rc.model.validate();
    out << "params " << count_params(rc.model) << "\n";
  } else {
    for (const auto& p : model_presets()) print_preset(p, out);
  }
  return kExitOk;
}

int run_carbon(const Options& o, std::ostream& out) {
  if (!o.gpu_hours) throw UsageError("carbon needs --gpu-hours");
  FootprintInput input{*o.gpu_hours, o.gpu_watts, o.pue, o.intensity};
  const FootprintReport r = footprint(input);
  out << "energy: " << r.display_mwh << " MWh (" << format_fixed(r.mwh, 4) << ")\n";
  out << "emissions: " << r.display_tco2eq << " tCO2eq (" << format_fixed(r.tco2eq, 4) << ")\n";
  return kExitOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Desk-scale language model toolkit", "llama"};
  app.require_subcommand(1, 1);

  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", o.seed, "Seed for every random draw (default 0)"); };
  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON config; flags override its values");
  };

  auto* tt = app.add_subcommand("tokenizer-train", "Train a byte-fallback BPE tokenizer");
  tt->add_option("--corpus", o.corpus, "UTF-8 training text")->required();
  tt->add_option("--vocab", o.vocab, "Target vocabulary size (default 512, minimum 259)");
  tt->add_option("--out", o.out, "Tokenizer output path")->required();
  add_config(tt);
  add_seed(tt);

  auto* tr = app.add_subcommand("train", "Train a model on a text corpus and write a checkpoint");
  tr->add_option("--corpus", o.corpus, "UTF-8 training text")->required();
  tr->add_option("--tokenizer", o.tokenizer, "Tokenizer file (trained on the corpus when omitted)");
  tr->add_option("--vocab", o.vocab, "Vocabulary size when training a tokenizer (default 512)");
  tr->add_option("--out", o.out, std::string("Checkpoint output path (default ") + kDefaultCheckpoint + ")");
  tr->add_option("--steps", o.steps, "Optimizer steps (default 500)");
  tr->add_option("--lr", o.lr, "Peak learning rate (default 3e-3)");
  tr->add_option("--batch-tokens", o.batch_tokens, "Tokens per step (default 1024)");
  tr->add_option("--seq-len", o.seq_len, "Training window (default min(max_seq_len, corpus tokens - 1))");
  tr->add_option("--log", o.log, "Write one JSON loss record per step to this file");
  tr->add_option("--log-every", o.log_every, "Print progress every N steps (0 disables)");
  add_config(tr);
  add_seed(tr);

  auto* ge = app.add_subcommand("generate", "Continue a prompt with a trained checkpoint");
  ge->add_option("--checkpoint", o.checkpoint, std::string("Checkpoint path (default ") + kDefaultCheckpoint + ")");
  ge->add_option("--tokenizer", o.tokenizer, "Tokenizer file (default: the one stored in the checkpoint)");
  ge->add_option("--prompt", o.prompt, "Prompt text")->required();
  ge->add_option("--temperature", o.temperature, "0 decodes greedily; above 0 samples (default 0)");
  ge->add_option("--max-new-tokens", o.max_new_tokens, "Generation budget (default 64)");
  ge->add_option("--out", o.out, "Write a JSON transcript record here");
  add_config(ge);
  add_seed(ge);

  auto* ev = app.add_subcommand("eval", "Score a JSONL task file");
  ev->add_option("--checkpoint", o.checkpoint, std::string("Checkpoint path (default ") + kDefaultCheckpoint + ")");
  ev->add_option("--tokenizer", o.tokenizer, "Tokenizer file (default: the one stored in the checkpoint)");
  ev->add_option("--tasks", o.tasks, "JSONL task file")->required();
  ev->add_option("--max-new-tokens", o.max_new_tokens, "Generation budget for QA items (default 64)");
  ev->add_flag("--independent-encoding", o.independent_encoding,
               "Encode completions separately from their context");
  ev->add_option("--out", o.out, "Report path (default: stdout)");
  add_config(ev);
  add_seed(ev);

  auto* pa = app.add_subcommand("params", "Count parameters of a preset or configured model");
  pa->add_option("--preset", o.preset, "7B, 13B, 33B or 65B (default: all presets)");
  add_config(pa);
  add_seed(pa);

  auto* ca = app.add_subcommand("carbon", "Training energy and emissions");
  ca->add_option("--gpu-hours", o.gpu_hours, "GPU-hours")->required();
  ca->add_option("--gpu-watts", o.gpu_watts, "GPU power draw in watts (default 400)");
  ca->add_option("--pue", o.pue, "Power usage effectiveness (default 1.1)");
  ca->add_option("--intensity", o.intensity, "Grid intensity in kgCO2e/kWh (default 0.385)");
  add_config(ca);
  add_seed(ca);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  try {
    if (tt->parsed()) return run_tokenizer_train(o, out);
    if (tr->parsed()) return run_train(o, out);
    if (ge->parsed()) return run_generate(o, out);
    if (ev->parsed()) return run_eval_command(o, out, err);
    if (pa->parsed()) return run_params(o, out);
    return run_carbon(o, out);
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: runtime: " << one_line(e.what()) << "\n";
    return kExitRuntime;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace llama
