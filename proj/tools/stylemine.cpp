// Command-line front end. Every run-configuration key doubles as a
// --key=value flag; --config=FILE loads a flat JSON document first and
// explicit flags override it.
//
// Exit codes: 0 success, 1 contract/config error, 2 format error,
// 3 ordering-verdict failure (compare-strategies) .

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "stylemine/data.hpp"
#include "stylemine/harness.hpp"
#include "stylemine/io.hpp"
#include "stylemine/miner.hpp"

namespace {

using stylemine::ConfigError;
using stylemine::io::RunConfig;

constexpr const char* kUsage = R"(usage: stylemine <subcommand> [--config=FILE] [--key=value ...]

subcommands:
  gen-data            synthesize the digit dataset and write it to disk
  pretrain-encoder    train the source classifier; its trunk seeds the stylizer encoder
  train-rain          train the stylizer (decoder + style VAE) against the frozen encoder
  train-asm           run adversarial style mining (or a baseline via --strategy=...)
  eval                report accuracy of a saved classifier (--model=..., --split=src|tgt)
  compare-strategies  run all four strategies over several seeds and print the verdict
  gradcheck           finite-difference verification of every gradient path (--inject_fault=true
                      flips one backward rule to prove the checker catches it)

Any configuration key can be set with --key=value; --config=FILE (flat JSON
object) is applied first, then flags in order. Run with --help-config to list
the keys and their defaults.
)";

struct LocalFlags {
  std::string model;       // eval: checkpoint to evaluate
  std::string split = "tgt";  // eval: which held-out set
  bool inject_fault = false;  // gradcheck
};

// Splits writable --key=value / --key value argument forms; returns false for
// non-flag tokens.
bool parse_flag(const std::string& arg, std::string& key, std::string& value, bool& has_value) {
  if (arg.rfind("--", 0) != 0) return false;
  const std::string body = arg.substr(2);
  const size_t eq = body.find('=');
  if (eq == std::string::npos) {
    key = body;
    has_value = false;
  } else {
    key = body.substr(0, eq);
    value = body.substr(eq + 1);
    has_value = true;
  }
  return !key.empty();
}

void print_config_keys() {
  RunConfig defaults;
  std::cout << "configuration keys (defaults shown as a config document):\n"
            << defaults.serialize_json();
}

int run_gen_data(const RunConfig& cfg) {
  cfg.validate();
  const int64_t count = cfg.n_train + cfg.n_val + 1;
  stylemine::data::LabeledDataset ds = stylemine::data::gen_digits(count, cfg.side, cfg.data_seed);
  std::string path = cfg.dataset_path;
  if (path.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    path = cfg.out_dir + "/digits.asmd";
  }
  stylemine::data::save_asmd(ds, path);
  std::cout << "wrote " << count << " images (side " << cfg.side << ") to " << path << "\n";
  return 0;
}

int run_pretrain(const RunConfig& cfg) {
  auto res = stylemine::harness::pretrain_encoder_run(cfg);
  std::cout << "source validation accuracy: " << stylemine::io::format_fixed9(res.val_acc) << "\n"
            << "classifier checkpoint:      " << res.task_file << "\n"
            << "generator checkpoint:       " << res.generator_file << "\n"
            << "loss log:                   " << res.metrics_file << "\n";
  return 0;
}

int run_train_rain(const RunConfig& cfg) {
  auto res = stylemine::harness::train_rain_run(cfg);
  const auto& last = res.log.back();
  std::cout << "final losses: total=" << stylemine::io::format_fixed9(last.total)
            << " content=" << stylemine::io::format_fixed9(last.l_c)
            << " style=" << stylemine::io::format_fixed9(last.l_s)
            << " kl=" << stylemine::io::format_fixed9(last.l_kl)
            << " rec=" << stylemine::io::format_fixed9(last.l_rec) << "\n"
            << "generator checkpoint: " << res.generator_file << "\n"
            << "loss log:             " << res.metrics_file << "\n"
            << "preview:              " << res.preview_file << "\n";
  return 0;
}

int run_train_asm(const RunConfig& cfg) {
  const stylemine::miner::Strategy strategy = stylemine::miner::parse_strategy(cfg.strategy);
  stylemine::harness::DataBundle bundle = stylemine::harness::prepare_data(cfg);
  auto res = stylemine::harness::run_strategy(cfg, strategy, cfg.seed, bundle);
  std::cout << "strategy:             " << res.strategy << "\n"
            << "target accuracy:      " << stylemine::io::format_fixed9(res.acc_tgt) << "\n"
            << "source accuracy:      " << stylemine::io::format_fixed9(res.acc_src) << "\n"
            << "cpu seconds:          " << stylemine::io::format_fixed9(res.cpu_seconds) << "\n"
            << "classifier checkpoint: " << res.model_file << "\n"
            << "metric log:           " << res.metrics_file << "\n"
            << "latent trace:         " << res.latents_file << "\n"
            << "embeddings:           " << res.embed_file << "\n";
  return 0;
}

int run_eval(const RunConfig& cfg, const LocalFlags& local) {
  cfg.validate();
  if (local.split != "src" && local.split != "tgt")
    throw ConfigError("--split must be src or tgt, got \"" + local.split + "\"");
  const std::string model = local.model.empty() ? stylemine::harness::task_path(cfg) : local.model;
  stylemine::models::TaskModel<float> task = stylemine::harness::load_task_model(model);
  stylemine::harness::DataBundle bundle = stylemine::harness::prepare_data(cfg);
  const auto& ds = local.split == "src" ? bundle.val_src : bundle.val_tgt;
  const double acc = stylemine::harness::evaluate_model(task, ds);
  std::cout << "accuracy(" << local.split << "): " << stylemine::io::format_fixed9(acc) << "\n";
  return 0;
}

int run_compare(const RunConfig& cfg) {
  if (cfg.num_seeds < 3) throw ConfigError("compare-strategies needs num_seeds >= 3");
  auto rep = stylemine::harness::compare_strategies(cfg);
  std::cout << "strategy medians (target accuracy):\n";
  for (size_t i = 0; i < rep.strategy_names.size(); ++i)
    std::cout << "  " << rep.strategy_names[i] << ": " << stylemine::io::format_fixed9(rep.median_acc_tgt[i]) << "\n";
  std::cout << "mined vs anchored (+0.01):    " << (rep.beats_anchored ? "pass" : "FAIL") << "\n"
            << "mined vs source-only (+0.05): " << (rep.beats_source_only ? "pass" : "FAIL") << "\n"
            << "total cpu seconds: " << stylemine::io::format_fixed9(rep.total_cpu_seconds) << "\n"
            << "runs:    " << rep.runs_file << "\n"
            << "summary: " << rep.summary_file << "\n"
            << "verdict: " << (rep.verdict ? "ORDERING HOLDS" : "ORDERING FAILED") << "\n";
  return rep.verdict ? 0 : 3;
}

int run_gradcheck(const RunConfig& cfg, const LocalFlags& local) {
  const bool ok = stylemine::harness::gradcheck_run(cfg.seed, local.inject_fault, std::cout);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
    std::cout << kUsage;
    return 0;
  }
  const std::string sub = args[0];

  RunConfig cfg;
  LocalFlags local;
  try {
    // --config first so later flags override it, regardless of position.
    for (size_t i = 1; i < args.size(); ++i) {
      std::string key, value;
      bool has_value = false;
      if (!parse_flag(args[i], key, value, has_value))
        throw ConfigError("unexpected argument \"" + args[i] + "\" (flags are --key=value)");
      if (key == "config") {
        if (!has_value) throw ConfigError("--config needs =FILE");
        cfg.load_file(value);
      }
    }
    for (size_t i = 1; i < args.size(); ++i) {
      std::string key, value;
      bool has_value = false;
      parse_flag(args[i], key, value, has_value);
      if (key == "config") continue;
      if (key == "help-config") {
        print_config_keys();
        return 0;
      }
      if (key == "model") {
        if (!has_value) throw ConfigError("--model needs =PATH");
        local.model = value;
        continue;
      }
      if (key == "split") {
        if (!has_value) throw ConfigError("--split needs =src|tgt");
        local.split = value;
        continue;
      }
      if (key == "inject_fault") {
        local.inject_fault = !has_value || value == "true" || value == "1";
        if (has_value && !local.inject_fault && value != "false" && value != "0")
          throw ConfigError("--inject_fault takes true or false");
        continue;
      }
      if (!has_value) throw ConfigError("flag --" + key + " needs =value");
      cfg.apply(key, value);
    }

    if (sub == "gen-data") return run_gen_data(cfg);
    if (sub == "pretrain-encoder") return run_pretrain(cfg);
    if (sub == "train-rain") return run_train_rain(cfg);
    if (sub == "train-asm") return run_train_asm(cfg);
    if (sub == "eval") return run_eval(cfg, local);
    if (sub == "compare-strategies") return run_compare(cfg);
    if (sub == "gradcheck") return run_gradcheck(cfg, local);
    std::cerr << "unknown subcommand \"" << sub << "\"\n\n" << kUsage;
    return 1;
  } catch (const stylemine::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const stylemine::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
