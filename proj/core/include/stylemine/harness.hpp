#pragma once

// End-to-end phases wired together: data preparation, encoder/classifier
// pretraining, stylizer training, mining runs, evaluation and the
// multi-seed strategy comparison. The CLI is a thin shell over these.

#include <string>
#include <vector>

#include "stylemine/data.hpp"
#include "stylemine/fdcheck.hpp"
#include "stylemine/io.hpp"
#include "stylemine/miner.hpp"
#include "stylemine/models.hpp"
#include "stylemine/rain.hpp"

namespace stylemine::harness {

// ---------------------------------------------------------------------------
// Model checkpoints (dims + flags + parameters in one file)
// ---------------------------------------------------------------------------

void save_generator(const std::string& path, const models::Generator<float>& g);
models::Generator<float> load_generator(const std::string& path);
void save_task_model(const std::string& path, const models::TaskModel<float>& m);
models::TaskModel<float> load_task_model(const std::string& path);

// ---------------------------------------------------------------------------
// Config adapters
// ---------------------------------------------------------------------------

models::NetConfig net_config(const io::RunConfig& cfg);
data::ShiftSpec shift_spec(const io::RunConfig& cfg);

// Derived artifact paths (explicit config values win).
std::string generator_path(const io::RunConfig& cfg);
std::string task_path(const io::RunConfig& cfg);
std::string dataset_path(const io::RunConfig& cfg);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct DataBundle {
  data::LabeledDataset train_src;   // labeled source training set
  data::LabeledDataset val_src;     // held-out source images
  data::LabeledDataset val_tgt;     // the same held-out images, domain-shifted
  Tensor32 style_corpus;            // (M,3,side,side) unlabeled styles
  Tensor32 anchor_image;            // (1,3,side,side) the single target sample
  uint64_t train_hash = 0, val_src_hash = 0, val_tgt_hash = 0, corpus_hash = 0;
};

// Synthesizes (or loads, when dataset_path is set) the digit data, carves out
// train/val, manufactures the shifted target copies and the one anchor image.
DataBundle prepare_data(const io::RunConfig& cfg);

// Top-1 accuracy; argmax ties resolve to the lowest class index.
double evaluate_model(const models::TaskModel<float>& m, const data::LabeledDataset& ds);

// Penultimate-feature export for external visualization: one CSV row per
// sample (label, then the F feature values).
void export_embeddings(const models::TaskModel<float>& m, const data::LabeledDataset& ds, const std::string& path);

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

struct PretrainResult {
  double val_acc = 0;
  std::string generator_file, task_file, metrics_file;
};

// Supervised source training of the classifier; its conv trunk seeds the
// stylizer encoder. Writes both checkpoints and a loss CSV.
PretrainResult pretrain_encoder_run(const io::RunConfig& cfg);

struct RainRunResult {
  std::vector<rain::RainLogRow> log;
  std::string generator_file, metrics_file, preview_file;
};

// Trains decoder + VAE against the frozen encoder, saves the generator with
// its trained flag set, writes the loss CSV and a stylization preview grid.
RainRunResult train_rain_run(const io::RunConfig& cfg);

struct StrategyRunResult {
  std::string strategy;
  uint64_t seed = 0;
  double acc_tgt = 0, acc_src = 0;
  double cpu_seconds = 0;  // reported on stdout only; CSVs stay reproducible
  int64_t forward_passes = 0, encoder_passes = 0;
  std::string metrics_file, latents_file, model_file, embed_file;
};

// One mining (or baseline) run from the pretrained classifier checkpoint.
// Writes the per-step metric log and the mined-latent trace.
StrategyRunResult run_strategy(const io::RunConfig& cfg, miner::Strategy strategy, uint64_t seed,
                               const DataBundle& bundle);

struct StrategyReport {
  std::vector<StrategyRunResult> runs;
  // parallel arrays over strategy_names
  std::vector<std::string> strategy_names;
  std::vector<double> median_acc_tgt;
  std::vector<double> median_acc_src;
  bool beats_anchored = false;    // mined median >= anchored median + 0.01
  bool beats_source_only = false; // mined median >= source_only median + 0.05
  bool verdict = false;
  uint64_t train_hash = 0, val_tgt_hash = 0;
  double total_cpu_seconds = 0;
  std::string runs_file, summary_file;
};

// num_seeds paired runs of every strategy (same seed => same batches and
// latent draws), medians and the ordering verdict.
StrategyReport compare_strategies(const io::RunConfig& cfg);

// Gradient verification as a phase: prints one line per check, returns true
// iff every check passed. inject_fault corrupts one backward rule before the
// run, so a healthy oracle must then return false (the self-test contract).
bool gradcheck_run(uint64_t seed, bool inject_fault, std::ostream& out);

}  // namespace stylemine::harness
