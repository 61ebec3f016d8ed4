#include "stylemine/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <ostream>

namespace stylemine::harness {

using data::LabeledDataset;
using io::Checkpoint;
using io::format_fixed9;
using io::MetricsWriter;
using io::RunConfig;
using miner::Strategy;
using models::Generator;
using models::NetConfig;
using models::TaskModel;

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

namespace {

Tensor32 pack_meta(const NetConfig& cfg, bool trained) {
  Tensor32 m({7});
  m.data = {static_cast<float>(cfg.channels), static_cast<float>(cfg.latent),  static_cast<float>(cfg.classes),
            static_cast<float>(cfg.penultimate), static_cast<float>(cfg.side), static_cast<float>(cfg.vae_hidden),
            trained ? 1.0f : 0.0f};
  return m;
}

NetConfig unpack_meta(const std::string& path, const Checkpoint& ck, const std::string& key, bool* trained) {
  const Tensor32* m = ck.find_f32(key);
  if (!m) throw FormatError(path + ": checkpoint missing entry \"" + key + "\"");
  if (m->numel() != 7) throw FormatError(path + ": malformed \"" + key + "\" entry");
  NetConfig cfg;
  cfg.channels = static_cast<int>(m->data[0]);
  cfg.latent = static_cast<int>(m->data[1]);
  cfg.classes = static_cast<int>(m->data[2]);
  cfg.penultimate = static_cast<int>(m->data[3]);
  cfg.side = static_cast<int>(m->data[4]);
  cfg.vae_hidden = static_cast<int>(m->data[5]);
  cfg.validate();
  if (trained) *trained = m->data[6] != 0.0f;
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ContractError("cannot create output directory " + dir + ": " + ec.message());
}

}  // namespace

void save_generator(const std::string& path, const Generator<float>& g) {
  Checkpoint ck;
  ck.add("__meta/gen", pack_meta(g.cfg, g.trained));
  io::pack_params(ck, "enc", g.enc);
  io::pack_params(ck, "dec", g.dec);
  io::pack_params(ck, "vae_enc", g.vae_enc);
  io::pack_params(ck, "vae_dec", g.vae_dec);
  io::save_checkpoint(path, ck);
}

Generator<float> load_generator(const std::string& path) {
  Checkpoint ck = io::load_checkpoint(path);
  bool trained = false;
  NetConfig cfg = unpack_meta(path, ck, "__meta/gen", &trained);
  Generator<float> g = models::build_generator<float>(cfg, 0);
  io::unpack_params(ck, "enc", g.enc);
  io::unpack_params(ck, "dec", g.dec);
  io::unpack_params(ck, "vae_enc", g.vae_enc);
  io::unpack_params(ck, "vae_dec", g.vae_dec);
  g.trained = trained;
  return g;
}

void save_task_model(const std::string& path, const TaskModel<float>& m) {
  Checkpoint ck;
  ck.add("__meta/task", pack_meta(m.cfg, false));
  io::pack_params(ck, "task", m.params);
  io::save_checkpoint(path, ck);
}

TaskModel<float> load_task_model(const std::string& path) {
  Checkpoint ck = io::load_checkpoint(path);
  NetConfig cfg = unpack_meta(path, ck, "__meta/task", nullptr);
  TaskModel<float> m = models::build_task_model<float>(cfg, 0);
  io::unpack_params(ck, "task", m.params);
  return m;
}

// ---------------------------------------------------------------------------
// Config adapters
// ---------------------------------------------------------------------------

NetConfig net_config(const RunConfig& cfg) {
  NetConfig net;
  net.channels = static_cast<int>(cfg.channels);
  net.latent = static_cast<int>(cfg.latent);
  net.classes = static_cast<int>(cfg.classes);
  net.penultimate = static_cast<int>(cfg.penultimate);
  net.side = static_cast<int>(cfg.side);
  net.vae_hidden = static_cast<int>(cfg.vae_hidden);
  net.validate();
  return net;
}

data::ShiftSpec shift_spec(const RunConfig& cfg) {
  data::ShiftSpec s;
  s.hue_deg = cfg.shift_hue;
  s.gain = {cfg.shift_gain_r, cfg.shift_gain_g, cfg.shift_gain_b};
  s.bias = {cfg.shift_bias_r, cfg.shift_bias_g, cfg.shift_bias_b};
  s.texture = cfg.shift_texture;
  s.noise = cfg.shift_noise;
  s.seed = cfg.shift_seed;
  s.validate();
  return s;
}

std::string generator_path(const RunConfig& cfg) {
  return cfg.generator_ckpt.empty() ? cfg.out_dir + "/generator.asmc" : cfg.generator_ckpt;
}

std::string task_path(const RunConfig& cfg) {
  return cfg.task_ckpt.empty() ? cfg.out_dir + "/task_init.asmc" : cfg.task_ckpt;
}

std::string dataset_path(const RunConfig& cfg) { return cfg.dataset_path; }

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

DataBundle prepare_data(const RunConfig& cfg) {
  cfg.validate();
  const int64_t need = cfg.n_train + cfg.n_val + 1;
  LabeledDataset base;
  if (!cfg.dataset_path.empty()) {
    if (!std::filesystem::exists(cfg.dataset_path))
      throw ConfigError("dataset_path \"" + cfg.dataset_path + "\" does not exist");
    base = data::load_asmd(cfg.dataset_path);
    if (base.size() < need)
      throw ContractError("dataset " + cfg.dataset_path + " has " + std::to_string(base.size()) +
                          " items, need " + std::to_string(need));
    if (base.images.shape[2] != cfg.side)
      throw ContractError("dataset side " + std::to_string(base.images.shape[2]) + " != configured side " +
                          std::to_string(cfg.side));
  } else {
    base = data::gen_digits(need, cfg.side, cfg.data_seed);
  }

  std::vector<int64_t> idx;
  DataBundle b;
  idx.resize(static_cast<size_t>(cfg.n_train));
  for (int64_t i = 0; i < cfg.n_train; ++i) idx[static_cast<size_t>(i)] = i;
  b.train_src = data::subset(base, idx);
  idx.resize(static_cast<size_t>(cfg.n_val));
  for (int64_t i = 0; i < cfg.n_val; ++i) idx[static_cast<size_t>(i)] = cfg.n_train + i;
  b.val_src = data::subset(base, idx);

  const data::ShiftSpec spec = shift_spec(cfg);
  b.val_tgt.images = data::apply_shift(b.val_src.images, spec);
  b.val_tgt.labels = b.val_src.labels;

  LabeledDataset anchor_src = data::subset(base, {cfg.n_train + cfg.n_val});
  b.anchor_image = data::apply_shift(anchor_src.images, spec);

  b.style_corpus = data::gen_style_corpus(cfg.style_count, cfg.side, Rng(cfg.data_seed).stream("styles").seed());

  b.train_hash = data::dataset_hash(b.train_src);
  b.val_src_hash = data::dataset_hash(b.val_src);
  b.val_tgt_hash = data::dataset_hash(b.val_tgt);
  b.corpus_hash = fnv1a64(b.style_corpus.data.data(), b.style_corpus.data.size() * sizeof(float));
  return b;
}

double evaluate_model(const TaskModel<float>& m, const LabeledDataset& ds) {
  ds.validate();
  const int64_t n = ds.size();
  const int64_t chunk = 128;
  const int64_t per = ds.images.numel() / n;
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += chunk) {
    const int64_t bs = std::min(chunk, n - at);
    Tensor32 x({bs, ds.images.shape[1], ds.images.shape[2], ds.images.shape[3]});
    std::copy_n(ds.images.ptr() + at * per, bs * per, x.ptr());
    auto [logits, z] = models::task_forward_values(m, x);
    const int64_t k = logits.shape[1];
    for (int64_t i = 0; i < bs; ++i) {
      const float* row = logits.ptr() + i * k;
      int best = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);  // ties keep the lowest index
      if (best == ds.labels[static_cast<size_t>(at + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void export_embeddings(const TaskModel<float>& m, const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  const int64_t n = ds.size();
  const int64_t chunk = 128;
  const int64_t per = ds.images.numel() / n;
  std::vector<std::string> cols{"label"};
  for (int f = 0; f < m.cfg.penultimate; ++f) cols.push_back("z" + std::to_string(f));
  MetricsWriter mw(path, cols);
  for (int64_t at = 0; at < n; at += chunk) {
    const int64_t bs = std::min(chunk, n - at);
    Tensor32 x({bs, ds.images.shape[1], ds.images.shape[2], ds.images.shape[3]});
    std::copy_n(ds.images.ptr() + at * per, bs * per, x.ptr());
    auto [logits, z] = models::task_forward_values(m, x);
    const int64_t f = z.shape[1];
    for (int64_t i = 0; i < bs; ++i) {
      std::vector<std::string> cells{std::to_string(ds.labels[static_cast<size_t>(at + i)])};
      for (int64_t j = 0; j < f; ++j)
        cells.push_back(format_fixed9(static_cast<double>(z.data[static_cast<size_t>(i * f + j)])));
      mw.row(cells);
    }
  }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

PretrainResult pretrain_encoder_run(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const NetConfig net = net_config(cfg);
  DataBundle bundle = prepare_data(cfg);

  TaskModel<float> task = models::build_task_model<float>(net, mix64(cfg.seed ^ fnv1a64("task_init")));
  ScheduleSpec sched{cfg.pretrain_lr, cfg.pretrain_warmup, cfg.pretrain_iters, cfg.lr_power};
  sched.validate();
  Rng rng(cfg.seed);
  Rng batch_rng = rng.stream("pretrain/batch");
  data::Batcher batcher(bundle.train_src.size(), cfg.pretrain_batch, batch_rng);

  PretrainResult res;
  res.metrics_file = cfg.out_dir + "/pretrain_metrics.csv";
  MetricsWriter mw(res.metrics_file, {"iter", "loss", "lr"});

  for (int64_t iter = 0; iter < cfg.pretrain_iters; ++iter) {
    LabeledDataset batch = data::subset(bundle.train_src, batcher.next());
    const double lr = learning_rate(sched, iter);

    Tape32 tape;
    models::ParamBinder<float> binder(tape);
    Var32 x = tape.leaf(std::move(batch.images));
    auto out = models::task_forward(tape, binder, task, x, true);
    Var32 loss = softmax_xent_mean(out.logits, batch.labels);
    task.params.zero_grads();
    tape.backward(loss);
    binder.pull_grads();
    sgd_step(task.params, lr, cfg.pretrain_momentum, cfg.pretrain_weight_decay);

    const double lv = static_cast<double>(tape.value(loss).data[0]);
    if (!std::isfinite(lv)) throw ContractError("pretraining diverged at iteration " + std::to_string(iter));
    mw.row({std::to_string(iter + 1), format_fixed9(lv), format_fixed9(lr)});
  }

  res.val_acc = evaluate_model(task, bundle.val_src);

  // The trained trunk becomes the stylizer's frozen encoder.
  Generator<float> g = models::build_generator<float>(net, mix64(cfg.seed ^ fnv1a64("generator_init")));
  for (const char* layer : {"c1", "c2", "c3", "c4"})
    for (const char* part : {".w", ".b"}) {
      const std::string name = std::string(layer) + part;
      g.enc.at(name).value = task.params.at(name).value;
    }

  res.generator_file = generator_path(cfg);
  res.task_file = task_path(cfg);
  save_generator(res.generator_file, g);
  save_task_model(res.task_file, task);
  return res;
}

// ---------------------------------------------------------------------------
// Stylizer training
// ---------------------------------------------------------------------------

RainRunResult train_rain_run(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  Generator<float> g = load_generator(generator_path(cfg));
  DataBundle bundle = prepare_data(cfg);

  rain::RainWeights weights;
  weights.lambda_s = cfg.rain_lambda_s;
  weights.lambda_k = cfg.rain_lambda_k;
  weights.lambda_r = cfg.rain_lambda_r;

  rain::RainTrainOptions opt;
  opt.iters = cfg.rain_iters;
  opt.batch = static_cast<int>(cfg.rain_batch);
  opt.sched = ScheduleSpec{cfg.rain_lr, cfg.rain_warmup, cfg.rain_iters, cfg.lr_power};
  opt.momentum = cfg.rain_momentum;
  opt.weight_decay = cfg.rain_weight_decay;
  opt.bypass_vae = cfg.rain_bypass_vae;

  RainRunResult res;
  Rng rng(cfg.seed);
  Rng rain_rng = rng.stream("rain");
  res.log = rain::train_rain(g, bundle.train_src.images, bundle.style_corpus, weights, opt, rain_rng);

  res.generator_file = generator_path(cfg);
  save_generator(res.generator_file, g);

  res.metrics_file = cfg.out_dir + "/rain_metrics.csv";
  MetricsWriter mw(res.metrics_file, {"iter", "l_c", "l_s", "l_kl", "l_rec", "total"});
  for (const auto& r : res.log)
    mw.row({std::to_string(r.iter), format_fixed9(r.l_c), format_fixed9(r.l_s), format_fixed9(r.l_kl), format_fixed9(r.l_rec),
            format_fixed9(r.total)});

  // Preview: a few held-out contents under random styles.
  const int64_t n_prev = std::min<int64_t>(8, bundle.val_src.size());
  std::vector<int64_t> idx(static_cast<size_t>(n_prev));
  for (int64_t i = 0; i < n_prev; ++i) idx[static_cast<size_t>(i)] = i;
  LabeledDataset prev = data::subset(bundle.val_src, idx);
  Tensor32 eps({n_prev, static_cast<int64_t>(g.cfg.latent)});
  Rng prev_rng = rng.stream("rain/preview");
  prev_rng.fill_normal(eps);
  Tensor32 styled = rain::stylize(g, prev.images, eps);
  res.preview_file = cfg.out_dir + "/rain_preview.ppm";
  io::write_ppm(res.preview_file, io::tile_images(styled, 4));
  return res;
}

// ---------------------------------------------------------------------------
// Mining runs and the strategy comparison
// ---------------------------------------------------------------------------

StrategyRunResult run_strategy(const RunConfig& cfg, Strategy strategy, uint64_t seed, const DataBundle& bundle) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  TaskModel<float> task = load_task_model(task_path(cfg));

  // The source-only baseline never touches the stylizer: no generator file is
  // required, and the anchor degenerates to a standard-normal placeholder.
  Generator<float> g;
  miner::AnchorSampleT<float> anchor;
  if (strategy == Strategy::source_only) {
    g = models::build_generator<float>(net_config(cfg), 0);
    anchor.post.psi.assign(static_cast<size_t>(g.cfg.latent), 0.0f);
    anchor.post.xi.assign(static_cast<size_t>(g.cfg.latent), 1.0f);
  } else {
    g = load_generator(generator_path(cfg));
    if (!g.trained) throw ContractError("run_strategy: generator at " + generator_path(cfg) + " is not trained yet");
    anchor = miner::anchor_posterior(g, bundle.anchor_image);
  }

  miner::MiningConfig mcfg;
  mcfg.beta = cfg.beta;
  mcfg.depth = static_cast<int>(cfg.depth);
  mcfg.lambda = cfg.lambda_consist;
  mcfg.divergence_cap = cfg.divergence_cap;
  mcfg.whole_batch_consistency = cfg.consistency_whole_batch;

  miner::MineTrainOptions mopt;
  mopt.outer_iters = cfg.mine_iters;
  mopt.batch_contents = static_cast<int>(cfg.mine_batch);
  mopt.sched = ScheduleSpec{cfg.mine_lr, cfg.mine_warmup, cfg.mine_iters, cfg.lr_power};
  mopt.momentum = cfg.mine_momentum;
  mopt.weight_decay = cfg.mine_weight_decay;

  StrategyRunResult res;
  res.strategy = miner::strategy_name(strategy);
  res.seed = seed;

  Rng rng(seed);
  const std::clock_t t0 = std::clock();
  miner::MiningResult<float> mr =
      miner::run_mining(task, g, bundle.train_src.images, bundle.train_src.labels, anchor, strategy, mcfg, mopt, rng);
  res.cpu_seconds = static_cast<double>(std::clock() - t0) / CLOCKS_PER_SEC;
  res.forward_passes = mr.forward_passes;
  res.encoder_passes = mr.encoder_passes;

  res.acc_tgt = evaluate_model(task, bundle.val_tgt);
  res.acc_src = evaluate_model(task, bundle.val_src);

  const std::string tag = res.strategy + "_seed" + std::to_string(seed);
  res.model_file = cfg.out_dir + "/task_" + tag + ".asmc";
  save_task_model(res.model_file, task);
  res.metrics_file = cfg.out_dir + "/mine_" + tag + ".csv";
  MetricsWriter mw(res.metrics_file, {"outer_iter", "depth", "strategy", "l_task", "l_consist", "l_m", "lr"});
  for (const auto& r : mr.log)
    mw.row({std::to_string(r.outer_iter), std::to_string(r.depth_step), r.strategy, format_fixed9(r.l_task),
            format_fixed9(r.l_consist), format_fixed9(r.l_m), format_fixed9(r.lr)});

  res.latents_file = cfg.out_dir + "/latents_" + tag + ".csv";
  {
    const int64_t d = mr.mined_latents.shape[1];
    std::vector<std::string> cols{"outer_iter"};
    for (int64_t j = 0; j < d; ++j) cols.push_back("e" + std::to_string(j));
    MetricsWriter lw(res.latents_file, cols);
    for (int64_t i = 0; i < mr.mined_latents.shape[0]; ++i) {
      std::vector<std::string> cells{std::to_string(i + 1)};
      for (int64_t j = 0; j < d; ++j)
        cells.push_back(format_fixed9(static_cast<double>(mr.mined_latents.data[static_cast<size_t>(i * d + j)])));
      lw.row(cells);
    }
  }

  res.embed_file = cfg.out_dir + "/embed_" + tag + ".csv";
  export_embeddings(task, bundle.val_tgt, res.embed_file);
  return res;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

StrategyReport compare_strategies(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.num_seeds < 3) throw ConfigError("compare-strategies needs num_seeds >= 3 for a meaningful median");
  ensure_dir(cfg.out_dir);
  DataBundle bundle = prepare_data(cfg);

  const std::vector<Strategy> strategies{Strategy::mined, Strategy::anchored, Strategy::random_style,
                                         Strategy::source_only};
  StrategyReport rep;
  rep.train_hash = bundle.train_hash;
  rep.val_tgt_hash = bundle.val_tgt_hash;

  // cpu time is deliberately absent: these files must be bit-identical across
  // re-runs of the same config/seed.
  rep.runs_file = cfg.out_dir + "/strategy_runs.csv";
  MetricsWriter rw(rep.runs_file, {"strategy", "seed", "acc_tgt", "acc_src", "train_hash", "val_tgt_hash"});

  for (Strategy s : strategies) {
    std::vector<double> accs_tgt, accs_src;
    for (int64_t k = 0; k < cfg.num_seeds; ++k) {
      const uint64_t seed = cfg.seed + static_cast<uint64_t>(k);
      StrategyRunResult run = run_strategy(cfg, s, seed, bundle);
      rep.total_cpu_seconds += run.cpu_seconds;
      accs_tgt.push_back(run.acc_tgt);
      accs_src.push_back(run.acc_src);
      rw.row({run.strategy, std::to_string(seed), format_fixed9(run.acc_tgt), format_fixed9(run.acc_src),
              std::to_string(bundle.train_hash), std::to_string(bundle.val_tgt_hash)});
      rep.runs.push_back(std::move(run));
    }
    rep.strategy_names.push_back(miner::strategy_name(s));
    rep.median_acc_tgt.push_back(median(accs_tgt));
    rep.median_acc_src.push_back(median(accs_src));
  }

  auto med_of = [&](const std::string& name) {
    for (size_t i = 0; i < rep.strategy_names.size(); ++i)
      if (rep.strategy_names[i] == name) return rep.median_acc_tgt[i];
    throw ContractError("compare_strategies: missing strategy " + name);
  };
  rep.beats_anchored = med_of("asm") >= med_of("anchored") + 0.01;
  rep.beats_source_only = med_of("asm") >= med_of("source_only") + 0.05;
  rep.verdict = rep.beats_anchored && rep.beats_source_only;

  rep.summary_file = cfg.out_dir + "/strategy_summary.csv";
  MetricsWriter sw(rep.summary_file, {"strategy", "median_acc_tgt", "median_acc_src"});
  for (size_t i = 0; i < rep.strategy_names.size(); ++i)
    sw.row({rep.strategy_names[i], format_fixed9(rep.median_acc_tgt[i]), format_fixed9(rep.median_acc_src[i])});
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

bool gradcheck_run(uint64_t seed, bool inject_fault, std::ostream& out) {
  const std::vector<fdcheck::FdReport> reports = fdcheck::run_gradcheck_suite(seed, inject_fault);
  bool all_pass = true;
  for (const auto& r : reports) {
    out << fdcheck::to_string(r) << "\n";
    all_pass = all_pass && r.pass;
  }
  if (inject_fault)
    out << (all_pass ? "injected backward fault was NOT detected\n" : "injected backward fault detected\n");
  else
    out << (all_pass ? "all gradient checks passed\n" : "gradient check FAILURES present\n");
  return all_pass;
}

}  // namespace stylemine::harness
