// Acceptance gate for the style-mining library. Each numbered criterion is
// checked independently and prints exactly one [PASS]/[FAIL] line; the binary
// exits 0 iff every selected criterion passed.
//
// Modes (argv[1], default "all"):
//   core      criteria 1,2,3,4,5,8,9 (fast, minutes)
//   ordering  criteria 6,7           (full-scale experiment, tens of minutes)
//   all       everything
//
// Criterion 5 note: the per-step metric logs carry the strategy name in every
// row by design, so the degenerate-equivalence check compares the logs with
// that one column removed and says so in its output line. Every numeric
// column must match byte-for-byte.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stylemine/data.hpp"
#include "stylemine/fdcheck.hpp"
#include "stylemine/harness.hpp"
#include "stylemine/io.hpp"
#include "stylemine/miner.hpp"
#include "stylemine/models.hpp"
#include "stylemine/rain.hpp"
#include "stylemine/rng.hpp"
#include "stylemine/schedule.hpp"
#include "stylemine/stats.hpp"
#include "stylemine/tensor.hpp"
#include "../tests/test_util.hpp"

namespace {

using namespace stylemine;

struct Outcome {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

Tensor64 to_f64(const Tensor32& a) {
  Tensor64 o(a.shape);
  for (size_t i = 0; i < a.data.size(); ++i) o.data[i] = static_cast<double>(a.data[i]);
  return o;
}

// Small shared run configuration for the desk-miniature criteria (5 and 8).
io::RunConfig tiny_config(const std::string& tag) {
  io::RunConfig cfg;
  cfg.out_dir = testutil::scratch_dir(tag);
  cfg.side = 8;
  cfg.channels = 4;
  cfg.latent = 4;
  cfg.classes = 10;
  cfg.penultimate = 16;
  cfg.vae_hidden = 16;
  cfg.n_train = 64;
  cfg.n_val = 32;
  cfg.style_count = 16;
  cfg.pretrain_iters = 40;
  cfg.pretrain_batch = 8;
  cfg.pretrain_warmup = 5;
  cfg.rain_iters = 40;
  cfg.rain_batch = 4;
  cfg.rain_warmup = 5;
  cfg.mine_iters = 8;
  cfg.mine_batch = 2;
  cfg.mine_warmup = 0;
  cfg.depth = 1;
  cfg.num_seeds = 3;
  return cfg;
}

// ---------------------------------------------------------------------------
// Criterion 1: reverse-mode gradients vs central finite differences
// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  Outcome o{1, "gradient oracle", false, ""};
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<fdcheck::FdReport> reports = fdcheck::run_gradcheck_suite(1234);
  const double secs = seconds_since(t0);
  int failed = 0;
  double worst = 0;
  for (const auto& r : reports) {
    worst = std::max(worst, r.max_rel_err);
    if (!r.pass) ++failed;
  }
  o.pass = failed == 0 && secs <= 60.0;
  o.detail = std::to_string(reports.size()) + " checks (primitives + composed mining path), " +
             std::to_string(failed) + " failed, max rel err " + fmt(worst) + " (tol 1e-4), " + fmt(secs, 3) +
             " s (limit 60)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 2: closed-form loss / schedule identities
// ---------------------------------------------------------------------------

Outcome criterion_closed_forms() {
  Outcome o{2, "closed-form losses", false, ""};
  struct Identity {
    std::string name;
    double actual, expected;
  };
  std::vector<Identity> ids;

  const std::vector<double> ones{1.0}, zeros{0.0}, twos{2.0};
  ids.push_back({"kl(psi=1,xi=1) one dim", rain::kl_loss<double>(ones, ones), 0.5});
  const std::vector<double> ones3{1.0, 1.0, 1.0};
  ids.push_back({"kl(psi=1,xi=1) three dims", rain::kl_loss<double>(ones3, ones3), 1.5});
  ids.push_back({"kl(standard normal)", rain::kl_loss<double>(zeros, ones), 0.0});
  ids.push_back({"kl(psi=0,xi=2)", rain::kl_loss<double>(zeros, twos), 0.5 * (4.0 - 1.0 - 2.0 * std::log(2.0))});

  const std::vector<double> c0{0.0, 0.0}, c34{3.0, 4.0};
  ids.push_back({"rec(identical codes)", rain::rec_loss<double>(c0, c0), 0.0});
  ids.push_back({"rec((0,0),(3,4))", rain::rec_loss<double>(c0, c34), 5.0});

  Tensor64 z_same({2, 2});
  z_same.data = {0.7, -0.3, 0.7, -0.3};
  ids.push_back({"consistency(identical rows)", miner::consistency_loss(z_same, 2), 0.0});
  Tensor64 z_pair({2, 2});
  z_pair.data = {0.0, 0.0, 2.0, 0.0};
  ids.push_back({"consistency((0,0),(2,0))", miner::consistency_loss(z_pair, 2), 1.0});

  Tensor64 logits = Tensor64::zeros({2, 10});
  ids.push_back({"task loss on uniform logits", miner::task_loss(logits, {3, 7}), std::log(10.0)});

  ScheduleSpec sched{2.5e-4, 0, 3000, 0.9};
  ids.push_back({"poly lr midpoint", learning_rate(sched, 1500), 2.5e-4 * std::pow(0.5, 0.9)});

  int failed = 0;
  double worst = 0;
  std::string first_bad;
  for (const auto& id : ids) {
    const double err = std::fabs(id.actual - id.expected);
    worst = std::max(worst, err);
    if (!(err <= 1e-9)) {
      ++failed;
      if (first_bad.empty())
        first_bad = id.name + " got " + fmt(id.actual, 12) + " want " + fmt(id.expected, 12);
    }
  }
  o.pass = failed == 0;
  o.detail = std::to_string(ids.size()) + " identities in f64, max abs err " + fmt(worst) + " (tol 1e-9)";
  if (!first_bad.empty()) o.detail += "; first failure: " + first_bad;
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 3: post-transform channel statistics match the targets
// ---------------------------------------------------------------------------

Outcome criterion_adain() {
  Outcome o{3, "adain exactness", false, ""};
  Rng rng(20260816);
  const int cases = 1000;
  double worst = 0;
  int done = 0;
  for (int t = 0; t < cases; ++t) {
    const int64_t c = 1 + rng.index(6);
    const int64_t h = 2 + rng.index(5);
    const int64_t w = 2 + rng.index(5);
    // Last tenth stresses the small-std edge of the contract (raw channel
    // std near 1e-4, well above the library's 1e-5 floor).
    const double spread = (t % 10 == 9) ? 2e-4 : std::exp(rng.uniform(-2.0, 1.0));
    Tensor32 f({1, c, h, w});
    std::vector<ChannelStats32> raw;
    for (int attempt = 0; attempt < 64; ++attempt) {
      rng.fill_normal(f, rng.uniform(-1.0, 1.0), spread);
      raw = channel_stats(f);
      bool ok = true;
      for (int64_t j = 0; j < c; ++j)
        if (raw[0].sigma[static_cast<size_t>(j)] < 1e-4f) ok = false;
      if (ok) break;
      raw.clear();
    }
    if (raw.empty()) continue;  // could not realize the std precondition

    ChannelStats32 target;
    target.mu.resize(static_cast<size_t>(c));
    target.sigma.resize(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) {
      target.mu[static_cast<size_t>(j)] = static_cast<float>(rng.uniform(-2.0, 2.0));
      target.sigma[static_cast<size_t>(j)] = static_cast<float>(rng.uniform(0.05, 2.5));
    }
    std::vector<ChannelStats32> targets{target};
    Tensor32 out = adain(f, std::span<const ChannelStats32>(targets));
    auto post = channel_stats(out);
    for (int64_t j = 0; j < c; ++j) {
      worst = std::max(worst, std::fabs(static_cast<double>(post[0].mu[static_cast<size_t>(j)]) -
                                        static_cast<double>(target.mu[static_cast<size_t>(j)])));
      worst = std::max(worst, std::fabs(static_cast<double>(post[0].sigma[static_cast<size_t>(j)]) -
                                        static_cast<double>(target.sigma[static_cast<size_t>(j)])));
    }
    ++done;
  }
  o.pass = done == cases && worst <= 1e-5;
  o.detail = std::to_string(done) + "/" + std::to_string(cases) +
             " random cases (incl. raw std near 1e-4), max abs stat err " + fmt(worst) + " (tol 1e-5)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 4: latent ascent is monotone when the classifier is frozen
// ---------------------------------------------------------------------------

Outcome criterion_ascent() {
  Outcome o{4, "mining ascent", false, ""};
  models::NetConfig nc;
  nc.side = 8;
  nc.channels = 4;
  nc.latent = 4;
  nc.classes = 10;
  nc.penultimate = 16;
  nc.vae_hidden = 16;

  const int trials = 100, steps = 4;
  int monotone = 0;
  double worst_drop = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(5000 + static_cast<uint64_t>(t));
    auto g = models::build_generator<double>(nc, rng.stream("gen").seed());
    g.trained = true;  // random weights: the ascent property must not depend on training
    auto task = models::build_task_model<double>(nc, rng.stream("task").seed());

    data::LabeledDataset ds = data::gen_digits(4, nc.side, 300 + static_cast<uint64_t>(t));
    Tensor64 images = to_f64(ds.images);
    miner::MineBatch<double> batch = miner::make_mine_batch(g, images, ds.labels, {0, 1, 2, 3});

    Tensor64 eps({1, nc.latent});
    Tensor64 anchor_eta({1, nc.latent});
    Rng lat = rng.stream("latents");
    lat.fill_normal(eps);
    lat.fill_normal(anchor_eta);  // held fixed across the depth steps

    miner::MiningConfig mc;
    mc.beta = 1e-3;
    mc.depth = steps;

    bool ok = true;
    double prev = -1e300;
    for (int s = 0; s < steps; ++s) {
      // lr = 0 freezes every classifier parameter; epsilon still ascends.
      miner::StepResult r = miner::mine_step(task, g, batch, eps, anchor_eta, mc, 0.0, 0.9, 5e-4);
      const double drop = prev - r.l_m;
      if (s > 0 && drop > 1e-6) {
        ok = false;
        worst_drop = std::max(worst_drop, drop);
      }
      prev = r.l_m;
    }
    if (ok) ++monotone;
  }
  o.pass = monotone >= 90;
  o.detail = std::to_string(monotone) + "/" + std::to_string(trials) +
             " seeded trials non-decreasing over " + std::to_string(steps) +
             " depth steps (need >= 90, beta 1e-3, classifier lr 0, tol -1e-6)";
  if (worst_drop > 0) o.detail += ", worst observed drop " + fmt(worst_drop);
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 5: mined strategy with beta=0, depth=1 equals the anchored baseline
// ---------------------------------------------------------------------------

// Removes the given 0-based CSV column from every line.
std::string strip_column(const std::string& csv, size_t col) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    std::string joined;
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i == col) continue;
      if (!joined.empty()) joined += ',';
      joined += cells[i];
    }
    out << joined << '\n';
  }
  return out.str();
}

Outcome criterion_degenerate(const io::RunConfig& base) {
  Outcome o{5, "degenerate equivalence", false, ""};
  io::RunConfig cfg = base;
  cfg.beta = 0.0;
  cfg.depth = 1;

  harness::DataBundle bundle = harness::prepare_data(cfg);
  harness::pretrain_encoder_run(cfg);
  harness::train_rain_run(cfg);

  const uint64_t seed = 17;
  harness::StrategyRunResult a = harness::run_strategy(cfg, miner::Strategy::mined, seed, bundle);
  harness::StrategyRunResult b = harness::run_strategy(cfg, miner::Strategy::anchored, seed, bundle);

  const std::string log_a = testutil::read_text(a.metrics_file);
  const std::string log_b = testutil::read_text(b.metrics_file);
  const bool logs_equal = strip_column(log_a, 2) == strip_column(log_b, 2);
  const bool latents_equal = testutil::same_bytes(a.latents_file, b.latents_file);
  const bool accs_equal = a.acc_tgt == b.acc_tgt && a.acc_src == b.acc_src;

  o.pass = logs_equal && latents_equal && accs_equal;
  o.detail = std::string("metric logs byte-identical outside the strategy-name column: ") +
             (logs_equal ? "yes" : "NO") + "; latent traces byte-identical: " + (latents_equal ? "yes" : "NO") +
             "; accuracies equal: " + (accs_equal ? "yes" : "NO") +
             " (the log schema records the strategy name in every row, so that column necessarily differs)";
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 8: checkpoint round-trips and re-runs are bit-exact
// ---------------------------------------------------------------------------

Outcome criterion_determinism(const io::RunConfig& base) {
  Outcome o{8, "persistence and determinism", false, ""};

  // Checkpoint round trip: save -> load -> save must reproduce the file, and
  // the reloaded parameters must hash identically.
  models::NetConfig nc;
  nc.side = 8;
  nc.channels = 4;
  nc.latent = 4;
  nc.classes = 10;
  nc.penultimate = 16;
  nc.vae_hidden = 16;
  auto g = models::build_generator<float>(nc, 99);
  g.trained = true;
  const std::string dir = testutil::scratch_dir("acceptance_ckpt");
  const std::string p1 = dir + "/gen1.asmc", p2 = dir + "/gen2.asmc";
  harness::save_generator(p1, g);
  models::Generator<float> g2 = harness::load_generator(p1);
  harness::save_generator(p2, g2);
  const bool ckpt_ok = testutil::same_bytes(p1, p2) && g2.enc.content_hash() == g.enc.content_hash() &&
                       g2.dec.content_hash() == g.dec.content_hash() &&
                       g2.vae_enc.content_hash() == g.vae_enc.content_hash() &&
                       g2.vae_dec.content_hash() == g.vae_dec.content_hash() && g2.trained == g.trained;

  // Synthetic data determinism.
  const bool data_ok =
      data::dataset_hash(data::gen_digits(32, 8, 5)) == data::dataset_hash(data::gen_digits(32, 8, 5));

  // Re-running a full strategy with identical config and seed must reproduce
  // every CSV and the model checkpoint byte-for-byte. The generator and
  // classifier checkpoints written by criterion 5's phases are reused as
  // pinned inputs for both runs.
  io::RunConfig cfg = base;
  cfg.beta = 0.0;
  cfg.depth = 1;
  cfg.generator_ckpt = cfg.out_dir + "/generator.asmc";
  cfg.task_ckpt = cfg.out_dir + "/task_init.asmc";
  harness::DataBundle bundle = harness::prepare_data(cfg);

  io::RunConfig cfg_b = cfg;
  cfg_b.out_dir = testutil::scratch_dir("acceptance_rerun");
  harness::DataBundle bundle_b = harness::prepare_data(cfg_b);

  harness::StrategyRunResult r1 = harness::run_strategy(cfg, miner::Strategy::mined, 17, bundle);
  harness::StrategyRunResult r2 = harness::run_strategy(cfg_b, miner::Strategy::mined, 17, bundle_b);
  const bool rerun_ok = testutil::same_bytes(r1.metrics_file, r2.metrics_file) &&
                        testutil::same_bytes(r1.latents_file, r2.latents_file) &&
                        testutil::same_bytes(r1.embed_file, r2.embed_file) &&
                        testutil::same_bytes(r1.model_file, r2.model_file);

  o.pass = ckpt_ok && data_ok && rerun_ok;
  o.detail = std::string("checkpoint save/load/save byte-identical + hashes equal: ") + (ckpt_ok ? "yes" : "NO") +
             "; synthetic data seed-stable: " + (data_ok ? "yes" : "NO") +
             "; full re-run CSVs and model byte-identical: " + (rerun_ok ? "yes" : "NO");
  return o;
}

// ---------------------------------------------------------------------------
// Criterion 9: IDX ingestion
// ---------------------------------------------------------------------------

Outcome criterion_idx() {
  Outcome o{9, "idx ingestion", false, ""};
  const std::string dir = testutil::scratch_dir("acceptance_idx");
  const std::string img_path = dir + "/images.idx", lab_path = dir + "/labels.idx";

  std::vector<unsigned char> img;
  testutil::push_be32(img, 0x00000803);
  testutil::push_be32(img, 4);
  testutil::push_be32(img, 2);
  testutil::push_be32(img, 2);
  const unsigned char pixels[16] = {0, 1, 128, 255, 10, 20, 30, 40, 200, 201, 202, 203, 7, 0, 255, 99};
  img.insert(img.end(), pixels, pixels + 16);
  std::vector<unsigned char> lab;
  testutil::push_be32(lab, 0x00000801);
  testutil::push_be32(lab, 4);
  const unsigned char labels[4] = {3, 1, 4, 1};
  lab.insert(lab.end(), labels, labels + 4);
  testutil::write_bytes(img_path, img);
  testutil::write_bytes(lab_path, lab);

  data::LabeledDataset ds = data::load_idx(img_path, lab_path);
  bool decode_ok = ds.images.shape == std::vector<int64_t>{4, 3, 2, 2} &&
                   ds.labels == std::vector<int>{3, 1, 4, 1};
  if (decode_ok) {
    for (int i = 0; i < 4 && decode_ok; ++i)
      for (int c = 0; c < 3 && decode_ok; ++c)
        for (int k = 0; k < 4 && decode_ok; ++k) {
          const float want = static_cast<float>(pixels[i * 4 + k]) / 255.0f;
          const float got = ds.images.data[static_cast<size_t>((i * 3 + c) * 4 + k)];
          if (got != want) decode_ok = false;
        }
  }

  auto rejects = [&](const std::vector<unsigned char>& bytes, bool corrupt_labels) {
    const std::string bp = dir + "/bad.idx";
    testutil::write_bytes(bp, bytes);
    try {
      if (corrupt_labels)
        data::load_idx(img_path, bp);
      else
        data::load_idx(bp, lab_path);
      return false;
    } catch (const FormatError&) {
      return true;
    }
  };

  std::vector<unsigned char> bad_magic = img;
  bad_magic[3] = 0x04;
  std::vector<unsigned char> truncated = img;
  truncated.resize(truncated.size() - 3);
  std::vector<unsigned char> bad_label_magic = lab;
  bad_label_magic[3] = 0x02;
  std::vector<unsigned char> short_labels = lab;
  short_labels.resize(short_labels.size() - 1);

  const bool reject_ok = rejects(bad_magic, false) && rejects(truncated, false) &&
                         rejects(bad_label_magic, true) && rejects(short_labels, true);

  o.pass = decode_ok && reject_ok;
  o.detail = std::string("4-sample fixture decodes to exact pixel values: ") + (decode_ok ? "yes" : "NO") +
             "; malformed magic/truncation rejected with format errors: " + (reject_ok ? "yes" : "NO");
  return o;
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: the full-scale ordering experiment and stylizer convergence
// ---------------------------------------------------------------------------

void run_ordering(std::vector<Outcome>& results) {
  Outcome o6{6, "desk-scale ordering", false, ""};
  Outcome o7{7, "stylizer convergence", false, ""};
  const auto t0 = std::chrono::steady_clock::now();

  io::RunConfig cfg;  // stock configuration: the experiment IS the defaults
  cfg.out_dir = testutil::scratch_dir("acceptance_ordering");

  try {
    harness::PretrainResult pre = harness::pretrain_encoder_run(cfg);
    harness::RainRunResult rain_res = harness::train_rain_run(cfg);

    double total_100 = -1, total_2000 = -1;
    for (const auto& row : rain_res.log) {
      if (row.iter == 100) total_100 = row.total;
      if (row.iter == 2000) total_2000 = row.total;
    }
    o7.pass = total_100 > 0 && total_2000 >= 0 && total_2000 <= 0.5 * total_100;
    o7.detail = "total loss at iter 2000 = " + fmt(total_2000) + ", at iter 100 = " + fmt(total_100) +
                " (need <= 50%; ratio " + fmt(total_100 > 0 ? total_2000 / total_100 : -1.0, 4) + ")";

    harness::StrategyReport rep = harness::compare_strategies(cfg);
    const double secs = seconds_since(t0);

    double med_asm = 0, med_anchored = 0, med_random = 0, med_source = 0;
    for (size_t i = 0; i < rep.strategy_names.size(); ++i) {
      if (rep.strategy_names[i] == "asm") med_asm = rep.median_acc_tgt[i];
      if (rep.strategy_names[i] == "anchored") med_anchored = rep.median_acc_tgt[i];
      if (rep.strategy_names[i] == "random") med_random = rep.median_acc_tgt[i];
      if (rep.strategy_names[i] == "source_only") med_source = rep.median_acc_tgt[i];
    }
    const bool in_budget = secs <= 1800.0;
    o6.pass = rep.verdict && in_budget;
    o6.detail = "median target acc: mined " + fmt(med_asm, 4) + ", anchored " + fmt(med_anchored, 4) +
                " (need +0.01), source-only " + fmt(med_source, 4) + " (need +0.05), random " +
                fmt(med_random, 4) + " (reported, not asserted); source-val acc after pretrain " +
                fmt(pre.val_acc, 4) + "; 2000 train / 500 held-out / 5 seeds / 3000 outer iters; total " +
                fmt(secs, 4) + " s (budget 1800)";
  } catch (const std::exception& e) {
    const std::string msg = std::string("experiment aborted: ") + e.what();
    if (!o7.pass && o7.detail.empty()) o7.detail = msg;
    o6.detail = msg;
  }

  results.push_back(o6);
  results.push_back(o7);
}

void print_outcome(const Outcome& o) {
  std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << o.id << " (" << o.name << "): " << o.detail
            << "\n";
  std::cout.flush();
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "all";
  if (mode != "core" && mode != "ordering" && mode != "all") {
    std::cerr << "usage: acceptance [core|ordering|all]\n";
    return 2;
  }

  std::vector<Outcome> results;
  if (mode == "core" || mode == "all") {
    results.push_back(criterion_gradients());
    print_outcome(results.back());
    results.push_back(criterion_closed_forms());
    print_outcome(results.back());
    results.push_back(criterion_adain());
    print_outcome(results.back());
    results.push_back(criterion_ascent());
    print_outcome(results.back());
    const io::RunConfig tiny = tiny_config("acceptance_tiny");
    results.push_back(criterion_degenerate(tiny));
    print_outcome(results.back());
    results.push_back(criterion_determinism(tiny));
    print_outcome(results.back());
    results.push_back(criterion_idx());
    print_outcome(results.back());
  }
  if (mode == "ordering" || mode == "all") {
    const size_t before = results.size();
    run_ordering(results);
    for (size_t i = before; i < results.size(); ++i) print_outcome(results[i]);
  }

  int failed = 0;
  for (const auto& o : results)
    if (!o.pass) ++failed;
  std::cout << (failed == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED") << " (" << results.size() - failed
            << "/" << results.size() << " criteria)\n";
  return failed == 0 ? 0 : 1;
}
