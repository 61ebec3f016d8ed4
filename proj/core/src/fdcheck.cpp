#include "stylemine/fdcheck.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "stylemine/miner.hpp"
#include "stylemine/models.hpp"
#include "stylemine/rain.hpp"
#include "stylemine/stats.hpp"

namespace stylemine::fdcheck {

std::string to_string(const FdReport& r) {
  std::ostringstream os;
  os << (r.pass ? "ok  " : "FAIL") << "  " << r.name << "  rel=" << r.max_rel_err << "  |an|=" << r.analytic_norm
     << "  |fd|=" << r.fd_norm << "  margin=" << r.kink_margin << "  instances=" << r.instances
     << "  resamples=" << r.resamples;
  return os.str();
}

namespace {

// One draw-and-compare pass. Returns false when every allowed draw grazed a
// kink; otherwise fills (rel, an, fd, margin) for the accepted draw.
bool check_instance(const CheckSpec& spec, Rng& rng, const FdOptions& opt, double margin_threshold, int instance,
                    double& rel, double& an, double& fd, double& margin_out, int& resamples) {
  for (int attempt = 0; attempt < opt.max_resamples; ++attempt) {
    Rng draw_rng = rng.stream(spec.name, static_cast<uint64_t>(instance) * 64 + static_cast<uint64_t>(attempt));
    std::vector<Tensor64> inputs = spec.draw(draw_rng, attempt);
    if (inputs.empty()) throw ContractError("check_gradient: spec \"" + spec.name + "\" drew no inputs");

    // Probe: forward once, reject draws that graze a kink.
    std::vector<Tensor64> grads;
    double margin;
    {
      Tape64 tape;
      std::vector<Var64> vars;
      vars.reserve(inputs.size());
      for (auto& t : inputs) vars.push_back(tape.leaf(t, true));
      Var64 loss = spec.build(tape, vars);
      if (!loss.val().is_scalar())
        throw ContractError("check_gradient: spec \"" + spec.name + "\" must build a scalar loss");
      margin = tape.kink_margin();
      if (margin < margin_threshold) {
        ++resamples;
        continue;
      }
      tape.backward(loss);
      for (auto& v : vars) grads.push_back(tape.grad(v));
    }

    auto eval = [&](const std::vector<Tensor64>& xs) {
      Tape64 tape;
      std::vector<Var64> vars;
      vars.reserve(xs.size());
      for (const auto& t : xs) vars.push_back(tape.leaf(t, false));
      Var64 loss = spec.build(tape, vars);
      return loss.val().data[0];
    };

    double diff2 = 0, fd2 = 0, an2 = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      for (int64_t j = 0; j < inputs[i].numel(); ++j) {
        const double keep = inputs[i].data[static_cast<size_t>(j)];
        inputs[i].data[static_cast<size_t>(j)] = keep + opt.step;
        const double fp = eval(inputs);
        inputs[i].data[static_cast<size_t>(j)] = keep - opt.step;
        const double fm = eval(inputs);
        inputs[i].data[static_cast<size_t>(j)] = keep;
        const double g_fd = (fp - fm) / (2 * opt.step);
        const double g_an = grads[i].data[static_cast<size_t>(j)];
        diff2 += (g_an - g_fd) * (g_an - g_fd);
        fd2 += g_fd * g_fd;
        an2 += g_an * g_an;
      }
    }
    fd = std::sqrt(fd2);
    an = std::sqrt(an2);
    rel = std::sqrt(diff2) / std::max(fd, 1e-12);
    margin_out = margin;
    return true;
  }
  return false;
}

}  // namespace

FdReport check_gradient(const CheckSpec& spec, Rng& rng, const FdOptions& opt) {
  FdReport rep;
  rep.name = spec.name;
  rep.kink_margin = std::numeric_limits<double>::infinity();
  rep.pass = true;

  const int n_inst = spec.instances_override > 0 ? spec.instances_override : opt.instances;
  const double margin_threshold = spec.margin_override > 0 ? spec.margin_override : opt.margin_threshold;

  for (int inst = 0; inst < n_inst; ++inst) {
    double rel = 0, an = 0, fd = 0, margin = 0;
    if (!check_instance(spec, rng, opt, margin_threshold, inst, rel, an, fd, margin, rep.resamples)) {
      // Every draw for this instance sat inside the kink margin.
      rep.max_rel_err = std::numeric_limits<double>::infinity();
      rep.pass = false;
      ++rep.instances;
      continue;
    }
    ++rep.instances;
    rep.kink_margin = std::min(rep.kink_margin, margin);
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.analytic_norm = an;
      rep.fd_norm = fd;
    }
    if (!(std::isfinite(rel) && rel <= opt.rel_tol)) rep.pass = false;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

namespace {

using models::Generator;
using models::NetConfig;
using models::ParamBinder;
using models::TaskModel;

// Deterministic pseudo-random constants (weighting patterns, fixed images).
Tensor64 det_pattern(const Shape& s, double lo, double hi, uint64_t salt) {
  Tensor64 t(s);
  for (int64_t i = 0; i < t.numel(); ++i) {
    const uint64_t h = mix64(salt ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(i + 1)));
    t.data[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(h >> 11) * 0x1.0p-53;
  }
  return t;
}

// Weighted sum against a fixed pattern, so the upstream gradient is not
// uniform and element-mixing mistakes show up.
Var64 wsum(Tape64& tape, Var64 v) {
  if (v.val().is_scalar()) return v;
  return sum_all(mul(v, tape.leaf(det_pattern(v.val().shape, -1.0, 1.0, fnv1a64("wsum")))));
}

std::function<std::vector<Tensor64>(Rng&, int)> draw_normals(std::vector<Shape> shapes, double stddev = 1.0) {
  return [shapes = std::move(shapes), stddev](Rng& r, int) {
    std::vector<Tensor64> out;
    out.reserve(shapes.size());
    for (const auto& s : shapes) {
      Tensor64 t(s);
      r.fill_normal(t, 0.0, stddev);
      out.push_back(std::move(t));
    }
    return out;
  };
}

struct ComposedFixture {
  NetConfig cfg;
  std::shared_ptr<Generator<double>> g;
  std::shared_ptr<TaskModel<double>> task;
  Tensor64 f_c, mu_c, sigma_c;              // content features + stats (B=2)
  Tensor64 style_code;                       // (1, 2C) from a fixed style image
  std::array<Tensor64, 4> style_mu, style_sd;  // per-stage target stats (1, C_l)
  Tensor64 eta;                              // fixed reparameterization noise
  Tensor64 eps_anchor;                       // fixed companion latent
  Tensor64 x_styl;                           // (4,3,8,8) pre-stylized batch
  std::vector<int> labels2;                  // interleaved labels for B=2
};

std::shared_ptr<ComposedFixture> make_fixture() {
  auto fx = std::make_shared<ComposedFixture>();
  NetConfig cfg;
  cfg.channels = 4;
  cfg.latent = 2;
  cfg.classes = 3;
  cfg.penultimate = 6;
  cfg.side = 8;
  cfg.vae_hidden = 8;
  fx->cfg = cfg;
  fx->g = std::make_shared<Generator<double>>(models::build_generator<double>(cfg, 99));
  fx->task = std::make_shared<TaskModel<double>>(models::build_task_model<double>(cfg, 123));

  const Tensor64 x_src = det_pattern({2, 3, 8, 8}, 0.1, 0.9, fnv1a64("content"));
  fx->f_c = models::encode_values(*fx->g, x_src);
  auto cs = channel_stats(fx->f_c);
  const int64_t c = cfg.channels;
  fx->mu_c = Tensor64({2, c});
  fx->sigma_c = Tensor64({2, c});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < c; ++j) {
      fx->mu_c.data[static_cast<size_t>(i * c + j)] = cs[static_cast<size_t>(i)].mu[static_cast<size_t>(j)];
      fx->sigma_c.data[static_cast<size_t>(i * c + j)] = cs[static_cast<size_t>(i)].sigma[static_cast<size_t>(j)];
    }

  const Tensor64 x_style = det_pattern({1, 3, 8, 8}, 0.05, 0.95, fnv1a64("style"));
  auto stages = models::encode_stage_values(*fx->g, x_style);
  fx->style_code = rain::style_code(stages[3]);
  for (int s = 0; s < 4; ++s) {
    auto st = channel_stats(stages[static_cast<size_t>(s)])[0];
    const int64_t cl = static_cast<int64_t>(st.channels());
    fx->style_mu[static_cast<size_t>(s)] = Tensor64({1, cl});
    fx->style_sd[static_cast<size_t>(s)] = Tensor64({1, cl});
    std::copy(st.mu.begin(), st.mu.end(), fx->style_mu[static_cast<size_t>(s)].data.begin());
    std::copy(st.sigma.begin(), st.sigma.end(), fx->style_sd[static_cast<size_t>(s)].data.begin());
  }

  fx->eta = det_pattern({1, cfg.latent}, -0.8, 0.8, fnv1a64("eta"));
  fx->eps_anchor = det_pattern({1, cfg.latent}, -0.5, 0.5, fnv1a64("anchor"));
  fx->labels2 = {0, 0, 2, 2};

  // Pre-stylized batch for the task-weight check (values only).
  {
    Tape64 tape;
    ParamBinder<double> binder(tape);
    Var64 f_c = tape.leaf(fx->f_c);
    Var64 mu_c = tape.leaf(fx->mu_c);
    Var64 sd_c = tape.leaf(fx->sigma_c);
    Var64 code_m = tile_rows(models::vae_decode(tape, binder, *fx->g, tape.leaf(fx->eta)), 2);
    Var64 code_a = tile_rows(models::vae_decode(tape, binder, *fx->g, tape.leaf(fx->eps_anchor)), 2);
    Var64 img_m = rain::apply_code_and_decode(tape, binder, *fx->g, f_c, mu_c, sd_c, code_m, false).image;
    Var64 img_a = rain::apply_code_and_decode(tape, binder, *fx->g, f_c, mu_c, sd_c, code_a, false).image;
    fx->x_styl = tape.value(interleave_rows(img_m, img_a));
  }
  return fx;
}

// Mining objective (task loss + weighted consistency) as a function of the
// style latent; everything else is constant. This is the gradient the miner
// ascends.
Var64 mining_objective(Tape64& tape, Var64 eps, const ComposedFixture& fx) {
  ParamBinder<double> binder(tape);
  Var64 f_c = tape.leaf(fx.f_c);
  Var64 mu_c = tape.leaf(fx.mu_c);
  Var64 sd_c = tape.leaf(fx.sigma_c);
  Var64 code_m = tile_rows(models::vae_decode(tape, binder, *fx.g, eps), 2);
  Var64 code_a = tile_rows(models::vae_decode(tape, binder, *fx.g, tape.leaf(fx.eps_anchor)), 2);
  Var64 img_m = rain::apply_code_and_decode(tape, binder, *fx.g, f_c, mu_c, sd_c, code_m, false).image;
  Var64 img_a = rain::apply_code_and_decode(tape, binder, *fx.g, f_c, mu_c, sd_c, code_a, false).image;
  Var64 x = interleave_rows(img_m, img_a);
  auto out = models::task_forward(tape, binder, *fx.task, x, false);
  Var64 l_task = softmax_xent_mean(out.logits, fx.labels2);
  Var64 l_cons = group_consistency(out.z, 2);
  return add(l_task, scale(l_cons, 2e-4));
}

// Full stylizer training objective with one parameter spliced to `w`.
Var64 stylizer_objective(Tape64& tape, ParamSet<double>& ps, const std::string& pname, Var64 w,
                         const ComposedFixture& fx) {
  ParamBinder<double> binder(tape);
  binder.splice(ps, pname, w);
  auto& g = *fx.g;
  Var64 f_c = tape.leaf(fx.f_c);
  Var64 mu_c = tape.leaf(fx.mu_c);
  Var64 sd_c = tape.leaf(fx.sigma_c);
  Var64 code = tile_rows(tape.leaf(fx.style_code), 2);
  auto post = models::vae_encode(tape, binder, g, code, false);
  Var64 eps = add(post.psi, mul(post.xi, tile_rows(tape.leaf(fx.eta), 2)));
  Var64 code_hat = models::vae_decode(tape, binder, g, eps, false);
  Var64 two_u = scale(post.log_xi, 2.0);
  Var64 l_kl = scale(sum_all(sub(add(square(post.psi), exp_(two_u)), add_scalar(two_u, 1.0))), 0.25);
  Var64 l_rec = rowwise_l2_mean(sub(code, code_hat));
  auto sg = rain::apply_code_and_decode(tape, binder, g, f_c, mu_c, sd_c, code_hat, false);
  auto f_out = models::encode(tape, binder, g, sg.image, false);
  Var64 l_c = mean_all(square(sub(f_out.out, sg.adain_feat)));
  Var64 l_s{};
  for (int s = 0; s < 4; ++s) {
    Var64 dm = sub(instance_mean(f_out.stages[static_cast<size_t>(s)]),
                   tile_rows(tape.leaf(fx.style_mu[static_cast<size_t>(s)]), 2));
    Var64 ds = sub(instance_std(f_out.stages[static_cast<size_t>(s)], kEpsStd),
                   tile_rows(tape.leaf(fx.style_sd[static_cast<size_t>(s)]), 2));
    Var64 term = add(rowwise_l2_mean(dm), rowwise_l2_mean(ds));
    l_s = (s == 0) ? term : add(l_s, term);
  }
  Var64 total = add(add(l_c, l_s), add(l_kl, scale(l_rec, 5.0)));
  return total;
}

}  // namespace

std::vector<CheckSpec> standard_checks() {
  std::vector<CheckSpec> specs;
  auto add_spec = [&](std::string name, std::function<std::vector<Tensor64>(Rng&, int)> draw,
                      std::function<Var64(Tape64&, std::vector<Var64>&)> build, int instances_override = 0,
                      double margin_override = 0) {
    specs.push_back(
        CheckSpec{std::move(name), std::move(draw), std::move(build), instances_override, margin_override});
  };

  add_spec("op/add", draw_normals({{2, 3}, {2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, add(v[0], v[1])); });
  add_spec("op/sub", draw_normals({{2, 3}, {2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, sub(v[0], v[1])); });
  add_spec("op/mul", draw_normals({{2, 3}, {2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, mul(v[0], v[1])); });
  add_spec("op/scale", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, scale(v[0], 1.7)); });
  add_spec("op/add_scalar", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, add_scalar(v[0], 0.7)); });
  add_spec("op/relu", draw_normals({{3, 5}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, relu(v[0])); });
  add_spec("op/sigmoid", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, sigmoid(v[0])); });
  add_spec("op/exp", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, exp_(v[0])); });
  add_spec("op/square", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, square(v[0])); });
  add_spec("op/clamp_min", draw_normals({{3, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, clamp_min(v[0], 0.1)); });
  add_spec("op/reshape_copy", draw_normals({{2, 6}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, reshape_copy(v[0], Shape{3, 4})); });
  add_spec("op/slice_cols", draw_normals({{3, 6}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, slice_cols(v[0], 1, 4)); });
  add_spec("op/concat_cols", draw_normals({{2, 3}, {2, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, concat_cols(v[0], v[1])); });
  add_spec("op/tile_rows", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, tile_rows(v[0], 3)); });
  add_spec("op/interleave_rows", draw_normals({{2, 3}, {2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, interleave_rows(v[0], v[1])); });
  add_spec("op/matmul_nt", draw_normals({{2, 4}, {3, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, matmul_nt(v[0], v[1])); });
  add_spec("op/add_rowvec", draw_normals({{2, 4}, {4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, add_rowvec(v[0], v[1])); });
  add_spec("op/conv2d_s1", draw_normals({{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, 0.5),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, conv2d(v[0], v[1], v[2], 1, 1)); });
  add_spec("op/conv2d_s2", draw_normals({{1, 2, 6, 6}, {2, 2, 3, 3}, {2}}, 0.5),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, conv2d(v[0], v[1], v[2], 2, 1)); });
  add_spec("op/upsample2x", draw_normals({{1, 2, 3, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, upsample2x(v[0])); });
  add_spec("op/instance_mean", draw_normals({{2, 3, 4, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, instance_mean(v[0])); });
  add_spec("op/instance_std", draw_normals({{2, 3, 4, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return wsum(t, instance_std(v[0], kEpsStd)); });
  add_spec(
      "op/normalize_affine",
      [](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64({2, 3, 4, 4}));
        r.fill_normal(v[0]);
        v.push_back(Tensor64({2, 3}));
        r.fill_normal(v[1], 0.0, 0.5);
        v.push_back(Tensor64({2, 3}));
        r.fill_uniform(v[2], 0.5, 1.5);  // plays the std: keep it positive
        v.push_back(Tensor64({2, 3}));
        r.fill_uniform(v[3], 0.5, 1.5);
        v.push_back(Tensor64({2, 3}));
        r.fill_normal(v[4], 0.0, 0.5);
        return v;
      },
      [](Tape64& t, std::vector<Var64>& v) { return wsum(t, normalize_affine(v[0], v[1], v[2], v[3], v[4])); });
  add_spec(
      "op/adain",
      [](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64({2, 3, 4, 4}));
        r.fill_normal(v[0]);
        v.push_back(Tensor64({2, 3}));
        r.fill_normal(v[1], 0.0, 0.5);
        v.push_back(Tensor64({2, 3}));
        r.fill_uniform(v[2], 0.5, 1.5);
        return v;
      },
      [](Tape64& t, std::vector<Var64>& v) { return wsum(t, adain_graph(v[0], v[1], v[2])); });
  add_spec("op/sum_all", draw_normals({{2, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return sum_all(square(v[0])); });
  add_spec("op/mean_all", draw_normals({{2, 3, 2}}),
           [](Tape64& t, std::vector<Var64>& v) { return mean_all(square(v[0])); });
  add_spec("op/rowwise_l2_mean", draw_normals({{3, 4}}),
           [](Tape64& t, std::vector<Var64>& v) { return rowwise_l2_mean(v[0]); });
  add_spec("op/softmax_xent_mean", draw_normals({{3, 4}}), [](Tape64& t, std::vector<Var64>& v) {
    return softmax_xent_mean(v[0], std::vector<int>{0, 2, 3});
  });
  add_spec("op/group_consistency", draw_normals({{4, 3}}),
           [](Tape64& t, std::vector<Var64>& v) { return group_consistency(v[0], 2); });

  auto fx = make_fixture();
  // Deep compositions: thousands of kinked elements, so use the tighter
  // rejection margin (see CheckSpec::margin_override).
  constexpr double kDeepMargin = 2.5e-4;
  add_spec(
      "pipeline/latent_to_objective",
      [fx](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64({1, fx->cfg.latent}));
        r.fill_normal(v[0], 0.0, 0.8);
        return v;
      },
      [fx](Tape64& t, std::vector<Var64>& v) { return mining_objective(t, v[0], *fx); }, 0, kDeepMargin);
  add_spec(
      "pipeline/decoder_weight",
      [fx](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64(fx->g->dec.at("d2.w").value.shape));
        r.fill_normal(v[0], 0.0, 0.25);
        return v;
      },
      [fx](Tape64& t, std::vector<Var64>& v) { return stylizer_objective(t, fx->g->dec, "d2.w", v[0], *fx); }, 5,
      kDeepMargin);
  add_spec(
      "pipeline/vae_encoder_weight",
      [fx](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64(fx->g->vae_enc.at("f2.w").value.shape));
        r.fill_normal(v[0], 0.0, 0.3);
        return v;
      },
      [fx](Tape64& t, std::vector<Var64>& v) { return stylizer_objective(t, fx->g->vae_enc, "f2.w", v[0], *fx); },
      5, kDeepMargin);
  add_spec(
      "pipeline/task_weight",
      [fx](Rng& r, int) {
        std::vector<Tensor64> v;
        v.push_back(Tensor64(fx->task->params.at("c1.w").value.shape));
        r.fill_normal(v[0], 0.0, 0.3);
        return v;
      },
      [fx](Tape64& t, std::vector<Var64>& v) {
        ParamBinder<double> binder(t);
        binder.splice(fx->task->params, "c1.w", v[0]);
        auto out = models::task_forward(t, binder, *fx->task, t.leaf(fx->x_styl), false);
        Var64 l_task = softmax_xent_mean(out.logits, fx->labels2);
        return add(l_task, scale(group_consistency(out.z, 2), 2e-4));
      },
      5, kDeepMargin);

  return specs;
}

std::vector<FdReport> run_gradcheck_suite(uint64_t seed, bool inject_fault, const FdOptions& opt) {
  detail::fault_injection().store(inject_fault, std::memory_order_relaxed);
  std::vector<FdReport> reports;
  Rng rng(seed);
  try {
    for (const auto& spec : standard_checks()) reports.push_back(check_gradient(spec, rng, opt));
  } catch (...) {
    detail::fault_injection().store(false, std::memory_order_relaxed);
    throw;
  }
  detail::fault_injection().store(false, std::memory_order_relaxed);
  return reports;
}

}  // namespace stylemine::fdcheck
