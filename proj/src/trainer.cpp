#include "edgs/trainer.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>

#include "edgs/loss.hpp"

namespace edgs {

namespace {

const char* group_name(int g) {
  switch (g) {
    case kLrFeatures: return "features";
    case kLrOffsets: return "offsets";
    case kLrScales: return "scales";
    case kLrHeads: return "heads";
    case kLrDeform: return "deform";
  }
  return "?";
}

bool all_finite(const ad::Tensor& t) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

bool per_anchor(const ParamRef& p) { return p.lr_group <= kLrScales; }

RenderMode mode_of(const RunConfig& cfg) {
  return cfg.render_mode == "naive" ? RenderMode::kNaive : RenderMode::kTiled;
}

DeformStrategy strategy_of(const RunConfig& cfg) {
  DeformStrategy s;
  s.kind = parse_deform_kind(cfg.strategy);
  s.sigma = cfg.rbf_sigma;
  s.knn_k = cfg.knn_k;
  return s;
}

}  // namespace

std::vector<FrameTarget> training_frames(const SyntheticScene& scene,
                                         std::size_t holdout_every) {
  std::vector<FrameTarget> out;
  for (std::size_t c = 0; c < scene.spec.n_cameras; ++c)
    for (std::size_t ti = 0; ti < scene.spec.n_timesteps; ++ti) {
      if (holdout_every && ti % holdout_every == 0) continue;
      const std::size_t i = scene.frame_index(c, ti);
      out.push_back({scene.frames[i], &scene.images[i]});
    }
  return out;
}

std::vector<FrameTarget> holdout_frames(const SyntheticScene& scene,
                                        std::size_t holdout_every) {
  std::vector<FrameTarget> out;
  if (!holdout_every) return out;
  for (std::size_t c = 0; c < scene.spec.n_cameras; ++c)
    for (std::size_t ti = 0; ti < scene.spec.n_timesteps; ++ti) {
      if (ti % holdout_every != 0) continue;
      const std::size_t i = scene.frame_index(c, ti);
      out.push_back({scene.frames[i], &scene.images[i]});
    }
  return out;
}

void Adam::init(const std::vector<ParamRef>& params) {
  steps = 0;
  m.clear();
  v.clear();
  for (const ParamRef& p : params) {
    m.push_back(ad::Tensor::zeros(p.tensor->shape()));
    v.push_back(ad::Tensor::zeros(p.tensor->shape()));
  }
}

void Adam::step(const std::vector<ParamRef>& params, const std::vector<ad::Tensor>& grads,
                const std::array<double, 5>& lr, const std::vector<char>* frozen) {
  if (params.size() != m.size() || grads.size() != m.size())
    throw std::runtime_error("optimizer state does not match the parameter list");
  ++steps;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (frozen && (*frozen)[i]) continue;
    ad::Tensor& p = *params[i].tensor;
    const ad::Tensor& g = grads[i];
    if (!p.same_shape(m[i]) || !g.same_shape(p))
      throw std::runtime_error("optimizer moments out of sync for parameter '" +
                               params[i].name + "'");
    const double a = lr[static_cast<std::size_t>(params[i].lr_group)];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= a * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + eps);
    }
  }
}

void Adam::grow_rows(const std::vector<ParamRef>& params) {
  if (params.size() != m.size())
    throw std::runtime_error("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Tensor& p = *params[i].tensor;
    if (p.same_shape(m[i])) continue;
    if (!per_anchor(params[i]) || p.rank() != m[i].rank() || p.dim(0) < m[i].dim(0))
      throw std::runtime_error("parameter '" + params[i].name +
                               "' changed shape in an unsupported way");
    auto grow = [&](ad::Tensor& t) {
      ad::Tensor next = ad::Tensor::zeros(p.shape());
      std::copy(t.data(), t.data() + t.numel(), next.data());
      t = std::move(next);
    };
    grow(m[i]);
    grow(v[i]);
  }
}

void Adam::drop_rows(const std::vector<ParamRef>& params, const std::vector<bool>& drop) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!per_anchor(params[i])) continue;
    remove_rows(m[i], drop);
    remove_rows(v[i], drop);
  }
}

void GradStats::reset(std::size_t n_anchors, std::size_t k) {
  screen.resize(n_anchors);
  opacity_sum.assign(n_anchors * k, 0.0);
  samples.assign(n_anchors, 0);
  offsets_per_anchor = k;
}

void GradStats::accumulate_opacity(const ad::Tensor& opacities) {
  if (opacities.numel() != opacity_sum.size())
    throw std::runtime_error("opacity statistics out of sync with the scene");
  for (std::size_t i = 0; i < opacity_sum.size(); ++i) opacity_sum[i] += opacities[i];
  for (std::size_t a = 0; a < samples.size(); ++a) ++samples[a];
}

double GradStats::densify_stat(std::size_t a) const {
  const std::size_t seen = std::max<std::size_t>(1, screen.visible[a]);
  return screen.grad_accum[a] / static_cast<double>(seen);
}

double GradStats::mean_opacity(std::size_t a) const {
  if (!samples[a]) return 1.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < offsets_per_anchor; ++k)
    sum += opacity_sum[a * offsets_per_anchor + k];
  return sum / static_cast<double>(samples[a] * offsets_per_anchor);
}

std::size_t densify_anchors(AnchorSet& scene, const GradStats& stats, double epsilon,
                            std::size_t m, std::mt19937_64& rng) {
  if (m != 4 && m != 8) throw std::runtime_error("densify: sub-voxel count must be 4 or 8");
  if (stats.screen.size() != scene.n() || stats.samples.size() != scene.n())
    throw std::runtime_error("densify statistics do not match the scene");
  const std::size_t n0 = scene.n();
  const double d = scene.voxel_size;
  auto taken = [&](const std::array<double, 3>& c) {
    for (std::size_t a = 0; a < scene.n(); ++a) {
      const auto p = scene.position(a);
      if (p[0] == c[0] && p[1] == c[1] && p[2] == c[2]) return true;
    }
    return false;
  };
  std::size_t added = 0;
  for (std::size_t a = 0; a < n0; ++a) {
    if (!(stats.densify_stat(a) > epsilon)) continue;
    const auto base = scene.position(a);
    for (std::size_t s = 0; s < m; ++s) {
      // Sub-voxel centers: octants for m=8, x/y quadrants for m=4.
      const double cx = base[0] + (s & 1 ? 3.0 : 1.0) * d / 4.0;
      const double cy = base[1] + (s & 2 ? 3.0 : 1.0) * d / 4.0;
      const double cz = m == 8 ? base[2] + (s & 4 ? 3.0 : 1.0) * d / 4.0 : base[2] + d / 2.0;
      const std::array<double, 3> center{cx, cy, cz};
      if (taken(center)) continue;
      scene.append_anchor(center, a, rng);
      ++added;
    }
  }
  return added;
}

std::vector<bool> select_prune(const AnchorSet& scene, const GradStats& stats,
                               double threshold) {
  std::vector<bool> drop(scene.n(), false);
  for (std::size_t a = 0; a < scene.n(); ++a)
    drop[a] = a < stats.samples.size() && stats.samples[a] > 0 &&
              stats.mean_opacity(a) < threshold;
  return drop;
}

TrainState TrainState::init(const PointCloud& cloud, const RunConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  st.scene = voxelize_points(cloud, cfg.voxel_size, cfg.seed, cfg.offsets_per_anchor,
                             cfg.feature_dim);
  st.heads =
      HeadBank::make(cfg.feature_dim, cfg.offsets_per_anchor, cfg.seed + 1,
                     cfg.view_dependent_color);
  st.strategy = strategy_of(cfg);
  st.adam.init(learnable_inventory(st.scene, st.heads));
  st.stats.reset(st.scene.n(), cfg.offsets_per_anchor);
  st.rng.seed(cfg.seed + 2);
  return st;
}

Checkpoint TrainState::to_checkpoint() {
  Checkpoint c = snapshot_model(scene, heads);
  c.iteration = iteration;
  c.config_text = cfg.to_text();
  std::ostringstream os;
  os << rng;
  c.rng_state = os.str();
  const auto params = learnable_inventory(scene, heads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.arrays.push_back({"adam.m." + params[i].name, adam.m[i].shape(), adam.m[i].raw()});
    c.arrays.push_back({"adam.v." + params[i].name, adam.v[i].shape(), adam.v[i].raw()});
  }
  NamedArray& steps = c.add("adam.steps", {1});
  steps.data[0] = static_cast<double>(adam.steps);
  return c;
}

TrainState TrainState::from_checkpoint(const Checkpoint& c) {
  TrainState st;
  st.cfg = RunConfig::from_text(c.config_text);
  restore_model(c, st.scene, st.heads);
  st.strategy = strategy_of(st.cfg);
  const auto params = learnable_inventory(st.scene, st.heads);
  st.adam.init(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedArray* am = c.find("adam.m." + params[i].name);
    const NamedArray* av = c.find("adam.v." + params[i].name);
    if (am) st.adam.m[i] = ad::Tensor(am->shape, am->data);
    if (av) st.adam.v[i] = ad::Tensor(av->shape, av->data);
  }
  if (const NamedArray* steps = c.find("adam.steps"))
    st.adam.steps = static_cast<std::uint64_t>(steps->data[0]);
  st.iteration = c.iteration;
  if (!c.rng_state.empty()) {
    std::istringstream is(c.rng_state);
    is >> st.rng;
  }
  st.stats.reset(st.scene.n(), st.scene.offsets_per_anchor);
  return st;
}

namespace {

[[noreturn]] void abort_nonfinite(std::uint64_t iteration, const std::vector<ParamRef>& params,
                                  const std::vector<ad::Tensor>* grads) {
  std::string where = "loss is not finite";
  if (grads) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!all_finite((*grads)[i])) {
        where = std::string("non-finite gradient in parameter group '") +
                group_name(params[i].lr_group) + "'";
        break;
      }
  } else {
    for (const ParamRef& p : params)
      if (!all_finite(*p.tensor)) {
        where = std::string("non-finite loss; parameter group '") + group_name(p.lr_group) +
                "' has diverged";
        break;
      }
  }
  throw std::runtime_error("training aborted at iteration " + std::to_string(iteration) +
                           ": " + where);
}

}  // namespace

StepMetrics train_step(TrainState& st, const FrameTarget& frame) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!frame.gt) throw std::runtime_error("training frame has no ground-truth image");
  const auto params = learnable_inventory(st.scene, st.heads);
  if (st.stats.samples.size() != st.scene.n())
    st.stats.reset(st.scene.n(), st.scene.offsets_per_anchor);

  // Two training phases. Before mask_reg_from the gates are forced open and
  // the time-variant decoders fit the true motion; afterwards those decoders
  // freeze and the gate alone carries the reconstruction-vs-regularizer
  // trade-off. Training them jointly lets the decoders inflate their deltas
  // to cancel any gate shrinkage, so every gate eventually collapses.
  const bool mask_phase =
      st.cfg.use_time_mask && st.iteration + 1 >= st.cfg.mask_reg_from;

  ad::Graph g;
  std::vector<ad::Value> leaves;
  leaves.reserve(params.size());
  for (const ParamRef& p : params) leaves.push_back(g.leaf(*p.tensor));
  const ComposeGraph cg =
      build_compose_graph(g, leaves, st.scene, st.heads, st.strategy, frame.cam.t,
                          frame.cam.center(), mask_phase);
  const ad::Value img = rasterize(g, cg.positions, cg.scales, cg.quats, cg.opacities,
                                  cg.colors, frame.cam, mode_of(st.cfg), &st.stats.screen);
  const LossParts parts =
      total_loss(g, img, *frame.gt, cg.mask_probs, st.cfg.lambda_ssim,
                 mask_phase ? st.cfg.lambda_mask : 0.0);

  ++st.iteration;
  const double loss = parts.total.data()[0];
  if (!std::isfinite(loss)) abort_nonfinite(st.iteration, params, nullptr);
  g.backward(parts.total);

  std::vector<ad::Tensor> grads;
  grads.reserve(leaves.size());
  for (const ad::Value& lv : leaves) grads.push_back(lv.grad());
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!all_finite(grads[i])) abort_nonfinite(st.iteration, params, &grads);

  st.stats.accumulate_opacity(cg.opacities.data());

  const double head_decay =
      std::pow(st.cfg.head_lr_decay,
               static_cast<double>(st.iteration) /
                   static_cast<double>(std::max<std::size_t>(1, st.cfg.iterations)));
  const std::array<double, 5> lr{st.cfg.lr_features, st.cfg.lr_offsets, st.cfg.lr_scales,
                                 st.cfg.lr_heads * head_decay, st.cfg.lr_deform};
  std::vector<char> frozen;
  if (mask_phase) {
    frozen.resize(params.size(), 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string& n = params[i].name;
      frozen[i] = n.starts_with("scale.") || n.starts_with("quat.") ||
                  n.starts_with("deform.");
    }
  }
  st.adam.step(params, grads, lr, frozen.empty() ? nullptr : &frozen);

  StepMetrics out;
  out.loss = loss;
  out.l1 = parts.l1.data()[0];
  out.ssim = parts.ssim.data()[0];
  Image render(frame.cam.width, frame.cam.height);
  std::copy(img.data().data(), img.data().data() + img.data().numel(), render.px.begin());
  out.psnr = psnr(render, *frame.gt);
  out.n_anchors = st.scene.n();
  if (cg.mask_probs.valid()) {
    const ad::Tensor& probs = cg.mask_probs.data();
    for (std::size_t a = 0; a < probs.numel(); ++a) {
      out.mask_loss += probs[a];
      out.n_dynamic_anchors += probs[a] > 0.5;
    }
    out.mask_loss /= double(std::max<std::size_t>(1, probs.numel()));
  } else if (st.cfg.use_time_mask) {
    // Pre-gating iterations still report classifier output so the mask
    // columns stay comparable over the whole run.
    for (std::size_t a = 0; a < st.scene.n(); ++a) {
      const double* f = st.scene.features.data() + a * st.scene.feature_dim;
      const double p =
          st.heads.predict_time_mask(std::span<const double>(f, st.scene.feature_dim));
      out.mask_loss += p;
      out.n_dynamic_anchors += p > 0.5;
    }
    out.mask_loss /= double(std::max<std::size_t>(1, st.scene.n()));
  } else {
    out.n_dynamic_anchors = st.scene.n();
  }

  const bool due = st.iteration >= st.cfg.densify_from &&
                   st.iteration <= st.cfg.densify_until &&
                   st.iteration % st.cfg.densify_interval == 0;
  if (due) {
    out.densified = densify_anchors(st.scene, st.stats, st.cfg.densify_grad_threshold,
                                    st.cfg.densify_subvoxels, st.rng);
    if (out.densified) st.adam.grow_rows(learnable_inventory(st.scene, st.heads));
    const std::vector<bool> drop = select_prune(st.scene, st.stats, st.cfg.prune_opacity);
    const std::size_t n_drop =
        static_cast<std::size_t>(std::count(drop.begin(), drop.end(), true));
    if (n_drop == st.scene.n())
      throw std::runtime_error("training aborted at iteration " +
                               std::to_string(st.iteration) +
                               ": pruning would remove every anchor");
    if (n_drop) {
      st.adam.drop_rows(learnable_inventory(st.scene, st.heads), drop);
      std::vector<std::size_t> idx;
      for (std::size_t a = 0; a < drop.size(); ++a)
        if (drop[a]) idx.push_back(a);
      st.scene.remove_anchors(idx);
      out.pruned = n_drop;
    }
    st.stats.reset(st.scene.n(), st.scene.offsets_per_anchor);
    out.n_anchors = st.scene.n();
  }

  out.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

TrainResult train(TrainState& st, const std::vector<FrameTarget>& frames,
                  const std::string& metrics_path) {
  if (frames.empty()) throw std::runtime_error("training needs at least one frame");
  FILE* csv = nullptr;
  if (!metrics_path.empty()) {
    csv = std::fopen(metrics_path.c_str(), "w");
    if (!csv) throw std::runtime_error("cannot write metrics: " + metrics_path);
    std::fprintf(csv, "iteration,loss,l1,ssim,mask_loss,psnr,n_anchors,n_dynamic_anchors,wall_ms\n");
  }
  auto sync = [&] {
    if (!csv) return;
    std::fflush(csv);
    fsync(fileno(csv));
  };

  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainResult res;
  try {
    for (std::size_t i = 0; i < st.cfg.iterations; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), st.rng);
        cursor = 0;
      }
      const StepMetrics m = train_step(st, frames[order[cursor++]]);
      ++res.iterations;
      res.final_loss = m.loss;
      res.last = m;
      if (csv) {
        std::fprintf(csv, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%.3f\n",
                     static_cast<unsigned long long>(st.iteration), m.loss, m.l1, m.ssim,
                     m.mask_loss, m.psnr, m.n_anchors, m.n_dynamic_anchors, m.wall_ms);
        if (st.iteration % 500 == 0) sync();
      }
    }
  } catch (...) {
    sync();
    if (csv) std::fclose(csv);
    throw;
  }
  sync();
  if (csv) std::fclose(csv);
  return res;
}

EvalResult evaluate(TrainState& st, const std::vector<FrameTarget>& frames) {
  if (frames.empty()) throw std::runtime_error("evaluation needs at least one frame");
  EvalResult res;
  for (const FrameTarget& f : frames) {
    const auto prims =
        compose_gaussians(st.scene, st.heads, st.strategy, f.cam.t, f.cam.center(),
                          st.cfg.use_time_mask ? MaskMode::kGated : MaskMode::kOff);
    const Image img = render_image(prims, f.cam, mode_of(st.cfg));
    res.per_frame_psnr.push_back(psnr(img, *f.gt));
    res.psnr += res.per_frame_psnr.back();
    res.ssim += ssim(img, *f.gt);
  }
  res.psnr /= static_cast<double>(frames.size());
  res.ssim /= static_cast<double>(frames.size());
  return res;
}

}  // namespace edgs
