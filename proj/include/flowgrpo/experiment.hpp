#pragma once

// Experiment runner: toy mixture data, pretraining by flow-matching or
// denoising regression, GRPO fine-tuning with on-disk artifacts, ablation
// presets and SVG reward curves.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowgrpo/config.hpp"
#include "flowgrpo/errors.hpp"
#include "flowgrpo/grpo.hpp"
#include "flowgrpo/nn.hpp"
#include "flowgrpo/parallel.hpp"
#include "flowgrpo/random.hpp"
#include "flowgrpo/rewards.hpp"
#include "flowgrpo/samplers.hpp"
#include "flowgrpo/schedules.hpp"

namespace flowgrpo {

// ---------------------------------------------------------------------------
// Data

// Isotropic Gaussian mixture sum_j w_j N(mean_j, scale^2 I).
struct MixtureData {
  std::vector<Vector> means{{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}};
  std::vector<double> weights{0.25, 0.25, 0.25, 0.25};
  double scale = 0.25;

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  void validate() const {
    if (means.empty()) throw InputError("mixture needs at least one component");
    for (const auto& m : means)
      if (m.size() != dim() || m.empty())
        throw InputError("mixture means must share a nonzero dimension");
    if (weights.size() != means.size())
      throw InputError("mixture needs one weight per component");
    for (double w : weights)
      if (!(w > 0.0)) throw InputError("mixture weights must be > 0");
    if (!(scale > 0.0)) throw InputError("mixture scale must be > 0");
  }

  Vector sample(Rng& rng) const {
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const Vector& m = means[pick(rng)];
    Vector x = standard_normal(dim(), rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = m[i] + scale * x[i];
    return x;
  }
};

// ---------------------------------------------------------------------------
// Configuration

struct RewardConfig {
  RewardSpec spec;
  std::optional<double> threshold;
  // Threshold at this quantile of the base reward under the initial policy.
  std::optional<double> threshold_quantile;

  bool operator==(const RewardConfig& o) const {
    return spec.kind == o.spec.kind && spec.targets == o.spec.targets &&
           spec.bandwidth == o.spec.bandwidth && spec.offset == o.spec.offset &&
           threshold == o.threshold && threshold_quantile == o.threshold_quantile;
  }
};

struct PretrainConfig {
  std::size_t iters = 4000;
  std::size_t batch = 128;
  double learning_rate = 3e-3;
  std::size_t eval_every = 200;
  std::size_t patience = 4;
  std::size_t val_size = 2048;
  double min_improvement = 1e-3;  // relative, for the plateau test

  bool operator==(const PretrainConfig&) const = default;
};

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs";
  ScheduleKind schedule = ScheduleKind::rectified_flow;
  MixtureData data;
  NetConfig net;
  std::size_t steps = 25;
  GrpoConfig grpo = default_grpo();
  std::vector<RewardConfig> rewards;
  PretrainConfig pretrain;
  std::size_t iterations = 300;
  std::size_t ckpt_every = 50;
  std::size_t plot_window = 20;

  // Trainer defaults at toy scale: 8 prompts per iteration instead of 32
  // and a learning rate sized for a network with ~2k parameters.
  static GrpoConfig default_grpo() {
    GrpoConfig g;
    g.prompts_per_iter = 8;
    g.learning_rate = 3e-2;
    return g;
  }

  NoiseSchedule noise_schedule() const {
    return schedule == ScheduleKind::vp_diffusion ? NoiseSchedule::vp_diffusion()
                                                  : NoiseSchedule::rectified_flow();
  }

  StepPlan step_plan() const {
    return StepPlan::uniform(steps, grpo.eps_level,
                             StepPlan::start_time(noise_schedule()));
  }

  void validate() const {
    try {
      data.validate();
      if (net.input_dim != data.dim())
        throw InputError("net input dimension differs from data dimension");
      if (net.condition_count == 0) throw InputError("need at least one condition");
      if (steps == 0) throw InputError("sampler.steps must be >= 1");
      grpo.validate();
      if (rewards.empty()) throw InputError("at least one reward is required");
      for (const auto& r : rewards) {
        r.spec.validate();
        for (const auto& t : r.spec.targets)
          if (t.size() != data.dim()) throw InputError("reward target dimension mismatch");
        if (r.threshold && r.threshold_quantile)
          throw InputError("reward threshold and threshold_quantile are exclusive");
        if (r.threshold_quantile && !(*r.threshold_quantile > 0.0 && *r.threshold_quantile < 1.0))
          throw InputError("threshold_quantile must lie in (0, 1)");
      }
      if (pretrain.batch == 0 || pretrain.eval_every == 0 || pretrain.val_size == 0)
        throw InputError("pretrain batch, eval_every and val_size must be >= 1");
      if (ckpt_every == 0) throw InputError("finetune.ckpt_every must be >= 1");
      if (plot_window == 0) throw InputError("finetune.plot_window must be >= 1");
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
  }

  static ExperimentConfig from_map(const ConfigMap& m) {
    ExperimentConfig c;
    try {
      c.seed = m.require_u64("seed");
      c.out_dir = m.get_string("out_dir", c.out_dir);
      const std::string sched = m.get_string("schedule", "rectified_flow");
      if (sched == "rectified_flow") {
        c.schedule = ScheduleKind::rectified_flow;
      } else if (sched == "vp_diffusion") {
        c.schedule = ScheduleKind::vp_diffusion;
      } else {
        throw ConfigError("schedule: unknown schedule " + sched);
      }
      c.net.kind = parse_prediction_kind(m.get_string("prediction_kind", to_string(c.net.kind)));

      c.data.means = m.get_vectors("data.means", c.data.means);
      c.data.weights = m.get_doubles(
          "data.weights", std::vector<double>(c.data.means.size(), 1.0 / double(c.data.means.size())));
      c.data.scale = m.get_double("data.scale", c.data.scale);

      c.net.input_dim = c.data.dim();
      c.net.hidden_dims = m.get_sizes("net.hidden", c.net.hidden_dims);
      c.net.time_embed_dim = m.get_size("net.time_embed", c.net.time_embed_dim);
      c.net.cond_embed_dim = m.get_size("net.cond_embed", c.net.cond_embed_dim);
      c.net.condition_count = m.get_size("net.conditions", c.data.means.size());

      c.steps = m.get_size("sampler.steps", c.steps);

      GrpoConfig& g = c.grpo;
      g.clip_eps = m.get_double("grpo.clip_eps", g.clip_eps);
      g.group_size = m.get_size("grpo.group_size", g.group_size);
      g.tau = m.get_double("grpo.tau", g.tau);
      g.eps_level = m.get_double("grpo.eps_level", g.eps_level);
      g.updates_per_iter = m.get_size("grpo.updates_per_iter", g.updates_per_iter);
      g.prompts_per_iter = m.get_size("grpo.prompts_per_iter", g.prompts_per_iter);
      g.learning_rate = m.get_double("grpo.learning_rate", g.learning_rate);
      g.grad_clip_norm = m.get_double("grpo.grad_clip_norm", g.grad_clip_norm);
      g.weight_decay = m.get_double("grpo.weight_decay", g.weight_decay);
      g.kl_coeff = m.get_double("grpo.kl_coeff", g.kl_coeff);
      g.timestep_mode = parse_timestep_mode(
          m.get_string("grpo.timestep_mode", to_string(g.timestep_mode)));
      g.resample_per_update = m.get_bool("grpo.resample_per_update", g.resample_per_update);
      g.objective = parse_objective(m.get_string("grpo.objective", to_string(g.objective)));
      if (m.has("bestofn.n") || m.has("bestofn.top") || m.has("bestofn.bottom")) {
        CurationPlan p;
        p.n_candidates = m.get_size("bestofn.n", p.n_candidates);
        p.keep_top = m.get_size("bestofn.top", p.keep_top);
        p.keep_bottom = m.get_size("bestofn.bottom", p.keep_bottom);
        g.bestofn = p;
      }

      for (std::size_t k = 0;; ++k) {
        const std::string pre = "reward." + std::to_string(k) + ".";
        const bool any = std::any_of(m.entries().begin(), m.entries().end(),
                                     [&](const auto& kv) { return kv.first.rfind(pre, 0) == 0; });
        if (!any) break;
        RewardConfig r;
        r.spec.kind = parse_reward_kind(m.require_string(pre + "kind"));
        r.spec.targets = m.get_vectors(pre + "targets", c.data.means);
        r.spec.bandwidth = m.get_double(pre + "bandwidth", 1.0);
        r.spec.offset = m.get_double(pre + "offset", 0.0);
        if (m.has(pre + "threshold")) r.threshold = m.get_double(pre + "threshold", 0.0);
        if (m.has(pre + "threshold_quantile"))
          r.threshold_quantile = m.get_double(pre + "threshold_quantile", 0.0);
        c.rewards.push_back(std::move(r));
      }
      if (c.rewards.empty())
        c.rewards.push_back({RewardSpec::mode_affinity(c.data.means, 1.0), {}, {}});

      PretrainConfig& p = c.pretrain;
      p.iters = m.get_size("pretrain.iters", p.iters);
      p.batch = m.get_size("pretrain.batch", p.batch);
      p.learning_rate = m.get_double("pretrain.learning_rate", p.learning_rate);
      p.eval_every = m.get_size("pretrain.eval_every", p.eval_every);
      p.patience = m.get_size("pretrain.patience", p.patience);
      p.val_size = m.get_size("pretrain.val_size", p.val_size);
      p.min_improvement = m.get_double("pretrain.min_improvement", p.min_improvement);

      c.iterations = m.get_size("finetune.iters", c.iterations);
      c.ckpt_every = m.get_size("finetune.ckpt_every", c.ckpt_every);
      c.plot_window = m.get_size("finetune.plot_window", c.plot_window);
      m.check_all_used();
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    return from_map(ConfigMap::load(path));
  }

  // Canonical text of the effective configuration; parsing it back yields
  // the same configuration and the same text.
  std::string to_text() const {
    std::ostringstream os;
    auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
    auto num = [&](const std::string& k, double v) { kv(k, format_double(v)); };
    auto vecs = [](const std::vector<Vector>& vs) {
      std::string s;
      for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) s += "; ";
        for (std::size_t j = 0; j < vs[i].size(); ++j) {
          if (j) s += ',';
          s += format_double(vs[i][j]);
        }
      }
      return s;
    };
    auto list = [](const auto& xs) {
      std::string s;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(xs[i])>>)
          s += format_double(xs[i]);
        else
          s += std::to_string(xs[i]);
      }
      return s;
    };
    kv("seed", std::to_string(seed));
    kv("out_dir", out_dir);
    kv("schedule", schedule == ScheduleKind::vp_diffusion ? "vp_diffusion" : "rectified_flow");
    kv("prediction_kind", to_string(net.kind));
    kv("data.means", vecs(data.means));
    kv("data.weights", list(data.weights));
    num("data.scale", data.scale);
    kv("net.hidden", list(net.hidden_dims));
    kv("net.time_embed", std::to_string(net.time_embed_dim));
    kv("net.cond_embed", std::to_string(net.cond_embed_dim));
    kv("net.conditions", std::to_string(net.condition_count));
    kv("sampler.steps", std::to_string(steps));
    num("grpo.clip_eps", grpo.clip_eps);
    kv("grpo.group_size", std::to_string(grpo.group_size));
    num("grpo.tau", grpo.tau);
    num("grpo.eps_level", grpo.eps_level);
    kv("grpo.updates_per_iter", std::to_string(grpo.updates_per_iter));
    kv("grpo.prompts_per_iter", std::to_string(grpo.prompts_per_iter));
    num("grpo.learning_rate", grpo.learning_rate);
    num("grpo.grad_clip_norm", grpo.grad_clip_norm);
    num("grpo.weight_decay", grpo.weight_decay);
    num("grpo.kl_coeff", grpo.kl_coeff);
    kv("grpo.timestep_mode", to_string(grpo.timestep_mode));
    kv("grpo.resample_per_update", grpo.resample_per_update ? "true" : "false");
    kv("grpo.objective", to_string(grpo.objective));
    if (grpo.bestofn) {
      kv("bestofn.n", std::to_string(grpo.bestofn->n_candidates));
      kv("bestofn.top", std::to_string(grpo.bestofn->keep_top));
      kv("bestofn.bottom", std::to_string(grpo.bestofn->keep_bottom));
    }
    for (std::size_t k = 0; k < rewards.size(); ++k) {
      const std::string pre = "reward." + std::to_string(k) + ".";
      const RewardConfig& r = rewards[k];
      kv(pre + "kind", to_string(r.spec.kind));
      kv(pre + "targets", vecs(r.spec.targets));
      num(pre + "bandwidth", r.spec.bandwidth);
      num(pre + "offset", r.spec.offset);
      if (r.threshold) num(pre + "threshold", *r.threshold);
      if (r.threshold_quantile) num(pre + "threshold_quantile", *r.threshold_quantile);
    }
    kv("pretrain.iters", std::to_string(pretrain.iters));
    kv("pretrain.batch", std::to_string(pretrain.batch));
    num("pretrain.learning_rate", pretrain.learning_rate);
    kv("pretrain.eval_every", std::to_string(pretrain.eval_every));
    kv("pretrain.patience", std::to_string(pretrain.patience));
    kv("pretrain.val_size", std::to_string(pretrain.val_size));
    num("pretrain.min_improvement", pretrain.min_improvement);
    kv("finetune.iters", std::to_string(iterations));
    kv("finetune.ckpt_every", std::to_string(ckpt_every));
    kv("finetune.plot_window", std::to_string(plot_window));
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Pretraining

namespace detail {

inline constexpr std::uint64_t kTagInit = 0x696E6974;
inline constexpr std::uint64_t kTagBatch = 0x62617463;
inline constexpr std::uint64_t kTagVal = 0x76616C69;
inline constexpr std::uint64_t kTagThreshold = 0x74687265;
inline constexpr std::uint64_t kTagDump = 0x64756D70;
inline constexpr std::size_t kRegressionChunks = 8;

struct RegressionSample {
  Vector z, target;
  double t = 0.0;
  CondId cond = 0;
};

// Conditions are drawn uniformly and independently of the data: the
// pretrained model is the unconditional mixture sampler that RL steers.
inline RegressionSample regression_sample(const ExperimentConfig& cfg,
                                          const NoiseSchedule& sched, Rng& rng) {
  RegressionSample s;
  const Vector x = cfg.data.sample(rng);
  const Vector eps = standard_normal(x.size(), rng);
  std::uniform_real_distribution<double> ut(kTimeMargin, 1.0 - kTimeMargin);
  std::uniform_int_distribution<CondId> uc(0, cfg.net.condition_count - 1);
  s.t = ut(rng);
  s.cond = uc(rng);
  const double a = sched.alpha(s.t), sg = sched.sigma(s.t);
  s.z.resize(x.size());
  s.target.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    s.z[i] = a * x[i] + sg * eps[i];
    s.target[i] = cfg.net.kind == PredictionKind::epsilon
                      ? eps[i]
                      : sched.dalpha(s.t) * x[i] + sched.dsigma(s.t) * eps[i];
  }
  return s;
}

// Mean squared error per coordinate; gradients go to grads when nonempty.
inline double regression_loss(const DenoiserNet& net,
                              std::span<const RegressionSample> batch,
                              std::span<double> grads, double scale) {
  double loss = 0.0;
  for (const auto& s : batch) {
    NetTape tape;
    const Vector pred = net.forward(s.z, s.t, s.cond, tape);
    Vector up(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred[i] - s.target[i];
      loss += d * d / double(pred.size());
      up[i] = 2.0 * d / double(pred.size()) * scale;
    }
    if (!grads.empty()) net.backward(tape, up, grads);
  }
  return loss;
}

// Chunked evaluation: fixed chunk boundaries and in-order reduction keep the
// result independent of the worker count.
inline double chunked_regression(const DenoiserNet& net,
                                 const std::vector<RegressionSample>& samples,
                                 ParamStore* params) {
  const std::size_t n = samples.size();
  const std::size_t chunks = std::min(kRegressionChunks, n);
  std::vector<double> losses(chunks, 0.0);
  std::vector<Vector> grads(params ? chunks : 0, Vector(params ? params->size() : 0, 0.0));
  const double scale = 1.0 / double(n);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * n / chunks, hi = (c + 1) * n / chunks;
    std::span<const RegressionSample> part(samples.data() + lo, hi - lo);
    losses[c] = regression_loss(net, part, params ? std::span<double>(grads[c])
                                                  : std::span<double>(), scale);
  });
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    loss += losses[c];
    if (params) {
      auto sink = params->grads();
      for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += grads[c][j];
    }
  }
  return loss / double(n);
}

}  // namespace detail

inline DenoiserNet initial_network(const ExperimentConfig& cfg) {
  DenoiserNet net(cfg.net);
  net.initialize(stream_seed(cfg.seed, {detail::kTagInit}), /*zero_head=*/false);
  return net;
}

struct PretrainReport {
  std::size_t iterations = 0;
  double val_loss = 0.0;
  bool plateaued = false;
};

// Regression on the forward process until the validation loss stops
// improving by min_improvement (relative) for `patience` evaluations, or the
// iteration budget runs out.
inline DenoiserNet pretrain(const ExperimentConfig& cfg,
                            PretrainReport* report = nullptr,
                            std::ostream* log = nullptr) {
  cfg.validate();
  const NoiseSchedule sched = cfg.noise_schedule();
  DenoiserNet net = initial_network(cfg);
  PretrainReport rep;
  if (cfg.pretrain.iters == 0) {
    if (report) *report = rep;
    return net;
  }
  std::vector<detail::RegressionSample> val(cfg.pretrain.val_size);
  {
    Rng rng = make_stream(cfg.seed, {detail::kTagVal});
    for (auto& s : val) s = detail::regression_sample(cfg, sched, rng);
  }
  auto opt = OptimizerState::for_params(net.params(), cfg.pretrain.learning_rate, 0.0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::vector<detail::RegressionSample> batch(cfg.pretrain.batch);
  for (std::size_t it = 0; it < cfg.pretrain.iters; ++it) {
    Rng rng = make_stream(cfg.seed, {detail::kTagBatch, it});
    for (auto& s : batch) s = detail::regression_sample(cfg, sched, rng);
    const double loss = detail::chunked_regression(net, batch, &net.params());
    if (!std::isfinite(loss))
      throw NumericalError("pretraining diverged at iteration " + std::to_string(it));
    optimizer_step(opt, net.params(), 10.0);
    rep.iterations = it + 1;
    if ((it + 1) % cfg.pretrain.eval_every == 0) {
      rep.val_loss = detail::chunked_regression(net, val, nullptr);
      if (log) *log << "pretrain iter " << it + 1 << " val_loss " << rep.val_loss << '\n';
      if (rep.val_loss < best * (1.0 - cfg.pretrain.min_improvement)) {
        best = rep.val_loss;
        stale = 0;
      } else if (++stale >= cfg.pretrain.patience) {
        rep.plateaued = true;
        break;
      }
    }
  }
  rep.val_loss = detail::chunked_regression(net, val, nullptr);
  if (report) *report = rep;
  return net;
}

// ---------------------------------------------------------------------------
// Summaries and plots

// Trailing moving average; the first window-1 entries average what exists.
inline std::vector<double> moving_average(const std::vector<double>& v,
                                          std::size_t window) {
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    sum += v[i];
    if (i >= window) sum -= v[i - window];
    out[i] = sum / double(std::min(i + 1, window));
  }
  return out;
}

inline double head_mean(const std::vector<double>& v, std::size_t n) {
  n = std::min(n, v.size());
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s / double(n);
}

inline double tail_mean(const std::vector<double>& v, std::size_t n) {
  n = std::min(n, v.size());
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / double(n);
}

inline std::vector<double> reward_series(const std::vector<IterationReport>& r,
                                         std::size_t k = 0) {
  std::vector<double> out;
  for (const auto& x : r) out.push_back(x.mean_rewards.at(k));
  return out;
}

struct PlotSeries {
  std::string name;
  std::vector<double> values;
};

// Raw values drawn faintly, moving average on top.
inline std::string reward_plot_svg(const std::vector<PlotSeries>& series,
                                   std::size_t window, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double W = 760, H = 440, L = 70, R = 170, T = 40, B = 50;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
  }
  if (!std::isfinite(ymin)) ymin = 0.0, ymax = 1.0;
  if (ymax - ymin < 1e-12) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  const double xmax = std::max<double>(1.0, double(n) - 1.0);
  auto px = [&](double i) { return L + (W - L - R) * i / xmax; };
  auto py = [&](double v) { return T + (H - T - B) * (ymax - v) / (ymax - ymin); };

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << L << "\" y=\"24\" font-size=\"15\">" << title << "</text>\n";
  os << "<g stroke=\"#ccc\">\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = ymin + (ymax - ymin) * k / 5.0;
    os << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(v) << "\" y2=\""
       << py(v) << "\"/>\n";
  }
  os << "</g>\n";
  for (int k = 0; k <= 5; ++k) {
    const double v = ymin + (ymax - ymin) * k / 5.0;
    const double i = xmax * k / 5.0;
    os << "<text x=\"" << L - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v
       << "</text>\n";
    os << "<text x=\"" << px(i) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
       << std::llround(i) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\">iteration</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 18 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">mean reward</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
     << H - T - B << "\" fill=\"none\" stroke=\"black\"/>\n";
  auto polyline = [&](const std::vector<double>& v, const char* color, double opacity,
                      double width) {
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-opacity=\"" << opacity
       << "\" stroke-width=\"" << width << "\" points=\"";
    for (std::size_t i = 0; i < v.size(); ++i)
      if (std::isfinite(v[i])) os << px(double(i)) << ',' << py(v[i]) << ' ';
    os << "\"/>\n";
  };
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 8];
    polyline(series[s].values, c, 0.25, 1.0);
    polyline(moving_average(series[s].values, window), c, 1.0, 2.0);
    const double ly = T + 16 + 18.0 * double(s);
    os << "<line x1=\"" << W - R + 12 << "\" x2=\"" << W - R + 36 << "\" y1=\"" << ly - 4
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 42 << "\" y=\"" << ly << "\">" << series[s].name << "</text>\n";
  }
  os << "<text x=\"" << W - R + 12 << "\" y=\"" << T + 24 + 18.0 * double(series.size())
     << "\" fill=\"#555\">moving average, window " << window << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw StateError("cannot write " + p.string());
  out << text;
  if (!out) throw StateError("failed writing " + p.string());
}

// Reads the mean_reward_k* columns of a metrics CSV.
inline std::vector<PlotSeries> read_metrics_rewards(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw InputError("cannot read metrics file " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty metrics file " + csv_path);
  const auto header = detail::split(line, ',');
  std::vector<std::size_t> cols;
  std::vector<PlotSeries> series;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j].rfind("mean_reward_k", 0) == 0) {
      cols.push_back(j);
      series.push_back({header[j], {}});
    }
  if (cols.empty()) throw InputError("no mean_reward columns in " + csv_path);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() != header.size()) throw InputError("ragged metrics row in " + csv_path);
    for (std::size_t s = 0; s < cols.size(); ++s) {
      try {
        series[s].values.push_back(std::stod(cells[cols[s]]));
      } catch (const std::exception&) {
        series[s].values.push_back(std::numeric_limits<double>::quiet_NaN());
      }
    }
  }
  return series;
}

// Plot from a metrics CSV alone; writes <csv stem>.svg next to it.
inline std::string plot_metrics_csv(const std::string& csv_path, std::size_t window = 20) {
  const auto series = read_metrics_rewards(csv_path);
  std::filesystem::path out(csv_path);
  out.replace_extension(".svg");
  write_text_file(out, reward_plot_svg(series, window, "reward curve"));
  return out.string();
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct RunArtifacts {
  std::string metrics_csv;
  std::vector<std::string> checkpoints;
  std::string plot;
  std::string config_snapshot;
  std::vector<std::string> trajectory_dumps;
};

struct FinetuneRun {
  RunArtifacts artifacts;
  std::vector<IterationReport> reports;
  std::vector<Reward> rewards;  // thresholds resolved
  std::optional<std::string> abort_reason;

  bool finite() const {
    if (abort_reason) return false;
    for (const auto& r : reports)
      if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) return false;
    return true;
  }
};

// Quantile of the base reward over n rollouts of the given policy with
// uniformly drawn conditions.
inline double policy_reward_quantile(const ExperimentConfig& cfg, const DenoiserNet& net,
                                     const RewardSpec& spec, double q, std::size_t n) {
  const NoiseSchedule sched = cfg.noise_schedule();
  const StepPlan plan = cfg.step_plan();
  std::vector<double> r(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = make_stream(cfg.seed, {detail::kTagThreshold, i});
    std::uniform_int_distribution<CondId> uc(0, cfg.net.condition_count - 1);
    const CondId c = uc(rng);
    const Vector init = standard_normal(net.input_dim(), rng);
    r[i] = eval_reward(spec, rollout(sched, net, plan, c, init, rng).final_state(), c);
  });
  std::sort(r.begin(), r.end());
  const auto idx = static_cast<std::size_t>(std::ceil(q * double(n))) - 1;
  return r[std::min(idx, n - 1)];
}

inline std::vector<Reward> resolve_rewards(const ExperimentConfig& cfg, const DenoiserNet& net,
                                           std::size_t quantile_samples = 10000) {
  std::vector<Reward> out;
  for (const auto& rc : cfg.rewards) {
    Reward r(rc.spec);
    if (rc.threshold) r.threshold = *rc.threshold;
    if (rc.threshold_quantile)
      r.threshold = policy_reward_quantile(cfg, net, rc.spec, *rc.threshold_quantile,
                                           quantile_samples);
    out.push_back(std::move(r));
  }
  return out;
}

namespace detail {

inline std::string ckpt_name(std::size_t iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%05zu.bin", iter);
  return buf;
}

inline std::vector<std::string> dump_trajectories(const ExperimentConfig& cfg,
                                                  const DenoiserNet& net,
                                                  const std::filesystem::path& dir,
                                                  std::size_t iter) {
  std::vector<std::string> paths;
  const NoiseSchedule sched = cfg.noise_schedule();
  for (CondId c = 0; c < cfg.net.condition_count; ++c) {
    Rng rng = make_stream(cfg.seed, {kTagDump, iter, c});
    const Vector init = standard_normal(net.input_dim(), rng);
    const Trajectory tr = rollout(sched, net, cfg.step_plan(), c, init, rng);
    char buf[64];
    std::snprintf(buf, sizeof buf, "traj_%05zu_cond%zu.txt", iter, c);
    std::ostringstream os;
    write_trajectory_dump(os, tr);
    write_text_file(dir / buf, os.str());
    paths.push_back((dir / buf).string());
  }
  return paths;
}

}  // namespace detail

// Runs the GRPO budget from `net`, writing into dir:
//   config.snapshot   effective configuration
//   metrics.csv       one row per iteration, flushed as it goes
//   ckpt_NNNNN.bin    initial weights, every ckpt_every iterations, final
//   traj_*.txt        one rollout per condition at the end
//   metrics.svg       reward curve
// A numerical abort ends the run early; the partial CSV stays on disk.
inline FinetuneRun finetune_run(const ExperimentConfig& cfg, DenoiserNet net,
                                const std::filesystem::path& dir,
                                std::ostream* log = nullptr) {
  cfg.validate();
  if (!(net.config() == cfg.net))
    throw ConfigError("checkpoint network dimensions differ from the config");
  std::filesystem::create_directories(dir);
  FinetuneRun run;
  RunArtifacts& art = run.artifacts;
  art.config_snapshot = (dir / "config.snapshot").string();
  write_text_file(art.config_snapshot, cfg.to_text());

  run.rewards = resolve_rewards(cfg, net);
  if (log)
    for (std::size_t k = 0; k < run.rewards.size(); ++k)
      if (run.rewards[k].threshold)
        *log << "reward " << k << " threshold " << format_double(*run.rewards[k].threshold)
             << '\n';

  auto save = [&](std::size_t iter) {
    const auto p = dir / detail::ckpt_name(iter);
    save_checkpoint(net, p.string());
    art.checkpoints.push_back(p.string());
  };
  save(0);

  art.metrics_csv = (dir / "metrics.csv").string();
  std::ofstream csv(art.metrics_csv, std::ios::binary);
  if (!csv) throw StateError("cannot write " + art.metrics_csv);
  csv << metrics_csv_header(run.rewards.size()) << '\n' << std::flush;

  GrpoTrainer trainer(net, cfg.noise_schedule(), cfg.step_plan(), run.rewards, cfg.grpo,
                      cfg.seed);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    try {
      run.reports.push_back(
          trainer.train_iteration(trainer.sample_conditions(cfg.net.condition_count)));
    } catch (const NumericalError& e) {
      run.abort_reason = e.what();
      if (log) *log << "abort: " << e.what() << '\n';
      break;
    }
    csv << metrics_csv_row(run.reports.back()) << '\n' << std::flush;
    if (log && ((it + 1) % 25 == 0 || it == 0)) {
      *log << "iter " << it;
      for (double m : run.reports.back().mean_rewards) *log << " reward " << m;
      *log << " loss " << run.reports.back().loss << '\n';
    }
    if ((it + 1) % cfg.ckpt_every == 0) save(it + 1);
  }
  csv.close();
  if (!run.abort_reason && cfg.iterations % cfg.ckpt_every != 0) save(cfg.iterations);
  if (!run.abort_reason)
    art.trajectory_dumps = detail::dump_trajectories(cfg, net, dir, run.reports.size());
  art.plot = plot_metrics_csv(art.metrics_csv, cfg.plot_window);
  return run;
}

// Throwing form: an abort propagates after the partial artifacts are written.
inline FinetuneRun finetune(const ExperimentConfig& cfg, DenoiserNet net,
                            const std::filesystem::path& dir, std::ostream* log = nullptr) {
  FinetuneRun run = finetune_run(cfg, std::move(net), dir, log);
  if (run.abort_reason) throw NumericalError(*run.abort_reason);
  return run;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationArm {
  std::string name;
  ExperimentConfig config;
};

inline std::vector<std::string> ablation_presets() {
  return {"timestep_modes", "noise_levels", "bestofn_pools", "ddpo_compare"};
}

inline std::vector<AblationArm> ablation_arms(const std::string& preset,
                                              const ExperimentConfig& base) {
  std::vector<AblationArm> arms;
  auto arm = [&](std::string name) -> ExperimentConfig& {
    arms.push_back({std::move(name), base});
    return arms.back().config;
  };
  if (preset == "timestep_modes") {
    auto& a = arm("first30");
    a.grpo.timestep_mode = TimestepMode::first_fraction;
    a.grpo.tau = 0.3;
    auto& b = arm("random30");
    b.grpo.timestep_mode = TimestepMode::random_fraction;
    b.grpo.tau = 0.3;
    auto& c = arm("random60");
    c.grpo.timestep_mode = TimestepMode::random_fraction;
    c.grpo.tau = 0.6;
    auto& d = arm("full");
    d.grpo.timestep_mode = TimestepMode::random_fraction;
    d.grpo.tau = 1.0;
  } else if (preset == "noise_levels") {
    arm("eps0.1").grpo.eps_level = 0.1;
    arm("eps0.3").grpo.eps_level = 0.3;
  } else if (preset == "bestofn_pools") {
    auto& p = arm("plain16");
    p.grpo.group_size = 16;
    p.grpo.bestofn.reset();
    for (std::size_t n : {64u, 256u}) {
      auto& c = arm("pool" + std::to_string(n));
      c.grpo.bestofn = CurationPlan{n, 8, 8};
    }
  } else if (preset == "ddpo_compare") {
    arm("grpo").grpo.objective = Objective::grpo;
    arm("ddpo").grpo.objective = Objective::ddpo;
  } else {
    throw ConfigError("unknown ablation preset " + preset);
  }
  for (auto& a : arms) a.config.validate();
  return arms;
}

struct ArmResult {
  std::string name;
  FinetuneRun run;
};

struct AblationResult {
  std::vector<ArmResult> arms;
  std::string comparison_csv;
  std::string plot;
};

// Every arm starts from the same initial network and seed. An aborted arm
// is recorded in the comparison and the remaining arms still run.
inline AblationResult run_ablation(const std::string& preset, const ExperimentConfig& base,
                                   const DenoiserNet& init, const std::filesystem::path& dir,
                                   std::ostream* log = nullptr) {
  const auto arms = ablation_arms(preset, base);
  std::filesystem::create_directories(dir);
  AblationResult out;
  std::ostringstream cmp;
  cmp.precision(10);
  cmp << "arm,status,iterations,initial_reward,final_reward,max_grad_norm\n";
  std::vector<PlotSeries> series;
  for (const auto& a : arms) {
    if (log) *log << "arm " << a.name << '\n';
    ArmResult r{a.name, finetune_run(a.config, init, dir / a.name, log)};
    const auto rew = r.run.reports.empty() ? std::vector<double>{} : reward_series(r.run.reports);
    double gmax = 0.0;
    for (const auto& rep : r.run.reports) gmax = std::max(gmax, rep.grad_norm);
    cmp << a.name << ',' << (r.run.abort_reason ? "aborted" : "completed") << ','
        << r.run.reports.size() << ',' << head_mean(rew, base.plot_window) << ','
        << tail_mean(rew, base.plot_window) << ',' << gmax << '\n';
    series.push_back({a.name, rew});
    out.arms.push_back(std::move(r));
  }
  out.comparison_csv = (dir / "comparison.csv").string();
  write_text_file(out.comparison_csv, cmp.str());
  out.plot = (dir / "comparison.svg").string();
  write_text_file(out.plot, reward_plot_svg(series, base.plot_window, preset));
  return out;
}

}  // namespace flowgrpo
