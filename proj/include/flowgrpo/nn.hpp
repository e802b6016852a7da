#pragma once

// Tiny MLP denoiser with hand-written reverse mode, AdamW and a binary
// checkpoint format. Everything is double precision in memory; checkpoints
// store float32.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flowgrpo/errors.hpp"
#include "flowgrpo/random.hpp"

namespace flowgrpo {

using Vector = std::vector<double>;
using CondId = std::size_t;

// Condition id with an all-zero embedding (unconditional prediction).
inline constexpr CondId kNullCondition = std::numeric_limits<CondId>::max();

enum class PredictionKind { epsilon, velocity };

inline std::string to_string(PredictionKind k) {
  return k == PredictionKind::epsilon ? "epsilon" : "velocity";
}

inline PredictionKind parse_prediction_kind(std::string_view s) {
  if (s == "epsilon") return PredictionKind::epsilon;
  if (s == "velocity") return PredictionKind::velocity;
  throw InputError("unknown prediction kind: " + std::string(s));
}

// ---------------------------------------------------------------------------
// ParamStore

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamStore {
 public:
  ParamStore() = default;

  // Appends a named block and returns its offset.
  std::size_t add(std::string name, std::size_t size) {
    const std::size_t offset = values_.size();
    layout_.push_back({std::move(name), offset, size});
    values_.resize(offset + size, 0.0);
    grads_.resize(offset + size, 0.0);
    return offset;
  }

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamSlice>& layout() const { return layout_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grads() { return grads_; }
  std::span<const double> grads() const { return grads_; }

  const ParamSlice& slice(std::string_view name) const {
    for (const auto& s : layout_)
      if (s.name == name) return s;
    throw InputError("no parameter block named " + std::string(name));
  }
  std::span<double> values(std::string_view name) {
    const auto& s = slice(name);
    return std::span<double>(values_).subspan(s.offset, s.size);
  }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  double grad_norm() const {
    double sq = 0.0;
    for (double g : grads_) sq += g * g;
    return std::sqrt(sq);
  }

 private:
  std::vector<ParamSlice> layout_;
  Vector values_;
  Vector grads_;
};

// ---------------------------------------------------------------------------
// DenoiserNet

struct NetConfig {
  PredictionKind kind = PredictionKind::velocity;
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::size_t time_embed_dim = 16;
  std::size_t cond_embed_dim = 8;
  std::size_t condition_count = 4;

  bool operator==(const NetConfig&) const = default;
};

// Activations recorded by a forward pass; consumed by backward.
struct NetTape {
  bool valid = false;
  CondId cond = kNullCondition;
  // layer_inputs[l] is the input vector of dense layer l; hidden
  // post-activations are layer_inputs[l + 1].
  std::vector<Vector> layer_inputs;
};

// MLP on [z, sin/cos(t * w_i), embed[cond]] with tanh hidden layers and a
// linear head.
class DenoiserNet {
 public:
  DenoiserNet() = default;

  explicit DenoiserNet(NetConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.input_dim == 0) throw InputError("input_dim must be positive");
    if (cfg_.time_embed_dim == 0 || cfg_.time_embed_dim % 2 != 0)
      throw InputError("time_embed_dim must be a positive even number");
    for (auto h : cfg_.hidden_dims)
      if (h == 0) throw InputError("hidden dims must be positive");
    if (cfg_.condition_count > 0 && cfg_.cond_embed_dim > 0)
      params_.add("cond_embed", cfg_.condition_count * cfg_.cond_embed_dim);
    std::size_t fan_in = cfg_.input_dim + cfg_.time_embed_dim + cond_width();
    const std::size_t layers = cfg_.hidden_dims.size() + 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t out =
          l + 1 < layers ? cfg_.hidden_dims[l] : cfg_.input_dim;
      dims_.push_back({fan_in, out});
      weight_offsets_.push_back(
          params_.add("layer" + std::to_string(l) + ".weight", out * fan_in));
      bias_offsets_.push_back(
          params_.add("layer" + std::to_string(l) + ".bias", out));
      fan_in = out;
    }
  }

  const NetConfig& config() const { return cfg_; }
  PredictionKind kind() const { return cfg_.kind; }
  std::size_t input_dim() const { return cfg_.input_dim; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Uniform(+-1/sqrt(fan_in)) weights and biases, N(0,1) condition
  // embeddings; the output layer is zeroed unless zero_head is false.
  void initialize(std::uint64_t seed, bool zero_head = true) {
    Rng rng(seed);
    auto v = params_.values();
    if (cond_width() > 0) {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (auto& x : params_.values("cond_embed")) x = normal(rng);
    }
    for (std::size_t l = 0; l < dims_.size(); ++l) {
      const auto [in, out] = dims_[l];
      const bool head = l + 1 == dims_.size();
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> unif(-bound, bound);
      for (std::size_t i = 0; i < in * out; ++i)
        v[weight_offsets_[l] + i] = (head && zero_head) ? 0.0 : unif(rng);
      for (std::size_t i = 0; i < out; ++i)
        v[bias_offsets_[l] + i] = (head && zero_head) ? 0.0 : unif(rng);
    }
    params_.zero_grad();
  }

  // Sinusoidal features of t with log-spaced angular frequencies in
  // [1, 100].
  Vector time_embedding(double t) const {
    const std::size_t half = cfg_.time_embed_dim / 2;
    Vector out(cfg_.time_embed_dim);
    for (std::size_t i = 0; i < half; ++i) {
      const double frac = half > 1 ? double(i) / double(half - 1) : 0.0;
      const double w = std::exp(frac * std::log(100.0));
      out[i] = std::sin(t * w);
      out[half + i] = std::cos(t * w);
    }
    return out;
  }

  Vector predict(std::span<const double> z, double t, CondId cond) const {
    return forward(z, t, cond);
  }

  Vector forward(std::span<const double> z, double t, CondId cond) const {
    NetTape tape;
    return forward(z, t, cond, tape);
  }

  Vector forward(std::span<const double> z, double t, CondId cond,
                 NetTape& tape) const {
    check_inputs(z, t, cond);
    const auto v = params_.values();
    Vector x;
    x.reserve(dims_.front().first);
    x.insert(x.end(), z.begin(), z.end());
    const Vector temb = time_embedding(t);
    x.insert(x.end(), temb.begin(), temb.end());
    if (cond_width() > 0) {
      if (cond == kNullCondition) {
        x.insert(x.end(), cond_width(), 0.0);
      } else {
        const auto base = v.begin() + cond * cfg_.cond_embed_dim;
        x.insert(x.end(), base, base + cfg_.cond_embed_dim);
      }
    }
    tape.valid = false;
    tape.cond = cond;
    tape.layer_inputs.assign(dims_.size(), {});
    for (std::size_t l = 0; l < dims_.size(); ++l) {
      const auto [in, out] = dims_[l];
      const double* w = v.data() + weight_offsets_[l];
      const double* b = v.data() + bias_offsets_[l];
      Vector y(out);
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        const double* row = w + o * in;
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = l + 1 < dims_.size() ? std::tanh(acc) : acc;
      }
      tape.layer_inputs[l] = std::move(x);
      x = std::move(y);
    }
    tape.valid = true;
    return x;
  }

  // Accumulates upstream^T * d(output)/d(params) into grads.
  void backward(const NetTape& tape, std::span<const double> upstream) {
    backward(tape, upstream, params_.grads());
  }

  // Same, into an external buffer laid out like params().grads(); lets
  // concurrent workers accumulate privately.
  void backward(const NetTape& tape, std::span<const double> upstream,
                std::span<double> grads) const {
    if (!tape.valid || tape.layer_inputs.size() != dims_.size())
      throw StateError("backward called without a matching forward tape");
    if (upstream.size() != cfg_.input_dim)
      throw InputError("upstream gradient has wrong dimension");
    if (grads.size() != params_.size())
      throw InputError("gradient buffer has wrong size");
    const auto v = params_.values();
    Vector delta(upstream.begin(), upstream.end());
    for (std::size_t l = dims_.size(); l-- > 0;) {
      const auto [in, out] = dims_[l];
      const Vector& x = tape.layer_inputs[l];
      const double* w = v.data() + weight_offsets_[l];
      double* gw = grads.data() + weight_offsets_[l];
      double* gb = grads.data() + bias_offsets_[l];
      Vector dx(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        gb[o] += d;
        const double* row = w + o * in;
        double* grow = gw + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          grow[i] += d * x[i];
          dx[i] += d * row[i];
        }
      }
      if (l > 0) {
        // x is tanh output of the previous layer
        for (std::size_t i = 0; i < in; ++i) dx[i] *= 1.0 - x[i] * x[i];
        delta = std::move(dx);
      } else if (cond_width() > 0 && tape.cond != kNullCondition) {
        const std::size_t off = cfg_.input_dim + cfg_.time_embed_dim;
        double* ge = grads.data() + tape.cond * cfg_.cond_embed_dim;
        for (std::size_t i = 0; i < cfg_.cond_embed_dim; ++i)
          ge[i] += dx[off + i];
      }
    }
  }

 private:
  std::size_t cond_width() const {
    return cfg_.condition_count > 0 ? cfg_.cond_embed_dim : 0;
  }

  void check_inputs(std::span<const double> z, double t, CondId cond) const {
    if (z.size() != cfg_.input_dim)
      throw InputError("net input has dimension " + std::to_string(z.size()) +
                       ", expected " + std::to_string(cfg_.input_dim));
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("t must lie in [0, 1]");
    if (cond != kNullCondition && cond >= cfg_.condition_count)
      throw InputError("condition id out of range");
  }

  NetConfig cfg_;
  ParamStore params_;
  std::vector<std::pair<std::size_t, std::size_t>> dims_;  // (in, out)
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
};

// ---------------------------------------------------------------------------
// AdamW

struct OptimizerState {
  Vector first_moment;
  Vector second_moment;
  std::uint64_t step_count = 0;
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_stab = 1e-8;
  double weight_decay = 0.0;

  static OptimizerState for_params(const ParamStore& p, double lr,
                                   double weight_decay = 0.0) {
    OptimizerState s;
    s.first_moment.assign(p.size(), 0.0);
    s.second_moment.assign(p.size(), 0.0);
    s.learning_rate = lr;
    s.weight_decay = weight_decay;
    return s;
  }
};

// Clips the global gradient norm to grad_clip_norm (if positive), applies
// one decoupled-weight-decay Adam update and zeroes the gradients. Returns
// the pre-clip gradient norm.
inline double optimizer_step(OptimizerState& opt, ParamStore& params,
                             double grad_clip_norm) {
  if (opt.first_moment.size() != params.size() ||
      opt.second_moment.size() != params.size())
    throw InputError("optimizer moments do not match parameter count");
  auto g = params.grads();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      std::ostringstream msg;
      msg << "non-finite gradient at parameter " << i << " (" << g[i]
          << "); step aborted";
      throw NumericalError(msg.str());
    }
  }
  const double norm = params.grad_norm();
  const double scale =
      (grad_clip_norm > 0.0 && norm > grad_clip_norm) ? grad_clip_norm / norm
                                                      : 1.0;
  opt.step_count += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, double(opt.step_count));
  const double bc2 = 1.0 - std::pow(opt.beta2, double(opt.step_count));
  auto v = params.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double gi = g[i] * scale;
    v[i] -= opt.learning_rate * opt.weight_decay * v[i];
    opt.first_moment[i] = opt.beta1 * opt.first_moment[i] + (1 - opt.beta1) * gi;
    opt.second_moment[i] =
        opt.beta2 * opt.second_moment[i] + (1 - opt.beta2) * gi * gi;
    const double mhat = opt.first_moment[i] / bc1;
    const double vhat = opt.second_moment[i] / bc2;
    v[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.eps_stab);
  }
  params.zero_grad();
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints: "FGRPONET", u32 version, key=value header ending in a blank
// line, then float32 little-endian parameters in layout order.

inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'G', 'R', 'P',
                                                      'O', 'N', 'E', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(char((x >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline std::string join_sizes(const std::vector<std::size_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

inline std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoul(item));
  return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const DenoiserNet& net) {
  const auto& c = net.config();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32_le(out, kCheckpointVersion);
  out += "prediction_kind=" + to_string(c.kind) + "\n";
  out += "input_dim=" + std::to_string(c.input_dim) + "\n";
  out += "hidden_dims=" + detail::join_sizes(c.hidden_dims) + "\n";
  out += "time_embed_dim=" + std::to_string(c.time_embed_dim) + "\n";
  out += "cond_embed_dim=" + std::to_string(c.cond_embed_dim) + "\n";
  out += "condition_count=" + std::to_string(c.condition_count) + "\n";
  out += "param_count=" + std::to_string(net.params().size()) + "\n";
  out += "\n";
  for (double v : net.params().values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    detail::put_u32_le(out, bits);
  }
  return out;
}

inline DenoiserNet decode_checkpoint(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0)
    throw InputError("not a checkpoint: bad magic");
  const std::uint32_t version = detail::get_u32_le(p + 8);
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " +
                     std::to_string(version));
  std::size_t pos = 12;
  std::map<std::string, std::string> header;
  while (true) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos)
      throw InputError("checkpoint header not terminated");
    const std::string_view line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw InputError("malformed checkpoint header line");
    header[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = header.find(key);
    if (it == header.end())
      throw InputError(std::string("checkpoint header missing ") + key);
    return it->second;
  };
  NetConfig cfg;
  cfg.kind = parse_prediction_kind(get("prediction_kind"));
  cfg.input_dim = std::stoul(get("input_dim"));
  cfg.hidden_dims = detail::split_sizes(get("hidden_dims"));
  cfg.time_embed_dim = std::stoul(get("time_embed_dim"));
  cfg.cond_embed_dim = std::stoul(get("cond_embed_dim"));
  cfg.condition_count = std::stoul(get("condition_count"));
  DenoiserNet net(cfg);
  const std::size_t count = std::stoul(get("param_count"));
  if (count != net.params().size())
    throw InputError("checkpoint parameter count does not match header dims");
  if (bytes.size() - pos != 4 * count)
    throw InputError("checkpoint payload has wrong length");
  auto v = net.params().values();
  for (std::size_t i = 0; i < count; ++i)
    v[i] = std::bit_cast<float>(detail::get_u32_le(p + pos + 4 * i));
  return net;
}

inline void save_checkpoint(const DenoiserNet& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path + " for writing");
  const std::string bytes = encode_checkpoint(net);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

inline DenoiserNet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace flowgrpo
