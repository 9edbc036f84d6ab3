#pragma once

// A small deterministic decoder-only language model: token + position
// embedding, L pre-norm residual blocks (single-head causal attention and a
// SiLU MLP), final RMS norm and a linear LM head.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prunescope/distributions.hpp"
#include "prunescope/errors.hpp"
#include "prunescope/numeric.hpp"
#include "prunescope/vecmath.hpp"

namespace prunescope {

using Token = std::uint32_t;

/// Dense row-major matrix. A matrix maps inputs of size cols() to outputs of
/// size rows(); "input dimension" always means the column index.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw ShapeError("Matrix: data size mismatch");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  std::vector<double> apply(std::span<const double> x) const {
    if (x.size() != cols_) throw ShapeError("Matrix::apply: input size mismatch");
    std::vector<double> y(rows_);
    for (std::size_t r = 0; r < rows_; ++r) y[r] = dot(row(r), x);
    return y;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct ToyConfig {
  std::uint64_t vocab_size = 64;
  std::uint64_t model_dim = 32;
  std::uint64_t num_layers = 8;
  std::uint64_t ffn_dim = 128;
  std::uint64_t seed = 0;
  std::uint64_t max_context = 128;

  void validate() const {
    if (vocab_size < 2) throw ValidationError("ToyConfig: vocab_size must be >= 2");
    if (model_dim < 1) throw ValidationError("ToyConfig: model_dim must be >= 1");
    if (ffn_dim < 1) throw ValidationError("ToyConfig: ffn_dim must be >= 1");
    if (max_context < 1) throw ValidationError("ToyConfig: max_context must be >= 1");
  }

  friend bool operator==(const ToyConfig&, const ToyConfig&) = default;
};

/// Default configuration with ffn_dim = 4 * model_dim.
inline ToyConfig default_config(std::uint64_t seed) {
  ToyConfig c;
  c.seed = seed;
  c.ffn_dim = 4 * c.model_dim;
  return c;
}

struct AttentionBranch {
  std::vector<double> norm_gain;
  Matrix query, key, value, output;  // d x d each
  friend bool operator==(const AttentionBranch&, const AttentionBranch&) = default;
};

struct MlpBranch {
  std::vector<double> norm_gain;
  Matrix up;    // ffn x d
  Matrix down;  // d x ffn
  friend bool operator==(const MlpBranch&, const MlpBranch&) = default;
};

struct Block {
  AttentionBranch attn;
  MlpBranch mlp;
  friend bool operator==(const Block&, const Block&) = default;
};

struct ToyModel {
  ToyConfig config;
  Matrix embedding;  // V x d
  std::vector<Block> blocks;
  std::vector<double> final_norm;
  Matrix lm_head;     // V x d
  Matrix positional;  // max_context x d

  void validate() const;
  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

/// The six block matrices that compression can touch.
enum class Target { query, key, value, output, up, down };

inline constexpr Target kAllTargets[] = {Target::query, Target::key, Target::value,
                                         Target::output, Target::up, Target::down};

inline std::string_view to_string(Target t) {
  switch (t) {
    case Target::query: return "query";
    case Target::key: return "key";
    case Target::value: return "value";
    case Target::output: return "output";
    case Target::up: return "up";
    case Target::down: return "down";
  }
  return "?";
}

inline Matrix& target_matrix(Block& b, Target t) {
  switch (t) {
    case Target::query: return b.attn.query;
    case Target::key: return b.attn.key;
    case Target::value: return b.attn.value;
    case Target::output: return b.attn.output;
    case Target::up: return b.mlp.up;
    case Target::down: return b.mlp.down;
  }
  throw InvariantError("target_matrix: unknown target");
}

inline const Matrix& target_matrix(const Block& b, Target t) {
  return target_matrix(const_cast<Block&>(b), t);
}

inline void ToyModel::validate() const {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.model_dim, f = config.ffn_dim;
  auto check = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
    if (m.rows() != r || m.cols() != c)
      throw ShapeError(std::string("ToyModel: ") + what + " has wrong shape");
    for (double x : m.flat())
      if (!std::isfinite(x)) throw ValidationError(std::string("ToyModel: ") + what + " not finite");
  };
  auto check_gain = [d](const std::vector<double>& g, const char* what) {
    if (g.size() != d) throw ShapeError(std::string("ToyModel: ") + what + " has wrong size");
  };
  check(embedding, v, d, "embedding");
  check(lm_head, v, d, "lm_head");
  check(positional, config.max_context, d, "positional");
  check_gain(final_norm, "final_norm");
  if (blocks.size() != config.num_layers) throw ShapeError("ToyModel: block count != num_layers");
  for (const Block& b : blocks) {
    check_gain(b.attn.norm_gain, "attn norm");
    check_gain(b.mlp.norm_gain, "mlp norm");
    check(b.attn.query, d, d, "query");
    check(b.attn.key, d, d, "key");
    check(b.attn.value, d, d, "value");
    check(b.attn.output, d, d, "output");
    check(b.mlp.up, f, d, "up");
    check(b.mlp.down, d, f, "down");
  }
}

/// Every matrix drawn from N(0, 1/d) in declaration order; norm gains are 1.
inline ToyModel init_model(const ToyConfig& config) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.model_dim, f = config.ffn_dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(config.seed);
  auto draw = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.flat()) x = rng.normal(0.0, stddev);
    return m;
  };
  ToyModel m;
  m.config = config;
  m.embedding = draw(v, d);
  m.blocks.reserve(config.num_layers);
  for (std::uint64_t l = 0; l < config.num_layers; ++l) {
    Block b;
    b.attn.norm_gain.assign(d, 1.0);
    b.attn.query = draw(d, d);
    b.attn.key = draw(d, d);
    b.attn.value = draw(d, d);
    b.attn.output = draw(d, d);
    b.mlp.norm_gain.assign(d, 1.0);
    b.mlp.up = draw(f, d);
    b.mlp.down = draw(d, f);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm.assign(d, 1.0);
  m.lm_head = draw(v, d);
  m.positional = draw(config.max_context, d);
  return m;
}

// ---------------------------------------------------------------------------
// Kernels shared by the full and incremental forward paths.

namespace kernels {

/// x / rms(x) * gain. No epsilon: an all-zero input maps to zero.
inline std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain) {
  const double ms = norm_sq(x) / static_cast<double>(x.size());
  std::vector<double> out(x.size(), 0.0);
  if (ms == 0.0) return out;
  const double inv = 1.0 / std::sqrt(ms);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

/// Causal single-head attention for one query over keys/values [0, n).
inline std::vector<double> attend(std::span<const double> q,
                                  const std::vector<std::vector<double>>& keys,
                                  const std::vector<std::vector<double>>& values,
                                  std::size_t n) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  std::vector<double> scores(n);
  for (std::size_t j = 0; j < n; ++j) scores[j] = dot(q, keys[j]) * scale;
  const double top = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double& s : scores) {
    s = std::exp(s - top);
    total += s;
  }
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double w = scores[j] / total;
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * values[j][c];
  }
  return out;
}

inline void add_into(std::vector<double>& h, std::span<const double> delta) {
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += delta[i];
}

}  // namespace kernels

enum class Capture { final, all_layers };

/// What a model produces at one position.
struct SpaceSnapshot {
  RealVector hidden;  // h^(L) after the final norm
  Logits logits;
  ProbDist probs;
  std::vector<RealVector> per_layer_hidden;  // h^(0..L) residual stream, when captured
};

/// Called with the input vector of each target matrix at each position.
using BranchInputObserver =
    std::function<void(std::size_t layer, Target target, std::span<const double> input)>;

namespace detail {

inline void check_tokens(const ToyModel& m, std::span<const Token> tokens) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= m.config.vocab_size)
      throw IndexError("token " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " +
                       std::to_string(m.config.vocab_size));
  }
}

inline SpaceSnapshot make_snapshot(const ToyModel& m, std::span<const double> h,
                                   double temperature, std::vector<RealVector> layers) {
  RealVector hidden(kernels::rms_norm(h, m.final_norm));
  Logits logits(RealVector(m.lm_head.apply(hidden.values())), temperature);
  ProbDist probs = softmax_t(logits);
  return {std::move(hidden), std::move(logits), std::move(probs), std::move(layers)};
}

inline std::vector<double> embed(const ToyModel& m, Token token, std::size_t pos) {
  std::vector<double> h(m.config.model_dim);
  const auto e = m.embedding.row(token);
  const auto p = m.positional.row(pos);
  for (std::size_t c = 0; c < h.size(); ++c) h[c] = e[c] + p[c];
  return h;
}

}  // namespace detail

/// Runs the whole sequence layer by layer and returns one snapshot per position.
inline std::vector<SpaceSnapshot> forward(const ToyModel& m, std::span<const Token> tokens,
                                          Capture capture = Capture::final,
                                          double temperature = 1.0,
                                          const BranchInputObserver& observer = {}) {
  if (tokens.empty()) throw ValidationError("forward: token sequence is empty");
  if (tokens.size() > m.config.max_context)
    throw CapacityError("forward: " + std::to_string(tokens.size()) +
                        " tokens exceed max_context " + std::to_string(m.config.max_context));
  detail::check_tokens(m, tokens);

  const std::size_t n = tokens.size();
  const bool all = capture == Capture::all_layers;
  std::vector<std::vector<double>> hs(n);
  std::vector<std::vector<RealVector>> layers(n);
  for (std::size_t i = 0; i < n; ++i) {
    hs[i] = detail::embed(m, tokens[i], i);
    if (all) layers[i].emplace_back(hs[i]);
  }

  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    std::vector<std::vector<double>> qs(n), ks(n), vs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = kernels::rms_norm(hs[i], b.attn.norm_gain);
      if (observer) {
        observer(l, Target::query, a);
        observer(l, Target::key, a);
        observer(l, Target::value, a);
      }
      qs[i] = b.attn.query.apply(a);
      ks[i] = b.attn.key.apply(a);
      vs[i] = b.attn.value.apply(a);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = kernels::attend(qs[i], ks, vs, i + 1);
      if (observer) observer(l, Target::output, o);
      kernels::add_into(hs[i], b.attn.output.apply(o));

      const auto x = kernels::rms_norm(hs[i], b.mlp.norm_gain);
      if (observer) observer(l, Target::up, x);
      auto u = b.mlp.up.apply(x);
      for (double& e : u) e = kernels::silu(e);
      if (observer) observer(l, Target::down, u);
      kernels::add_into(hs[i], b.mlp.down.apply(u));
      if (all) layers[i].emplace_back(hs[i]);
    }
  }

  std::vector<SpaceSnapshot> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(detail::make_snapshot(m, hs[i], temperature, std::move(layers[i])));
  return out;
}

/// Token history and per-layer key/value cache of one decode.
struct DecodeState {
  std::vector<Token> tokens;
  std::size_t prompt_len = 0;
  std::size_t step = 0;  // tokens emitted so far
  std::vector<std::vector<std::vector<double>>> keys;    // [layer][pos]
  std::vector<std::vector<std::vector<double>>> values;  // [layer][pos]
};

/// Feeds one token through the model using and extending the cache.
inline SpaceSnapshot forward_step(const ToyModel& m, DecodeState& state, Token token,
                                  Capture capture = Capture::final, double temperature = 1.0) {
  const std::size_t pos = state.tokens.size();
  if (pos + 1 > m.config.max_context)
    throw CapacityError("forward_step: context would exceed max_context " +
                        std::to_string(m.config.max_context));
  if (token >= m.config.vocab_size)
    throw IndexError("token " + std::to_string(token) + " outside vocabulary of size " +
                     std::to_string(m.config.vocab_size));
  if (state.keys.size() != m.blocks.size()) {
    state.keys.resize(m.blocks.size());
    state.values.resize(m.blocks.size());
  }
  state.tokens.push_back(token);

  std::vector<RealVector> layers;
  auto h = detail::embed(m, token, pos);
  if (capture == Capture::all_layers) layers.emplace_back(h);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    const auto a = kernels::rms_norm(h, b.attn.norm_gain);
    const auto q = b.attn.query.apply(a);
    state.keys[l].push_back(b.attn.key.apply(a));
    state.values[l].push_back(b.attn.value.apply(a));
    const auto o = kernels::attend(q, state.keys[l], state.values[l], pos + 1);
    kernels::add_into(h, b.attn.output.apply(o));

    const auto x = kernels::rms_norm(h, b.mlp.norm_gain);
    auto u = b.mlp.up.apply(x);
    for (double& e : u) e = kernels::silu(e);
    kernels::add_into(h, b.mlp.down.apply(u));
    if (capture == Capture::all_layers) layers.emplace_back(h);
  }
  return detail::make_snapshot(m, h, temperature, std::move(layers));
}

struct DecodeSpec {
  enum class Mode { greedy, sample };
  Mode mode = Mode::greedy;
  double temperature = 1.0;  // sampling temperature; also used for snapshot probs
  std::uint64_t seed = 0;

  static DecodeSpec greedy(double temperature = 1.0) { return {Mode::greedy, temperature, 0}; }
  static DecodeSpec sample(double temperature, std::uint64_t seed) {
    return {Mode::sample, temperature, seed};
  }
};

/// Lowest index attaining the maximum.
inline std::size_t argmax(std::span<const double> xs) {
  return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

/// Inverse-CDF draw from p with a uniform u in [0, 1).
inline std::size_t sample_index(std::span<const double> p, double u) {
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    cum += p[i];
    last_positive = i;
    if (u < cum) return i;
  }
  return last_positive;
}

struct Generation {
  DecodeState state;
  std::vector<SpaceSnapshot> trace;  // one per emitted token, at the position it was read from
};

/// Prefills the prompt through the cache, then emits `steps` tokens.
inline Generation generate(const ToyModel& m, std::span<const Token> prompt, std::size_t steps,
                           const DecodeSpec& decode = {}, Capture capture = Capture::final) {
  if (prompt.empty()) throw ValidationError("generate: prompt is empty");
  if (steps == 0) throw ValidationError("generate: steps must be >= 1");
  if (prompt.size() + steps > m.config.max_context)
    throw CapacityError("generate: prompt length + steps exceeds max_context " +
                        std::to_string(m.config.max_context));
  detail::check_tokens(m, prompt);
  detail::require_positive_temperature(decode.temperature, "generate");

  Generation g;
  g.state.prompt_len = prompt.size();
  std::optional<SpaceSnapshot> last;
  for (Token t : prompt) last = forward_step(m, g.state, t, capture, decode.temperature);

  Rng rng(decode.seed);
  for (std::size_t s = 0; s < steps; ++s) {
    const Token next = static_cast<Token>(
        decode.mode == DecodeSpec::Mode::greedy
            ? argmax(last->logits.scores().values())
            : sample_index(last->probs.values(), rng.uniform()));
    g.trace.push_back(std::move(*last));
    g.state.step = s + 1;
    if (s + 1 < steps) {
      last = forward_step(m, g.state, next, capture, decode.temperature);
    } else {
      g.state.tokens.push_back(next);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// TOYLM1 binary format: magic, six little-endian u64 config fields, then every
// parameter as a little-endian f64 in declaration order, row-major.

inline constexpr char kModelMagic[] = {'T', 'O', 'Y', 'L', 'M', '1'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw ParseError("TOYLM1: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

template <typename F>
void for_each_parameter(ToyModel& m, F&& f) {
  f(m.embedding.flat());
  for (Block& b : m.blocks) {
    f(std::span<double>(b.attn.norm_gain));
    f(b.attn.query.flat());
    f(b.attn.key.flat());
    f(b.attn.value.flat());
    f(b.attn.output.flat());
    f(std::span<double>(b.mlp.norm_gain));
    f(b.mlp.up.flat());
    f(b.mlp.down.flat());
  }
  f(std::span<double>(m.final_norm));
  f(m.lm_head.flat());
  f(m.positional.flat());
}

inline ToyModel shaped_model(const ToyConfig& c) {
  const std::size_t v = c.vocab_size, d = c.model_dim, f = c.ffn_dim;
  ToyModel m;
  m.config = c;
  m.embedding = Matrix(v, d);
  m.blocks.resize(c.num_layers);
  for (Block& b : m.blocks) {
    b.attn.norm_gain.assign(d, 0.0);
    b.attn.query = b.attn.key = b.attn.value = b.attn.output = Matrix(d, d);
    b.mlp.norm_gain.assign(d, 0.0);
    b.mlp.up = Matrix(f, d);
    b.mlp.down = Matrix(d, f);
  }
  m.final_norm.assign(d, 0.0);
  m.lm_head = Matrix(v, d);
  m.positional = Matrix(c.max_context, d);
  return m;
}

}  // namespace detail

inline void write_model(std::ostream& os, const ToyModel& model) {
  model.validate();
  os.write(kModelMagic, sizeof kModelMagic);
  const ToyConfig& c = model.config;
  for (std::uint64_t v : {c.vocab_size, c.model_dim, c.num_layers, c.ffn_dim, c.seed, c.max_context})
    detail::put_u64(os, v);
  detail::for_each_parameter(const_cast<ToyModel&>(model), [&](std::span<double> xs) {
    for (double x : xs) detail::put_u64(os, std::bit_cast<std::uint64_t>(x));
  });
}

inline ToyModel read_model(std::istream& is) {
  char magic[sizeof kModelMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kModelMagic, sizeof magic) != 0)
    throw ParseError("TOYLM1: bad magic");
  ToyConfig c;
  c.vocab_size = detail::get_u64(is);
  c.model_dim = detail::get_u64(is);
  c.num_layers = detail::get_u64(is);
  c.ffn_dim = detail::get_u64(is);
  c.seed = detail::get_u64(is);
  c.max_context = detail::get_u64(is);
  c.validate();
  // Reject absurd headers before allocating.
  constexpr std::uint64_t kMaxEntries = 1ULL << 32;
  if (c.vocab_size * c.model_dim > kMaxEntries || c.ffn_dim * c.model_dim > kMaxEntries ||
      c.max_context * c.model_dim > kMaxEntries || c.num_layers > (1U << 16))
    throw ParseError("TOYLM1: header describes an implausibly large model");
  ToyModel m = detail::shaped_model(c);
  detail::for_each_parameter(m, [&](std::span<double> xs) {
    for (double& x : xs) x = std::bit_cast<double>(detail::get_u64(is));
  });
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("TOYLM1: trailing bytes");
  m.validate();
  return m;
}

inline void save_model(const std::string& path, const ToyModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  write_model(os, model);
  if (!os) throw IoError("failed writing '" + path + "'");
}

inline ToyModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return read_model(is);
}

}  // namespace prunescope
