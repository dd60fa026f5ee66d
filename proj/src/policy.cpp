#include "advgrpo/policy.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "advgrpo/errors.hpp"

namespace advgrpo {

namespace {

// Pre-activation and hidden state shared by every head.
struct Trunk {
  std::vector<double> input;
  std::vector<double> pre;
  std::vector<double> hidden;
};

void check_inputs(const ParamSet& p, std::span<const double> image, int question) {
  if (static_cast<int>(image.size()) != p.config.d) {
    throw ConfigError("image dimension " + std::to_string(image.size()) + " does not match policy d=" +
                      std::to_string(p.config.d));
  }
  if (question < 0 || question >= p.config.questions) throw RangeError("question id out of range");
}

Trunk run_trunk(const ParamSet& p, std::span<const double> image, int question) {
  check_inputs(p, image, question);
  const auto& c = p.config;
  const int in = c.input_dim();
  Trunk t;
  t.input.assign(static_cast<std::size_t>(in), 0.0);
  for (int j = 0; j < c.d; ++j) t.input[j] = (image[j] - p.input_shift[j]) * p.input_scale[j];
  t.input[static_cast<std::size_t>(c.d + question)] = 1.0;
  t.pre.resize(static_cast<std::size_t>(c.hidden));
  t.hidden.resize(static_cast<std::size_t>(c.hidden));
  for (int h = 0; h < c.hidden; ++h) {
    const double* w = p.input_weights.data() + static_cast<std::ptrdiff_t>(h) * in;
    double a = p.hidden_bias[h];
    for (int i = 0; i < c.d; ++i) a += w[i] * t.input[i];
    a += w[c.d + question];
    t.pre[h] = a;
    t.hidden[h] = std::tanh(a);
  }
  return t;
}

void answer_logits(const ParamSet& p, std::span<const double> hidden, std::span<double> out) {
  const int H = p.config.hidden;
  for (int a = 0; a < p.config.choices; ++a) {
    const double* row = p.answer_head.data() + static_cast<std::ptrdiff_t>(a) * H;
    double s = 0.0;
    for (int h = 0; h < H; ++h) s += row[h] * hidden[h];
    out[a] = s;
  }
}

void position_logits(const ParamSet& p, int t, std::span<const double> hidden, std::span<double> out) {
  const int H = p.config.hidden;
  const int V = p.config.vocab;
  const double* head = p.trace_heads.data() + static_cast<std::ptrdiff_t>(t) * V * H;
  for (int v = 0; v < V; ++v) {
    const double* row = head + static_cast<std::ptrdiff_t>(v) * H;
    double s = 0.0;
    for (int h = 0; h < H; ++h) s += row[h] * hidden[h];
    out[v] = s;
  }
}

// Hidden state feeding trace position t > 0 in autoregressive mode.
void feedback_hidden(const ParamSet& p, const Trunk& trunk, TokenId prev, std::span<double> out) {
  const int H = p.config.hidden;
  const int V = p.config.vocab;
  for (int h = 0; h < H; ++h) out[h] = std::tanh(trunk.pre[h] + p.token_embedding[static_cast<std::size_t>(h * V + prev)]);
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& x : out) x = std::exp(x);
  return out;
}

int sample_categorical(std::span<const double> logits, double temperature, Rng& rng) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp((logits[i] - mx) / temperature);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return static_cast<int>(i);
    u -= w[i];
  }
  // Rounding left u just past the final bucket.
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0) return static_cast<int>(i);
  }
  return 0;
}

void check_output(const PolicyConfig& c, const StructuredOutput& y) {
  if (static_cast<int>(y.trace.size()) > c.trace_len) throw RangeError("trace longer than the policy trace length");
  for (TokenId t : y.trace) {
    if (t < 0 || t >= c.vocab) throw RangeError("trace token " + std::to_string(t) + " out of range");
  }
  if (y.answer < 0 || y.answer >= c.choices) throw RangeError("answer id " + std::to_string(y.answer) + " out of range");
}

// Accumulates d(loss)/d(theta, image) given d(loss)/d(logits) for one forward.
void backward(const ParamSet& p, const Forward& f, std::span<const double> g_answer, std::span<const double> g_trace,
              GradientSet& out) {
  const auto& c = p.config;
  const int H = c.hidden;
  const int V = c.vocab;
  const int in = c.input_dim();
  const bool ar = c.mode == PolicyMode::kAutoregressive;

  std::vector<double> d_pre(static_cast<std::size_t>(H), 0.0);
  std::vector<double> d_h0(static_cast<std::size_t>(H), 0.0);

  if (!g_answer.empty()) {
    for (int a = 0; a < c.choices; ++a) {
      const double g = g_answer[a];
      if (g == 0.0) continue;
      double* row = out.params.answer_head.data() + static_cast<std::ptrdiff_t>(a) * H;
      const double* w = p.answer_head.data() + static_cast<std::ptrdiff_t>(a) * H;
      for (int h = 0; h < H; ++h) {
        row[h] += g * f.hidden[h];
        d_h0[h] += g * w[h];
      }
    }
  }

  if (!g_trace.empty()) {
    std::vector<double> d_ht(static_cast<std::size_t>(H));
    for (int t = 0; t < c.trace_len; ++t) {
      const double* gt = g_trace.data() + static_cast<std::ptrdiff_t>(t) * V;
      if (std::all_of(gt, gt + V, [](double x) { return x == 0.0; })) continue;
      const double* ht = f.trace_hidden.data() + static_cast<std::ptrdiff_t>(t) * H;
      std::fill(d_ht.begin(), d_ht.end(), 0.0);
      for (int v = 0; v < V; ++v) {
        const double g = gt[v];
        if (g == 0.0) continue;
        const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(t) * V + v) * H;
        double* grow = out.params.trace_heads.data() + off;
        const double* wrow = p.trace_heads.data() + off;
        for (int h = 0; h < H; ++h) {
          grow[h] += g * ht[h];
          d_ht[h] += g * wrow[h];
        }
      }
      if (ar && t > 0) {
        const TokenId prev = f.conditioning[static_cast<std::size_t>(t - 1)];
        for (int h = 0; h < H; ++h) {
          const double da = d_ht[h] * (1.0 - ht[h] * ht[h]);
          d_pre[h] += da;
          out.params.token_embedding[static_cast<std::size_t>(h * V + prev)] += da;
        }
      } else {
        for (int h = 0; h < H; ++h) d_h0[h] += d_ht[h];
      }
    }
  }

  for (int h = 0; h < H; ++h) d_pre[h] += d_h0[h] * (1.0 - f.hidden[h] * f.hidden[h]);

  std::vector<double> d_input(static_cast<std::size_t>(c.d), 0.0);
  for (int h = 0; h < H; ++h) {
    const double g = d_pre[h];
    if (g == 0.0) continue;
    out.params.hidden_bias[h] += g;
    double* grow = out.params.input_weights.data() + static_cast<std::ptrdiff_t>(h) * in;
    const double* wrow = p.input_weights.data() + static_cast<std::ptrdiff_t>(h) * in;
    for (int i = 0; i < in; ++i) grow[i] += g * f.input[i];
    for (int j = 0; j < c.d; ++j) d_input[j] += g * wrow[j];
  }
  for (int j = 0; j < c.d; ++j) out.image[j] += d_input[j] * p.input_scale[j];
}

// Adds w * d(log softmax(logits)[target]) / d(logits) to g.
void add_logprob_grad(std::span<const double> logits, int target, double w, std::span<double> g) {
  const auto p = softmax(logits);
  for (std::size_t i = 0; i < p.size(); ++i) g[i] -= w * p[i];
  g[static_cast<std::size_t>(target)] += w;
}

template <typename T>
std::vector<ParamSet::Array<T>> collect_arrays(auto& self) {
  return {
      {"input_weights", std::span<T>(self.input_weights), true},
      {"hidden_bias", std::span<T>(self.hidden_bias), true},
      {"answer_head", std::span<T>(self.answer_head), true},
      {"trace_heads", std::span<T>(self.trace_heads), true},
      {"token_embedding", std::span<T>(self.token_embedding), true},
      {"input_shift", std::span<T>(self.input_shift), false},
      {"input_scale", std::span<T>(self.input_scale), false},
  };
}

std::size_t expected_size(const PolicyConfig& c, std::string_view name) {
  const auto H = static_cast<std::size_t>(c.hidden);
  if (name == "input_weights") return H * static_cast<std::size_t>(c.input_dim());
  if (name == "hidden_bias") return H;
  if (name == "answer_head") return static_cast<std::size_t>(c.choices) * H;
  if (name == "trace_heads") return static_cast<std::size_t>(c.trace_len * c.vocab) * H;
  if (name == "token_embedding") return c.mode == PolicyMode::kAutoregressive ? H * static_cast<std::size_t>(c.vocab) : 0;
  return static_cast<std::size_t>(c.d);
}

void append_double(std::string& s, double v) {
  std::array<char, 32> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  s.append(buf.data(), p);
  s += ',';
}

std::string config_text(const PolicyConfig& c) {
  std::string s = std::to_string(c.d) + "/" + std::to_string(c.choices) + "/" + std::to_string(c.vocab) + "/" +
                  std::to_string(c.trace_len) + "/" + std::to_string(c.questions) + "/" + std::to_string(c.hidden) +
                  "/" + std::string(mode_name(c.mode)) + "/";
  append_double(s, c.temperature);
  return s;
}

}  // namespace

std::string_view mode_name(PolicyMode mode) {
  return mode == PolicyMode::kFactored ? "factored" : "autoregressive";
}

PolicyMode parse_mode(std::string_view name) {
  if (name == "factored") return PolicyMode::kFactored;
  if (name == "autoregressive") return PolicyMode::kAutoregressive;
  throw ConfigError("unknown policy mode '" + std::string(name) + "'");
}

void validate(const PolicyConfig& c) {
  if (c.d < 1 || c.choices < 1 || c.vocab < 1 || c.questions < 1) {
    throw ConfigError("policy d, choices, vocab and questions must be >= 1");
  }
  if (c.trace_len < 0) throw ConfigError("policy trace length must be >= 0");
  if (c.hidden < 1) throw ConfigError("policy hidden width must be >= 1");
  if (!(c.temperature > 0)) throw ConfigError("policy temperature must be > 0");
}

std::vector<ParamSet::Array<double>> ParamSet::arrays() { return collect_arrays<double>(*this); }

std::vector<ParamSet::Array<const double>> ParamSet::arrays() const { return collect_arrays<const double>(*this); }

ParamSet zero_params(const PolicyConfig& config) {
  validate(config);
  ParamSet p;
  p.config = config;
  p.input_weights.assign(expected_size(config, "input_weights"), 0.0);
  p.hidden_bias.assign(expected_size(config, "hidden_bias"), 0.0);
  p.answer_head.assign(expected_size(config, "answer_head"), 0.0);
  p.trace_heads.assign(expected_size(config, "trace_heads"), 0.0);
  p.token_embedding.assign(expected_size(config, "token_embedding"), 0.0);
  p.input_shift.assign(static_cast<std::size_t>(config.d), 0.0);
  p.input_scale.assign(static_cast<std::size_t>(config.d), 1.0);
  return p;
}

ParamSet init_params(const PolicyConfig& config, std::uint64_t seed, double scale) {
  if (scale < 0) throw ConfigError("init scale must be >= 0");
  ParamSet p = zero_params(config);
  std::uint64_t index = 0;
  for (auto& arr : p.arrays()) {
    ++index;
    if (!arr.trainable) continue;
    Rng rng(derive_seed(seed, 0x494e4954, index));  // "INIT"
    for (double& v : arr.values) v = scale * rng.normal();
  }
  return p;
}

void fit_input_normalization(ParamSet& params, std::span<const Sample> samples) {
  const int d = params.config.d;
  if (samples.empty()) throw ConfigError("cannot fit input normalization on an empty sample set");
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  for (const Sample& s : samples) {
    if (static_cast<int>(s.image.size()) != d) throw ConfigError("sample dimension does not match policy");
    for (int j = 0; j < d; ++j) mean[j] += s.image[j];
  }
  const double n = static_cast<double>(samples.size());
  for (double& m : mean) m /= n;
  for (const Sample& s : samples) {
    for (int j = 0; j < d; ++j) var[j] += (s.image[j] - mean[j]) * (s.image[j] - mean[j]);
  }
  for (int j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j] / n);
    params.input_shift[j] = mean[j];
    params.input_scale[j] = sd > 0 ? 1.0 / sd : 1.0;
  }
}

void validate(const ParamSet& p) {
  validate(p.config);
  for (const auto& arr : p.arrays()) {
    if (arr.values.size() != expected_size(p.config, arr.name)) {
      throw ConfigError("parameter array '" + std::string(arr.name) + "' has the wrong size");
    }
    for (double v : arr.values) {
      if (!std::isfinite(v)) throw TrainingDiverged("parameter array '" + std::string(arr.name) + "' is not finite");
    }
  }
}

void axpy(double a, const ParamSet& x, ParamSet& y) {
  auto xs = x.arrays();
  auto ys = y.arrays();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!ys[i].trainable) continue;
    for (std::size_t j = 0; j < ys[i].values.size(); ++j) ys[i].values[j] += a * xs[i].values[j];
  }
}

double squared_norm(const ParamSet& p) {
  double s = 0.0;
  for (const auto& arr : p.arrays()) {
    if (!arr.trainable) continue;
    for (double v : arr.values) s += v * v;
  }
  return s;
}

void scale_trainable(ParamSet& p, double factor) {
  for (auto& arr : p.arrays()) {
    if (!arr.trainable) continue;
    for (double& v : arr.values) v *= factor;
  }
}

GradientSet zero_gradient(const PolicyConfig& config) {
  GradientSet g;
  g.params = zero_params(config);
  std::fill(g.params.input_scale.begin(), g.params.input_scale.end(), 0.0);
  g.image.assign(static_cast<std::size_t>(config.d), 0.0);
  return g;
}

Forward forward(const ParamSet& params, std::span<const double> image, int question,
                std::span<const TokenId> conditioning) {
  const auto& c = params.config;
  const int H = c.hidden;
  const int V = c.vocab;
  Trunk trunk = run_trunk(params, image, question);

  Forward f;
  f.input = trunk.input;
  f.hidden = trunk.hidden;
  f.answer_logits.resize(static_cast<std::size_t>(c.choices));
  answer_logits(params, f.hidden, f.answer_logits);

  f.trace_logits.resize(static_cast<std::size_t>(c.trace_len * V));
  f.trace_hidden.resize(static_cast<std::size_t>(c.trace_len * H));
  const bool ar = c.mode == PolicyMode::kAutoregressive;
  for (int t = 0; t < c.trace_len; ++t) {
    std::span<double> ht(f.trace_hidden.data() + static_cast<std::ptrdiff_t>(t) * H, static_cast<std::size_t>(H));
    if (ar && t > 0) {
      TokenId prev;
      if (static_cast<std::size_t>(t - 1) < conditioning.size()) {
        prev = conditioning[static_cast<std::size_t>(t - 1)];
      } else {
        prev = argmax(std::span<const double>(f.trace_logits.data() + static_cast<std::ptrdiff_t>(t - 1) * V,
                                              static_cast<std::size_t>(V)));
      }
      f.conditioning.push_back(prev);
      feedback_hidden(params, trunk, prev, ht);
    } else {
      std::copy(f.hidden.begin(), f.hidden.end(), ht.begin());
    }
    position_logits(params, t, ht,
                    std::span<double>(f.trace_logits.data() + static_cast<std::ptrdiff_t>(t) * V,
                                      static_cast<std::size_t>(V)));
  }
  return f;
}

Logits forward(const ParamSet& params, const Sample& sample) {
  Forward f = forward(params, sample.image, sample.question);
  return {std::move(f.answer_logits), std::move(f.trace_logits)};
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - mx);
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double total_logprob(const ParamSet& params, std::span<const double> image, int question,
                     const StructuredOutput& y) {
  check_output(params.config, y);
  const Forward f = forward(params, image, question, y.trace);
  const int V = params.config.vocab;
  double lp = log_softmax(f.answer_logits)[static_cast<std::size_t>(y.answer)];
  for (std::size_t t = 0; t < y.trace.size(); ++t) {
    const auto ls = log_softmax(std::span<const double>(f.trace_logits.data() + t * V, static_cast<std::size_t>(V)));
    lp += ls[static_cast<std::size_t>(y.trace[t])];
  }
  return lp;
}

double total_logprob(const ParamSet& params, const Sample& sample, const StructuredOutput& y) {
  return total_logprob(params, sample.image, sample.question, y);
}

SampledOutput sample_output(const ParamSet& params, std::span<const double> image, int question, Rng& rng,
                            double temperature) {
  if (!(temperature > 0)) throw ConfigError("sampling temperature must be > 0");
  const auto& c = params.config;
  const int H = c.hidden;
  const int V = c.vocab;
  const Trunk trunk = run_trunk(params, image, question);

  SampledOutput out;
  std::vector<double> logits(static_cast<std::size_t>(V));
  std::vector<double> ht(static_cast<std::size_t>(H));
  for (int t = 0; t < c.trace_len; ++t) {
    if (c.mode == PolicyMode::kAutoregressive && t > 0) {
      feedback_hidden(params, trunk, out.output.trace.back(), ht);
      position_logits(params, t, ht, logits);
    } else {
      position_logits(params, t, trunk.hidden, logits);
    }
    const int tok = sample_categorical(logits, temperature, rng);
    out.output.trace.push_back(tok);
    out.logprob += log_softmax(logits)[static_cast<std::size_t>(tok)];
  }
  std::vector<double> za(static_cast<std::size_t>(c.choices));
  answer_logits(params, trunk.hidden, za);
  out.output.answer = sample_categorical(za, temperature, rng);
  out.logprob += log_softmax(za)[static_cast<std::size_t>(out.output.answer)];
  return out;
}

StructuredOutput greedy_decode(const ParamSet& params, std::span<const double> image, int question) {
  const Forward f = forward(params, image, question);
  const int V = params.config.vocab;
  StructuredOutput y;
  for (int t = 0; t < params.config.trace_len; ++t) {
    y.trace.push_back(
        argmax(std::span<const double>(f.trace_logits.data() + static_cast<std::ptrdiff_t>(t) * V,
                                       static_cast<std::size_t>(V))));
  }
  y.answer = argmax(f.answer_logits);
  return y;
}

AnswerId greedy_answer(const ParamSet& params, std::span<const double> image, int question) {
  const Trunk trunk = run_trunk(params, image, question);
  std::vector<double> za(static_cast<std::size_t>(params.config.choices));
  answer_logits(params, trunk.hidden, za);
  return argmax(za);
}

double loss_value(const ParamSet& params, std::span<const double> image, int question, const LossSpec& loss) {
  if (loss.terms.empty()) return 0.0;
  const Forward base = forward(params, image, question);
  const auto ls_answer = log_softmax(base.answer_logits);
  double value = 0.0;
  for (const auto& term : loss.terms) {
    if (const auto* ll = std::get_if<LogLikTerm>(&term)) {
      value += ll->weight * total_logprob(params, image, question, ll->output);
    } else if (const auto* nll = std::get_if<AnswerNllTerm>(&term)) {
      if (nll->anchor < 0 || nll->anchor >= params.config.choices) throw RangeError("anchor answer out of range");
      value -= nll->weight * ls_answer[static_cast<std::size_t>(nll->anchor)];
    } else {
      const auto& lin = std::get<LogitLinearTerm>(term);
      if (lin.answer.size() != base.answer_logits.size()) throw UnsupportedLoss("logit term answer size mismatch");
      for (std::size_t i = 0; i < lin.answer.size(); ++i) value += lin.answer[i] * base.answer_logits[i];
      if (!lin.trace.empty()) {
        if (params.config.mode != PolicyMode::kFactored) {
          throw UnsupportedLoss("trace logit terms are only differentiable in factored mode");
        }
        if (lin.trace.size() != base.trace_logits.size()) throw UnsupportedLoss("logit term trace size mismatch");
        for (std::size_t i = 0; i < lin.trace.size(); ++i) value += lin.trace[i] * base.trace_logits[i];
      }
    }
  }
  return value;
}

LossGradient grad(const ParamSet& params, std::span<const double> image, int question, const LossSpec& loss) {
  const auto& c = params.config;
  const int V = c.vocab;
  LossGradient out;
  out.grad = zero_gradient(c);
  if (loss.terms.empty()) {
    check_inputs(params, image, question);
    return out;
  }
  const bool factored = c.mode == PolicyMode::kFactored;
  const Forward base = forward(params, image, question);
  const auto ls_answer = log_softmax(base.answer_logits);

  std::vector<double> g_answer(static_cast<std::size_t>(c.choices), 0.0);
  std::vector<double> g_trace(static_cast<std::size_t>(c.trace_len * V), 0.0);

  for (const auto& term : loss.terms) {
    if (const auto* ll = std::get_if<LogLikTerm>(&term)) {
      check_output(c, ll->output);
      const Forward own = factored ? Forward{} : forward(params, image, question, ll->output.trace);
      const Forward& f = factored ? base : own;
      std::vector<double> own_trace;
      std::span<double> gt = g_trace;
      if (!factored) {
        own_trace.assign(g_trace.size(), 0.0);
        gt = own_trace;
      }
      double lp = ls_answer[static_cast<std::size_t>(ll->output.answer)];
      add_logprob_grad(base.answer_logits, ll->output.answer, ll->weight, g_answer);
      for (std::size_t t = 0; t < ll->output.trace.size(); ++t) {
        const std::span<const double> zt(f.trace_logits.data() + t * V, static_cast<std::size_t>(V));
        lp += log_softmax(zt)[static_cast<std::size_t>(ll->output.trace[t])];
        add_logprob_grad(zt, ll->output.trace[t], ll->weight, gt.subspan(t * V, static_cast<std::size_t>(V)));
      }
      out.value += ll->weight * lp;
      if (!factored) backward(params, f, {}, own_trace, out.grad);
    } else if (const auto* nll = std::get_if<AnswerNllTerm>(&term)) {
      if (nll->anchor < 0 || nll->anchor >= c.choices) throw RangeError("anchor answer out of range");
      out.value -= nll->weight * ls_answer[static_cast<std::size_t>(nll->anchor)];
      add_logprob_grad(base.answer_logits, nll->anchor, -nll->weight, g_answer);
    } else {
      const auto& lin = std::get<LogitLinearTerm>(term);
      if (lin.answer.size() != g_answer.size()) throw UnsupportedLoss("logit term answer size mismatch");
      for (std::size_t i = 0; i < lin.answer.size(); ++i) {
        out.value += lin.answer[i] * base.answer_logits[i];
        g_answer[i] += lin.answer[i];
      }
      if (!lin.trace.empty()) {
        if (!factored) throw UnsupportedLoss("trace logit terms are only differentiable in factored mode");
        if (lin.trace.size() != g_trace.size()) throw UnsupportedLoss("logit term trace size mismatch");
        for (std::size_t i = 0; i < lin.trace.size(); ++i) {
          out.value += lin.trace[i] * base.trace_logits[i];
          g_trace[i] += lin.trace[i];
        }
      }
    }
  }
  backward(params, base, g_answer, factored ? std::span<const double>(g_trace) : std::span<const double>{}, out.grad);
  return out;
}

LossGradient grad(const ParamSet& params, const Sample& sample, const LossSpec& loss) {
  return grad(params, sample.image, sample.question, loss);
}

GradientSet numeric_gradient(const ParamSet& params, std::span<const double> image,
                             const std::function<double(const ParamSet&, std::span<const double>)>& f,
                             double step) {
  if (!(step > 0)) throw ConfigError("finite-difference step must be > 0");
  GradientSet g = zero_gradient(params.config);
  ParamSet work = params;
  std::vector<double> img(image.begin(), image.end());
  auto work_arrays = work.arrays();
  auto grad_arrays = g.params.arrays();
  for (std::size_t a = 0; a < work_arrays.size(); ++a) {
    if (!work_arrays[a].trainable) continue;
    auto vals = work_arrays[a].values;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double up = f(work, img);
      vals[i] = keep - step;
      const double down = f(work, img);
      vals[i] = keep;
      grad_arrays[a].values[i] = (up - down) / (2 * step);
    }
  }
  for (std::size_t j = 0; j < img.size(); ++j) {
    const double keep = img[j];
    img[j] = keep + step;
    const double up = f(work, img);
    img[j] = keep - step;
    const double down = f(work, img);
    img[j] = keep;
    g.image[j] = (up - down) / (2 * step);
  }
  return g;
}

FdReport compare_gradients(const GradientSet& analytic, const GradientSet& numeric, double tolerance) {
  FdReport report;
  auto check = [&](std::string_view name, std::span<const double> a, std::span<const double> n) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double denom = std::max({std::abs(a[i]), std::abs(n[i]), kFdErrorFloor});
      const double err = std::abs(a[i] - n[i]) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        report.worst_coordinate = std::string(name) + "[" + std::to_string(i) + "]";
      }
    }
  };
  const auto aa = analytic.params.arrays();
  const auto na = numeric.params.arrays();
  for (std::size_t k = 0; k < aa.size(); ++k) {
    if (aa[k].trainable) check(aa[k].name, aa[k].values, na[k].values);
  }
  check("image", analytic.image, numeric.image);
  report.passed = report.max_rel_error < tolerance;
  return report;
}

FdReport finite_difference_check(const ParamSet& params, const Sample& sample, const LossSpec& loss, double step,
                                 double tolerance, const GradientSet* analytic) {
  const GradientSet computed = analytic ? GradientSet{} : grad(params, sample, loss).grad;
  const GradientSet& a = analytic ? *analytic : computed;
  const GradientSet n = numeric_gradient(
      params, sample.image,
      [&](const ParamSet& p, std::span<const double> img) { return loss_value(p, img, sample.question, loss); },
      step);
  return compare_gradients(a, n, tolerance);
}

void write_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                      const CheckpointManifest& manifest) {
  validate(params);
  nlohmann::ordered_json j;
  j["format"] = "advgrpo-checkpoint-1";
  j["stage"] = manifest.stage;
  j["seed"] = manifest.seed;
  j["task_hash"] = manifest.task_hash;
  j["config_hash"] = manifest.config_hash;
  const auto& c = params.config;
  j["policy"] = {{"d", c.d},           {"k", c.choices},   {"vocab", c.vocab},
                 {"trace_len", c.trace_len}, {"questions", c.questions}, {"hidden", c.hidden},
                 {"mode", std::string(mode_name(c.mode))}, {"temperature", c.temperature}};
  nlohmann::ordered_json arrays = nlohmann::ordered_json::object();
  for (const auto& arr : params.arrays()) {
    arrays[std::string(arr.name)] = std::vector<double>(arr.values.begin(), arr.values.end());
  }
  j["arrays"] = std::move(arrays);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Checkpoint ck;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format").get<std::string>() != "advgrpo-checkpoint-1") throw ConfigError("unknown checkpoint format");
    ck.manifest.stage = j.at("stage").get<std::string>();
    ck.manifest.seed = j.at("seed").get<std::uint64_t>();
    ck.manifest.task_hash = j.at("task_hash").get<std::string>();
    ck.manifest.config_hash = j.at("config_hash").get<std::string>();
    const auto& pc = j.at("policy");
    PolicyConfig c;
    c.d = pc.at("d").get<int>();
    c.choices = pc.at("k").get<int>();
    c.vocab = pc.at("vocab").get<int>();
    c.trace_len = pc.at("trace_len").get<int>();
    c.questions = pc.at("questions").get<int>();
    c.hidden = pc.at("hidden").get<int>();
    c.mode = parse_mode(pc.at("mode").get<std::string>());
    c.temperature = pc.at("temperature").get<double>();
    ck.params = zero_params(c);
    const auto& arrays = j.at("arrays");
    for (auto& arr : ck.params.arrays()) {
      const auto values = arrays.at(std::string(arr.name)).get<std::vector<double>>();
      if (values.size() != arr.values.size()) {
        throw ConfigError("checkpoint array '" + std::string(arr.name) + "' has the wrong size");
      }
      std::copy(values.begin(), values.end(), arr.values.begin());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  validate(ck.params);
  return ck;
}

std::string params_digest(const ParamSet& params) {
  std::string s = config_text(params.config);
  for (const auto& arr : params.arrays()) {
    s += arr.name;
    s += ':';
    for (double v : arr.values) append_double(s, v);
  }
  return hex64(fnv1a64(s));
}

}  // namespace advgrpo
