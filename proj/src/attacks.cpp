#include "advgrpo/attacks.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "advgrpo/errors.hpp"

namespace advgrpo {

std::string_view attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kCw: return "cw";
  }
  return "?";
}

AttackKind parse_attack(std::string_view name) {
  if (name == "fgsm") return AttackKind::kFgsm;
  if (name == "pgd") return AttackKind::kPgd;
  if (name == "cw") return AttackKind::kCw;
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

void validate(const AttackConfig& c) {
  if (c.kind != AttackKind::kCw && !(c.epsilon > 0)) throw ConfigError("attack epsilon must be > 0");
  if (c.kind == AttackKind::kPgd) {
    if (c.steps < 1) throw ConfigError("pgd needs steps >= 1");
    if (!(c.alpha > 0)) throw ConfigError("pgd needs alpha > 0");
  }
  if (c.kind == AttackKind::kCw) {
    if (c.cw.steps < 1) throw ConfigError("cw needs steps >= 1");
    if (!(c.cw.c > 0) || !(c.cw.lr > 0)) throw ConfigError("cw needs c > 0 and lr > 0");
    if (!(c.cw.kappa >= 0)) throw ConfigError("cw needs kappa >= 0");
    if (c.cw.search_rounds < 0) throw ConfigError("cw search rounds must be >= 0");
  }
}

LossGradient untargeted_loss(const ParamSet& params, std::span<const double> image, int question, AnswerId anchor) {
  LossSpec spec;
  spec.terms.push_back(AnswerNllTerm{anchor, 1.0});
  return grad(params, image, question, spec);
}

namespace {

AttackOutcome finish(const ParamSet& params, const Sample& s, AnswerId anchor, std::vector<double> delta) {
  AttackOutcome out;
  out.clean_answer = anchor;
  out.attacked_answer = greedy_answer(params, add(s.image, delta), s.question);
  out.success = out.attacked_answer != anchor;
  out.delta_l2 = l2_norm(delta);
  out.delta_linf = linf_norm(delta);
  out.delta = std::move(delta);
  return out;
}

}  // namespace

AttackOutcome fgsm(const ParamSet& params, const Sample& sample, double epsilon) {
  if (!(epsilon > 0)) throw ConfigError("fgsm epsilon must be > 0");
  const AnswerId anchor = greedy_answer(params, sample.image, sample.question);
  const auto g = untargeted_loss(params, sample.image, sample.question, anchor).grad.image;
  std::vector<double> delta(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) delta[j] = epsilon * sign(g[j]);
  return finish(params, sample, anchor, std::move(delta));
}

AttackOutcome pgd_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config) {
  AttackConfig c = config;
  c.kind = AttackKind::kPgd;
  validate(c);
  const AnswerId anchor = greedy_answer(params, sample.image, sample.question);
  std::vector<double> delta(sample.image.size(), 0.0);
  for (int step = 0; step < c.steps; ++step) {
    const auto g = untargeted_loss(params, add(sample.image, delta), sample.question, anchor).grad.image;
    pgd_step(delta, g, c.alpha, c.epsilon, c.norm);
  }
  return finish(params, sample, anchor, std::move(delta));
}

LossGradient cw_margin(const ParamSet& params, std::span<const double> image, int question, AnswerId anchor,
                       double kappa) {
  const auto z = forward(params, image, question).answer_logits;
  if (anchor < 0 || anchor >= static_cast<int>(z.size())) throw RangeError("anchor answer out of range");
  int rival = -1;
  for (int a = 0; a < static_cast<int>(z.size()); ++a) {
    if (a != anchor && (rival < 0 || z[a] > z[rival])) rival = a;
  }
  LossGradient out;
  if (rival < 0) {
    out.value = -kappa;
    out.grad = zero_gradient(params.config);
    out.grad.image.assign(image.size(), 0.0);
    return out;
  }
  const double m = z[anchor] - z[rival];
  if (m <= -kappa) {
    out.value = -kappa;
    out.grad = zero_gradient(params.config);
    out.grad.image.assign(image.size(), 0.0);
    return out;
  }
  LogitLinearTerm term;
  term.answer.assign(z.size(), 0.0);
  term.answer[anchor] = 1.0;
  term.answer[rival] = -1.0;
  LossSpec spec;
  spec.terms.push_back(std::move(term));
  return grad(params, image, question, spec);
}

AttackOutcome cw_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config) {
  AttackConfig cfg = config;
  cfg.kind = AttackKind::kCw;
  validate(cfg);
  const auto& cw = cfg.cw;
  const AnswerId anchor = greedy_answer(params, sample.image, sample.question);
  const std::size_t d = sample.image.size();

  std::vector<double> best;
  double best_norm = std::numeric_limits<double>::infinity();
  std::vector<double> last(d, 0.0);
  double c = cw.c, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  const int rounds = std::max(1, cw.search_rounds);
  for (int round = 0; round < rounds; ++round) {
    std::vector<double> delta(d, 0.0);
    bool found = false;
    for (int step = 0; step < cw.steps; ++step) {
      const auto x = add(sample.image, delta);
      const auto f = cw_margin(params, x, sample.question, anchor, cw.kappa);
      const double n = l2_norm(delta);
      for (std::size_t j = 0; j < d; ++j) {
        const double g_norm = n > 0 ? delta[j] / n : 0.0;
        delta[j] -= cw.lr * (g_norm + c * f.grad.image[j]);
      }
      const double nn = l2_norm(delta);
      if (nn < best_norm && greedy_answer(params, add(sample.image, delta), sample.question) != anchor) {
        best = delta;
        best_norm = nn;
        found = true;
      }
    }
    last = std::move(delta);
    if (found) {
      hi = c;
      c = 0.5 * (lo + hi);
    } else {
      lo = c;
      c = std::isfinite(hi) ? 0.5 * (lo + hi) : 10.0 * c;
    }
  }
  return finish(params, sample, anchor, best.empty() ? std::move(last) : std::move(best));
}

AttackOutcome run_attack(const ParamSet& params, const Sample& sample, const AttackConfig& config) {
  switch (config.kind) {
    case AttackKind::kFgsm: {
      if (config.norm != Norm::kLinf) throw ConfigError("fgsm is an L-infinity attack");
      return fgsm(params, sample, config.epsilon);
    }
    case AttackKind::kPgd: return pgd_attack(params, sample, config);
    case AttackKind::kCw: return cw_attack(params, sample, config);
  }
  throw ConfigError("unknown attack kind");
}

double aua(std::span<const std::pair<double, double>> curve) {
  if (curve.size() < 2) throw ConfigError("AUA needs at least 2 points");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const double h = curve[i].first - curve[i - 1].first;
    if (!(h > 0)) throw ConfigError("AUA epsilons must be strictly increasing");
    area += 0.5 * h * (curve[i].second + curve[i - 1].second);
  }
  return area / (curve.back().first - curve.front().first);
}

std::vector<AttackRow> attack_sweep(const ParamSet& params, std::span<const Sample> samples,
                                    std::span<const AttackConfig> configs, int threads) {
  for (const auto& c : configs) validate(c);
  const std::size_t n = samples.size();
  std::vector<AttackRow> rows(configs.size() * n);
  auto work = [&](std::size_t i) {
    const auto& c = configs[i / n];
    const std::size_t j = i % n;
    const auto o = run_attack(params, samples[j], c);
    AttackRow& r = rows[i];
    r.sample = j;
    r.kind = c.kind;
    r.norm = c.norm;
    r.epsilon = c.kind == AttackKind::kCw ? 0.0 : c.epsilon;
    r.success = o.success;
    r.correct = o.attacked_answer == samples[j].truth;
    r.clean_answer = o.clean_answer;
    r.attacked_answer = o.attacked_answer;
    r.delta_l2 = o.delta_l2;
    r.delta_linf = o.delta_linf;
  };
  const std::size_t workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || rows.size() < 2) {
    for (std::size_t i = 0; i < rows.size(); ++i) work(i);
    return rows;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < rows.size(); i += workers) work(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

void write_attack_table(const std::filesystem::path& path, std::span<const AttackRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "sample\tattack\tnorm\tepsilon\tsuccess\tcorrect\tclean_answer\tattacked_answer\tdelta_l2\tdelta_linf\n";
  for (const auto& r : rows) {
    out << r.sample << '\t' << attack_name(r.kind) << '\t' << norm_name(r.norm) << '\t' << format_double(r.epsilon)
        << '\t' << int(r.success) << '\t' << int(r.correct) << '\t' << r.clean_answer << '\t' << r.attacked_answer
        << '\t' << format_double(r.delta_l2) << '\t' << format_double(r.delta_linf) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<AttackRow> read_attack_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<AttackRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    AttackRow r;
    std::string kind, norm;
    int success = 0, correct = 0;
    if (!(ls >> r.sample >> kind >> norm >> r.epsilon >> success >> correct >> r.clean_answer >> r.attacked_answer >>
          r.delta_l2 >> r.delta_linf)) {
      throw ConfigError("malformed attack table row: " + line);
    }
    r.kind = parse_attack(kind);
    r.norm = parse_norm(norm);
    r.success = success != 0;
    r.correct = correct != 0;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace advgrpo
