#include "grl/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "grl/evaluator.hpp"
#include "grl/grammar.hpp"
#include "grl/pipeline.hpp"
#include "grl/rng.hpp"

namespace grl {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// Integer check first so huge counts never pass through a rounding tolerance.
std::optional<std::string> compare(const DenseMatrix& got, const DenseMatrix& want) {
  for (std::size_t i = 0; i < want.size(); ++i) {
    for (std::size_t j = 0; j < want.size(); ++j) {
      const double g = got(i, j);
      const double w = want(i, j);
      if (std::abs(g - std::round(g)) > 1e-6 || std::round(g) != w) {
        return "at (" + std::to_string(i) + "," + std::to_string(j) + "): got " + num(g) + ", expected " +
               num(w);
      }
    }
  }
  return std::nullopt;
}

LinearCombo perturbed(const LinearCombo& c) {
  LinearCombo out;
  bool first = true;
  for (const auto& t : c.terms()) {
    out.add(first ? t.coefficient + 1.0 : t.coefficient, t.sentence);
    first = false;
  }
  return out;
}

}  // namespace

std::vector<unsigned> parse_length_range(const std::string& text) {
  auto to_u = [&](const std::string& s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw UsageError("bad length range '" + text + "'");
    }
    return static_cast<unsigned>(std::stoul(s));
  };
  const auto dots = text.find("..");
  const unsigned lo = to_u(dots == std::string::npos ? text : text.substr(0, dots));
  const unsigned hi = dots == std::string::npos ? lo : to_u(text.substr(dots + 2));
  if (hi < lo) throw UsageError("empty length range '" + text + "'");
  std::vector<unsigned> out;
  for (unsigned l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

Graph verify_graph(const VerifySpec& spec, std::size_t k) {
  const std::uint64_t s = mix_seed(spec.seed, k);
  const std::size_t n = spec.n_min + static_cast<std::size_t>(splitmix64(s) % (spec.n_max - spec.n_min + 1));
  return erdos_renyi(n, spec.p[k % spec.p.size()], s);
}

VerifyReport verify(const VerifySpec& spec) {
  if (spec.graphs == 0 || spec.p.empty() || spec.n_min < 1 || spec.n_min > spec.n_max) {
    throw UsageError("verify: need graphs >= 1, a p value and 1 <= nmin <= nmax");
  }
  for (unsigned l : spec.lengths) {
    if (l < 2 || l > 6) throw UsageError("verify: lengths must lie in 2..6, got " + std::to_string(l));
  }

  struct Check {
    std::string name;
    LinearCombo combo;
    bool cycles;
    unsigned length;
  };
  std::vector<Check> checks;
  for (unsigned l : spec.lengths) {
    checks.push_back({"P" + std::to_string(l), voropaev_paths(l), false, l});
    checks.push_back({"P" + std::to_string(l) + "*", star_paths(l), false, l});
  }
  for (unsigned l : spec.lengths) {
    const unsigned c = l + 1;
    checks.push_back({"C" + std::to_string(c), voropaev_cycles(c), true, c});
    checks.push_back({"C" + std::to_string(c) + "f", star_cycles(c), true, c});
  }
  bool hooked = spec.corrupt.empty();
  for (auto& ch : checks) {
    if (ch.name == spec.corrupt) {
      ch.combo = perturbed(ch.combo);
      hooked = true;
    }
  }
  if (!hooked) throw UsageError("verify: --corrupt names no checked formula: " + spec.corrupt);

  VerifyReport report;
  std::vector<std::size_t> passed(checks.size() + spec.lengths.size(), 0);
  for (std::size_t k = 0; k < spec.graphs && !report.first_mismatch; ++k) {
    const Graph g = verify_graph(spec, k);
    const DenseMatrix a = adjacency(g);
    auto where = [&](const std::string& name) {
      return name + " on graph " + std::to_string(k) + " (n=" + std::to_string(g.size()) +
             ", p=" + num(spec.p[k % spec.p.size()]) + ") ";
    };
    for (std::size_t c = 0; c < checks.size() && !report.first_mismatch; ++c) {
      const auto& ch = checks[c];
      const DenseMatrix truth = ch.cycles ? oracle_cycles(g, ch.length) : oracle_paths(g, ch.length);
      ++report.checks;
      if (auto m = compare(evaluate_combo(ch.combo, a), truth)) {
        report.first_mismatch = where(ch.name) + *m;
      } else {
        ++passed[c];
      }
    }
    // C_{l+1} = A o P_l with P_l taken from the faster family.
    for (std::size_t i = 0; i < spec.lengths.size() && !report.first_mismatch; ++i) {
      const unsigned l = spec.lengths[i];
      const DenseMatrix lifted = hadamard(a, evaluate_combo(star_paths(l), a));
      ++report.checks;
      if (auto m = compare(lifted, oracle_cycles(g, l + 1))) {
        report.first_mismatch = where("A o P" + std::to_string(l) + "*") + *m;
      } else {
        ++passed[checks.size() + i];
      }
    }
  }
  for (std::size_t c = 0; c < checks.size(); ++c) {
    report.lines.push_back(checks[c].name + "\t" + std::to_string(passed[c]) + "/" + std::to_string(spec.graphs));
  }
  for (std::size_t i = 0; i < spec.lengths.size(); ++i) {
    report.lines.push_back("A o P" + std::to_string(spec.lengths[i]) + "*\t" +
                           std::to_string(passed[checks.size() + i]) + "/" + std::to_string(spec.graphs));
  }
  return report;
}

double theoretical_factor(unsigned l) {
  switch (l) {
    case 3: return 2.0;
    case 4: return 2.25;
    case 5: return 4.0;
    case 6: return 6.25;
    default: throw UsageError("bench: lengths must lie in 3..6, got " + std::to_string(l));
  }
}

std::vector<BenchRecord> benchmark(const std::vector<unsigned>& lengths, const std::vector<std::size_t>& sizes,
                                   std::size_t reps, std::uint64_t seed, double p) {
  if (reps == 0) throw UsageError("bench: reps must be at least 1");
  for (unsigned l : lengths) (void)theoretical_factor(l);
  for (std::size_t n : sizes) {
    if (n == 0) throw UsageError("bench: sizes must be positive");
  }

  // One evaluator, hence one product kernel, for both families.
  const auto kernel = &evaluate_formula;
  auto time_formula = [&](const Formula& f, const DenseMatrix& a) {
    volatile double sink = kernel(f, a)(0, 0);  // warmup
    std::vector<double> t;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto start = std::chrono::steady_clock::now();
      const DenseMatrix out = kernel(f, a);
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      sink = out(0, 0);
    }
    (void)sink;
    std::sort(t.begin(), t.end());
    const std::size_t m = t.size() / 2;
    return t.size() % 2 ? t[m] : 0.5 * (t[m - 1] + t[m]);
  };

  std::vector<BenchRecord> out;
  for (std::size_t n : sizes) {
    const DenseMatrix a = adjacency(erdos_renyi(n, p, mix_seed(seed, n)));
    for (unsigned l : lengths) {
      const Formula base = path_formula(Family::voropaev, l);
      const Formula fast = path_formula(Family::star, l);
      BenchRecord b{"P" + std::to_string(l), n, reps, time_formula(base, a), cost_of(base).heavy_matmuls};
      BenchRecord f{"P" + std::to_string(l) + "*", n, reps, time_formula(fast, a), cost_of(fast).heavy_matmuls};
      // Below a millisecond the clock and cache effects dominate.
      const bool reliable = b.median_seconds >= 1e-3 && f.median_seconds >= 1e-3;
      b.median_seconds = std::max(b.median_seconds, 1e-9);
      f.median_seconds = std::max(f.median_seconds, 1e-9);
      f.ratio = b.median_seconds / f.median_seconds;
      b.theoretical = 1.0;
      f.theoretical = theoretical_factor(l);
      b.reliable = f.reliable = reliable;
      out.push_back(b);
      out.push_back(f);
    }
  }
  return out;
}

void write_bench_tsv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << "formula\tn\treps\tmedian_seconds\tmatmuls\tratio\ttheoretical\treliable\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%s\t%zu\t%zu\t%.6f\t%zu\t%.3f\t%g\t%s\n", r.formula.c_str(), r.n, r.reps,
                  r.median_seconds, r.matmuls, r.ratio, r.theoretical, r.reliable ? "yes" : "no");
    out << buf;
  }
}

// --- commands ------------------------------------------------------------------

namespace {

int cmd_count(const std::string& file, const std::string& kind_s, unsigned length, const std::string& method,
              std::ostream& out) {
  const TaskKind kind = parse_task_kind(kind_s);
  if (method != "star" && method != "voropaev" && method != "oracle") {
    throw UsageError("count: --method must be star, voropaev or oracle");
  }
  if (method != "oracle") {
    const bool path = kind == TaskKind::path;
    const unsigned lo = path ? 2 : 3, hi = path ? 6 : 7;
    if (length < lo || length > hi) {
      throw UsageError("count: " + method + " formulas cannot count " + std::to_string(length) + "-" +
                       (path ? "paths" : "cycles") + "; supported lengths are " + std::to_string(lo) + ".." +
                       std::to_string(hi));
    }
  } else if (length < (kind == TaskKind::path ? 1u : 3u)) {
    throw UsageError("count: length too small for " + kind_s);
  }
  Graph g;
  try {
    g = read_graph_file(file);
  } catch (const std::exception& e) {
    throw UsageError(std::string("count: ") + e.what());
  }
  DenseMatrix m;
  if (method == "oracle") {
    m = oracle_truth(g, kind, length);
  } else {
    const Family f = method == "star" ? Family::star : Family::voropaev;
    const Formula formula = kind == TaskKind::path ? path_formula(f, length) : cycle_formula(f, length);
    m = rounded_integral(evaluate_formula(formula, adjacency(g)));
  }
  write_csv(out, m);
  return exit_ok;
}

int cmd_verify(const VerifySpec& spec, std::ostream& out, std::ostream& err) {
  const auto report = verify(spec);
  for (const auto& l : report.lines) out << l << "\n";
  if (report.first_mismatch) {
    err << "mismatch: " << *report.first_mismatch << "\n";
    return exit_failure;
  }
  out << "all exact: " << report.checks << " checks\n";
  return exit_ok;
}

int cmd_bench(const std::vector<unsigned>& lengths, const std::vector<std::size_t>& sizes, std::size_t reps,
              std::uint64_t seed, double p, std::ostream& out, std::ostream& err) {
  const auto records = benchmark(lengths, sizes, reps, seed, p);
  write_bench_tsv(out, records);
  for (const auto& r : records) {
    if (r.theoretical == 1.0) continue;
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%s n=%zu: measured %.2fx, theoretical %gx (%.0f%%)%s\n", r.formula.c_str(), r.n,
                  r.ratio, r.theoretical, 100.0 * r.ratio / r.theoretical, r.reliable ? "" : " [unreliable]");
    err << buf;
  }
  return exit_ok;
}

const Cfg& grammar_named(const std::string& name) {
  if (name == "g3") return g3();
  if (name == "g3tilde") return g3_tilde();
  throw UsageError("unknown grammar '" + name + "' (expected g3 or g3tilde)");
}

int cmd_sample(const std::string& grammar, std::size_t count, std::size_t c_max, std::uint64_t seed,
               std::ostream& out) {
  const Cfg& g = grammar_named(grammar);
  Rng rng(seed);
  const RuleChooser uniform = [&](const SententialForm&, std::span<const std::size_t> legal) {
    return legal[rng.index(legal.size())];
  };
  for (std::size_t i = 0; i < count; ++i) out << generate(g, uniform, c_max) << "\n";
  return exit_ok;
}

struct EvalArgs {
  std::string file;
  std::string grammar = "g3";
  std::string kind = "path";
  unsigned length = 3;
  DatasetSpec data;
  EvalParams params;
  double tolerance = 1e-6;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Cfg& g = grammar_named(a.grammar);
  std::ifstream in(a.file);
  if (!in) throw UsageError("eval: cannot open " + a.file);
  std::vector<Sentence> sentences;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    try {
      sentences.push_back(parse(line, g));
    } catch (const ParseError& e) {
      throw UsageError(a.file + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  if (sentences.empty()) throw UsageError("eval: no sentences in " + a.file);

  TargetTask task = TargetTask::make(parse_task_kind(a.kind), a.length, make_dataset(a.data));
  task.tolerance = a.tolerance;
  const double cost = sentence_set_cost(sentences, RuleCosts{});
  const EvalOutcome o = score(sentences, task, cost, a.data.seed, a.params);
  if (o.coefficients) {
    out << "coefficients";
    for (double x : *o.coefficients) out << ' ' << num(x);
    out << "\nresidual " << num(o.residual) << "\n";
  } else {
    out << "coefficients none (singular system)\n";
  }
  out << "cost " << num(o.cost) << "\nreward " << num(o.reward) << "\n";
  return exit_ok;
}

int cmd_run(const std::string& config, const std::string& output, const std::optional<std::uint64_t>& seed,
            std::ostream& out) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config);
    if (!output.empty()) cfg.output = output;
    if (seed) cfg.seed = *seed;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(config + ": " + e.what());
  }
  const RunResult r = run(cfg, &out);
  out << "episodes " << r.episodes << ", generations " << r.generations_run << "\n";
  if (r.best) {
    out << "best";
    for (std::size_t i = 0; i < r.best->sentences.size(); ++i) {
      out << ' ' << format_coefficient(round_coefficients(r.best->coefficients)[i]) << '*' << r.best->sentences[i];
    }
    out << "\nvalidation residual " << num(r.best->validation_residual) << "\n";
  } else {
    out << "no formula fit the validation graphs\n";
  }
  return exit_ok;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Path and cycle counting formulas and grammar reinforcement learning"};
  app.require_subcommand(1);

  std::string graph_file, kind = "path", method = "star";
  unsigned length = 2;
  auto* count = app.add_subcommand("count", "Print the count matrix of a graph as CSV");
  count->add_option("--graph", graph_file, "Graph file: 'n m' then m lines 'u v'")->required();
  count->add_option("--kind", kind, "path or cycle");
  count->add_option("--length,-l", length, "Number of edges")->required();
  count->add_option("--method", method, "star, voropaev or oracle");

  VerifySpec vs;
  std::string verify_lengths = "2..6";
  auto* ver = app.add_subcommand("verify", "Check both formula families against the oracles");
  ver->add_option("--lengths", verify_lengths, "Path lengths, e.g. 2..6");
  ver->add_option("--graphs", vs.graphs, "Number of random graphs");
  ver->add_option("--nmin", vs.n_min, "Smallest graph");
  ver->add_option("--nmax", vs.n_max, "Largest graph");
  ver->add_option("--p", vs.p, "Edge probabilities, cycled over the graphs")->delimiter(',');
  ver->add_option("--seed", vs.seed, "Seed");
  ver->add_option("--corrupt", vs.corrupt, "Perturb one formula (negative control)")->group("");

  std::string bench_lengths = "3..6";
  std::vector<std::size_t> sizes{500, 1000, 1500, 2000};
  std::size_t reps = 5;
  std::uint64_t bench_seed = 1;
  double bench_p = 0.5;
  auto* bench = app.add_subcommand("bench", "Time P_l against P_l* (TSV on stdout, summary on stderr)");
  bench->add_option("--lengths", bench_lengths, "Path lengths within 3..6");
  bench->add_option("--sizes", sizes, "Graph sizes")->delimiter(',');
  bench->add_option("--reps", reps, "Timed repetitions after one warmup");
  bench->add_option("--seed", bench_seed, "Seed");
  bench->add_option("--p", bench_p, "Edge probability");

  std::string grammar = "g3tilde";
  std::size_t sample_count = 10, c_max = 20;
  std::uint64_t sample_seed = 1;
  auto* gram = app.add_subcommand("grammar", "Grammar tools");
  gram->require_subcommand(1);
  auto* sample = gram->add_subcommand("sample", "Sentences from uniform leftmost derivations");
  sample->add_option("--grammar", grammar, "g3 or g3tilde");
  sample->add_option("-n,--count", sample_count, "How many sentences");
  sample->add_option("--cmax", c_max, "Maximum sentence length");
  sample->add_option("--seed", sample_seed, "Seed");

  EvalArgs ea;
  std::string task;
  auto* eval = app.add_subcommand("eval", "Fit a sentence set to a counting task");
  eval->add_option("--sentences", ea.file, "One sentence per line")->required();
  eval->add_option("--task", task, "kind:length, e.g. path:3");
  eval->add_option("--grammar", ea.grammar, "Grammar used to parse the sentences");
  eval->add_option("--graphs", ea.data.count, "Number of graphs");
  eval->add_option("--nmin", ea.data.n_min, "Smallest graph");
  eval->add_option("--nmax", ea.data.n_max, "Largest graph");
  eval->add_option("--p", ea.data.p, "Edge probability");
  eval->add_option("--seed", ea.data.seed, "Seed");
  eval->add_option("--beta", ea.params.beta, "Reward sharpness");
  eval->add_option("--lambda", ea.params.lambda, "Cost weight");
  eval->add_option("--tolerance", ea.tolerance, "Residual counted as exact");

  std::string config, output;
  std::optional<std::uint64_t> run_seed;
  auto* runc = app.add_subcommand("run", "Search for a formula with the settings of a config file");
  runc->add_option("--config", config, "Config file")->required();
  runc->add_option("--output", output, "Run directory (overrides the config)");
  runc->add_option("--seed", run_seed, "Seed (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*count) return cmd_count(graph_file, kind, length, method, out);
    if (*ver) {
      vs.lengths = parse_length_range(verify_lengths);
      return cmd_verify(vs, out, err);
    }
    if (*bench) return cmd_bench(parse_length_range(bench_lengths), sizes, reps, bench_seed, bench_p, out, err);
    if (*sample) return cmd_sample(grammar, sample_count, c_max, sample_seed, out);
    if (*eval) {
      if (!task.empty()) {
        const auto colon = task.find(':');
        if (colon == std::string::npos) throw UsageError("eval: --task must look like path:3");
        ea.kind = task.substr(0, colon);
        ea.length = parse_length_range(task.substr(colon + 1)).front();
      }
      return cmd_eval(ea, out);
    }
    if (*runc) return cmd_run(config, output, run_seed, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_usage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_usage;
}

}  // namespace grl
