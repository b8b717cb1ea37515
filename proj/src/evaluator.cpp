#include "grl/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "grl/rng.hpp"

namespace grl {

std::string_view to_string(TaskKind k) { return k == TaskKind::path ? "path" : "cycle"; }

TaskKind parse_task_kind(std::string_view s) {
  if (s == "path") return TaskKind::path;
  if (s == "cycle") return TaskKind::cycle;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "' (expected path|cycle)");
}

DenseMatrix oracle_truth(const Graph& g, TaskKind kind, unsigned length) {
  return kind == TaskKind::path ? oracle_paths(g, length) : oracle_cycles(g, length);
}

TruthCache::TruthCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

namespace {

std::optional<DenseMatrix> load_truth(const std::filesystem::path& file, std::size_t n) {
  std::ifstream in(file);
  if (!in) return std::nullopt;
  std::vector<double> vals;
  vals.reserve(n * n);
  std::string line;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
  }
  if (vals.size() != n * n) return std::nullopt;
  return DenseMatrix(n, std::move(vals));
}

}  // namespace

DenseMatrix TruthCache::get(const Graph& g, TaskKind kind, unsigned length) {
  std::ostringstream name;
  name << std::hex << std::setw(16) << std::setfill('0') << g.hash() << '_' << to_string(kind)
       << std::dec << length << ".csv";
  const auto file = dir_ / name.str();
  std::lock_guard lock(mu_);
  if (auto hit = load_truth(file, g.size())) {
    ++hits_;
    return *hit;
  }
  ++misses_;
  DenseMatrix t = oracle_truth(g, kind, length);
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    write_csv(out, t);
  }
  std::filesystem::rename(tmp, file);
  return t;
}

TargetTask TargetTask::make(TaskKind kind, unsigned length, std::vector<Graph> graphs,
                            TruthCache* cache) {
  if (graphs.empty()) throw std::invalid_argument("task needs at least one graph");
  TargetTask t;
  t.kind = kind;
  t.length = length;
  t.truths.reserve(graphs.size());
  for (const auto& g : graphs) {
    t.truths.push_back(cache ? cache->get(g, kind, length) : oracle_truth(g, kind, length));
  }
  t.graphs = std::move(graphs);
  return t;
}

std::vector<Graph> make_dataset(const DatasetSpec& spec) {
  if (spec.n_min < 2 || spec.n_max < spec.n_min) {
    throw std::invalid_argument("dataset: need 2 <= n_min <= n_max");
  }
  Rng rng(mix_seed(spec.seed, 0x6e73));
  std::vector<Graph> out;
  out.reserve(spec.count);
  for (std::size_t k = 0; k < spec.count; ++k) {
    const std::size_t n = spec.n_min + rng.index(spec.n_max - spec.n_min + 1);
    out.push_back(erdos_renyi(n, spec.p, mix_seed(spec.seed, k)));
  }
  return out;
}

std::vector<double> solve(DenseMatrix e, std::vector<double> v, double pivot) {
  const std::size_t s = e.size();
  if (v.size() != s) throw DimensionError("solve: rhs size mismatch");
  const double scale = e.max_abs();
  if (scale == 0.0) throw SingularSystem("solve: zero matrix");
  const double threshold = pivot * scale;

  for (std::size_t col = 0; col < s; ++col) {
    std::size_t best = col;
    for (std::size_t r = col + 1; r < s; ++r) {
      if (std::abs(e(r, col)) > std::abs(e(best, col))) best = r;
    }
    if (std::abs(e(best, col)) < threshold) throw SingularSystem("solve: singular pivot");
    if (best != col) {
      for (std::size_t c = 0; c < s; ++c) std::swap(e(col, c), e(best, c));
      std::swap(v[col], v[best]);
    }
    for (std::size_t r = col + 1; r < s; ++r) {
      const double f = e(r, col) / e(col, col);
      if (f == 0.0) continue;
      for (std::size_t c = col; c < s; ++c) e(r, c) -= f * e(col, c);
      v[r] -= f * v[col];
    }
  }
  std::vector<double> x(s);
  for (std::size_t i = s; i-- > 0;) {
    double acc = v[i];
    for (std::size_t c = i + 1; c < s; ++c) acc -= e(i, c) * x[c];
    x[i] = acc / e(i, i);
  }
  return x;
}

double fit_reward(double residual, double tolerance, double beta) {
  if (residual <= tolerance) return 1.0;
  return std::clamp(std::exp(-beta * residual) - 1.0, -1.0, 0.99);
}

Scorer::Scorer(const TargetTask& task, EvalParams params) : task_(&task), params_(params) {
  adjacencies_.reserve(task.graphs.size());
  for (const auto& g : task.graphs) adjacencies_.push_back(adjacency(g));
}

const std::vector<DenseMatrix>& Scorer::values(const Sentence& s) {
  auto it = values_.find(s.text());
  if (it != values_.end()) return it->second;
  std::vector<DenseMatrix> vals;
  vals.reserve(adjacencies_.size());
  for (const auto& a : adjacencies_) vals.push_back(evaluate_sentence(s, a));
  return values_.emplace(s.text(), std::move(vals)).first->second;
}

namespace {

// s distinct off-diagonal (i, j) pairs, uniform without replacement.
std::vector<std::pair<std::size_t, std::size_t>> draw_indices(std::size_t n, std::size_t s,
                                                              Rng& rng) {
  const std::size_t total = n * (n - 1);
  std::vector<std::size_t> picked;
  picked.reserve(s);
  // Floyd's algorithm keeps the draw O(s) regardless of n.
  for (std::size_t j = total - s; j < total; ++j) {
    const std::size_t t = rng.index(j + 1);
    if (std::find(picked.begin(), picked.end(), t) == picked.end()) {
      picked.push_back(t);
    } else {
      picked.push_back(j);
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(s);
  for (std::size_t k : picked) {
    const std::size_t i = k / (n - 1);
    std::size_t j = k % (n - 1);
    if (j >= i) ++j;
    out.emplace_back(i, j);
  }
  return out;
}

template <class ValuesFn>
LinearSystem build_with(const std::vector<Sentence>& sentences, const TargetTask& task,
                        std::uint64_t seed, const EvalParams& params, ValuesFn&& values) {
  const std::size_t s = sentences.size();
  if (s == 0) throw std::invalid_argument("build_system: no sentences");
  Rng rng(seed);
  const std::size_t graphs = std::min(params.fit_graphs, task.graphs.size());
  for (std::size_t gi = 0; gi < graphs; ++gi) {
    const std::size_t g = (task.fit_graph + gi) % task.graphs.size();
    const std::size_t n = task.graphs[g].size();
    if (n < 2 || n * (n - 1) < s) continue;
    std::vector<const DenseMatrix*> cols;
    cols.reserve(s);
    for (const auto& sent : sentences) cols.push_back(&values(sent)[g]);
    for (std::size_t attempt = 0; attempt < params.retries; ++attempt) {
      LinearSystem sys;
      sys.indices = draw_indices(n, s, rng);
      sys.e = DenseMatrix(s);
      sys.v.resize(s);
      sys.graph = g;
      for (std::size_t r = 0; r < s; ++r) {
        const auto [i, j] = sys.indices[r];
        for (std::size_t c = 0; c < s; ++c) sys.e(r, c) = (*cols[c])(i, j);
        sys.v[r] = task.truths[g](i, j);
      }
      try {
        (void)solve(sys.e, sys.v, params.pivot);
        return sys;
      } catch (const SingularSystem&) {
      }
    }
  }
  throw SingularSystem("no nonsingular system within the retry budget");
}

}  // namespace

LinearSystem build_system(const std::vector<Sentence>& sentences, const TargetTask& task,
                          std::uint64_t seed, const EvalParams& params) {
  Scorer scorer(task, params);
  return build_with(sentences, task, seed, params,
                    [&](const Sentence& s) -> const std::vector<DenseMatrix>& {
                      return scorer.values(s);
                    });
}

double Scorer::residual(const std::vector<Sentence>& sentences, const std::vector<double>& x) {
  double worst = 0.0;
  for (std::size_t g = 0; g < adjacencies_.size(); ++g) {
    const DenseMatrix& truth = task_->truths[g];
    DenseMatrix fit(truth.size());
    for (std::size_t k = 0; k < sentences.size(); ++k) fit.add_scaled(values(sentences[k])[g], x[k]);
    fit -= truth;
    const double r = fit.max_abs() / std::max(1.0, truth.max_abs());
    if (!std::isfinite(r)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, r);
  }
  return worst;
}

EvalOutcome Scorer::score(const std::vector<Sentence>& sentences, double rule_cost,
                          std::uint64_t seed) {
  EvalOutcome out;
  out.cost = rule_cost;
  try {
    LinearSystem sys = build_with(sentences, *task_, seed, params_,
                                  [&](const Sentence& s) -> const std::vector<DenseMatrix>& {
                                    return values(s);
                                  });
    auto x = solve(sys.e, sys.v, params_.pivot);
    out.residual = residual(sentences, x);
    out.coefficients = std::move(x);
    const double r_fit = fit_reward(out.residual, task_->tolerance, params_.beta);
    out.reward = std::clamp(r_fit - params_.lambda * rule_cost, -1.0, 1.0);
  } catch (const SingularSystem&) {
    out.residual = std::numeric_limits<double>::infinity();
    out.reward = -1.0;
  }
  return out;
}

EvalOutcome score(const std::vector<Sentence>& sentences, const TargetTask& task, double rule_cost,
                  std::uint64_t seed, const EvalParams& params) {
  Scorer scorer(task, params);
  return scorer.score(sentences, rule_cost, seed);
}

std::string format_outcome(const EvalOutcome& o, const std::vector<Sentence>& sentences) {
  std::ostringstream out;
  out << std::setprecision(10) << "reward=" << o.reward << " residual=" << o.residual
      << " cost=" << o.cost << " x=";
  if (o.coefficients) {
    for (std::size_t i = 0; i < o.coefficients->size(); ++i) {
      if (i) out << ',';
      out << (*o.coefficients)[i];
    }
  } else {
    out << "none";
  }
  out << " sentences=";
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i) out << ';';
    out << sentences[i].text();
  }
  return out.str();
}

}  // namespace grl
