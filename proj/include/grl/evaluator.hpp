#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "grl/grammar.hpp"
#include "grl/matrix.hpp"

namespace grl {

enum class TaskKind { path, cycle };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

class SingularSystem : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Persistent store of oracle outputs keyed by (graph hash, kind, length).
// Safe to share between threads.
class TruthCache {
 public:
  explicit TruthCache(std::filesystem::path dir);

  DenseMatrix get(const Graph& g, TaskKind kind, unsigned length);
  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::filesystem::path dir_;
  std::mutex mu_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

DenseMatrix oracle_truth(const Graph& g, TaskKind kind, unsigned length);

struct TargetTask {
  TaskKind kind = TaskKind::path;
  unsigned length = 2;
  std::vector<Graph> graphs;
  std::vector<DenseMatrix> truths;
  std::size_t fit_graph = 0;
  double tolerance = 1e-6;

  // Computes the truths with the oracles, optionally through a cache.
  static TargetTask make(TaskKind kind, unsigned length, std::vector<Graph> graphs,
                         TruthCache* cache = nullptr);
};

struct DatasetSpec {
  std::size_t count = 8;
  std::size_t n_min = 8;
  std::size_t n_max = 12;
  double p = 0.5;
  std::uint64_t seed = 1;
};

// Erdos-Renyi graphs with sizes drawn uniformly from [n_min, n_max].
std::vector<Graph> make_dataset(const DatasetSpec& spec);

struct EvalParams {
  double beta = 10.0;
  double lambda = 0.01;
  double pivot = 1e-9;
  std::size_t retries = 8;
  // How many graphs (starting at the task's fit graph) are tried in turn.
  std::size_t fit_graphs = 3;
};

struct LinearSystem {
  DenseMatrix e;
  std::vector<double> v;
  std::vector<std::pair<std::size_t, std::size_t>> indices;
  std::size_t graph = 0;
};

// Samples s off-diagonal entries of a fit graph and tabulates the sentences
// there. Retries fresh draws, then moves to the next graph. Throws
// SingularSystem when nothing works.
LinearSystem build_system(const std::vector<Sentence>& sentences, const TargetTask& task,
                          std::uint64_t seed, const EvalParams& params = {});

// Gaussian elimination with partial pivoting. Singular iff a pivot falls below
// pivot * max|E|.
std::vector<double> solve(DenseMatrix e, std::vector<double> v, double pivot = 1e-9);

struct EvalOutcome {
  std::optional<std::vector<double>> coefficients;
  double residual = 0.0;
  double reward = -1.0;
  double cost = 0.0;
};

double fit_reward(double residual, double tolerance, double beta);

// Caches sentence values per graph so repeated scoring of overlapping sets
// (as MCTS does) evaluates each sentence once. Not thread-safe; give each
// agent its own.
class Scorer {
 public:
  // Keeps a reference to `task`, which must outlive the scorer.
  Scorer(const TargetTask& task, EvalParams params = {});

  const TargetTask& task() const { return *task_; }
  const EvalParams& params() const { return params_; }

  EvalOutcome score(const std::vector<Sentence>& sentences, double rule_cost,
                    std::uint64_t seed);
  // max over graphs of |sum x_i s_i(A) - T|_inf / max(1, |T|_inf).
  double residual(const std::vector<Sentence>& sentences, const std::vector<double>& x);

  const std::vector<DenseMatrix>& values(const Sentence& s);

 private:
  const TargetTask* task_;
  EvalParams params_;
  std::vector<DenseMatrix> adjacencies_;
  std::unordered_map<std::string, std::vector<DenseMatrix>> values_;
};

EvalOutcome score(const std::vector<Sentence>& sentences, const TargetTask& task, double rule_cost,
                  std::uint64_t seed, const EvalParams& params = {});

// One-line run-log record: "reward=.. residual=.. cost=.. x=a,b sentences=s1;s2".
std::string format_outcome(const EvalOutcome& o, const std::vector<Sentence>& sentences);

}  // namespace grl
