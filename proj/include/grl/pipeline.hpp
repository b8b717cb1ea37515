#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "grl/evaluator.hpp"
#include "grl/formulas.hpp"
#include "grl/gramformer.hpp"
#include "grl/search.hpp"

namespace grl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RuleCosts {
  double matmul = 1.0;
  double hadamard = 0.1;
  double terminal = 0.01;
  // Cost charged for a product with a J leaf operand instead of `matmul`.
  double j_product = 0.1;
};

struct RunConfig {
  TaskKind kind = TaskKind::path;
  unsigned length = 2;
  DatasetSpec train_set{8, 8, 12, 0.5, 1};
  DatasetSpec validation_set{8, 8, 12, 0.5, 1'000'003};
  std::string grammar = "g3tilde";
  SearchConfig search;
  RuleCosts costs;
  EvalParams eval;
  double tolerance = 1e-6;
  std::size_t agents = 8;
  std::size_t episodes = 16;
  std::size_t generations = 4;
  std::size_t buffer_capacity = 20000;
  std::size_t checkpoint_every = 1;
  std::size_t threads = 0;  // 0: one per hardware thread
  std::size_t leaderboard_size = 20;
  bool stop_on_exact = true;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 1;
  std::filesystem::path output = "run";

  const Cfg& cfg() const;
  // Rule penalties indexed by rule id of cfg().
  std::vector<double> rule_costs() const;
  void validate() const;
};

// "key = value" lines, '#' comments. Unknown keys and bad values raise
// ConfigError naming the line and field.
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& file);
void write_run_config(std::ostream& out, const RunConfig& c);

struct LeaderboardEntry {
  std::size_t generation = 0;
  std::size_t agent = 0;
  std::size_t episode = 0;
  double reward = -1.0;
  double residual = 0.0;
  double validation_residual = 0.0;
  double cost = 0.0;
  std::vector<double> coefficients;
  std::vector<std::string> sentences;

  bool validated(double tolerance) const {
    return residual <= tolerance && validation_residual <= tolerance;
  }
};

class Leaderboard {
 public:
  explicit Leaderboard(std::size_t capacity = 20) : capacity_(capacity) {}

  // Keeps one entry per sentence set; returns true when the entry was kept.
  bool offer(LeaderboardEntry e, double tolerance);
  const std::vector<LeaderboardEntry>& entries() const { return entries_; }
  // Best entry that also fits the validation graphs.
  std::optional<LeaderboardEntry> best_validated(double tolerance) const;

  void write(std::ostream& out) const;
  static Leaderboard read(std::istream& in, std::size_t capacity);

 private:
  std::size_t capacity_;
  std::vector<LeaderboardEntry> entries_;
  double tolerance_ = 1e-6;
};

// Charges the configured rule penalties, discounting products whose operand
// is the J leaf.
double sentence_set_cost(const std::vector<Sentence>& sentences, const RuleCosts& costs);

struct RunResult {
  std::size_t generations_run = 0;
  std::size_t resumed_from = 0;
  std::size_t episodes = 0;
  Leaderboard leaderboard;
  std::optional<LeaderboardEntry> best;
};

// Acting generations followed by learning phases. Resumes from the last
// checkpoint under cfg.output when one exists. Progress lines go to `log`.
RunResult run(const RunConfig& cfg, std::ostream* log = nullptr);

// Rounds each coefficient to the nearest p/q with q <= 16 when within 1e-6.
std::vector<double> round_coefficients(const std::vector<double>& x);
// Refuses (std::invalid_argument) entries whose residual exceeds tolerance.
LinearCombo export_formula(const LeaderboardEntry& e, double tolerance);

}  // namespace grl
