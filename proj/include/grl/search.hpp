#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "grl/evaluator.hpp"
#include "grl/grammar.hpp"
#include "grl/rng.hpp"

namespace grl {

// nbwords sentential forms derived in order: the leftmost variable of the
// first unfinished slot is always the one being rewritten.
struct SearchState {
  std::vector<SententialForm> slots;
  // Sum of the penalties of the rules applied so far.
  double cost = 0.0;

  static SearchState initial(const Cfg& g, std::size_t nbwords);

  bool terminal() const;
  // Slot holding the leftmost pending variable; nullopt when terminal.
  std::optional<std::size_t> active_slot() const;
  std::vector<std::string> sentences(const Cfg& g) const;
  std::string render(const Cfg& g) const;

  friend bool operator==(const SearchState& a, const SearchState& b) {
    return a.slots == b.slots;
  }
};

struct SearchConfig {
  std::size_t nbwords = 1;
  std::size_t c_max = 40;
  std::size_t n_sims = 200;
  double alpha = 0.5;
  double c_init = 1.25;
  double c_base = 19652.0;
  // Rollouts switch to terminal rules once a slot grows past this fraction of c_max.
  double rollout_bias = 0.8;
  double dirichlet_alpha = 0.3;
  double dirichlet_fraction = 0.0;  // 0 disables root noise
  // Penalty per rule id; empty means zero for every rule.
  std::vector<double> rule_costs;
};

// Legal actions (rule ids) in state: rules of the leftmost variable that keep
// the slot completable within c_max.
std::vector<std::size_t> legal_actions(const Cfg& g, const SearchState& s, std::size_t c_max);
SearchState apply_action(const Cfg& g, const SearchState& s, std::size_t rule,
                         const SearchConfig& cfg);

struct PolicyValue {
  std::vector<double> priors;  // aligned with the legal action list
  double value = 0.0;
};

using PolicyValueFn =
    std::function<PolicyValue(const SearchState&, const std::vector<std::size_t>& legal)>;

PolicyValue uniform_policy(const SearchState&, const std::vector<std::size_t>& legal);

// Terminal evaluation, reward in [-1, 1].
using RewardFn = std::function<double(const SearchState&)>;

struct SearchNode {
  SearchState state;
  bool expanded = false;
  std::vector<std::size_t> actions;
  std::vector<std::uint64_t> n;
  std::vector<double> w;
  std::vector<double> prior;
  // v(I, r): the child's predicted value once it has been expanded, the
  // parent's own value before that.
  std::vector<double> v;
  std::vector<std::unique_ptr<SearchNode>> children;
  double value = 0.0;
  std::uint64_t visits = 0;
  // Walks that stopped here (expansion plus rollout, or terminal node).
  std::uint64_t terminations = 0;
  std::optional<double> terminal_reward;

  explicit SearchNode(SearchState s) : state(std::move(s)) {}

  std::uint64_t total_n() const;
  double q(std::size_t k) const { return n[k] ? w[k] / static_cast<double>(n[k]) : 0.0; }
};

double exploration_factor(std::uint64_t visits, double c_init, double c_base);

// Index into node.actions maximizing
// alpha*Q + (1-alpha)*v + c(I)*prior*sqrt(sum N)/(1+N). Ties go to the lowest index.
std::size_t select_action(const SearchNode& node, double alpha, double c);
std::size_t select_action(const SearchNode& node, const SearchConfig& cfg);

void expand(SearchNode& node, const Cfg& g, const PolicyValueFn& model, const SearchConfig& cfg,
            Rng* noise_rng = nullptr);

// Uniform random completion; biased to terminal rules when a slot is long.
SearchState rollout(const Cfg& g, SearchState s, const SearchConfig& cfg, Rng& rng);

// n_sims walks from root. The root is expanded first (not counted as a walk),
// so afterwards the root edge counts grow by exactly n_sims.
void run_simulations(SearchNode& root, const Cfg& g, const PolicyValueFn& model,
                     const RewardFn& reward, const SearchConfig& cfg, Rng& rng);

struct TreeAudit {
  bool ok = true;
  std::size_t nodes = 0;
  std::string first_failure;
};

// Checks, at every node, sum_r N(I, r) == visits - terminations, that each
// child's visit count equals its edge count, and that Q = W/N.
TreeAudit audit_tree(const SearchNode& root);

struct ReplayEntry {
  SearchState state;
  std::vector<std::size_t> actions;
  std::vector<double> policy;  // normalised visit counts, aligned with actions
  double value = 0.0;          // root Q
};

struct Episode {
  SearchState final_state;
  std::vector<std::string> sentences;
  EvalOutcome outcome;
  std::vector<ReplayEntry> replay;
};

// Reward oracle backed by the evaluator. The evaluation seed is derived from
// the sorted sentence set so identical sets always score identically.
class TaskReward {
 public:
  // Penalty of a finished sentence set; when empty the state's accumulated
  // rule cost is used.
  using CostFn = std::function<double(const std::vector<Sentence>&)>;

  TaskReward(const Cfg& g, const TargetTask& task, EvalParams params, std::uint64_t seed,
             CostFn cost = {});

  // Coefficients follow the slot order of `s`.
  EvalOutcome outcome(const SearchState& s);
  double operator()(const SearchState& s) { return outcome(s).reward; }

 private:
  const Cfg* g_;
  Scorer scorer_;
  std::uint64_t seed_;
  CostFn cost_;
  std::unordered_map<std::string, EvalOutcome> memo_;
};

// Plays one episode from the start state, committing the most-visited action
// after each batch of simulations and promoting that subtree.
Episode act_episode(const Cfg& g, const PolicyValueFn& model, TaskReward& reward,
                    const SearchConfig& cfg, std::uint64_t seed);

// Append-only record file: "GRLREPLAY" magic, u32 version, then one
// u32-length-prefixed record per entry.
class ReplayFile {
 public:
  static constexpr std::uint32_t kVersion = 1;

  static void append(const std::filesystem::path& file, const std::vector<ReplayEntry>& entries);
  // Reads every record; throws std::runtime_error on a corrupt file.
  static std::vector<ReplayEntry> read(const std::filesystem::path& file);
  static void write(const std::filesystem::path& file, const std::vector<ReplayEntry>& entries);
};

// Bounded FIFO of replay entries; evicts the oldest first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}

  void push(ReplayEntry e);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  // Oldest first.
  std::vector<ReplayEntry> snapshot() const;

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<ReplayEntry> items_;
};

}  // namespace grl
