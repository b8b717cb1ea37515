#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "grl/search.hpp"
#include "support.hpp"

using namespace grl;

namespace {

SearchNode manual_node(std::vector<std::uint64_t> n, std::vector<double> w, std::vector<double> prior,
                       std::vector<double> v) {
  SearchNode node(SearchState{});
  node.expanded = true;
  node.actions.resize(n.size());
  std::iota(node.actions.begin(), node.actions.end(), 0);
  node.n = std::move(n);
  node.w = std::move(w);
  node.prior = std::move(prior);
  node.v = std::move(v);
  node.children.resize(node.n.size());
  return node;
}

TargetTask path_task(unsigned l) { return TargetTask::make(TaskKind::path, l, make_dataset({6, 7, 10, 0.5, 3})); }

// W on an edge is what the child passed up plus what walks stopping at the
// child scored: a terminal child always scores its cached reward, an inner
// child was scored once by the rollout that created it.
void check_returns(const SearchNode& node) {
  for (std::size_t k = 0; k < node.children.size(); ++k) {
    const auto& child = node.children[k];
    if (!child) continue;
    if (child->terminal_reward) {
      CHECK(node.w[k] == doctest::Approx(static_cast<double>(node.n[k]) * *child->terminal_reward));
    } else if (child->expanded) {
      const double passed = std::accumulate(child->w.begin(), child->w.end(), 0.0);
      CHECK(child->terminations == 1);
      CHECK(std::abs(node.w[k] - passed) <= 1.0 + 1e-9);
      check_returns(*child);
    }
  }
}

std::vector<std::string> play(const Cfg& g, TaskReward& reward, const SearchConfig& cfg, std::uint64_t seed) {
  return act_episode(g, uniform_policy, reward, cfg, seed).sentences;
}

}  // namespace

TEST_CASE("exploration factor") {
  CHECK(exploration_factor(0, 1.25, 19652) == doctest::Approx(1.25 + std::log(19653.0 / 19652.0)));
  CHECK(exploration_factor(19652, 1.25, 19652) == doctest::Approx(1.25 + std::log((19653.0 + 19652.0) / 19652.0)));
}

TEST_CASE("selection rule") {
  SUBCASE("unvisited action wins on exploration") {
    const auto node = manual_node({5, 0}, {0, 0}, {0.5, 0.5}, {0, 0});
    CHECK(select_action(node, 0.5, 1.25) == 1);
  }
  SUBCASE("alpha = 1 reduces to Q") {
    const auto node = manual_node({4, 4, 4}, {1, 3, 2}, {1. / 3, 1. / 3, 1. / 3}, {0.9, 0, 0});
    CHECK(select_action(node, 1.0, 1.25) == 1);
  }
  SUBCASE("alpha = 0 and no exploration reduces to v") {
    const auto node = manual_node({0, 0, 0}, {0, 0, 0}, {0.2, 0.3, 0.5}, {0.1, 0.7, -0.2});
    CHECK(select_action(node, 0.0, 0.0) == 1);
  }
  SUBCASE("ties go to the lowest index") {
    const auto node = manual_node({0, 0}, {0, 0}, {0.5, 0.5}, {0, 0});
    CHECK(select_action(node, 0.5, 1.25) == 0);
  }
  SUBCASE("exact score") {
    // scores: 0.5*(2/4) + 0.5*0 + 2*0.25*sqrt(5)/5 = 0.4736 and 0.5*0 + 0.5*0.2 + 2*0.75*sqrt(5)/2 = 1.777
    const auto node = manual_node({4, 1}, {2, 0}, {0.25, 0.75}, {0, 0.2});
    CHECK(select_action(node, 0.5, 2.0) == 1);
  }
}

TEST_CASE("legal actions follow the leftmost pending variable") {
  const Cfg& g = g3_tilde();
  SearchConfig cfg;
  cfg.c_max = 12;
  SearchState s = SearchState::initial(g, 2);
  CHECK(legal_actions(g, s, cfg.c_max) == legal_rules(g, s.slots[0], cfg.c_max));
  // E -> A finishes the first slot; the second slot becomes active.
  const std::size_t e_to_a = 3;
  REQUIRE(g.render_rule(e_to_a) == "E->A");
  s = apply_action(g, s, e_to_a, cfg);
  CHECK(s.active_slot() == 1u);
  CHECK(s.sentences(g) == std::vector<std::string>{"A", "E"});
  s = apply_action(g, s, e_to_a, cfg);
  CHECK(s.terminal());
  CHECK(legal_actions(g, s, cfg.c_max).empty());
  CHECK_THROWS_AS(apply_action(g, s, e_to_a, cfg), GrammarError);

  cfg.rule_costs.assign(g.rules().size(), 0.25);
  CHECK(apply_action(g, SearchState::initial(g, 1), e_to_a, cfg).cost == 0.25);
}

TEST_CASE("rollout reaches a terminal state within the cap") {
  const Cfg& g = g3_tilde();
  SearchConfig cfg;
  cfg.c_max = 20;
  cfg.nbwords = 2;
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const SearchState s = rollout(g, SearchState::initial(g, 2), cfg, rng);
    REQUIRE(s.terminal());
    for (const auto& t : s.sentences(g)) {
      CHECK(t.size() <= cfg.c_max);
      CHECK(in_language(t, g));
    }
  }
}

TEST_CASE("expansion and noise keep priors normalised") {
  const Cfg& g = g3_tilde();
  SearchConfig cfg;
  cfg.dirichlet_fraction = 0.25;
  SearchNode node(SearchState::initial(g, 1));
  Rng rng(3);
  expand(node, g, uniform_policy, cfg, &rng);
  CHECK(node.actions.size() == 5);
  CHECK(std::accumulate(node.prior.begin(), node.prior.end(), 0.0) == doctest::Approx(1.0));
  CHECK(node.prior != std::vector<double>(5, 0.2));
  for (double p : node.prior) CHECK(p > 0.0);
}

TEST_CASE("simulations keep the tree consistent") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(2);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TaskReward reward(g, task, {}, seed);
    SearchConfig cfg;
    cfg.c_max = 12;
    cfg.nbwords = 1 + seed % 2;
    cfg.n_sims = 300;
    SearchNode root(SearchState::initial(g, cfg.nbwords));
    Rng rng(seed);
    run_simulations(root, g, uniform_policy, [&](const SearchState& s) { return reward(s); }, cfg, rng);
    CHECK(root.total_n() == cfg.n_sims);
    const TreeAudit audit = audit_tree(root);
    CHECK_MESSAGE(audit.ok, audit.first_failure);
    CHECK(audit.nodes > 1);
    check_returns(root);

    // A second batch adds exactly n_sims more walks.
    run_simulations(root, g, uniform_policy, [&](const SearchState& s) { return reward(s); }, cfg, rng);
    CHECK(root.total_n() == 2 * cfg.n_sims);
    CHECK(audit_tree(root).ok);
  }
}

TEST_CASE("audit detects a broken tree") {
  const Cfg& g = g3_tilde();
  SearchConfig cfg;
  cfg.c_max = 8;
  cfg.n_sims = 50;
  SearchNode root(SearchState::initial(g, 1));
  Rng rng(1);
  run_simulations(root, g, uniform_policy, [](const SearchState&) { return 0.5; }, cfg, rng);
  REQUIRE(audit_tree(root).ok);
  ++root.n[0];
  CHECK_FALSE(audit_tree(root).ok);
}

TEST_CASE("finding A for 1-paths") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(1);
  TaskReward reward(g, task, {}, 1);
  SearchConfig cfg;
  cfg.c_max = 12;
  cfg.n_sims = 50;
  const Episode ep = act_episode(g, uniform_policy, reward, cfg, 9);
  CHECK(ep.sentences == std::vector<std::string>{"A"});
  CHECK(ep.outcome.reward == 1.0);
}

TEST_CASE("episodes commit the most visited action") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(2);
  TaskReward reward(g, task, {}, 1);
  SearchConfig cfg;
  cfg.c_max = 12;
  cfg.n_sims = 100;
  const Episode ep = act_episode(g, uniform_policy, reward, cfg, 5);
  REQUIRE_FALSE(ep.replay.empty());
  SearchState expect = SearchState::initial(g, 1);
  for (const auto& r : ep.replay) {
    CHECK(r.state == expect);
    CHECK(std::accumulate(r.policy.begin(), r.policy.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    const auto best = std::max_element(r.policy.begin(), r.policy.end()) - r.policy.begin();
    expect = apply_action(g, r.state, r.actions[static_cast<std::size_t>(best)], cfg);
  }
  CHECK(expect == ep.final_state);

  TaskReward again(g, task, {}, 1);
  const Episode twin = act_episode(g, uniform_policy, again, cfg, 5);
  CHECK(twin.sentences == ep.sentences);
  CHECK(twin.replay.size() == ep.replay.size());
}

TEST_CASE("2-paths are rediscovered with a uniform model") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(2);
  SearchConfig cfg;
  cfg.c_max = 12;
  cfg.n_sims = 200;
  bool found = false;
  for (std::uint64_t seed = 1; seed <= 20 && !found; ++seed) {
    TaskReward reward(g, task, {}, seed);
    const Episode ep = act_episode(g, uniform_policy, reward, cfg, seed);
    found = ep.sentences == std::vector<std::string>{"(Jo(AA))"} && ep.outcome.reward == 1.0;
  }
  CHECK(found);
}

TEST_CASE("duplicate sentences are punished") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(1);
  TaskReward reward(g, task, {}, 1);
  SearchState s = SearchState::initial(g, 2);
  SearchConfig cfg;
  s = apply_action(g, s, 3, cfg);
  s = apply_action(g, s, 3, cfg);
  CHECK(reward(s) == -1.0);
}

TEST_CASE("task reward reports coefficients in slot order") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(3);
  TaskReward reward(g, task, {}, 1);
  auto state_of = [&](std::vector<std::string> words) {
    SearchState s;
    for (const auto& w : words) {
      SententialForm f;
      for (char c : w) f.push_back({false, *g.find_terminal(std::string(1, c))});
      s.slots.push_back(f);
    }
    return s;
  };
  const auto a = reward.outcome(state_of({"(Jo(A(Jo(AA))))", "(Ao(AJ))"}));
  const auto b = reward.outcome(state_of({"(Ao(AJ))", "(Jo(A(Jo(AA))))"}));
  REQUIRE(a.coefficients);
  REQUIRE(b.coefficients);
  CHECK((*a.coefficients)[0] == doctest::Approx(1.0));
  CHECK((*a.coefficients)[1] == doctest::Approx(-1.0));
  CHECK((*b.coefficients)[0] == doctest::Approx(-1.0));
  CHECK((*b.coefficients)[1] == doctest::Approx(1.0));
  CHECK(a.reward == b.reward);

  TaskReward flat(g, task, {}, 1, [](const std::vector<Sentence>& s) { return 10.0 * static_cast<double>(s.size()); });
  CHECK(flat.outcome(state_of({"(Ao(AJ))", "(Jo(A(Jo(AA))))"})).cost == 20.0);
}

TEST_CASE("replay file") {
  const Cfg& g = g3_tilde();
  const TargetTask task = path_task(2);
  TaskReward reward(g, task, {}, 1);
  SearchConfig cfg;
  cfg.c_max = 10;
  cfg.n_sims = 40;
  const Episode ep = act_episode(g, uniform_policy, reward, cfg, 2);

  const auto file = std::filesystem::temp_directory_path() / "grl_test_replay.bin";
  std::filesystem::remove(file);
  ReplayFile::append(file, ep.replay);
  ReplayFile::append(file, ep.replay);
  const auto back = ReplayFile::read(file);
  REQUIRE(back.size() == 2 * ep.replay.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& want = ep.replay[i % ep.replay.size()];
    CHECK(back[i].state == want.state);
    CHECK(back[i].state.cost == want.state.cost);
    CHECK(back[i].actions == want.actions);
    CHECK(back[i].policy == want.policy);
    CHECK(back[i].value == want.value);
  }
  ReplayFile::write(file, ep.replay);
  CHECK(ReplayFile::read(file).size() == ep.replay.size());

  // Truncated tail.
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 3);
  CHECK_THROWS_AS(ReplayFile::read(file), std::runtime_error);
  {
    std::ofstream bad(file, std::ios::binary | std::ios::trunc);
    bad << "NOTREPLAY";
  }
  CHECK_THROWS_AS(ReplayFile::read(file), std::runtime_error);
  std::filesystem::remove(file);
}

TEST_CASE("replay buffer evicts the oldest entries") {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) {
    ReplayEntry e;
    e.value = i;
    buf.push(e);
  }
  CHECK(buf.size() == 3);
  const auto snap = buf.snapshot();
  REQUIRE(snap.size() == 3);
  CHECK(snap[0].value == 2);
  CHECK(snap[1].value == 3);
  CHECK(snap[2].value == 4);
}
