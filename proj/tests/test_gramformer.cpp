#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "grl/gramformer.hpp"
#include "support.hpp"

using namespace grl;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ff = 32;
  c.max_seq = 48;
  return c;
}

// Random non-terminal search states reached by uniform derivation.
std::vector<SearchState> random_states(const Cfg& g, std::size_t count, std::size_t nbwords, Rng& rng) {
  SearchConfig cfg;
  cfg.c_max = 15;
  std::vector<SearchState> out;
  while (out.size() < count) {
    SearchState s = SearchState::initial(g, nbwords);
    const std::size_t steps = rng.index(8);
    for (std::size_t i = 0; i < steps && !s.terminal(); ++i) {
      const auto legal = legal_actions(g, s, cfg.c_max);
      s = apply_action(g, s, legal[rng.index(legal.size())], cfg);
    }
    if (!s.terminal()) out.push_back(s);
  }
  return out;
}

std::vector<TrainingExample> random_batch(const Gramformer& m, std::size_t count, Rng& rng) {
  std::vector<TrainingExample> out;
  for (const auto& s : random_states(m.grammar(), count, 2, rng)) {
    ReplayEntry e;
    e.state = s;
    e.actions = legal_actions(m.grammar(), s, 15);
    double total = 0.0;
    for (std::size_t k = 0; k < e.actions.size(); ++k) {
      e.policy.push_back(0.1 + rng.uniform());
      total += e.policy.back();
    }
    for (double& p : e.policy) p /= total;
    e.value = 2.0 * rng.uniform() - 1.0;
    out.push_back(m.make_example(e));
  }
  return out;
}

std::size_t rule_of(const Cfg& g, const std::string& text) {
  for (std::size_t r = 0; r < g.rules().size(); ++r)
    if (g.render_rule(r) == text) return r;
  FAIL("no rule " << text);
  return 0;
}

}  // namespace

TEST_CASE("configuration") {
  ModelConfig bad = small();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  const Gramformer m(g3_tilde(), small(), 1);
  CHECK(m.vocab() == m.tokens().size() + 2);
  std::size_t total = 0;
  for (const auto& g : m.groups()) {
    CHECK(g.offset == total);
    total += g.rows * g.cols;
  }
  CHECK(total == m.param_count());
}

TEST_CASE("state encoding") {
  const Cfg& g = g3_tilde();
  const Gramformer m(g, small(), 1);
  SearchState s = SearchState::initial(g, 2);
  const auto t = m.encode_state(s);
  const std::size_t e = *g.find_variable("E");
  CHECK(t == std::vector<std::size_t>{m.tokens().variable_token(e), m.separator_token(), m.tokens().variable_token(e)});
}

TEST_CASE("masked policy") {
  const Cfg& g = g3_tilde();
  Gramformer m(g, small(), 2);
  // Large weights must not leak probability outside the mask.
  for (double& p : m.params()) p *= 3.0;
  Rng rng(5);
  for (const auto& s : random_states(g, 200, 2, rng)) {
    const auto legal = legal_actions(g, s, 15);
    const auto fv = read_first_variable(s.slots[*s.active_slot()]);
    std::vector<bool> mask(m.tokens().rule_count(), false);
    for (std::size_t r : legal) mask[r] = true;
    const Prediction p = m.predict(fv->variable, m.encode_state(s), mask);
    double sum = 0.0;
    for (std::size_t r = 0; r < mask.size(); ++r) {
      if (!mask[r]) CHECK(p.policy[r] == 0.0);
      sum += p.policy[r];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    CHECK(std::abs(p.value) <= 1.0);
  }
}

TEST_CASE("N-rules only for an N state") {
  const Cfg& g = g3_tilde();
  const Gramformer m(g, small(), 3);
  SearchState s = SearchState::initial(g, 1);
  SearchConfig cfg;
  s = apply_action(g, s, rule_of(g, "E->(NE)"), cfg);
  const std::size_t n = *g.find_variable("N");
  REQUIRE(read_first_variable(s.slots[0])->variable == n);
  const Prediction p = m.predict(n, m.encode_state(s), m.tokens().mask(n));
  for (std::size_t r = 0; r < g.rules().size(); ++r) {
    if (g.rules()[r].lhs != n) CHECK(p.policy[r] == 0.0);
  }
}

TEST_CASE("zeroed heads give a uniform policy and zero value") {
  const Cfg& g = g3_tilde();
  Gramformer m(g, small(), 4);
  m.zero_heads();
  const SearchState s = SearchState::initial(g, 1);
  const auto legal = legal_actions(g, s, 15);
  const PolicyValue pv = m.evaluate(s, legal);
  for (double p : pv.priors) CHECK(p == doctest::Approx(1.0 / static_cast<double>(legal.size())).epsilon(1e-14));
  CHECK(pv.value == 0.0);
}

TEST_CASE("input limits") {
  const Gramformer m(g3(), small(), 1);
  const std::vector<std::size_t> too_long(49, 0);
  CHECK_THROWS_AS(m.predict(0, too_long, m.tokens().mask(0)), SequenceTooLong);
  CHECK_THROWS_AS(m.predict(0, {}, m.tokens().mask(0)), std::invalid_argument);
  CHECK_THROWS_AS(m.predict(0, {0}, std::vector<bool>(5, false)), std::invalid_argument);
}

TEST_CASE("generation stays in the language") {
  for (const Cfg* g : {&g3(), &g3_tilde()}) {
    Gramformer m(*g, small(), 6);
    m.zero_heads();
    const std::string argmax = generate_sentence(m, 20);
    CHECK(argmax == generate_sentence(m, 20));
    CHECK(parse(argmax, *g).text() == argmax);

    Gramformer trained(*g, small(), 7);
    Rng rng(8);
    for (int i = 0; i < 300; ++i) {
      const std::string s = generate_sentence(trained, 4 + rng.index(20), &rng, 1.0);
      CHECK(in_language(s, *g));
    }
  }
  Rng rng(1);
  const Gramformer m(g3(), small(), 9);
  for (int i = 0; i < 30; ++i) {
    const std::string s = generate_sentence(m, 1, &rng);
    CHECK((s == "A" || s == "I" || s == "J"));
  }
}

TEST_CASE("loss vanishes at the model's own prediction") {
  const Cfg& g = g3_tilde();
  const Gramformer m(g, small(), 10);
  Rng rng(2);
  auto batch = random_batch(m, 6, rng);
  for (auto& ex : batch) {
    const Prediction p = m.predict(ex.variable, ex.tokens, ex.mask);
    ex.policy = p.policy;
    ex.value = p.value;
  }
  const LossReport r = m.loss(batch, {}, nullptr);
  CHECK(std::abs(r.policy) < 1e-12);
  CHECK(std::abs(r.value) < 1e-24);
}

TEST_CASE("analytic gradients match finite differences") {
  for (bool huber : {false, true}) {
    ModelConfig c = small();
    c.enc_layers = 2;
    c.dec_layers = 2;
    Gramformer m(g3_tilde(), c, 11);
    Rng rng(3);
    const auto batch = random_batch(m, 3, rng);
    TrainConfig tc;
    tc.huber = huber;
    tc.policy_weight = 0.7;
    tc.value_weight = 1.3;
    const GradCheck gc = gradient_check(m, batch, tc, 1e-4, huber ? 7 : 1);
    INFO("worst group " << gc.worst_group);
    CHECK(gc.max_rel_error < 1e-4);
    CHECK(gc.checked > 0);
  }
}

TEST_CASE("huber value loss is linear for large errors") {
  Gramformer m(g3_tilde(), small(), 12);
  Rng rng(4);
  auto batch = random_batch(m, 1, rng);
  const double v = m.predict(batch[0].variable, batch[0].tokens, batch[0].mask).value;
  batch[0].value = v - 3.0;
  TrainConfig tc;
  CHECK(m.loss(batch, tc, nullptr).value == doctest::Approx(9.0));
  tc.huber = true;
  CHECK(m.loss(batch, tc, nullptr).value == doctest::Approx(2.5));
}

TEST_CASE("training") {
  const Cfg& g = g3_tilde();
  Rng rng(5);
  const Gramformer base(g, small(), 13);
  const auto data = random_batch(base, 32, rng);

  SUBCASE("full-batch loss decreases for 50 steps") {
    Gramformer m = base;
    AdamState adam;
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.batch = 32;
    tc.epochs = 50;
    const auto losses = train(m, data, tc, adam);
    REQUIRE(losses.size() == 50);
    for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i].total < losses[i - 1].total);
  }
  SUBCASE("zero learning rate leaves parameters alone") {
    Gramformer m = base;
    AdamState adam;
    TrainConfig tc;
    tc.lr = 0.0;
    train(m, data, tc, adam);
    CHECK(m.params() == base.params());
  }
  SUBCASE("same seed, same parameters") {
    Gramformer a = base, b = base;
    AdamState sa, sb;
    TrainConfig tc;
    tc.batch = 5;
    tc.seed = 77;
    train(a, data, tc, sa);
    train(b, data, tc, sb);
    CHECK(a.params() == b.params());
    CHECK(a.params() != base.params());
  }
  SUBCASE("non-finite loss is reported") {
    Gramformer m = base;
    m.params()[m.groups().back().offset] = std::nan("");
    AdamState adam;
    CHECK_THROWS_AS(train(m, data, {}, adam), DivergenceError);
  }
}

TEST_CASE("overfitting a single derivation") {
  const Cfg& g = g3_tilde();
  Gramformer m(g, small(), 14);
  // Derivation of (Jo(AA)): E->(EoM), E->J, M->(EE), E->A, E->A.
  const std::vector<std::size_t> script{rule_of(g, "E->(EoM)"), rule_of(g, "E->J"), rule_of(g, "M->(EE)"),
                                        rule_of(g, "E->A"), rule_of(g, "E->A")};
  SearchConfig cfg;
  std::vector<TrainingExample> data;
  SearchState s = SearchState::initial(g, 1);
  for (std::size_t r : script) {
    ReplayEntry e;
    e.state = s;
    e.actions = legal_actions(g, s, 12);
    for (std::size_t a : e.actions) e.policy.push_back(a == r ? 1.0 : 0.0);
    e.value = 1.0;
    data.push_back(m.make_example(e));
    s = apply_action(g, s, r, cfg);
  }
  REQUIRE(g.render(s.slots[0]) == "(Jo(AA))");
  AdamState adam;
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 150;
  tc.batch = 5;
  train(m, data, tc, adam);
  const SearchState root = SearchState::initial(g, 1);
  const auto legal = legal_actions(g, root, 12);
  const PolicyValue pv = m.evaluate(root, legal);
  const auto at = std::find(legal.begin(), legal.end(), script[0]) - legal.begin();
  CHECK(pv.priors[static_cast<std::size_t>(at)] > 0.9);
  m.zero_heads();
}

TEST_CASE("checkpoints round-trip exactly") {
  const Cfg& g = g3_tilde();
  Gramformer m(g, small(), 15);
  Rng rng(6);
  const auto data = random_batch(m, 8, rng);
  AdamState adam;
  train(m, data, {}, adam);
  const auto file = std::filesystem::temp_directory_path() / "grl_test_model.ckpt";
  m.save(file, &adam);
  AdamState back_adam;
  const Gramformer back = Gramformer::load(g, file, &back_adam);
  CHECK(back.params() == m.params());
  CHECK(back.config().d_model == 16);
  CHECK(back_adam.m == adam.m);
  CHECK(back_adam.v == adam.v);
  CHECK(back_adam.step == adam.step);
  CHECK_THROWS_AS(Gramformer::load(g3(), file), std::runtime_error);

  m.save(file);
  AdamState none;
  Gramformer::load(g, file, &none);
  CHECK(none.m.empty());
  std::filesystem::remove(file);
}
