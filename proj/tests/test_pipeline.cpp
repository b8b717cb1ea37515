#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "grl/pipeline.hpp"
#include "support.hpp"

using namespace grl;

namespace fs = std::filesystem;

namespace {

const char* small_run = R"(task.kind = path
task.length = 2
task.graphs = 6
task.n_min = 7
task.n_max = 10
validation.graphs = 6
validation.seed = 99
nbwords = 1
c_max = 12
n_sims = 60
beta = 10
agents = 2
episodes = 2
generations = 3
threads = 1
model.d_model = 16
model.heads = 2
model.enc_layers = 1
model.dec_layers = 1
model.ff = 32
model.max_seq = 32
)";

RunConfig config_from(const std::string& text) {
  std::istringstream in(text);
  return parse_run_config(in);
}

std::string error_of(const std::string& text) {
  try {
    config_from(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("grl_pipeline_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

LeaderboardEntry entry(std::vector<std::string> sentences, double reward, double residual = 0.0) {
  LeaderboardEntry e;
  e.sentences = std::move(sentences);
  e.coefficients.assign(e.sentences.size(), 1.0);
  e.reward = reward;
  e.residual = residual;
  e.validation_residual = residual;
  return e;
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig c = config_from(small_run);
  CHECK(c.length == 2);
  CHECK(c.train_set.count == 6);
  CHECK(c.validation_set.seed == 99);
  CHECK(c.search.n_sims == 60);
  CHECK(c.eval.beta == 10.0);
  CHECK(c.model.max_seq == 32);
  CHECK(c.grammar == "g3tilde");

  std::ostringstream out;
  write_run_config(out, c);
  const RunConfig back = config_from(out.str());
  std::ostringstream again;
  write_run_config(again, back);
  CHECK(again.str() == out.str());
}

TEST_CASE("config errors name the line and field") {
  CHECK(error_of("# comment\nn_sims = many\n").find("line 2: n_sims") != std::string::npos);
  CHECK(error_of("n_sims = -4\n").find("(got '-4')") != std::string::npos);
  CHECK(error_of("\nspeed = 3\n").find("line 2: unknown key 'speed'") != std::string::npos);
  CHECK(error_of("nbwords\n").find("line 1") != std::string::npos);
  CHECK(error_of("grammar = g4\n").find("grammar") != std::string::npos);
  CHECK(error_of("stop_on_exact = maybe\n").find("stop_on_exact") != std::string::npos);
  CHECK(error_of("validation.seed = 1\n").find("validation.seed") != std::string::npos);
  CHECK(error_of("task.n_max = 40\n").find("task.n_max") != std::string::npos);
  CHECK(error_of("task.kind = cycle\ntask.length = 2\n").find("task.length") != std::string::npos);
  CHECK(error_of("model.heads = 3\n") != "");
  CHECK(error_of("model.max_seq = 32\nc_max = 40\n").find("model.max_seq") != std::string::npos);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("rule costs follow the rule shape") {
  RunConfig c;
  c.grammar = "g3";
  const auto costs = c.rule_costs();
  // (MoM), (MM), A, I, J
  CHECK(costs == std::vector<double>{0.1, 1.0, 0.01, 0.01, 0.01});
}

TEST_CASE("sentence set cost") {
  const RuleCosts k;
  auto cost = [&](std::initializer_list<const char*> texts) {
    std::vector<Sentence> s;
    for (const char* t : texts) s.push_back(parse(t, g3()));
    return sentence_set_cost(s, k);
  };
  CHECK(cost({"A"}) == doctest::Approx(0.01));
  CHECK(cost({"(AA)"}) == doctest::Approx(1.02));
  CHECK(cost({"(AJ)"}) == doctest::Approx(0.12));
  CHECK(cost({"(Jo(AA))"}) == doctest::Approx(0.1 + 0.01 + 1.02));
  CHECK(cost({"A", "(AA)"}) == doctest::Approx(1.03));
}

TEST_CASE("leaderboard") {
  Leaderboard board(3);
  CHECK(board.offer(entry({"A"}, 0.1, 0.5), 1e-6));
  CHECK(board.offer(entry({"(Jo(AA))"}, 0.9), 1e-6));
  // The same set in a different order is a duplicate.
  CHECK(board.offer(entry({"A", "(AA)"}, 0.3, 0.2), 1e-6));
  CHECK_FALSE(board.offer(entry({"(AA)", "A"}, 0.8, 0.2), 1e-6));
  CHECK(board.offer(entry({"J"}, 0.2, 0.4), 1e-6));
  REQUIRE(board.entries().size() == 3);
  CHECK(board.entries()[0].sentences == std::vector<std::string>{"(Jo(AA))"});
  CHECK(board.entries()[1].reward == 0.3);
  CHECK(board.entries()[2].reward == 0.2);
  CHECK_FALSE(board.offer(entry({"I"}, 0.0, 0.9), 1e-6));

  // A validated entry outranks a higher reward that fails validation.
  LeaderboardEntry overfit = entry({"(AJ)"}, 0.95, 0.0);
  overfit.validation_residual = 0.3;
  CHECK(board.offer(overfit, 1e-6));
  CHECK(board.entries()[1].sentences == std::vector<std::string>{"(AJ)"});
  CHECK(board.best_validated(1e-6)->sentences == std::vector<std::string>{"(Jo(AA))"});

  std::stringstream tsv;
  board.write(tsv);
  const Leaderboard back = Leaderboard::read(tsv, 3);
  REQUIRE(back.entries().size() == board.entries().size());
  for (std::size_t i = 0; i < back.entries().size(); ++i) {
    CHECK(back.entries()[i].sentences == board.entries()[i].sentences);
    CHECK(back.entries()[i].reward == board.entries()[i].reward);
    CHECK(back.entries()[i].coefficients == board.entries()[i].coefficients);
  }
  CHECK_FALSE(Leaderboard(3).best_validated(1e-6));
}

TEST_CASE("coefficient rounding and export") {
  const auto r = round_coefficients({0.99999997, 0.3333334, -2.5000004, 0.123});
  CHECK(r[0] == 1.0);
  CHECK(r[1] == 1.0 / 3.0);
  CHECK(r[2] == -2.5);
  CHECK(r[3] == 0.123);

  LeaderboardEntry e = entry({"(Jo(AA))"}, 1.0);
  e.coefficients = {0.9999999999};
  const LinearCombo c = export_formula(e, 1e-6);
  REQUIRE(c.size() == 1);
  CHECK(c.terms()[0].coefficient == 1.0);
  e.residual = 0.01;
  CHECK_THROWS_AS(export_formula(e, 1e-6), std::invalid_argument);
}

TEST_CASE("a short run finds the 2-path counter") {
  RunConfig c = config_from(small_run);
  c.output = scratch("p2");
  std::ostringstream log;
  const RunResult r = run(c, &log);
  REQUIRE(r.best);
  const LinearCombo f = export_formula(*r.best, c.tolerance);
  for (const Graph& g : make_dataset({10, 6, 12, 0.4, 4242})) {
    CHECK(rounded_integral(evaluate_combo(f, adjacency(g))) == testing::brute_paths(g, 2));
  }
  CHECK(fs::exists(c.output / "leaderboard.tsv"));
  CHECK(fs::exists(c.output / "checkpoints" / "model.ckpt"));
  CHECK(fs::exists(c.output / "best.combo"));
  CHECK(r.generations_run >= 1);
  CHECK(log.str().find("generation") != std::string::npos);
  fs::remove_all(c.output);
}

TEST_CASE("an interrupted run resumes to the same state") {
  RunConfig c = config_from(small_run);
  c.stop_on_exact = false;
  c.search.n_sims = 20;

  c.output = scratch("straight");
  run(c);

  RunConfig first = c;
  first.output = scratch("resumed");
  first.generations = 1;
  run(first);
  RunConfig rest = c;
  rest.output = first.output;
  const RunResult resumed = run(rest);
  CHECK(resumed.resumed_from == 1);

  for (const char* file : {"replay.bin", "leaderboard.tsv", "episodes.log", "checkpoints/model.ckpt"}) {
    INFO(file);
    CHECK(slurp(c.output / file) == slurp(rest.output / file));
  }
  fs::remove_all(c.output);
  fs::remove_all(rest.output);
}
