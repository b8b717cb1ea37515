#include <doctest.h>

#include <map>
#include <sstream>

#include "grl/formulas.hpp"
#include "support.hpp"

using namespace grl;
using namespace grl::testing;

namespace {

std::map<std::string, double> as_map(const LinearCombo& c) {
  std::map<std::string, double> m;
  for (const auto& t : c.terms()) m[t.sentence.text()] = t.coefficient;
  return m;
}

std::vector<Graph> graph_suite(std::size_t count, std::uint64_t seed) {
  const double ps[] = {0.3, 0.5, 0.7};
  std::vector<Graph> out;
  Rng rng(seed);
  for (std::size_t k = 0; k < count; ++k) out.push_back(erdos_renyi(6 + rng.index(7), ps[k % 3], rng.next()));
  return out;
}

}  // namespace

TEST_CASE("published 2- and 3-path combinations") {
  CHECK(as_map(voropaev_paths(3)) == std::map<std::string, double>{
                                         {"(Jo((AA)A))", 1}, {"((Io(AA))A)", -1}, {"(A(Io(AA)))", -1}, {"A", 1}});
  CHECK(as_map(voropaev_paths(2)) == std::map<std::string, double>{{"(Jo(AA))", 1}});
  CHECK(path_formula(Family::star, 2).key() == path_formula(Family::voropaev, 2).key());
  CHECK(as_map(star_paths(3)) == std::map<std::string, double>{{"(Jo(A(Jo(AA))))", 1}, {"(Ao(AJ))", -1}});
}

TEST_CASE("range errors") {
  CHECK_THROWS_AS(path_formula(Family::star, 7), FormulaRangeError);
  CHECK_THROWS_AS(path_formula(Family::voropaev, 1), FormulaRangeError);
  CHECK_THROWS_AS(cycle_formula(Family::voropaev, 8), FormulaRangeError);
  CHECK_THROWS_AS(star_cycles(2), FormulaRangeError);
}

TEST_CASE("small graphs") {
  const DenseMatrix k3 = adjacency(complete_graph(3));
  DenseMatrix end_to_end(4);
  end_to_end(0, 3) = end_to_end(3, 0) = 1;
  CHECK(evaluate_combo(star_paths(3), adjacency(path_graph(4))) == end_to_end);
  CHECK(evaluate_combo(star_paths(3), k3).is_zero());
  CHECK(evaluate_combo(voropaev_cycles(3), k3) == k3);
  CHECK(evaluate_combo(star_cycles(4), adjacency(cycle_graph(4))) == adjacency(cycle_graph(4)));
  for (unsigned l = 2; l <= 6; ++l) {
    CHECK(evaluate_combo(voropaev_paths(l), k3) == brute_paths(complete_graph(3), l));
    CHECK(evaluate_combo(star_paths(l), adjacency(cycle_graph(7))) == brute_paths(cycle_graph(7), l));
  }
}

TEST_CASE("path formulas agree with the oracle") {
  for (const Graph& g : graph_suite(20, 1)) {
    const DenseMatrix a = adjacency(g);
    for (unsigned l = 2; l <= 6; ++l) {
      const DenseMatrix truth = oracle_paths(g, l);
      const DenseMatrix v = evaluate_combo(voropaev_paths(l), a);
      const DenseMatrix s = evaluate_combo(star_paths(l), a);
      REQUIRE(is_integral(v));
      REQUIRE(is_integral(s));
      CHECK(rounded_integral(v) == truth);
      CHECK(rounded_integral(s) == truth);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(s(i, i) == 0.0);
    }
  }
}

TEST_CASE("cycle formulas lift the path formulas") {
  for (const Graph& g : graph_suite(20, 2)) {
    const DenseMatrix a = adjacency(g);
    for (unsigned l = 3; l <= 7; ++l) {
      const DenseMatrix v = rounded_integral(evaluate_combo(voropaev_cycles(l), a));
      const DenseMatrix s = rounded_integral(evaluate_combo(star_cycles(l), a));
      CHECK(v == rounded_integral(hadamard(a, evaluate_combo(voropaev_paths(l - 1), a))));
      CHECK(s == rounded_integral(hadamard(a, evaluate_combo(star_paths(l - 1), a))));
      CHECK(s == oracle_cycles(g, l));
      for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.size(); ++j)
          if (a(i, j) == 0.0) CHECK(s(i, j) == 0.0);
    }
  }
}

TEST_CASE("nested evaluation matches the expanded combination") {
  const DenseMatrix a = adjacency(erdos_renyi(11, 0.5, 77));
  for (unsigned l = 2; l <= 6; ++l) {
    for (auto f : {Family::voropaev, Family::star}) {
      CHECK(rounded_integral(evaluate_formula(path_formula(f, l), a)) ==
            rounded_integral(evaluate_combo(path_formula(f, l).expand(), a)));
    }
  }
  for (unsigned l = 3; l <= 7; ++l)
    CHECK(rounded_integral(evaluate_formula(cycle_formula(Family::star, l), a)) == oracle_cycles(erdos_renyi(11, 0.5, 77), l));
}

TEST_CASE("built-in sentences belong to G3") {
  for (unsigned l = 2; l <= 6; ++l) {
    for (const auto& c : {voropaev_paths(l), star_paths(l)})
      for (const auto& t : c.terms()) CHECK(in_language(t.sentence.text(), g3()));
  }
  for (unsigned l = 3; l <= 7; ++l) {
    for (const auto& c : {voropaev_cycles(l), star_cycles(l)})
      for (const auto& t : c.terms()) CHECK(in_language(t.sentence.text(), g3()));
  }
}

TEST_CASE("lemma identity") {
  const DenseMatrix k3 = adjacency(complete_graph(3));
  const double rs[] = {2, 2, 2};
  CHECK(lemma_rewrite_check(DenseMatrix::diagonal(rs), k3, k3));
  CHECK(lemma_rewrite_check(DenseMatrix(4), DenseMatrix(4), DenseMatrix(4)));
  CHECK_THROWS_AS(lemma_rewrite_check(DenseMatrix::identity(3), k3, k3), LemmaPreconditionError);

  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(10);
    const DenseMatrix m = random_integer_matrix(n, -4, 4, rng);
    const DenseMatrix p = random_integer_matrix(n, -4, 4, rng);
    std::vector<double> sums(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) sums[i] += m(i, k);
    CHECK(lemma_rewrite_check(DenseMatrix::diagonal(sums), m, p));
  }
}

TEST_CASE("cost model") {
  // A^2 and A(J o A^2); A J is a cheap J-product.
  const CostReport s3 = cost_of(star_paths(3));
  CHECK(s3.heavy_matmuls == 2);
  CHECK(s3.j_products == 1);
  CHECK(s3.hadamards == 3);
  // A^2, A^3, (I o A^2)A and A(I o A^2), with A^2 shared by all terms.
  CHECK(cost_of(voropaev_paths(3)).heavy_matmuls == 4);
  const CostReport light = cost_of(voropaev_paths(3), CostPolicy{false});
  CHECK(light.heavy_matmuls == 2);
  CHECK(light.diagonal_products == 2);

  LinearCombo just_a;
  just_a.add(1.0, parse("A", g3()));
  CHECK(cost_of(just_a) == CostReport{});
  CHECK(cost_of(voropaev_paths(2)).heavy_matmuls == 1);
  CHECK(cost_of(path_formula(Family::star, 3)) == s3);
}

TEST_CASE("linear combinations") {
  LinearCombo c;
  CHECK(evaluate_combo(c, DenseMatrix(3)).is_zero());
  c.add(2.0, parse("A", g3()));
  const DenseMatrix a = adjacency(erdos_renyi(6, 0.5, 4));
  CHECK(evaluate_combo(c, a) == 2.0 * a);
  c.add(-2.0, parse("A", g3()));
  CHECK(c.empty());
  c.add(1.0, parse("J", g3()));
  c.add(0.5, parse("J", g3()));
  REQUIRE(c.size() == 1);
  CHECK(c.terms()[0].coefficient == 1.5);
}

TEST_CASE("coefficient text") {
  CHECK(format_coefficient(1.0) == "1");
  CHECK(format_coefficient(-3.0) == "-3");
  CHECK(format_coefficient(1.0 / 3.0) == "1/3");
  CHECK(format_coefficient(-5.0 / 16.0) == "-5/16");
  CHECK(format_coefficient(0.1234567) == "0.1234567");
  CHECK(parse_coefficient("1/3") == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(parse_coefficient("-2") == -2.0);
  CHECK_THROWS_AS(parse_coefficient("1/0"), std::invalid_argument);
  CHECK_THROWS_AS(parse_coefficient("x"), std::invalid_argument);
}

TEST_CASE("combo text format round-trips") {
  for (unsigned l = 2; l <= 6; ++l) {
    std::ostringstream out;
    write_combo(out, star_paths(l));
    std::istringstream in("# exported\n" + out.str());
    CHECK(as_map(read_combo(in)) == as_map(star_paths(l)));
  }
  std::istringstream bad("1 A\n");
  CHECK_THROWS_AS(read_combo(bad), std::runtime_error);
  std::istringstream bad_sentence("1\t(AoA\n");
  CHECK_THROWS_AS(read_combo(bad_sentence), std::runtime_error);
}

TEST_CASE("formula notation") {
  CHECK(parse_formula("J o A^2").key() == path_formula(Family::voropaev, 2).key());
  const Formula p2 = parse_formula("J o A^2");
  const Formula lifted = parse_formula("A o {P}", {{"P", p2}});
  CHECK(as_map(lifted.expand()) == std::map<std::string, double>{{"(Ao(Jo(AA)))", 1}});
  CHECK(as_map(parse_formula("2A - A(I o A^2)").expand()) ==
        std::map<std::string, double>{{"A", 2}, {"(A(Io(AA)))", -1}});
  CHECK_THROWS_AS(parse_formula("A o"), ParseError);
  CHECK_THROWS_AS(parse_formula("{missing}"), ParseError);
}
