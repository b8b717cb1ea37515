#include <doctest.h>

#include <sstream>

#include "grl/matrix.hpp"
#include "support.hpp"

using namespace grl;
using namespace grl::testing;

TEST_CASE("adjacency of small graphs") {
  CHECK(adjacency(complete_graph(3)) == DenseMatrix{{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
  CHECK(adjacency(Graph(3)).is_zero());
  CHECK(adjacency(path_graph(3)) == DenseMatrix{{0, 1, 0}, {1, 0, 1}, {0, 1, 0}});
}

TEST_CASE("graph rejects self-loops and out of range endpoints") {
  CHECK_THROWS_AS(Graph(3, {{1, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(Graph(3, {{0, 3}}), std::invalid_argument);
  const Graph g(4, {{2, 1}, {1, 2}, {0, 3}});
  CHECK(g.edges() == std::vector<Graph::Edge>{{0, 3}, {1, 2}});
}

TEST_CASE("matmul") {
  const DenseMatrix k3 = adjacency(complete_graph(3));
  CHECK(matmul(k3, k3) == DenseMatrix{{2, 1, 1}, {1, 2, 1}, {1, 1, 2}});
  CHECK(matmul(k3, DenseMatrix::identity(3)) == k3);
  CHECK(matmul(DenseMatrix(3), k3).is_zero());
  CHECK_THROWS_AS(matmul(DenseMatrix(3), DenseMatrix(4)), DimensionError);
}

TEST_CASE("matmul equals a triple loop on integer inputs") {
  Rng rng(7);
  for (std::size_t n : {1u, 2u, 8u, 8u, 8u, 31u, 67u, 130u}) {
    const auto x = random_integer_matrix(n, -5, 5, rng);
    const auto y = random_integer_matrix(n, -5, 5, rng);
    CHECK(matmul(x, y) == naive_product(x, y));
    CHECK(matmul_naive(x, y) == naive_product(x, y));
  }
}

TEST_CASE("hadamard") {
  const DenseMatrix k3 = adjacency(complete_graph(3));
  const DenseMatrix a = adjacency(erdos_renyi(9, 0.5, 3));
  CHECK(hadamard(a, DenseMatrix::identity(9)).is_zero());
  CHECK(hadamard(DenseMatrix::ones_off_diagonal(3), matmul(k3, k3)) == k3);
  const double d[] = {1, 2, 3};
  CHECK(hadamard(DenseMatrix::diagonal(d), DenseMatrix::ones_off_diagonal(3)).is_zero());
  CHECK_THROWS_AS(hadamard(DenseMatrix(2), DenseMatrix(3)), DimensionError);
}

TEST_CASE("mul_by_j matches the explicit product") {
  const DenseMatrix p4 = adjacency(path_graph(4));
  const DenseMatrix aj = mul_by_j(p4, Side::right);
  CHECK(aj(1, 0) == 1.0);
  CHECK(aj == matmul(p4, DenseMatrix::ones_off_diagonal(4)));
  CHECK(mul_by_j(DenseMatrix(5), Side::right).is_zero());
  CHECK(mul_by_j(DenseMatrix{{7}}, Side::left).is_zero());

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(16);
    const auto x = random_integer_matrix(n, -9, 9, rng);
    const DenseMatrix j = DenseMatrix::ones_off_diagonal(n);
    CHECK(mul_by_j(x, Side::right) == naive_product(x, j));
    CHECK(mul_by_j(x, Side::left) == naive_product(j, x));
  }
}

TEST_CASE("erdos_renyi") {
  CHECK(erdos_renyi(4, 1.0, 99) == complete_graph(4));
  CHECK(erdos_renyi(5, 0.0, 99).edges().empty());
  CHECK(erdos_renyi(20, 0.4, 5) == erdos_renyi(20, 0.4, 5));
  CHECK(erdos_renyi(20, 0.4, 5) != erdos_renyi(20, 0.4, 6));
  CHECK_THROWS_AS(erdos_renyi(4, 1.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(erdos_renyi(4, -0.1, 1), std::invalid_argument);

  for (std::uint64_t s = 0; s < 20; ++s) {
    const DenseMatrix a = adjacency(erdos_renyi(12, 0.5, s));
    CHECK(a.is_symmetric());
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(a(i, i) == 0.0);
      for (std::size_t j = 0; j < 12; ++j) CHECK((a(i, j) == 0.0 || a(i, j) == 1.0));
    }
  }
}

TEST_CASE("oracle_paths") {
  CHECK(oracle_paths(complete_graph(3), 2) == DenseMatrix{{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
  DenseMatrix want(4);
  want(0, 3) = want(3, 0) = 1;
  CHECK(oracle_paths(path_graph(4), 3) == want);
  CHECK(oracle_paths(complete_graph(5), 5).is_zero());
  CHECK_THROWS_AS(oracle_paths(complete_graph(3), 0), std::invalid_argument);

  for (std::uint64_t s = 0; s < 12; ++s) {
    const Graph g = erdos_renyi(6 + s % 3, 0.3 + 0.05 * static_cast<double>(s % 8), s);
    for (unsigned l = 1; l <= 5; ++l) {
      const DenseMatrix p = oracle_paths(g, l);
      CHECK(p == brute_paths(g, l));
      CHECK(p.is_symmetric());
    }
  }
}

TEST_CASE("oracle_cycles") {
  CHECK(oracle_cycles(complete_graph(3), 3) == DenseMatrix{{0, 1, 1}, {1, 0, 1}, {1, 1, 0}});
  CHECK(oracle_cycles(path_graph(7), 3).is_zero());
  CHECK(oracle_cycles(Graph(6, {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {3, 5}}), 4).is_zero());
  CHECK(oracle_cycles(cycle_graph(5), 5) == adjacency(cycle_graph(5)));
  CHECK_THROWS_AS(oracle_cycles(complete_graph(3), 2), std::invalid_argument);

  for (std::uint64_t s = 0; s < 8; ++s) {
    const Graph g = erdos_renyi(7, 0.5, 100 + s);
    for (unsigned l = 3; l <= 6; ++l) CHECK(oracle_cycles(g, l) == brute_cycles(g, l));
  }
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Graph g = erdos_renyi(8 + s % 5, 0.5, 200 + s);
    const DenseMatrix a = adjacency(g);
    for (unsigned l = 3; l <= 7; ++l) CHECK(oracle_cycles(g, l) == hadamard(a, oracle_paths(g, l - 1)));
  }
}

TEST_CASE("graph text format") {
  std::istringstream in("# triangle\n3 3\n0 1\n1 2\n# inline comment line\n0 2\n");
  const Graph g = read_graph(in);
  CHECK(g == complete_graph(3));
  std::ostringstream out;
  write_graph(out, g);
  std::istringstream back(out.str());
  CHECK(read_graph(back) == g);

  std::istringstream bad("3 1\n0 x\n");
  CHECK_THROWS_WITH_AS(read_graph(bad), doctest::Contains("line 2"), std::runtime_error);
  std::istringstream short_file("3 2\n0 1\n");
  CHECK_THROWS_AS(read_graph(short_file), std::runtime_error);
}

TEST_CASE("csv output and integrality") {
  std::ostringstream out;
  write_csv(out, DenseMatrix{{0, 1.5}, {-2, 3}});
  CHECK(out.str() == "0,1.5\n-2,3\n");
  CHECK(is_integral(DenseMatrix{{1.0000000001, 2}, {3, 4}}));
  CHECK_FALSE(is_integral(DenseMatrix{{1.1, 2}, {3, 4}}));
  CHECK_THROWS_AS(rounded_integral(DenseMatrix{{0.5}}), std::domain_error);
}
