#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace grl {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Simple undirected graph on nodes 0..n-1. Edges are kept as (u, v) with
// u < v, sorted and unique.
class Graph {
 public:
  using Edge = std::pair<std::size_t, std::size_t>;

  Graph() = default;
  explicit Graph(std::size_t n) : n_(n) {}
  Graph(std::size_t n, std::vector<Edge> edges);

  std::size_t size() const { return n_; }
  const std::vector<Edge>& edges() const { return edges_; }
  bool has_edge(std::size_t u, std::size_t v) const;

  // Stable 64-bit content hash (FNV-1a over n and the sorted edge list).
  std::uint64_t hash() const;

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<Edge> edges_;
};

// Square dense matrix of doubles, row-major.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  explicit DenseMatrix(std::size_t n, double fill = 0.0) : n_(n), data_(n * n, fill) {}
  DenseMatrix(std::size_t n, std::vector<double> row_major);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);
  // All ones except along the diagonal.
  static DenseMatrix ones_off_diagonal(std::size_t n);
  static DenseMatrix diagonal(std::span<const double> d);

  std::size_t size() const { return n_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * n_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * n_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * n_, n_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * n_, n_}; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double s);
  // this += s * other
  DenseMatrix& add_scaled(const DenseMatrix& other, double s);

  bool is_symmetric() const;
  bool is_zero() const;
  double max_abs() const;
  DenseMatrix transposed() const;

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix lhs, const DenseMatrix& rhs);
DenseMatrix operator-(DenseMatrix lhs, const DenseMatrix& rhs);
DenseMatrix operator*(double s, DenseMatrix m);

DenseMatrix adjacency(const Graph& g);

// Standard matrix product. Backed by a blocked GEMM kernel; on integer-valued
// inputs whose partial sums stay below 2^53 the result is exact.
DenseMatrix matmul(const DenseMatrix& x, const DenseMatrix& y);

// Reference triple loop; used by tests and as a correctness baseline.
DenseMatrix matmul_naive(const DenseMatrix& x, const DenseMatrix& y);

DenseMatrix hadamard(const DenseMatrix& x, const DenseMatrix& y);

enum class Side { left, right };

// Product with J in O(n^2): (XJ)_ij = rowsum_i(X) - X_ij and
// (JX)_ij = colsum_j(X) - X_ij.
DenseMatrix mul_by_j(const DenseMatrix& x, Side side);

// Erdos-Renyi G(n, p). Each pair (u, v), u < v, is kept iff a counter-based
// uniform draw keyed by (seed, u, v) falls below p, so the output is a pure
// function of (n, p, seed).
Graph erdos_renyi(std::size_t n, double p, std::uint64_t seed);

// Number of simple paths with exactly `length` edges from i to j.
DenseMatrix oracle_paths(const Graph& g, unsigned length);

// Number of simple cycles with `length` edges that traverse edge (i, j).
DenseMatrix oracle_cycles(const Graph& g, unsigned length);

// Asserts every entry is within 1e-6 of an integer and rounds it.
DenseMatrix rounded_integral(const DenseMatrix& m, double tol = 1e-6);
bool is_integral(const DenseMatrix& m, double tol = 1e-6);

// Graph text format: "n m" then m lines "u v"; lines starting with '#' are
// comments. Throws std::runtime_error with a line number on malformed input.
Graph read_graph(std::istream& in);
Graph read_graph_file(const std::string& path);
void write_graph(std::ostream& out, const Graph& g);

// CSV, one row per line; integral values are printed without a fraction.
void write_csv(std::ostream& out, const DenseMatrix& m);
std::string format_number(double v);

}  // namespace grl
