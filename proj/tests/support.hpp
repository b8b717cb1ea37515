#pragma once

// Reference implementations used as test oracles. They share no code with the
// library: paths and cycles are counted by exhaustive enumeration of vertex
// sequences instead of a pruned DFS.

#include <cstddef>
#include <functional>
#include <vector>

#include "grl/matrix.hpp"
#include "grl/rng.hpp"

namespace grl::testing {

inline Graph complete_graph(std::size_t n) {
  std::vector<Graph::Edge> e;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v) e.emplace_back(u, v);
  return Graph(n, e);
}

inline Graph path_graph(std::size_t n) {
  std::vector<Graph::Edge> e;
  for (std::size_t u = 0; u + 1 < n; ++u) e.emplace_back(u, u + 1);
  return Graph(n, e);
}

inline Graph cycle_graph(std::size_t n) {
  std::vector<Graph::Edge> e;
  for (std::size_t u = 0; u + 1 < n; ++u) e.emplace_back(u, u + 1);
  e.emplace_back(0, n - 1);
  return Graph(n, e);
}

inline bool adjacent(const Graph& g, std::size_t u, std::size_t v) {
  for (auto [a, b] : g.edges())
    if ((a == u && b == v) || (a == v && b == u)) return true;
  return false;
}

// Visits every sequence of k vertices (with repetition) in lexicographic order.
inline void for_each_sequence(std::size_t n, std::size_t k,
                              const std::function<void(const std::vector<std::size_t>&)>& f) {
  std::vector<std::size_t> seq(k, 0);
  while (true) {
    f(seq);
    std::size_t i = k;
    while (i > 0 && ++seq[i - 1] == n) seq[--i] = 0;
    if (i == 0) return;
  }
}

inline bool distinct(const std::vector<std::size_t>& s) {
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (s[i] == s[j]) return false;
  return true;
}

// (i, j) counts vertex sequences i = v0, ..., vl = j, all distinct, consecutive adjacent.
inline DenseMatrix brute_paths(const Graph& g, unsigned l) {
  DenseMatrix out(g.size());
  if (g.size() == 0) return out;
  for_each_sequence(g.size(), l + 1, [&](const std::vector<std::size_t>& s) {
    if (!distinct(s)) return;
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
      if (!adjacent(g, s[i], s[i + 1])) return;
    out(s.front(), s.back()) += 1.0;
  });
  return out;
}

// Enumerates each l-cycle once (smallest vertex first, direction fixed) and
// credits both orientations of every edge on it.
inline DenseMatrix brute_cycles(const Graph& g, unsigned l) {
  DenseMatrix out(g.size());
  if (g.size() == 0) return out;
  for_each_sequence(g.size(), l, [&](const std::vector<std::size_t>& s) {
    if (!distinct(s)) return;
    for (std::size_t i = 1; i < s.size(); ++i)
      if (s[i] < s[0]) return;
    if (s[1] > s.back()) return;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!adjacent(g, s[i], s[(i + 1) % s.size()])) return;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto u = s[i], v = s[(i + 1) % s.size()];
      out(u, v) += 1.0;
      out(v, u) += 1.0;
    }
  });
  return out;
}

inline DenseMatrix naive_product(const DenseMatrix& x, const DenseMatrix& y) {
  const std::size_t n = x.size();
  DenseMatrix out(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += x(i, k) * y(k, j);
      out(i, j) = s;
    }
  return out;
}

inline DenseMatrix random_integer_matrix(std::size_t n, int lo, int hi, Rng& rng) {
  DenseMatrix m(n);
  for (double& v : m.values()) v = lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1)));
  return m;
}

}  // namespace grl::testing
