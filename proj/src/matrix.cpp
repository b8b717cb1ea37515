#include "grl/matrix.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "grl/rng.hpp"

namespace grl {

namespace {

void require_same_size(const DenseMatrix& x, const DenseMatrix& y, const char* op) {
  if (x.size() != y.size()) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()) + ")");
  }
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

Graph::Graph(std::size_t n, std::vector<Edge> edges) : n_(n) {
  for (auto& [u, v] : edges) {
    if (u >= n || v >= n) throw std::invalid_argument("edge endpoint out of range");
    if (u == v) throw std::invalid_argument("self-loop on node " + std::to_string(u));
    if (u > v) std::swap(u, v);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);
}

bool Graph::has_edge(std::size_t u, std::size_t v) const {
  if (u > v) std::swap(u, v);
  return std::binary_search(edges_.begin(), edges_.end(), Edge{u, v});
}

std::uint64_t Graph::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
      h ^= (x >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  feed(n_);
  for (const auto& [u, v] : edges_) {
    feed(u);
    feed(v);
  }
  return h;
}

DenseMatrix::DenseMatrix(std::size_t n, std::vector<double> row_major)
    : n_(n), data_(std::move(row_major)) {
  if (data_.size() != n * n) throw DimensionError("DenseMatrix: expected n*n values");
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows)
    : n_(rows.size()) {
  data_.reserve(n_ * n_);
  for (const auto& r : rows) {
    if (r.size() != n_) throw DimensionError("DenseMatrix: rows must form a square");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::ones_off_diagonal(std::size_t n) {
  DenseMatrix m(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 0.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> d) {
  DenseMatrix m(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_size(*this, other, "add");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_size(*this, other, "subtract");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other.data_[k];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

DenseMatrix& DenseMatrix::add_scaled(const DenseMatrix& other, double s) {
  require_same_size(*this, other, "add_scaled");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += s * other.data_[k];
  return *this;
}

bool DenseMatrix::is_symmetric() const {
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = i + 1; j < n_; ++j)
      if ((*this)(i, j) != (*this)(j, i)) return false;
  return true;
}

bool DenseMatrix::is_zero() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return v == 0.0; });
}

double DenseMatrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(n_);
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = 0; j < n_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

DenseMatrix operator+(DenseMatrix lhs, const DenseMatrix& rhs) { return lhs += rhs; }
DenseMatrix operator-(DenseMatrix lhs, const DenseMatrix& rhs) { return lhs -= rhs; }
DenseMatrix operator*(double s, DenseMatrix m) { return m *= s; }

DenseMatrix adjacency(const Graph& g) {
  DenseMatrix a(g.size());
  for (const auto& [u, v] : g.edges()) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

DenseMatrix matmul(const DenseMatrix& x, const DenseMatrix& y) {
  require_same_size(x, y, "matmul");
  const auto n = static_cast<Eigen::Index>(x.size());
  DenseMatrix out(x.size());
  if (n == 0) return out;
  Eigen::Map<const RowMajor> ex(x.values().data(), n, n);
  Eigen::Map<const RowMajor> ey(y.values().data(), n, n);
  Eigen::Map<RowMajor> eo(out.values().data(), n, n);
  eo.noalias() = ex * ey;
  return out;
}

DenseMatrix matmul_naive(const DenseMatrix& x, const DenseMatrix& y) {
  require_same_size(x, y, "matmul");
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

DenseMatrix hadamard(const DenseMatrix& x, const DenseMatrix& y) {
  require_same_size(x, y, "hadamard");
  DenseMatrix out(x.size());
  auto o = out.values();
  auto a = x.values();
  auto b = y.values();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = a[k] * b[k];
  return out;
}

DenseMatrix mul_by_j(const DenseMatrix& x, Side side) {
  const std::size_t n = x.size();
  DenseMatrix out(n);
  if (side == Side::right) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (double v : x.row(i)) s += v;
      for (std::size_t j = 0; j < n; ++j) out(i, j) = s - x(i, j);
    }
  } else {
    std::vector<double> col(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) col[j] += x(i, j);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) = col[j] - x(i, j);
  }
  return out;
}

Graph erdos_renyi(std::size_t n, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("erdos_renyi: p must lie in [0, 1]");
  std::vector<Graph::Edge> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v) {
      const std::uint64_t counter = (static_cast<std::uint64_t>(u) << 32) | v;
      if (unit_from_bits(mix_seed(seed, counter)) < p) edges.emplace_back(u, v);
    }
  return Graph(n, std::move(edges));
}

namespace {

std::vector<std::vector<std::size_t>> neighbour_lists(const Graph& g) {
  std::vector<std::vector<std::size_t>> adj(g.size());
  for (const auto& [u, v] : g.edges()) {
    adj[u].push_back(v);
    adj[v].push_back(u);
  }
  return adj;
}

struct PathCounter {
  const std::vector<std::vector<std::size_t>>& adj;
  unsigned length;
  std::vector<char> visited;
  DenseMatrix& out;
  std::size_t source = 0;

  void walk(std::size_t at, unsigned depth) {
    if (depth == length) {
      out(source, at) += 1.0;
      return;
    }
    for (std::size_t next : adj[at]) {
      if (visited[next]) continue;
      visited[next] = 1;
      walk(next, depth + 1);
      visited[next] = 0;
    }
  }
};

}  // namespace

DenseMatrix oracle_paths(const Graph& g, unsigned length) {
  if (length == 0) throw std::invalid_argument("oracle_paths: length must be >= 1");
  const std::size_t n = g.size();
  DenseMatrix out(n);
  if (length >= n) return out;
  const auto adj = neighbour_lists(g);
  PathCounter counter{adj, length, std::vector<char>(n, 0), out};
  for (std::size_t s = 0; s < n; ++s) {
    counter.source = s;
    counter.visited[s] = 1;
    counter.walk(s, 0);
    counter.visited[s] = 0;
  }
  return out;
}

DenseMatrix oracle_cycles(const Graph& g, unsigned length) {
  if (length < 3) throw std::invalid_argument("oracle_cycles: length must be >= 3");
  const std::size_t n = g.size();
  DenseMatrix out(n);
  if (length > n) return out;
  const auto adj = neighbour_lists(g);

  // Enumerate each cycle once: its smallest vertex is the start, every other
  // vertex is larger, and the second vertex is smaller than the last.
  std::vector<std::size_t> stack;
  std::vector<char> on_path(n, 0);
  auto record = [&] {
    for (std::size_t k = 0; k < stack.size(); ++k) {
      const std::size_t u = stack[k];
      const std::size_t v = stack[(k + 1) % stack.size()];
      out(u, v) += 1.0;
      out(v, u) += 1.0;
    }
  };
  auto walk = [&](auto&& self, std::size_t at) -> void {
    const std::size_t start = stack.front();
    if (stack.size() == length) {
      if (stack[1] < stack.back() && g.has_edge(at, start)) record();
      return;
    }
    for (std::size_t next : adj[at]) {
      if (next <= start || on_path[next]) continue;
      on_path[next] = 1;
      stack.push_back(next);
      self(self, next);
      stack.pop_back();
      on_path[next] = 0;
    }
  };
  for (std::size_t s = 0; s < n; ++s) {
    stack.assign(1, s);
    on_path[s] = 1;
    walk(walk, s);
    on_path[s] = 0;
  }
  return out;
}

bool is_integral(const DenseMatrix& m, double tol) {
  for (double v : m.values())
    if (!(std::abs(v - std::round(v)) < tol)) return false;
  return true;
}

DenseMatrix rounded_integral(const DenseMatrix& m, double tol) {
  if (!is_integral(m, tol)) throw std::domain_error("matrix is not integral within tolerance");
  DenseMatrix out = m;
  for (double& v : out.values()) v = std::round(v);
  return out;
}

Graph read_graph(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t n = 0, m = 0;
  std::vector<Graph::Edge> edges;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("graph file line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    long long a = -1, b = -1;
    if (!(ls >> a >> b) || a < 0 || b < 0) fail("expected two non-negative integers");
    std::string rest;
    if (ls >> rest) fail("trailing content '" + rest + "'");
    if (!have_header) {
      n = static_cast<std::size_t>(a);
      m = static_cast<std::size_t>(b);
      have_header = true;
      continue;
    }
    if (static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) fail("endpoint out of range");
    if (a == b) fail("self-loop");
    edges.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
  }
  if (!have_header) throw std::runtime_error("graph file: missing 'n m' header");
  if (edges.size() != m) {
    throw std::runtime_error("graph file: header announces " + std::to_string(m) + " edges, found " +
                             std::to_string(edges.size()));
  }
  return Graph(n, std::move(edges));
}

Graph read_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph file '" + path + "'");
  return read_graph(in);
}

void write_graph(std::ostream& out, const Graph& g) {
  out << g.size() << ' ' << g.edges().size() << '\n';
  for (const auto& [u, v] : g.edges()) out << u << ' ' << v << '\n';
}

std::string format_number(double v) {
  if (std::abs(v - std::round(v)) < 1e-9 && std::abs(v) < 9.0e15) {
    const long long r = std::llround(v);
    return std::to_string(r);
  }
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_csv(std::ostream& out, const DenseMatrix& m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (j) out << ',';
      out << format_number(m(i, j));
    }
    out << '\n';
  }
}

}  // namespace grl
