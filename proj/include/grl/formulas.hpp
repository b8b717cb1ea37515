#pragma once

#include <cstddef>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "grl/grammar.hpp"
#include "grl/matrix.hpp"

namespace grl {

class FormulaRangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Weighted set of sentences. Coefficients are nonzero and sentences distinct;
// adding an existing sentence merges coefficients.
class LinearCombo {
 public:
  struct Term {
    double coefficient;
    Sentence sentence;
  };

  LinearCombo() = default;

  void add(double coefficient, const Sentence& sentence);
  const std::vector<Term>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }
  bool empty() const { return terms_.empty(); }

 private:
  std::vector<Term> terms_;
};

// Expression DAG over A, I, J with products, Hadamard products and weighted
// sums. Used to write the published formulas in their nested form (P5* uses
// P4* as a whole matrix) and to expand them into sentence combinations.
class Formula {
 public:
  enum class Kind { Leaf, MatMul, Hadamard, Sum };

  static Formula leaf(Op op);
  static Formula matmul(Formula lhs, Formula rhs);
  static Formula hadamard(Formula lhs, Formula rhs);
  static Formula sum(std::vector<std::pair<double, Formula>> terms);

  Kind kind() const;
  Op leaf_op() const;
  const Formula& lhs() const;
  const Formula& rhs() const;
  const std::vector<std::pair<double, Formula>>& summands() const;
  // Canonical text; equal keys mean structurally equal formulas.
  const std::string& key() const;

  // Distributes products over sums.
  LinearCombo expand() const;

 private:
  struct Node;
  explicit Formula(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  std::shared_ptr<const Node> node_;
};

// Infix notation: juxtaposition is the matrix product, 'o' (or U+2299) the
// Hadamard product and binds looser than the product, X^k is a left-nested
// power, integer coefficients prefix a term, {name} references a formula in
// `named` (looked up by name).
Formula parse_formula(std::string_view text,
                      const std::vector<std::pair<std::string, Formula>>& named = {});

enum class Family { voropaev, star };

// Published path formulas, l in 2..6.
Formula path_formula(Family family, unsigned l);
// Voropaev cycle formulas for l in 3..7 and the efficient ones for l in 4..7.
// star cycles at l = 3 fall back to A o A^2, which both families share.
Formula cycle_formula(Family family, unsigned l);

LinearCombo voropaev_paths(unsigned l);
LinearCombo star_paths(unsigned l);
LinearCombo voropaev_cycles(unsigned l);
LinearCombo star_cycles(unsigned l);

class LemmaPreconditionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Checks P o (MJ) == (I o N)P - P o M entrywise. Requires N_ii = sum_k M_ik.
bool lemma_rewrite_check(const DenseMatrix& n, const DenseMatrix& m, const DenseMatrix& p);

struct CostPolicy {
  // Products with a diagonal operand (I, or a Hadamard with one) count as heavy.
  bool diagonal_products_heavy = true;
};

struct CostReport {
  std::size_t heavy_matmuls = 0;
  std::size_t hadamards = 0;
  std::size_t j_products = 0;
  std::size_t diagonal_products = 0;

  friend bool operator==(const CostReport&, const CostReport&) = default;
};

// Counts distinct product / Hadamard nodes across all sentences; identical
// subtrees are counted once.
CostReport cost_of(const LinearCombo& c, const CostPolicy& policy = {});
// Same on the nested form; a shared sub-formula such as P4* is counted once.
CostReport cost_of(const Formula& f, const CostPolicy& policy = {});

DenseMatrix evaluate_combo(const LinearCombo& c, const DenseMatrix& a);
// Evaluates the nested form, computing each distinct sub-formula once.
DenseMatrix evaluate_formula(const Formula& f, const DenseMatrix& a);

// Integers print plainly, other values close to p/q with q <= 16 as "p/q",
// anything else with full precision.
std::string format_coefficient(double c);
// Accepts the forms written by format_coefficient.
double parse_coefficient(std::string_view text);

// "coefficient<TAB>sentence" per line, '#' comments.
void write_combo(std::ostream& out, const LinearCombo& c);
LinearCombo read_combo(std::istream& in, const Cfg& g = g3());

}  // namespace grl
