#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "grl/matrix.hpp"

namespace grl {

struct Symbol {
  bool is_variable = false;
  std::size_t index = 0;  // into Cfg::variables() or Cfg::terminals()

  friend bool operator==(const Symbol&, const Symbol&) = default;
};

struct Rule {
  std::size_t lhs = 0;
  std::vector<Symbol> rhs;
};

// A sequence over V and Sigma. The written prefix of the leftmost-derivation
// PDA is everything left of the first variable; the rest is the stack.
using SententialForm = std::vector<Symbol>;

class GrammarError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Context-free grammar whose symbols are single characters. Rules are stored
// in declaration order; rule ids are global and grouped by left-hand side in
// the order the variables were declared.
class Cfg {
 public:
  // Text format: one "LHS -> RHS | RHS ..." line per variable, '#' comments,
  // whitespace ignored inside right-hand sides. The first LHS is the start
  // variable. The character U+2299 is read as 'o'.
  static Cfg from_text(std::string_view text);

  const std::vector<std::string>& variables() const { return variables_; }
  const std::vector<std::string>& terminals() const { return terminals_; }
  const std::vector<Rule>& rules() const { return rules_; }
  std::span<const std::size_t> rules_of(std::size_t variable) const { return by_lhs_[variable]; }
  std::size_t start() const { return start_; }

  std::optional<std::size_t> find_variable(std::string_view name) const;
  std::optional<std::size_t> find_terminal(std::string_view name) const;

  // Shortest terminal string derivable from the variable / the rule's rhs.
  std::size_t min_length(std::size_t variable) const { return min_length_[variable]; }
  std::size_t min_length(const Rule& rule) const;
  std::size_t min_completion_length(const SententialForm& form) const;

  bool is_terminal_rule(std::size_t rule) const;
  std::string render(const SententialForm& form) const;
  std::string render_rule(std::size_t rule) const;
  SententialForm start_form() const { return {Symbol{true, start_}}; }

 private:
  void finalize();

  std::vector<std::string> variables_;
  std::vector<std::string> terminals_;
  std::vector<Rule> rules_;
  std::vector<std::vector<std::size_t>> by_lhs_;
  std::vector<std::size_t> min_length_;
  std::size_t start_ = 0;
};

// M -> (MoM) | (MM) | A | I | J
const Cfg& g3();
// E -> (EoM) | (NE) | (EN) | A | J
// N -> (NoM) | (NoN) | I
// M -> (MM) | (EE)
const Cfg& g3_tilde();

struct FirstVariable {
  std::size_t variable;
  std::size_t position;
};

std::optional<FirstVariable> read_first_variable(const SententialForm& form);

// Substitutes the rhs of `rule` for the variable at `position`.
SententialForm replace(const Cfg& g, const SententialForm& form, std::size_t position,
                       std::size_t rule);

// Rules of the leftmost variable whose application keeps the minimal
// completion length within c_max. Empty when the form is terminal.
std::vector<std::size_t> legal_rules(const Cfg& g, const SententialForm& form, std::size_t c_max);

// Receives the current form and the legal rule ids; returns one of them.
using RuleChooser =
    std::function<std::size_t(const SententialForm&, std::span<const std::size_t> legal)>;

// Leftmost derivation from the start variable. Throws GrammarError when the
// chooser returns an illegal rule or no rule fits within c_max.
std::string generate(const Cfg& g, const RuleChooser& chooser, std::size_t c_max);

// Token framework: variable tokens, then rule tokens, then terminal tokens.
class TokenSet {
 public:
  explicit TokenSet(const Cfg& g);

  std::size_t variable_count() const { return variable_count_; }
  std::size_t rule_count() const { return rule_count_; }
  std::size_t terminal_count() const { return terminal_count_; }
  std::size_t size() const { return variable_count_ + rule_count_ + terminal_count_; }

  std::size_t variable_token(std::size_t v) const { return v; }
  std::size_t rule_token(std::size_t r) const { return variable_count_ + r; }
  std::size_t terminal_token(std::size_t t) const { return variable_count_ + rule_count_ + t; }
  std::size_t symbol_token(const Symbol& s) const {
    return s.is_variable ? variable_token(s.index) : terminal_token(s.index);
  }

  // Over rule indices (not token ids): true where the rule belongs to v.
  const std::vector<bool>& mask(std::size_t variable) const { return masks_[variable]; }
  bool is_terminal_rule(std::size_t r) const { return terminal_rule_[r]; }

 private:
  std::size_t variable_count_;
  std::size_t rule_count_;
  std::size_t terminal_count_;
  std::vector<std::vector<bool>> masks_;
  std::vector<bool> terminal_rule_;
};

enum class Op { A, I, J, MatMul, Hadamard };

// Formula tree over {A, I, J} with binary MatMul / Hadamard nodes. Immutable;
// subtrees are shared. Rendered text is fully parenthesised: "(XY)" for a
// product and "(XoY)" for a Hadamard product.
class Sentence {
 public:
  static Sentence leaf(Op op);
  static Sentence matmul(Sentence lhs, Sentence rhs);
  static Sentence hadamard(Sentence lhs, Sentence rhs);

  Op op() const;
  bool is_leaf() const { return op() != Op::MatMul && op() != Op::Hadamard; }
  const Sentence& lhs() const;
  const Sentence& rhs() const;
  const std::string& text() const;

  friend bool operator==(const Sentence& a, const Sentence& b) { return a.text() == b.text(); }
  friend auto operator<=>(const Sentence& a, const Sentence& b) { return a.text() <=> b.text(); }

 private:
  struct Node;
  explicit Sentence(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

struct Sentence::Node {
  Op op;
  std::unique_ptr<std::pair<Sentence, Sentence>> children;
  std::string text;
};

inline Op Sentence::op() const { return node_->op; }
inline const Sentence& Sentence::lhs() const { return node_->children->first; }
inline const Sentence& Sentence::rhs() const { return node_->children->second; }
inline const std::string& Sentence::text() const { return node_->text; }

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " at position " + std::to_string(position)), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

// Replaces U+2299 with 'o' and drops whitespace.
std::string normalize_sentence(std::string_view s);

// Parses a sentence and checks membership in L(g). Positions in errors are
// 0-based offsets into the normalised string.
Sentence parse(std::string_view s, const Cfg& g);
// Parses the bracket syntax without a grammar membership check (relaxed G3).
Sentence parse_relaxed(std::string_view s);
bool in_language(std::string_view s, const Cfg& g);

// Recursive evaluation with identical subtrees computed once; products with
// J use mul_by_j and products with I are copies.
DenseMatrix evaluate_sentence(const Sentence& t, const DenseMatrix& a);

// Shared-subexpression cache for evaluating many sentences on one matrix.
class SentenceEvaluator {
 public:
  explicit SentenceEvaluator(const DenseMatrix& a);
  const DenseMatrix& operator()(const Sentence& t);
  std::size_t cached() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

}  // namespace grl
