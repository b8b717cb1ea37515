#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "grl/grammar.hpp"
#include "grl/rng.hpp"
#include "grl/search.hpp"

namespace grl {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t ff = 128;
  std::size_t max_seq = 256;
  double init_scale = 1.0;

  void validate() const;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t epochs = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double policy_weight = 1.0;
  double value_weight = 1.0;
  bool huber = false;  // robust value loss instead of squared error
  std::uint64_t seed = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SequenceTooLong : public std::length_error {
 public:
  using std::length_error::length_error;
};

// One supervised record in token space.
struct TrainingExample {
  std::size_t variable = 0;         // variable index (not token id)
  std::vector<std::size_t> tokens;  // decoder input
  std::vector<bool> mask;           // over rule indices
  std::vector<double> policy;       // target over rule indices, zero off mask
  double value = 0.0;
};

struct Prediction {
  std::vector<double> policy;  // over rule indices, exactly 0 off the mask
  double value = 0.0;
};

struct LossReport {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// Encoder-decoder transformer over the token framework of a grammar. The
// encoder sees only the variable token; the decoder sees the tokenised state
// and cross-attends to the encoder. Rule logits outside the mask are dropped
// before the softmax. All parameters live in one flat vector.
class Gramformer {
 public:
  Gramformer(const Cfg& g, ModelConfig cfg, std::uint64_t seed);

  const Cfg& grammar() const { return *g_; }
  const TokenSet& tokens() const { return tokens_; }
  const ModelConfig& config() const { return cfg_; }
  std::size_t vocab() const { return tokens_.size() + 2; }
  std::size_t separator_token() const { return tokens_.size(); }
  std::size_t padding_token() const { return tokens_.size() + 1; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  // Parameter groups as (name, offset, size), in storage order.
  struct Group {
    std::string name;
    std::size_t offset;
    std::size_t rows;
    std::size_t cols;
  };
  const std::vector<Group>& groups() const { return groups_; }
  // Sets the policy and value heads to zero (uniform policy, value 0).
  void zero_heads();

  // Slots joined by the separator token, one token per grammar symbol.
  std::vector<std::size_t> encode_state(const SearchState& s) const;
  std::vector<std::size_t> encode_form(const SententialForm& f) const;

  Prediction predict(std::size_t variable, const std::vector<std::size_t>& tokens,
                     const std::vector<bool>& mask) const;
  // Priors aligned with `legal`, for the search.
  PolicyValue evaluate(const SearchState& s, const std::vector<std::size_t>& legal) const;

  // Mean loss over the batch; adds d(loss)/d(params) into `grad` when given.
  LossReport loss(const std::vector<TrainingExample>& batch, const TrainConfig& tc,
                  std::vector<double>* grad) const;

  TrainingExample make_example(const ReplayEntry& e) const;

  void save(const std::filesystem::path& file, const AdamState* adam = nullptr) const;
  // Restores parameters (and the optimiser state when present) into a model
  // built for the same grammar.
  static Gramformer load(const Cfg& g, const std::filesystem::path& file,
                         AdamState* adam = nullptr);

 private:
  struct Forward;
  struct Layout;
  void layout();
  void init(std::uint64_t seed);
  double forward(std::size_t variable, const std::vector<std::size_t>& tokens,
                 const std::vector<bool>& mask, Forward* keep, std::vector<double>* policy) const;

  const Cfg* g_;
  TokenSet tokens_;
  ModelConfig cfg_;
  std::vector<Group> groups_;
  std::shared_ptr<const Layout> layout_;
  std::vector<double> params_;
};

PolicyValueFn as_policy(const Gramformer& model);

// Adam over all parameters. Throws DivergenceError on a non-finite loss.
// Returns the loss of every optimiser step in order.
std::vector<LossReport> train(Gramformer& model, const std::vector<TrainingExample>& data,
                              const TrainConfig& tc, AdamState& adam);

void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& adam,
               const TrainConfig& tc);

// Leftmost derivation driven by the model: argmax with lowest-id tie-break,
// or sampling at `temperature` when rng is given.
std::string generate_sentence(const Gramformer& model, std::size_t c_max, Rng* rng = nullptr,
                              double temperature = 1.0);

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_group;
};

// Central finite differences on every parameter (or every `stride`-th).
GradCheck gradient_check(Gramformer& model, const std::vector<TrainingExample>& batch,
                         const TrainConfig& tc, double h = 1e-4, std::size_t stride = 1);

}  // namespace grl
