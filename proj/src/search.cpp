#include "grl/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace grl {

SearchState SearchState::initial(const Cfg& g, std::size_t nbwords) {
  if (nbwords == 0) throw std::invalid_argument("nbwords must be at least 1");
  SearchState s;
  s.slots.assign(nbwords, g.start_form());
  return s;
}

std::optional<std::size_t> SearchState::active_slot() const {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (read_first_variable(slots[i])) return i;
  }
  return std::nullopt;
}

bool SearchState::terminal() const { return !active_slot().has_value(); }

std::vector<std::string> SearchState::sentences(const Cfg& g) const {
  std::vector<std::string> out;
  out.reserve(slots.size());
  for (const auto& f : slots) out.push_back(g.render(f));
  return out;
}

std::string SearchState::render(const Cfg& g) const {
  std::string out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (i) out += " | ";
    out += g.render(slots[i]);
  }
  return out;
}

std::vector<std::size_t> legal_actions(const Cfg& g, const SearchState& s, std::size_t c_max) {
  const auto slot = s.active_slot();
  if (!slot) return {};
  return legal_rules(g, s.slots[*slot], c_max);
}

SearchState apply_action(const Cfg& g, const SearchState& s, std::size_t rule,
                         const SearchConfig& cfg) {
  const auto slot = s.active_slot();
  if (!slot) throw GrammarError("apply_action on a terminal state");
  const auto fv = read_first_variable(s.slots[*slot]);
  SearchState out = s;
  out.slots[*slot] = replace(g, s.slots[*slot], fv->position, rule);
  if (rule < cfg.rule_costs.size()) out.cost += cfg.rule_costs[rule];
  return out;
}

PolicyValue uniform_policy(const SearchState&, const std::vector<std::size_t>& legal) {
  PolicyValue pv;
  pv.priors.assign(legal.size(), legal.empty() ? 0.0 : 1.0 / static_cast<double>(legal.size()));
  return pv;
}

std::uint64_t SearchNode::total_n() const {
  return std::accumulate(n.begin(), n.end(), std::uint64_t{0});
}

double exploration_factor(std::uint64_t visits, double c_init, double c_base) {
  return c_init + std::log((1.0 + static_cast<double>(visits) + c_base) / c_base);
}

std::size_t select_action(const SearchNode& node, double alpha, double c) {
  if (node.actions.empty()) throw std::logic_error("select_action: no legal action");
  const double sqrt_total = std::sqrt(static_cast<double>(node.total_n()));
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < node.actions.size(); ++k) {
    const double u = c * node.prior[k] * sqrt_total / (1.0 + static_cast<double>(node.n[k]));
    const double score = alpha * node.q(k) + (1.0 - alpha) * node.v[k] + u;
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

std::size_t select_action(const SearchNode& node, const SearchConfig& cfg) {
  return select_action(node, cfg.alpha, exploration_factor(node.total_n(), cfg.c_init, cfg.c_base));
}

namespace {

double sample_gamma(double shape, Rng& rng) {
  if (shape < 1.0) {
    const double u = std::max(rng.uniform(), 1e-300);
    return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia and Tsang.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(std::max(u, 1e-300)) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace

void expand(SearchNode& node, const Cfg& g, const PolicyValueFn& model, const SearchConfig& cfg,
            Rng* noise_rng) {
  node.actions = legal_actions(g, node.state, cfg.c_max);
  const std::size_t k = node.actions.size();
  PolicyValue pv = model(node.state, node.actions);
  if (pv.priors.size() != k) throw std::logic_error("model returned a prior of the wrong size");
  double total = 0.0;
  for (double p : pv.priors) total += p;
  if (!(total > 0.0) || !std::isfinite(total)) {
    pv.priors.assign(k, 1.0 / static_cast<double>(k));
  } else {
    for (double& p : pv.priors) p /= total;
  }
  if (noise_rng && cfg.dirichlet_fraction > 0.0 && k > 1) {
    std::vector<double> eta(k);
    double sum = 0.0;
    for (auto& e : eta) sum += e = sample_gamma(cfg.dirichlet_alpha, *noise_rng);
    for (std::size_t i = 0; i < k; ++i) {
      pv.priors[i] = (1.0 - cfg.dirichlet_fraction) * pv.priors[i] + cfg.dirichlet_fraction * eta[i] / sum;
    }
  }
  node.prior = std::move(pv.priors);
  node.value = std::clamp(pv.value, -1.0, 1.0);
  node.n.assign(k, 0);
  node.w.assign(k, 0.0);
  node.v.assign(k, node.value);
  node.children.clear();
  node.children.resize(k);
  node.expanded = true;
}

SearchState rollout(const Cfg& g, SearchState s, const SearchConfig& cfg, Rng& rng) {
  const double long_slot = cfg.rollout_bias * static_cast<double>(cfg.c_max);
  while (auto slot = s.active_slot()) {
    auto legal = legal_rules(g, s.slots[*slot], cfg.c_max);
    if (legal.empty()) throw GrammarError("rollout: no rule fits within c_max");
    if (static_cast<double>(s.slots[*slot].size()) > long_slot) {
      std::vector<std::size_t> terminal;
      for (std::size_t r : legal) {
        if (g.is_terminal_rule(r)) terminal.push_back(r);
      }
      if (!terminal.empty()) legal = std::move(terminal);
    }
    s = apply_action(g, s, legal[rng.index(legal.size())], cfg);
  }
  return s;
}

void run_simulations(SearchNode& root, const Cfg& g, const PolicyValueFn& model,
                     const RewardFn& reward, const SearchConfig& cfg, Rng& rng) {
  if (!root.expanded && !root.state.terminal()) expand(root, g, model, cfg, &rng);
  std::vector<std::pair<SearchNode*, std::size_t>> path;
  for (std::size_t sim = 0; sim < cfg.n_sims; ++sim) {
    path.clear();
    SearchNode* node = &root;
    ++node->visits;
    double r = 0.0;
    for (;;) {
      if (node->state.terminal()) {
        if (!node->terminal_reward) node->terminal_reward = reward(node->state);
        r = *node->terminal_reward;
        node->value = r;
        if (!path.empty()) path.back().first->v[path.back().second] = r;
        ++node->terminations;
        break;
      }
      if (!node->expanded) {
        expand(*node, g, model, cfg);
        if (!path.empty()) path.back().first->v[path.back().second] = node->value;
        r = reward(rollout(g, node->state, cfg, rng));
        ++node->terminations;
        break;
      }
      const std::size_t k = select_action(*node, cfg);
      if (!node->children[k]) {
        node->children[k] = std::make_unique<SearchNode>(apply_action(g, node->state, node->actions[k], cfg));
      }
      path.emplace_back(node, k);
      node = node->children[k].get();
      ++node->visits;
    }
    for (auto [p, k] : path) {
      ++p->n[k];
      p->w[k] += r;
    }
  }
}

namespace {

void audit_node(const SearchNode& node, TreeAudit& out) {
  ++out.nodes;
  auto fail = [&](const std::string& why) {
    if (out.ok) {
      out.ok = false;
      out.first_failure = why;
    }
  };
  const std::uint64_t edges = node.total_n();
  if (edges + node.terminations != node.visits) {
    fail("visit conservation broken at node visited " + std::to_string(node.visits) + " times");
  }
  for (std::size_t k = 0; k < node.children.size(); ++k) {
    if (node.n[k] > 0 && node.q(k) != node.w[k] / static_cast<double>(node.n[k])) {
      fail("Q != W/N");
    }
    if (const auto& child = node.children[k]) {
      if (child->visits != node.n[k]) fail("child visits differ from edge count");
      audit_node(*child, out);
    } else if (node.n[k] != 0) {
      fail("visited edge without a child");
    }
  }
}

}  // namespace

TreeAudit audit_tree(const SearchNode& root) {
  TreeAudit out;
  audit_node(root, out);
  return out;
}

TaskReward::TaskReward(const Cfg& g, const TargetTask& task, EvalParams params, std::uint64_t seed,
                       CostFn cost)
    : g_(&g), scorer_(task, params), seed_(seed), cost_(std::move(cost)) {}

EvalOutcome TaskReward::outcome(const SearchState& s) {
  const auto slots = s.sentences(*g_);
  auto texts = slots;
  std::sort(texts.begin(), texts.end());
  std::string key;
  for (const auto& t : texts) (key += t) += ';';
  // The memo holds coefficients in sorted order; hand them back in slot order.
  auto in_slot_order = [&](EvalOutcome o) {
    if (o.coefficients) {
      std::vector<double> x(slots.size());
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto at = std::lower_bound(texts.begin(), texts.end(), slots[i]) - texts.begin();
        x[i] = (*o.coefficients)[static_cast<std::size_t>(at)];
      }
      o.coefficients = std::move(x);
    }
    return o;
  };
  if (auto it = memo_.find(key); it != memo_.end()) return in_slot_order(it->second);
  std::vector<Sentence> sentences;
  sentences.reserve(texts.size());
  for (const auto& t : texts) sentences.push_back(parse(t, *g_));
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : key) h = (h ^ ch) * 0x100000001b3ULL;
  const double cost = cost_ ? cost_(sentences) : s.cost;
  EvalOutcome o = scorer_.score(sentences, cost, mix_seed(seed_, h));
  memo_.emplace(std::move(key), o);
  return in_slot_order(std::move(o));
}

Episode act_episode(const Cfg& g, const PolicyValueFn& model, TaskReward& reward,
                    const SearchConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto root = std::make_unique<SearchNode>(SearchState::initial(g, cfg.nbwords));
  RewardFn rf = [&](const SearchState& s) { return reward(s); };
  Episode ep;
  while (!root->state.terminal()) {
    run_simulations(*root, g, model, rf, cfg, rng);
    ReplayEntry entry;
    entry.state = root->state;
    entry.actions = root->actions;
    const double total = static_cast<double>(root->total_n());
    entry.policy.resize(root->actions.size());
    double w = 0.0;
    for (std::size_t k = 0; k < root->actions.size(); ++k) {
      entry.policy[k] = static_cast<double>(root->n[k]) / total;
      w += root->w[k];
    }
    entry.value = w / total;
    ep.replay.push_back(std::move(entry));

    std::size_t best = 0;
    for (std::size_t k = 1; k < root->actions.size(); ++k) {
      if (root->n[k] > root->n[best]) best = k;
    }
    auto child = std::move(root->children[best]);
    root = std::move(child);
  }
  ep.final_state = root->state;
  ep.sentences = root->state.sentences(g);
  ep.outcome = reward.outcome(root->state);
  return ep;
}

// --- replay file -----------------------------------------------------------

namespace {

constexpr char kMagic[9] = {'G', 'R', 'L', 'R', 'E', 'P', 'L', 'A', 'Y'};

template <class T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}
  template <class T>
  T get() {
    if (static_cast<std::size_t>(end_ - p_) < sizeof(T)) throw std::runtime_error("replay record truncated");
    T v;
    std::memcpy(&v, p_, sizeof(T));
    p_ += sizeof(T);
    return v;
  }
  bool done() const { return p_ == end_; }

 private:
  const char* p_;
  const char* end_;
};

std::string encode(const ReplayEntry& e) {
  std::string buf;
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.state.slots.size()));
  for (const auto& slot : e.state.slots) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(slot.size()));
    for (const auto& sym : slot) {
      put<std::uint8_t>(buf, sym.is_variable ? 1 : 0);
      put<std::uint32_t>(buf, static_cast<std::uint32_t>(sym.index));
    }
  }
  put<double>(buf, e.state.cost);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.actions.size()));
  for (std::size_t k = 0; k < e.actions.size(); ++k) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.actions[k]));
    put<double>(buf, e.policy[k]);
  }
  put<double>(buf, e.value);
  return buf;
}

ReplayEntry decode(const std::string& buf) {
  Reader r(buf.data(), buf.size());
  ReplayEntry e;
  e.state.slots.resize(r.get<std::uint32_t>());
  for (auto& slot : e.state.slots) {
    slot.resize(r.get<std::uint32_t>());
    for (auto& sym : slot) {
      sym.is_variable = r.get<std::uint8_t>() != 0;
      sym.index = r.get<std::uint32_t>();
    }
  }
  e.state.cost = r.get<double>();
  const std::uint32_t k = r.get<std::uint32_t>();
  e.actions.resize(k);
  e.policy.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) {
    e.actions[i] = r.get<std::uint32_t>();
    e.policy[i] = r.get<double>();
  }
  e.value = r.get<double>();
  if (!r.done()) throw std::runtime_error("replay record has trailing bytes");
  return e;
}

void write_header(std::ostream& out) {
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t v = ReplayFile::kVersion;
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_records(std::ostream& out, const std::vector<ReplayEntry>& entries) {
  for (const auto& e : entries) {
    const std::string rec = encode(e);
    const auto len = static_cast<std::uint32_t>(rec.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
}

}  // namespace

void ReplayFile::append(const std::filesystem::path& file, const std::vector<ReplayEntry>& entries) {
  const bool fresh = !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
  std::ofstream out(file, std::ios::binary | std::ios::app);
  if (!out) throw std::runtime_error("cannot open replay file " + file.string());
  if (fresh) write_header(out);
  write_records(out, entries);
  if (!out) throw std::runtime_error("write failed on replay file " + file.string());
}

void ReplayFile::write(const std::filesystem::path& file, const std::vector<ReplayEntry>& entries) {
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open replay file " + tmp);
    write_header(out);
    write_records(out, entries);
    if (!out) throw std::runtime_error("write failed on replay file " + tmp);
  }
  std::filesystem::rename(tmp, file);
}

std::vector<ReplayEntry> ReplayFile::read(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open replay file " + file.string());
  char magic[sizeof(kMagic)];
  std::uint32_t version = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(file.string() + ": not a replay file");
  }
  if (version != kVersion) {
    throw std::runtime_error(file.string() + ": unsupported replay version " + std::to_string(version));
  }
  std::vector<ReplayEntry> out;
  for (;;) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (in.gcount() == 0) break;
    if (in.gcount() != sizeof(len)) throw std::runtime_error(file.string() + ": truncated length prefix");
    std::string rec(len, '\0');
    in.read(rec.data(), len);
    if (static_cast<std::uint32_t>(in.gcount()) != len) {
      throw std::runtime_error(file.string() + ": truncated record");
    }
    out.push_back(decode(rec));
  }
  return out;
}

void ReplayBuffer::push(ReplayEntry e) {
  if (capacity_ == 0) return;
  if (items_.size() < capacity_) {
    items_.push_back(std::move(e));
    return;
  }
  items_[head_] = std::move(e);
  head_ = (head_ + 1) % capacity_;
}

std::vector<ReplayEntry> ReplayBuffer::snapshot() const {
  std::vector<ReplayEntry> out;
  out.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) out.push_back(items_[(head_ + i) % items_.size()]);
  return out;
}

}  // namespace grl
