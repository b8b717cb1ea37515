#include "grl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

namespace grl {

namespace fs = std::filesystem;

// --- config ------------------------------------------------------------------

const Cfg& RunConfig::cfg() const {
  if (grammar == "g3") return g3();
  if (grammar == "g3tilde") return g3_tilde();
  throw ConfigError("grammar: expected g3 or g3tilde, got '" + grammar + "'");
}

std::vector<double> RunConfig::rule_costs() const {
  const Cfg& g = cfg();
  std::vector<double> out(g.rules().size());
  for (std::size_t r = 0; r < out.size(); ++r) {
    if (g.is_terminal_rule(r)) {
      out[r] = costs.terminal;
    } else if (g.render_rule(r).find('o') != std::string::npos) {
      out[r] = costs.hadamard;
    } else {
      out[r] = costs.matmul;
    }
  }
  return out;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  (void)cfg();
  need(length >= 1 && length <= 16, "task.length: must be in 1..16");
  need(kind != TaskKind::cycle || length >= 3, "task.length: cycle tasks need length >= 3");
  for (const auto* ds : {&train_set, &validation_set}) {
    const char* name = ds == &train_set ? "task" : "validation";
    need(ds->count >= 1, std::string(name) + ".graphs: must be at least 1");
    need(ds->n_min >= 2 && ds->n_min <= ds->n_max, std::string(name) + ".n_min/n_max: need 2 <= n_min <= n_max");
    need(ds->n_max <= 16, std::string(name) + ".n_max: oracle graphs are limited to 16 nodes");
    need(ds->p >= 0.0 && ds->p <= 1.0, std::string(name) + ".p: must be in [0, 1]");
  }
  need(train_set.seed != validation_set.seed, "validation.seed: must differ from task.seed");
  need(search.nbwords >= 1 && search.nbwords <= 8, "nbwords: must be in 1..8");
  need(search.c_max >= 1, "c_max: must be at least 1");
  need(search.n_sims >= 1, "n_sims: must be at least 1");
  need(search.alpha >= 0.0 && search.alpha <= 1.0, "alpha: must be in [0, 1]");
  need(search.c_base > 0.0, "c_base: must be positive");
  need(search.rollout_bias > 0.0, "rollout_bias: must be positive");
  need(search.dirichlet_fraction >= 0.0 && search.dirichlet_fraction <= 1.0,
       "dirichlet_fraction: must be in [0, 1]");
  need(search.dirichlet_alpha > 0.0, "dirichlet_alpha: must be positive");
  need(costs.matmul >= 0 && costs.hadamard >= 0 && costs.terminal >= 0 && costs.j_product >= 0,
       "cost.*: penalties must be non-negative");
  need(eval.beta > 0.0, "beta: must be positive");
  need(eval.lambda >= 0.0, "lambda: must be non-negative");
  need(eval.retries >= 1, "retries: must be at least 1");
  need(tolerance > 0.0, "tolerance: must be positive");
  need(agents >= 1, "agents: must be at least 1");
  need(episodes >= 1, "episodes: must be at least 1");
  need(buffer_capacity >= 1, "buffer_capacity: must be at least 1");
  need(checkpoint_every >= 1, "checkpoint_every: must be at least 1");
  need(train.lr > 0.0, "train.lr: must be positive");
  need(train.batch >= 1, "train.batch: must be at least 1");
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(model.max_seq >= search.nbwords * (search.c_max + 1),
       "model.max_seq: must hold nbwords * (c_max + 1) tokens");
  need(!output.empty(), "output: must be set");
}

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

std::uint64_t to_u64(const std::string& v) {
  std::size_t used = 0;
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer");
  const unsigned long long x = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected a non-negative integer");
  return x;
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument("expected a number");
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true or false");
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = [] {
    std::map<std::string, Setter> m;
    auto sz = [&](const char* key, auto field) {
      m[key] = [field](RunConfig& c, const std::string& v) { field(c) = static_cast<std::size_t>(to_u64(v)); };
    };
    auto dbl = [&](const char* key, auto field) {
      m[key] = [field](RunConfig& c, const std::string& v) { field(c) = to_double(v); };
    };
    auto u64 = [&](const char* key, auto field) {
      m[key] = [field](RunConfig& c, const std::string& v) { field(c) = to_u64(v); };
    };
    m["task.kind"] = [](RunConfig& c, const std::string& v) { c.kind = parse_task_kind(v); };
    m["task.length"] = [](RunConfig& c, const std::string& v) { c.length = static_cast<unsigned>(to_u64(v)); };
    sz("task.graphs", [](RunConfig& c) -> std::size_t& { return c.train_set.count; });
    sz("task.n_min", [](RunConfig& c) -> std::size_t& { return c.train_set.n_min; });
    sz("task.n_max", [](RunConfig& c) -> std::size_t& { return c.train_set.n_max; });
    dbl("task.p", [](RunConfig& c) -> double& { return c.train_set.p; });
    u64("task.seed", [](RunConfig& c) -> std::uint64_t& { return c.train_set.seed; });
    sz("validation.graphs", [](RunConfig& c) -> std::size_t& { return c.validation_set.count; });
    sz("validation.n_min", [](RunConfig& c) -> std::size_t& { return c.validation_set.n_min; });
    sz("validation.n_max", [](RunConfig& c) -> std::size_t& { return c.validation_set.n_max; });
    dbl("validation.p", [](RunConfig& c) -> double& { return c.validation_set.p; });
    u64("validation.seed", [](RunConfig& c) -> std::uint64_t& { return c.validation_set.seed; });
    m["grammar"] = [](RunConfig& c, const std::string& v) {
      if (v != "g3" && v != "g3tilde") throw std::invalid_argument("expected g3 or g3tilde");
      c.grammar = v;
    };
    sz("nbwords", [](RunConfig& c) -> std::size_t& { return c.search.nbwords; });
    sz("c_max", [](RunConfig& c) -> std::size_t& { return c.search.c_max; });
    sz("n_sims", [](RunConfig& c) -> std::size_t& { return c.search.n_sims; });
    dbl("alpha", [](RunConfig& c) -> double& { return c.search.alpha; });
    dbl("c_init", [](RunConfig& c) -> double& { return c.search.c_init; });
    dbl("c_base", [](RunConfig& c) -> double& { return c.search.c_base; });
    dbl("rollout_bias", [](RunConfig& c) -> double& { return c.search.rollout_bias; });
    dbl("dirichlet_alpha", [](RunConfig& c) -> double& { return c.search.dirichlet_alpha; });
    dbl("dirichlet_fraction", [](RunConfig& c) -> double& { return c.search.dirichlet_fraction; });
    dbl("cost.matmul", [](RunConfig& c) -> double& { return c.costs.matmul; });
    dbl("cost.hadamard", [](RunConfig& c) -> double& { return c.costs.hadamard; });
    dbl("cost.terminal", [](RunConfig& c) -> double& { return c.costs.terminal; });
    dbl("cost.j_product", [](RunConfig& c) -> double& { return c.costs.j_product; });
    dbl("beta", [](RunConfig& c) -> double& { return c.eval.beta; });
    dbl("lambda", [](RunConfig& c) -> double& { return c.eval.lambda; });
    dbl("pivot", [](RunConfig& c) -> double& { return c.eval.pivot; });
    sz("retries", [](RunConfig& c) -> std::size_t& { return c.eval.retries; });
    sz("fit_graphs", [](RunConfig& c) -> std::size_t& { return c.eval.fit_graphs; });
    dbl("tolerance", [](RunConfig& c) -> double& { return c.tolerance; });
    sz("agents", [](RunConfig& c) -> std::size_t& { return c.agents; });
    sz("episodes", [](RunConfig& c) -> std::size_t& { return c.episodes; });
    sz("generations", [](RunConfig& c) -> std::size_t& { return c.generations; });
    sz("buffer_capacity", [](RunConfig& c) -> std::size_t& { return c.buffer_capacity; });
    sz("checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; });
    sz("threads", [](RunConfig& c) -> std::size_t& { return c.threads; });
    sz("leaderboard_size", [](RunConfig& c) -> std::size_t& { return c.leaderboard_size; });
    m["stop_on_exact"] = [](RunConfig& c, const std::string& v) { c.stop_on_exact = to_bool(v); };
    sz("model.d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    sz("model.heads", [](RunConfig& c) -> std::size_t& { return c.model.heads; });
    sz("model.enc_layers", [](RunConfig& c) -> std::size_t& { return c.model.enc_layers; });
    sz("model.dec_layers", [](RunConfig& c) -> std::size_t& { return c.model.dec_layers; });
    sz("model.ff", [](RunConfig& c) -> std::size_t& { return c.model.ff; });
    sz("model.max_seq", [](RunConfig& c) -> std::size_t& { return c.model.max_seq; });
    dbl("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
    sz("train.batch", [](RunConfig& c) -> std::size_t& { return c.train.batch; });
    sz("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
    dbl("train.policy_weight", [](RunConfig& c) -> double& { return c.train.policy_weight; });
    dbl("train.value_weight", [](RunConfig& c) -> double& { return c.train.value_weight; });
    m["train.huber"] = [](RunConfig& c, const std::string& v) { c.train.huber = to_bool(v); };
    u64("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    m["output"] = [](RunConfig& c, const std::string& v) { c.output = v; };
    return m;
  }();
  return s;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  RunConfig c;
  std::string line;
  std::size_t no = 0;
  const auto& set = setters();
  while (std::getline(in, line)) {
    ++no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(no) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const auto it = set.find(key);
    if (it == set.end()) throw ConfigError("line " + std::to_string(no) + ": unknown key '" + key + "'");
    try {
      it->second(c, value);
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(no) + ": " + key + ": " + e.what() + " (got '" + value + "')");
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config " + file.string());
  return parse_run_config(in);
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  out << std::setprecision(17);
  out << "task.kind = " << to_string(c.kind) << "\ntask.length = " << c.length
      << "\ntask.graphs = " << c.train_set.count << "\ntask.n_min = " << c.train_set.n_min
      << "\ntask.n_max = " << c.train_set.n_max << "\ntask.p = " << c.train_set.p
      << "\ntask.seed = " << c.train_set.seed << "\nvalidation.graphs = " << c.validation_set.count
      << "\nvalidation.n_min = " << c.validation_set.n_min << "\nvalidation.n_max = " << c.validation_set.n_max
      << "\nvalidation.p = " << c.validation_set.p << "\nvalidation.seed = " << c.validation_set.seed
      << "\ngrammar = " << c.grammar << "\nnbwords = " << c.search.nbwords << "\nc_max = " << c.search.c_max
      << "\nn_sims = " << c.search.n_sims << "\nalpha = " << c.search.alpha << "\nc_init = " << c.search.c_init
      << "\nc_base = " << c.search.c_base << "\nrollout_bias = " << c.search.rollout_bias
      << "\ndirichlet_alpha = " << c.search.dirichlet_alpha
      << "\ndirichlet_fraction = " << c.search.dirichlet_fraction << "\ncost.matmul = " << c.costs.matmul
      << "\ncost.hadamard = " << c.costs.hadamard << "\ncost.terminal = " << c.costs.terminal
      << "\ncost.j_product = " << c.costs.j_product << "\nbeta = " << c.eval.beta << "\nlambda = " << c.eval.lambda
      << "\npivot = " << c.eval.pivot << "\nretries = " << c.eval.retries << "\nfit_graphs = " << c.eval.fit_graphs
      << "\ntolerance = " << c.tolerance << "\nagents = " << c.agents << "\nepisodes = " << c.episodes
      << "\ngenerations = " << c.generations << "\nbuffer_capacity = " << c.buffer_capacity
      << "\ncheckpoint_every = " << c.checkpoint_every << "\nthreads = " << c.threads
      << "\nleaderboard_size = " << c.leaderboard_size << "\nstop_on_exact = " << (c.stop_on_exact ? "true" : "false")
      << "\nmodel.d_model = " << c.model.d_model << "\nmodel.heads = " << c.model.heads
      << "\nmodel.enc_layers = " << c.model.enc_layers << "\nmodel.dec_layers = " << c.model.dec_layers
      << "\nmodel.ff = " << c.model.ff << "\nmodel.max_seq = " << c.model.max_seq << "\ntrain.lr = " << c.train.lr
      << "\ntrain.batch = " << c.train.batch << "\ntrain.epochs = " << c.train.epochs
      << "\ntrain.policy_weight = " << c.train.policy_weight << "\ntrain.value_weight = " << c.train.value_weight
      << "\ntrain.huber = " << (c.train.huber ? "true" : "false") << "\nseed = " << c.seed
      << "\noutput = " << c.output.string() << "\n";
}

// --- leaderboard ---------------------------------------------------------------

namespace {

std::string set_key(std::vector<std::string> s) {
  std::sort(s.begin(), s.end());
  std::string k;
  for (const auto& x : s) (k += x) += ';';
  return k;
}

bool better(const LeaderboardEntry& a, const LeaderboardEntry& b, double tol) {
  const bool va = a.validated(tol), vb = b.validated(tol);
  if (va != vb) return va;
  if (a.reward != b.reward) return a.reward > b.reward;
  return a.cost < b.cost;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(s);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace

bool Leaderboard::offer(LeaderboardEntry e, double tolerance) {
  tolerance_ = tolerance;
  const std::string key = set_key(e.sentences);
  for (auto& cur : entries_) {
    if (set_key(cur.sentences) == key) {
      return false;  // first sighting wins; scoring is deterministic per set
    }
  }
  auto pos = std::find_if(entries_.begin(), entries_.end(),
                          [&](const LeaderboardEntry& x) { return better(e, x, tolerance); });
  if (static_cast<std::size_t>(pos - entries_.begin()) >= capacity_) return false;
  entries_.insert(pos, std::move(e));
  if (entries_.size() > capacity_) entries_.pop_back();
  return true;
}

std::optional<LeaderboardEntry> Leaderboard::best_validated(double tolerance) const {
  for (const auto& e : entries_) {
    if (e.validated(tolerance)) return e;
  }
  return std::nullopt;
}

void Leaderboard::write(std::ostream& out) const {
  out << "rank\tgeneration\tagent\tepisode\treward\tresidual\tvalidation_residual\tcost\tcoefficients\tsentences\n";
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    out << i + 1 << '\t' << e.generation << '\t' << e.agent << '\t' << e.episode << '\t' << fmt(e.reward) << '\t'
        << fmt(e.residual) << '\t' << fmt(e.validation_residual) << '\t' << fmt(e.cost) << '\t';
    for (std::size_t k = 0; k < e.coefficients.size(); ++k) out << (k ? "," : "") << fmt(e.coefficients[k]);
    out << '\t';
    for (std::size_t k = 0; k < e.sentences.size(); ++k) out << (k ? ";" : "") << e.sentences[k];
    out << '\n';
  }
}

Leaderboard Leaderboard::read(std::istream& in, std::size_t capacity) {
  Leaderboard lb(capacity);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 10) throw std::runtime_error("leaderboard: malformed row '" + line + "'");
    LeaderboardEntry e;
    e.generation = std::stoull(f[1]);
    e.agent = std::stoull(f[2]);
    e.episode = std::stoull(f[3]);
    e.reward = std::stod(f[4]);
    e.residual = std::stod(f[5]);
    e.validation_residual = std::stod(f[6]);
    e.cost = std::stod(f[7]);
    for (const auto& c : split(f[8], ',')) e.coefficients.push_back(std::stod(c));
    e.sentences = split(f[9], ';');
    lb.entries_.push_back(std::move(e));
  }
  return lb;
}

// --- costs ---------------------------------------------------------------------

namespace {

double tree_cost(const Sentence& t, const RuleCosts& c) {
  switch (t.op()) {
    case Op::A:
    case Op::I:
    case Op::J:
      return c.terminal;
    case Op::Hadamard:
      return c.hadamard + tree_cost(t.lhs(), c) + tree_cost(t.rhs(), c);
    case Op::MatMul: {
      const bool with_j = t.lhs().op() == Op::J || t.rhs().op() == Op::J;
      return (with_j ? c.j_product : c.matmul) + tree_cost(t.lhs(), c) + tree_cost(t.rhs(), c);
    }
  }
  return 0.0;
}

}  // namespace

double sentence_set_cost(const std::vector<Sentence>& sentences, const RuleCosts& costs) {
  double total = 0.0;
  for (const auto& s : sentences) total += tree_cost(s, costs);
  return total;
}

// --- export --------------------------------------------------------------------

std::vector<double> round_coefficients(const std::vector<double>& x) {
  std::vector<double> out = x;
  for (double& v : out) {
    double best = v;
    double err = 1e-6;
    for (int q = 1; q <= 16; ++q) {
      const double cand = std::round(v * q) / q;
      if (std::abs(cand - v) <= err) {
        err = std::abs(cand - v);
        best = cand;
      }
    }
    v = best;
  }
  return out;
}

LinearCombo export_formula(const LeaderboardEntry& e, double tolerance) {
  if (!(e.residual <= tolerance)) {
    throw std::invalid_argument("export: entry did not converge (residual " + fmt(e.residual) + ")");
  }
  if (e.coefficients.size() != e.sentences.size()) throw std::invalid_argument("export: malformed entry");
  const auto x = round_coefficients(e.coefficients);
  LinearCombo c;
  for (std::size_t i = 0; i < x.size(); ++i) c.add(x[i], parse(e.sentences[i], g3()));
  return c;
}

// --- run -----------------------------------------------------------------------

namespace {

struct Progress {
  std::size_t generation = 0;  // generations completed
  std::uintmax_t replay_bytes = 0;
  std::uintmax_t log_bytes = 0;
};

Progress read_progress(const fs::path& file) {
  std::ifstream in(file);
  Progress p;
  std::string key;
  while (in >> key) {
    if (key == "generation") in >> p.generation;
    else if (key == "replay_bytes") in >> p.replay_bytes;
    else if (key == "log_bytes") in >> p.log_bytes;
    else throw std::runtime_error(file.string() + ": unknown key " + key);
  }
  return p;
}

void write_progress(const fs::path& file, const Progress& p) {
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << "generation " << p.generation << "\nreplay_bytes " << p.replay_bytes << "\nlog_bytes " << p.log_bytes
        << "\n";
  }
  fs::rename(tmp, file);
}

std::uintmax_t size_or_zero(const fs::path& f) { return fs::exists(f) ? fs::file_size(f) : 0; }

void write_text(const fs::path& file, const std::function<void(std::ostream&)>& body) {
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    body(out);
    if (!out) throw std::runtime_error("write failed on " + tmp);
  }
  fs::rename(tmp, file);
}

struct AgentResult {
  std::vector<Episode> episodes;
};

}  // namespace

RunResult run(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const Cfg& g = cfg.cfg();
  const fs::path dir = cfg.output;
  const fs::path ckpt_dir = dir / "checkpoints";
  const fs::path replay_file = dir / "replay.bin";
  const fs::path log_file = dir / "episodes.log";
  const fs::path board_file = dir / "leaderboard.tsv";
  const fs::path progress_file = ckpt_dir / "progress.txt";
  fs::create_directories(ckpt_dir);

  RunResult result;
  result.leaderboard = Leaderboard(cfg.leaderboard_size);

  TruthCache cache(dir / "truths");
  const TargetTask task = [&] {
    TargetTask t = TargetTask::make(cfg.kind, cfg.length, make_dataset(cfg.train_set), &cache);
    t.tolerance = cfg.tolerance;
    return t;
  }();
  const TargetTask validation = [&] {
    TargetTask t = TargetTask::make(cfg.kind, cfg.length, make_dataset(cfg.validation_set), &cache);
    t.tolerance = cfg.tolerance;
    return t;
  }();

  SearchConfig search = cfg.search;
  search.rule_costs = cfg.rule_costs();
  const RuleCosts costs = cfg.costs;
  const TaskReward::CostFn cost_fn = [costs](const std::vector<Sentence>& s) {
    return sentence_set_cost(s, costs);
  };

  Gramformer model(g, cfg.model, mix_seed(cfg.seed, 0x6d));
  AdamState adam;
  ReplayBuffer buffer(cfg.buffer_capacity);
  std::size_t start = 0;

  if (fs::exists(progress_file)) {
    const Progress p = read_progress(progress_file);
    model = Gramformer::load(g, ckpt_dir / "model.ckpt", &adam);
    fs::resize_file(replay_file, p.replay_bytes);
    if (fs::exists(log_file)) fs::resize_file(log_file, p.log_bytes);
    if (p.replay_bytes > 0) {
      for (auto& e : ReplayFile::read(replay_file)) buffer.push(std::move(e));
    }
    std::ifstream lb(ckpt_dir / "leaderboard.tsv");
    if (lb) result.leaderboard = Leaderboard::read(lb, cfg.leaderboard_size);
    start = p.generation;
    result.resumed_from = start;
    if (log) *log << "resuming after generation " << start << "\n";
  } else {
    write_text(dir / "config.cfg", [&](std::ostream& out) { write_run_config(out, cfg); });
    if (fs::exists(replay_file)) fs::remove(replay_file);
    if (fs::exists(log_file)) fs::remove(log_file);
  }

  const std::size_t threads = std::max<std::size_t>(
      1, std::min(cfg.agents, cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency())));
  const std::uint64_t reward_seed = mix_seed(cfg.seed, 0x726577);

  auto finished = [&] {
    const auto best = result.leaderboard.best_validated(cfg.tolerance);
    return cfg.stop_on_exact && best.has_value();
  };

  for (std::size_t gen = start; gen < cfg.generations && !finished(); ++gen) {
    const PolicyValueFn policy = as_policy(model);
    std::vector<AgentResult> results(cfg.agents);
    auto work = [&](std::size_t first) {
      for (std::size_t a = first; a < cfg.agents; a += threads) {
        TaskReward reward(g, task, cfg.eval, reward_seed, cost_fn);
        for (std::size_t e = 0; e < cfg.episodes; ++e) {
          const std::uint64_t seed = mix_seed(mix_seed(mix_seed(cfg.seed, gen + 1), a + 1), e + 1);
          results[a].episodes.push_back(act_episode(g, policy, reward, search, seed));
        }
      }
    };
    if (threads == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
      for (auto& t : pool) t.join();
    }

    // Merge in (agent, episode) order so the outcome never depends on scheduling.
    std::vector<ReplayEntry> fresh;
    std::ofstream episodes_log(log_file, std::ios::app);
    Scorer validator(validation, cfg.eval);
    std::size_t exact = 0;
    double best_reward = -1.0;
    for (std::size_t a = 0; a < cfg.agents; ++a) {
      for (std::size_t e = 0; e < cfg.episodes; ++e) {
        Episode& ep = results[a].episodes[e];
        ++result.episodes;
        std::vector<Sentence> sentences;
        for (const auto& s : ep.sentences) sentences.push_back(parse(s, g));
        episodes_log << "generation=" << gen << " agent=" << a << " episode=" << e << ' '
                     << format_outcome(ep.outcome, sentences) << '\n';
        best_reward = std::max(best_reward, ep.outcome.reward);
        if (ep.outcome.coefficients) {
          LeaderboardEntry le;
          le.generation = gen;
          le.agent = a;
          le.episode = e;
          le.reward = ep.outcome.reward;
          le.residual = ep.outcome.residual;
          le.cost = ep.outcome.cost;
          le.coefficients = *ep.outcome.coefficients;
          le.sentences = ep.sentences;
          le.validation_residual = validator.residual(sentences, le.coefficients);
          if (le.validated(cfg.tolerance)) ++exact;
          result.leaderboard.offer(std::move(le), cfg.tolerance);
        }
        for (auto& r : ep.replay) fresh.push_back(std::move(r));
      }
    }
    episodes_log.close();
    ReplayFile::append(replay_file, fresh);
    for (auto& r : fresh) buffer.push(std::move(r));
    write_text(board_file, [&](std::ostream& out) { result.leaderboard.write(out); });

    std::vector<TrainingExample> data;
    for (const auto& r : buffer.snapshot()) data.push_back(model.make_example(r));
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.seed, 0x7400 + gen);
    const auto losses = train(model, data, tc, adam);
    ++result.generations_run;

    if (log) {
      *log << "generation " << gen << ": episodes " << cfg.agents * cfg.episodes << ", exact " << exact
           << ", best reward " << best_reward << ", buffer " << buffer.size();
      if (!losses.empty()) *log << ", loss " << losses.front().total << " -> " << losses.back().total;
      *log << "\n";
    }

    if ((gen + 1) % cfg.checkpoint_every == 0 || gen + 1 == cfg.generations || finished()) {
      // Keep the replay file bounded: rewrite it with the live window once it
      // holds more than twice the capacity.
      if (fs::exists(replay_file) && size_or_zero(replay_file) > 0) {
        const auto all = ReplayFile::read(replay_file);
        if (all.size() > 2 * cfg.buffer_capacity) ReplayFile::write(replay_file, buffer.snapshot());
      }
      model.save(ckpt_dir / "model.ckpt", &adam);
      model.save(ckpt_dir / ("model_gen" + std::to_string(gen + 1) + ".ckpt"));
      write_text(ckpt_dir / "leaderboard.tsv", [&](std::ostream& out) { result.leaderboard.write(out); });
      write_progress(progress_file, {gen + 1, size_or_zero(replay_file), size_or_zero(log_file)});
    }
  }

  result.best = result.leaderboard.best_validated(cfg.tolerance);
  if (result.best) {
    write_text(dir / "best.combo", [&](std::ostream& out) {
      out << "# reward " << fmt(result.best->reward) << " validation residual "
          << fmt(result.best->validation_residual) << "\n";
      write_combo(out, export_formula(*result.best, cfg.tolerance));
    });
  }
  return result;
}

}  // namespace grl
