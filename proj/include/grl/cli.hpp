#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "grl/formulas.hpp"
#include "grl/matrix.hpp"

namespace grl {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_usage = 2 };

// "a..b" or a single integer.
std::vector<unsigned> parse_length_range(const std::string& text);

struct VerifySpec {
  std::vector<unsigned> lengths{2, 3, 4, 5, 6};
  std::size_t graphs = 50;
  std::size_t n_min = 6;
  std::size_t n_max = 12;
  std::vector<double> p{0.3, 0.5, 0.7};
  std::uint64_t seed = 1;
  // Test hook: perturbs the named combination ("P3*", "C5", ...) before
  // checking, so the run must fail on it.
  std::string corrupt;
};

struct VerifyReport {
  std::size_t checks = 0;
  std::vector<std::string> lines;
  std::optional<std::string> first_mismatch;
  bool ok() const { return !first_mismatch; }
};

// Graph k of the suite: n uniform in [n_min, n_max], p cycled over the list.
Graph verify_graph(const VerifySpec& spec, std::size_t k);

// Paths of each length l with both families and the oracle, then cycles of
// length l + 1 with both families, A o P_l and the oracle. Exact integers.
VerifyReport verify(const VerifySpec& spec);

struct BenchRecord {
  std::string formula;
  std::size_t n = 0;
  std::size_t reps = 0;
  double median_seconds = 0.0;
  std::size_t matmuls = 0;
  double ratio = 1.0;        // baseline median / this median
  double theoretical = 1.0;  // expected ratio for the faster family
  bool reliable = true;
};

// Expected speedup of P_l* over P_l, l in 3..6.
double theoretical_factor(unsigned l);

// Medians over `reps` timed runs after one warmup. Both families go through
// the same evaluator and therefore the same matrix product kernel.
std::vector<BenchRecord> benchmark(const std::vector<unsigned>& lengths,
                                   const std::vector<std::size_t>& sizes, std::size_t reps,
                                   std::uint64_t seed, double p = 0.5);
void write_bench_tsv(std::ostream& out, const std::vector<BenchRecord>& records);

// Entry point of the grl tool. Returns the process exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace grl
