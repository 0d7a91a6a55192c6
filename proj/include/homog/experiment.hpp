#pragma once

#include "homog/fluctuation_stats.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace homog {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// inverse of ConductanceLaw::canonical(), e.g. "two_point(0.5,1,0.5)"
ConductanceLaw parse_law(const std::string& text);

// Flat key=value configuration for the study runner.  Grid sides are listed
// under L; eps defaults to 1/L per side and can be overridden (same length as
// L) to decouple the box from the lattice.  The `tolerance` key scales the
// verify-study gates and defaults to the solver tolerance; `workers` and
// `out` are execution details and stay out of artifact echoes.
struct ExperimentConfig {
    std::string study = "verify";
    int d = 2;
    std::vector<int> sides{16};
    std::vector<double> eps;  // empty: 1/L
    std::int64_t n = 100;
    ConductanceLaw law = ConductanceLaw::two_point(0.5, 1.0, 0.5);
    std::uint64_t seed = 1;
    SolveConfig solver;
    double check_tolerance = 1e-10;
    std::string abar_ref = "pilot";  // or per_realization
    TestFunctionKind tf_kind = TestFunctionKind::gaussian_bump;
    double tf_width = 0.125;
    std::int64_t batches = 20;
    int workers = 0;  // 0: hardware concurrency
    std::string out = "runs";

    static ExperimentConfig from_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    void apply_override(const std::string& keyval);  // "key=value"
    void validate() const;
    // semantic keys in fixed order, echoed into every artifact
    std::vector<std::pair<std::string, std::string>> echo() const;

    double eps_for(std::size_t side_index) const;
};

struct CheckResult {
    std::string name;
    double discrepancy = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_pass = true;
};

// identity suite over small grids; does not touch the filesystem
VerifyReport run_verify(const ExperimentConfig& cfg);

// runs the configured study, writes study.csv (plus a descriptively named
// copy), summary.json and run.log under cfg.out; returns the process exit
// status (nonzero only when a verify check fails)
int run_study(const ExperimentConfig& cfg);

}  // namespace homog
