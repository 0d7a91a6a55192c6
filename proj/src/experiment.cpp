#include "homog/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>

#include "json.hpp"

#include "homog/correctors.hpp"

namespace homog {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string build_id() {
#ifdef HOMOG_GIT_DESCRIBE
    return HOMOG_GIT_DESCRIBE;
#else
    return "unknown";
#endif
}

std::string trim(const std::string& s) {
    const std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            parts.push_back(trim(s.substr(start)));
            return parts;
        }
        parts.push_back(trim(s.substr(start, pos - start)));
        start = pos + 1;
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + ": not a number: '" + v + "'");
    }
}

std::int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + ": not an integer: '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + ": not an unsigned integer: '" + v + "'");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    const std::int64_t x = parse_i64(key, v);
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw ConfigError("config: " + key + ": out of int range: '" + v + "'");
    return static_cast<int>(x);
}

const char* precond_name(Preconditioner p) {
    switch (p) {
        case Preconditioner::none: return "none";
        case Preconditioner::jacobi: return "jacobi";
        case Preconditioner::constant_coefficient: return "constant_coefficient";
    }
    return "constant_coefficient";
}

Preconditioner parse_precond(const std::string& v) {
    if (v == "none") return Preconditioner::none;
    if (v == "jacobi") return Preconditioner::jacobi;
    if (v == "constant_coefficient" || v == "constant") return Preconditioner::constant_coefficient;
    throw ConfigError("config: precond: expected none|jacobi|constant_coefficient, got '" + v + "'");
}

const char* backend_name(ConstantBackend b) {
    return b == ConstantBackend::spectral ? "spectral" : "iterative";
}

ConstantBackend parse_backend(const std::string& v) {
    if (v == "spectral") return ConstantBackend::spectral;
    if (v == "iterative") return ConstantBackend::iterative;
    throw ConfigError("config: backend: expected spectral|iterative, got '" + v + "'");
}

const char* kind_name(TestFunctionKind k) {
    switch (k) {
        case TestFunctionKind::gaussian_bump: return "gaussian_bump";
        case TestFunctionKind::tensor_bump: return "tensor_bump";
        case TestFunctionKind::dipole: return "dipole";
    }
    return "gaussian_bump";
}

TestFunctionKind parse_kind(const std::string& v) {
    if (v == "gaussian_bump") return TestFunctionKind::gaussian_bump;
    if (v == "tensor_bump") return TestFunctionKind::tensor_bump;
    if (v == "dipole") return TestFunctionKind::dipole;
    throw ConfigError("config: kind: expected gaussian_bump|tensor_bump|dipole, got '" + v + "'");
}

const std::vector<std::string>& study_names() {
    static const std::vector<std::string> names{"verify", "rve", "gk", "clt", "pathwise", "normality", "moments"};
    return names;
}

// ---- realization cache ----

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// One JSON file per realization payload, named by a content hash of the key
// string; the key is stored alongside the payload so a hash collision or a
// stale file degrades to a cache miss, never to wrong data.
struct Cache {
    fs::path dir;
    mutable std::atomic<std::uint64_t> tick{0};

    fs::path path_of(const std::string& key) const {
        char buf[24];
        std::snprintf(buf, sizeof buf, "%016" PRIx64, static_cast<std::uint64_t>(fnv1a64(key)));
        return dir / (std::string(buf) + ".json");
    }

    std::optional<ojson> load(const std::string& key) const {
        std::ifstream in(path_of(key), std::ios::binary);
        if (!in) return std::nullopt;
        ojson doc = ojson::parse(in, nullptr, false);
        if (doc.is_discarded() || !doc.is_object()) return std::nullopt;
        auto kit = doc.find("key");
        if (kit == doc.end() || !kit->is_string() || kit->get<std::string>() != key) return std::nullopt;
        auto pit = doc.find("payload");
        if (pit == doc.end()) return std::nullopt;
        return *pit;
    }

    void store(const std::string& key, const ojson& payload) const {
        ojson doc;
        doc["key"] = key;
        doc["payload"] = payload;
        const fs::path target = path_of(key);
        fs::path tmp = target;
        tmp += "." + std::to_string(tick.fetch_add(1) + 1) + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw std::runtime_error("cache: cannot write " + tmp.string());
            out << doc.dump() << '\n';
        }
        fs::rename(tmp, target);
    }
};

std::string solver_key(const SolveConfig& s) {
    return "tol=" + fmt_g(s.tol) + ";max_iter=" + std::to_string(s.max_iter) + ";precond=" +
           precond_name(s.precond) + ";backend=" + backend_name(s.backend);
}

std::string realization_key(std::uint64_t master, std::int64_t r, int d, int side, const ConductanceLaw& law,
                            const SolveConfig& s, const std::string& tag) {
    return "master=" + std::to_string(master) + ";r=" + std::to_string(r) + ";d=" + std::to_string(d) +
           ";L=" + std::to_string(side) + ";law=" + law.canonical() + ";" + solver_key(s) + ";payload=" + tag;
}

// nullptr means per-realization reference (each sample uses its own abar_L)
std::string ref_tag(const Eigen::MatrixXd* ref) {
    if (!ref) return "self";
    std::string s = "pilot:";
    for (Eigen::Index i = 0; i < ref->rows(); ++i)
        for (Eigen::Index j = 0; j < ref->cols(); ++j) {
            s += fmt_g((*ref)(i, j));
            s += ',';
        }
    return s;
}

// ---- json glue ----

ojson matrix_json(const Eigen::MatrixXd& m) {
    ojson rows = ojson::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        ojson row = ojson::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from(const ojson& j) {
    if (!j.is_array() || j.empty()) throw std::runtime_error("cache payload: malformed matrix");
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index jj = 0; jj < cols; ++jj) m(i, jj) = j.at(i).at(jj).get<double>();
    return m;
}

ojson tensor_json(const Tensor4& t) {
    ojson out = ojson::array();
    for (int i = 0; i < t.d; ++i) {
        ojson bi = ojson::array();
        for (int j = 0; j < t.d; ++j) {
            ojson bj = ojson::array();
            for (int k = 0; k < t.d; ++k) {
                ojson bk = ojson::array();
                for (int l = 0; l < t.d; ++l) bk.push_back(t.at(i, j, k, l));
                bj.push_back(std::move(bk));
            }
            bi.push_back(std::move(bj));
        }
        out.push_back(std::move(bi));
    }
    return out;
}

ojson reports_json(const std::vector<SolveReport>& rs) {
    ojson out = ojson::array();
    for (const auto& r : rs) {
        ojson rec;
        rec["iterations"] = r.iterations;
        rec["relative_residual"] = r.relative_residual;
        rec["backend"] = r.backend;
        out.push_back(std::move(rec));
    }
    return out;
}

ojson failed_payload(const std::string& what) {
    ojson pl;
    pl["failed"] = true;
    pl["error"] = what;
    pl["reports"] = ojson::array();
    return pl;
}

bool payload_failed(const ojson& pl) { return pl.is_object() && pl.value("failed", false); }

ojson num(double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); }

// ---- worker pool: stateless workers pull realization indices, results land
// in per-realization slots and are reduced afterwards in index order ----

std::vector<ojson> run_pool(std::int64_t n, int workers, const std::function<ojson(std::int64_t)>& fn) {
    std::vector<ojson> out(static_cast<std::size_t>(n));
    if (n <= 0) return out;
    std::atomic<std::int64_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto drain = [&] {
        for (;;) {
            const std::int64_t r = next.fetch_add(1);
            if (r >= n) return;
            try {
                out[static_cast<std::size_t>(r)] = fn(r);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    const int w = static_cast<int>(std::min<std::int64_t>(std::max(workers, 1), n));
    if (w <= 1) {
        drain();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(w));
        for (int i = 0; i < w; ++i) pool.emplace_back(drain);
        for (auto& t : pool) t.join();
    }
    if (err) std::rethrow_exception(err);
    return out;
}

// ---- per-realization payloads (cache lookup -> compute -> store) ----

ojson abar_payload(const Cache& cache, const ExperimentConfig& cfg, std::uint64_t master, int side,
                   std::int64_t r) {
    const std::string key = realization_key(master, r, cfg.d, side, cfg.law, cfg.solver, "abar");
    if (auto hit = cache.load(key)) return *hit;
    ojson pl;
    try {
        TorusGrid grid(cfg.d, side);
        EdgeField a = sample_field(grid, cfg.law,
                                   SeedSpec{master, static_cast<std::uint64_t>(r), StreamPurpose::field_draw});
        std::vector<NodeField> phi;
        std::vector<SolveReport> reps;
        for (int i = 0; i < cfg.d; ++i) {
            auto [p, rep] = solve_corrector(a, i, cfg.solver);
            phi.push_back(std::move(p));
            reps.push_back(rep);
        }
        pl["abar"] = matrix_json(homogenized_coefficient(a, phi));
        pl["reports"] = reports_json(reps);
    } catch (const NonConvergence& e) {
        pl = failed_payload(e.what());
    }
    cache.store(key, pl);
    return pl;
}

ojson clt_payload(const Cache& cache, const ExperimentConfig& cfg, int side, double eps, std::int64_t r,
                  const Eigen::MatrixXd* pilot) {
    const std::string tag = "clt;ref=" + ref_tag(pilot) + ";kind=" + kind_name(cfg.tf_kind) +
                            ";width=" + fmt_g(cfg.tf_width) + ";eps=" + fmt_g(eps);
    const std::string key = realization_key(cfg.seed, r, cfg.d, side, cfg.law, cfg.solver, tag);
    if (auto hit = cache.load(key)) return *hit;
    ojson pl;
    try {
        TorusGrid grid(cfg.d, side);
        EdgeField a = sample_field(grid, cfg.law,
                                   SeedSpec{cfg.seed, static_cast<std::uint64_t>(r), StreamPurpose::field_draw});
        CorrectorPack pack = build_corrector_pack(a, cfg.solver, false);
        const Eigen::MatrixXd ref = pilot ? *pilot : pack.abar;
        CommutatorField xi = commutator(a, pack.phi, ref);
        TestFunction F = TestFunction::matrix_bump(cfg.d, cfg.tf_kind, cfg.tf_width);
        CorrectorFunctionals cf = corrector_functionals(pack, ref, F, eps);
        pl["j0"] = j0_functional(xi, F, eps);
        pl["j1"] = cf.j1;
        pl["j2"] = cf.j2;
        pl["reports"] = reports_json(pack.reports);
    } catch (const NonConvergence& e) {
        pl = failed_payload(e.what());
    }
    cache.store(key, pl);
    return pl;
}

ojson pathwise_payload(const Cache& cache, const ExperimentConfig& cfg, int side, double eps, std::int64_t r,
                       const Eigen::MatrixXd* pilot) {
    const std::string tag = "pathwise;ref=" + ref_tag(pilot) + ";kind=" + kind_name(cfg.tf_kind) +
                            ";width=" + fmt_g(cfg.tf_width) + ";eps=" + fmt_g(eps);
    const std::string key = realization_key(cfg.seed, r, cfg.d, side, cfg.law, cfg.solver, tag);
    if (auto hit = cache.load(key)) return *hit;
    ojson pl;
    try {
        TorusGrid grid(cfg.d, side);
        EdgeField a = sample_field(grid, cfg.law,
                                   SeedSpec{cfg.seed, static_cast<std::uint64_t>(r), StreamPurpose::field_draw});
        CorrectorPack pack = build_corrector_pack(a, cfg.solver, false);
        const Eigen::MatrixXd ref = pilot ? *pilot : pack.abar;
        CommutatorField xi = commutator(a, pack.phi, ref);
        TestFunction f = TestFunction::vector_bump(cfg.d, cfg.tf_kind, cfg.tf_width);
        FunctionalSample smp = solution_functionals(a, xi, f, f, eps, cfg.solver);
        pl["i1_raw"] = smp.i1_raw;
        pl["i2_raw"] = smp.i2_raw;
        pl["e0_flux_raw"] = smp.e0_flux_raw;
        pl["e0_comm_raw"] = smp.e0_comm_raw;
        pl["pathwise_lhs"] = smp.pathwise_lhs;
        pl["pathwise_rhs"] = smp.pathwise_rhs;
        std::vector<SolveReport> reps = pack.reports;
        reps.insert(reps.end(), smp.reports.begin(), smp.reports.end());
        pl["reports"] = reports_json(reps);
    } catch (const NonConvergence& e) {
        pl = failed_payload(e.what());
    }
    cache.store(key, pl);
    return pl;
}

ojson gk_payload(const Cache& cache, const ExperimentConfig& cfg, int window_side, std::int64_t r,
                 const GreenKuboAccumulator& acc, const Eigen::MatrixXd& pilot) {
    const int torus_side = 2 * window_side;
    const std::string tag = "gk;win=" + std::to_string(window_side) + ";ref=" + ref_tag(&pilot);
    const std::string key = realization_key(cfg.seed, r, cfg.d, torus_side, cfg.law, cfg.solver, tag);
    if (auto hit = cache.load(key)) return *hit;
    ojson pl;
    try {
        TorusGrid grid(cfg.d, torus_side);
        EdgeField a = sample_field(grid, cfg.law,
                                   SeedSpec{cfg.seed, static_cast<std::uint64_t>(r), StreamPurpose::field_draw});
        CorrectorPack pack = build_corrector_pack(a, cfg.solver, false);
        CommutatorField xi = commutator(a, pack.phi, pilot);
        GreenKuboSample smp = acc.sample(xi.xi);
        pl["t"] = smp.t;
        pl["mean_xi"] = matrix_json(smp.mean_xi);
        pl["reports"] = reports_json(pack.reports);
    } catch (const NonConvergence& e) {
        pl = failed_payload(e.what());
    }
    cache.store(key, pl);
    return pl;
}

ojson moments_payload(const Cache& cache, const ExperimentConfig& cfg, int side, std::int64_t r) {
    const std::string key = realization_key(cfg.seed, r, cfg.d, side, cfg.law, cfg.solver, "moments");
    if (auto hit = cache.load(key)) return *hit;
    ojson pl;
    try {
        TorusGrid grid(cfg.d, side);
        EdgeField a = sample_field(grid, cfg.law,
                                   SeedSpec{cfg.seed, static_cast<std::uint64_t>(r), StreamPurpose::field_draw});
        auto [phi, rep] = solve_corrector(a, 0, cfg.solver);
        double m2 = 0.0;
        for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx) m2 += phi[nidx] * phi[nidx];
        m2 /= static_cast<double>(grid.nodes);
        EdgeField g = forward_gradient(phi);
        double gm2 = 0.0;
        for (std::int64_t e = 0; e < g.size(); ++e) gm2 += g.data()[e] * g.data()[e];
        gm2 /= static_cast<double>(grid.nodes);
        pl["phi_m2"] = m2;
        pl["grad_m2"] = gm2;
        pl["reports"] = reports_json({rep});
    } catch (const NonConvergence& e) {
        pl = failed_payload(e.what());
    }
    cache.store(key, pl);
    return pl;
}

// ---- run.log records ----

void log_payload(std::vector<std::string>& runlog, const char* phase, int parameter, std::int64_t r,
                 const ojson& pl) {
    if (payload_failed(pl)) {
        ojson rec;
        rec["phase"] = phase;
        rec["parameter"] = parameter;
        rec["realization"] = r;
        rec["failed"] = true;
        rec["error"] = pl.value("error", "");
        runlog.push_back(rec.dump());
        return;
    }
    const auto it = pl.find("reports");
    if (it == pl.end() || !it->is_array()) return;
    int idx = 0;
    for (const auto& rep : *it) {
        ojson rec;
        rec["phase"] = phase;
        rec["parameter"] = parameter;
        rec["realization"] = r;
        rec["solve"] = idx++;
        rec["iterations"] = rep.value("iterations", std::int64_t{0});
        rec["relative_residual"] = rep.value("relative_residual", 0.0);
        rec["backend"] = rep.value("backend", "");
        runlog.push_back(rec.dump());
    }
}

// ---- pilot reference: mean abar over a fixed auxiliary ensemble on a grid
// twice the largest side in the study, under a seed derived from the master ----

struct PilotInfo {
    int side = 0;
    std::int64_t n = 64;
    std::int64_t n_used = 0;
    Eigen::MatrixXd matrix;
};

PilotInfo compute_pilot(const ExperimentConfig& cfg, const Cache& cache, int workers, int max_lattice_side,
                        std::vector<std::string>& runlog) {
    PilotInfo p;
    p.side = 2 * max_lattice_side;
    const std::uint64_t master = cfg.seed ^ 0x70696c6f74ull;
    auto payloads =
        run_pool(p.n, workers, [&](std::int64_t r) { return abar_payload(cache, cfg, master, p.side, r); });
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(cfg.d, cfg.d);
    for (std::int64_t r = 0; r < p.n; ++r) {
        const ojson& pl = payloads[static_cast<std::size_t>(r)];
        log_payload(runlog, "pilot", p.side, r, pl);
        if (payload_failed(pl)) continue;
        sum += matrix_from(pl.at("abar"));
        ++p.n_used;
    }
    if (p.n_used == 0) throw InsufficientSamples("pilot reference: no realization converged");
    p.matrix = sum / static_cast<double>(p.n_used);
    return p;
}

ojson pilot_block(const PilotInfo& p) {
    ojson b;
    b["mode"] = "pilot";
    b["side"] = p.side;
    b["n"] = p.n;
    b["n_used"] = p.n_used;
    b["matrix"] = matrix_json(p.matrix);
    return b;
}

// ---- small statistics helpers ----

struct Moments1 {
    std::int64_t n = 0;
    double mean = 0.0;
    double var = 0.0;
    double se = 0.0;      // of the mean
    double var_se = 0.0;  // of the variance
};

Moments1 moments_of(const std::vector<double>& xs) {
    Moments1 m;
    m.n = static_cast<std::int64_t>(xs.size());
    if (m.n == 0) return m;
    bool all_equal = true;
    for (double x : xs) {
        m.mean += x;
        all_equal = all_equal && x == xs.front();
    }
    if (all_equal) {  // degenerate sample: skip the mean roundoff entirely
        m.mean = xs.front();
        return m;
    }
    m.mean /= static_cast<double>(m.n);
    if (m.n < 2) return m;
    double s2 = 0.0, s4 = 0.0;
    for (double x : xs) {
        const double d = x - m.mean;
        s2 += d * d;
        s4 += d * d * d * d;
    }
    const double nd = static_cast<double>(m.n);
    m.var = s2 / (nd - 1.0);
    m.se = std::sqrt(m.var / nd);
    const double m4 = s4 / nd;
    const double v = std::max(0.0, m4 - (nd - 3.0) / (nd - 1.0) * m.var * m.var);
    m.var_se = std::sqrt(v / nd);
    return m;
}

ojson moments_block(const Moments1& m) {
    ojson b;
    b["mean"] = num(m.mean);
    b["se"] = num(m.se);
    b["var"] = num(m.var);
    b["var_se"] = num(m.var_se);
    return b;
}

ojson fit_block(const std::vector<ScalingPoint>& pts, double log_power, const char* statistic) {
    ojson f;
    f["statistic"] = statistic;
    f["log_power"] = log_power;
    try {
        ScalingFit sf = scaling_fit(pts, log_power);
        f["slope"] = num(sf.slope);
        f["intercept"] = num(sf.intercept);
        f["slope_stderr"] = num(sf.slope_stderr);
    } catch (const std::exception& e) {
        f["error"] = e.what();
    }
    return f;
}

struct StudyOutput {
    std::string csv_header;
    std::vector<std::string> rows;
    ojson parameters = ojson::array();
    ojson abar_ref;  // null unless the study uses a reference matrix
    ojson fit;       // null unless a scaling fit applies
    ojson checks;    // verify study only
    bool all_pass = true;
    int status = 0;
};

std::string abar_columns(int d) {
    std::string h;
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) h += ",abar_" + std::to_string(i) + std::to_string(j);
    return h;
}

// ---- studies ----

StudyOutput run_abar_study(const ExperimentConfig& cfg, const Cache& cache, int workers,
                           std::vector<std::string>& runlog) {
    StudyOutput out;
    out.csv_header = "parameter,realization" + abar_columns(cfg.d);
    std::vector<ScalingPoint> pts;
    for (int L : cfg.sides) {
        auto payloads =
            run_pool(cfg.n, workers, [&](std::int64_t r) { return abar_payload(cache, cfg, cfg.seed, L, r); });
        std::vector<Eigen::MatrixXd> samples;
        samples.reserve(payloads.size());
        for (std::int64_t r = 0; r < cfg.n; ++r) {
            const ojson& pl = payloads[static_cast<std::size_t>(r)];
            log_payload(runlog, "study", L, r, pl);
            if (payload_failed(pl)) continue;
            Eigen::MatrixXd m = matrix_from(pl.at("abar"));
            std::string row = std::to_string(L) + "," + std::to_string(r);
            for (int i = 0; i < cfg.d; ++i)
                for (int j = 0; j < cfg.d; ++j) row += "," + fmt_g(m(i, j));
            out.rows.push_back(std::move(row));
            samples.push_back(std::move(m));
        }
        ojson block;
        block["parameter"] = L;
        block["n_requested"] = cfg.n;
        block["n_samples"] = static_cast<std::int64_t>(samples.size());
        if (cfg.study == "normality") {
            std::vector<double> first;
            first.reserve(samples.size());
            for (const auto& m : samples) first.push_back(m(0, 0));
            try {
                NormalityMetrics nm = normality_metrics(first);
                block["kolmogorov"] = num(nm.kolmogorov);
                block["wasserstein1"] = num(nm.wasserstein1);
                block["metric_sum"] = num(nm.kolmogorov + nm.wasserstein1);
            } catch (const std::exception& e) {
                block["error"] = e.what();
            }
        } else if (samples.size() >= 2) {
            RveEstimate est = rve_statistics(samples, cfg.d, L);
            block["abar_mean"] = matrix_json(est.abar_mean);
            block["abar_se"] = matrix_json(est.abar_se);
            block["q"] = tensor_json(est.q);
            block["q_se"] = tensor_json(est.q_se);
            const double qn = est.q.norm();
            const double qsn = est.q_se.norm();
            const double ld = std::pow(static_cast<double>(L), cfg.d);
            block["q_norm"] = num(qn);
            block["q_se_norm"] = num(qsn);
            block["var_abar_norm"] = num(qn / ld);
            block["var_abar_norm_se"] = num(qsn / ld);
            pts.push_back({static_cast<double>(L), qn / ld, qsn / ld});
        } else {
            block["error"] = "fewer than 2 converged realizations";
        }
        out.parameters.push_back(std::move(block));
    }
    if (cfg.study == "rve" && pts.size() >= 3) out.fit = fit_block(pts, 0.0, "var_abar_norm");
    return out;
}

StudyOutput run_clt_study(const ExperimentConfig& cfg, const Cache& cache, int workers,
                          std::vector<std::string>& runlog) {
    StudyOutput out;
    out.csv_header = "parameter,eps,realization,j0,j1,j2";
    std::optional<PilotInfo> pilot;
    if (cfg.abar_ref == "pilot") {
        pilot = compute_pilot(cfg, cache, workers, *std::max_element(cfg.sides.begin(), cfg.sides.end()), runlog);
        out.abar_ref = pilot_block(*pilot);
    } else {
        out.abar_ref = ojson{{"mode", "per_realization"}};
    }
    const Eigen::MatrixXd* ref = pilot ? &pilot->matrix : nullptr;
    std::vector<ScalingPoint> pts;
    for (std::size_t si = 0; si < cfg.sides.size(); ++si) {
        const int L = cfg.sides[si];
        const double eps = cfg.eps_for(si);
        auto payloads = run_pool(cfg.n, workers,
                                 [&](std::int64_t r) { return clt_payload(cache, cfg, L, eps, r, ref); });
        std::vector<double> j0s, j1s, j2s;
        for (std::int64_t r = 0; r < cfg.n; ++r) {
            const ojson& pl = payloads[static_cast<std::size_t>(r)];
            log_payload(runlog, "study", L, r, pl);
            if (payload_failed(pl)) continue;
            const double j0 = pl.at("j0").get<double>();
            const double j1 = pl.at("j1").get<double>();
            const double j2 = pl.at("j2").get<double>();
            j0s.push_back(j0);
            j1s.push_back(j1);
            j2s.push_back(j2);
            out.rows.push_back(std::to_string(L) + "," + fmt_g(eps) + "," + std::to_string(r) + "," + fmt_g(j0) +
                               "," + fmt_g(j1) + "," + fmt_g(j2));
        }
        ojson block;
        block["parameter"] = L;
        block["eps"] = num(eps);
        block["n_requested"] = cfg.n;
        block["n_samples"] = static_cast<std::int64_t>(j0s.size());
        Moments1 m0 = moments_of(j0s);
        block["j0"] = moments_block(m0);
        block["j1"] = moments_block(moments_of(j1s));
        block["j2"] = moments_block(moments_of(j2s));
        if (m0.n >= 2) pts.push_back({static_cast<double>(L), m0.var, m0.var_se});
        out.parameters.push_back(std::move(block));
    }
    if (pts.size() >= 3) out.fit = fit_block(pts, 0.0, "var_j0");
    return out;
}

StudyOutput run_pathwise_study(const ExperimentConfig& cfg, const Cache& cache, int workers,
                               std::vector<std::string>& runlog) {
    StudyOutput out;
    out.csv_header = "parameter,eps,realization,i1_raw,i2_raw,e0_flux_raw,e0_comm_raw,pathwise_lhs,pathwise_rhs";
    std::optional<PilotInfo> pilot;
    if (cfg.abar_ref == "pilot") {
        pilot = compute_pilot(cfg, cache, workers, *std::max_element(cfg.sides.begin(), cfg.sides.end()), runlog);
        out.abar_ref = pilot_block(*pilot);
    } else {
        out.abar_ref = ojson{{"mode", "per_realization"}};
    }
    const Eigen::MatrixXd* ref = pilot ? &pilot->matrix : nullptr;
    std::vector<ScalingPoint> pts;
    for (std::size_t si = 0; si < cfg.sides.size(); ++si) {
        const int L = cfg.sides[si];
        const double eps = cfg.eps_for(si);
        auto payloads = run_pool(cfg.n, workers,
                                 [&](std::int64_t r) { return pathwise_payload(cache, cfg, L, eps, r, ref); });
        std::vector<double> i1, i2, flux, comm, lhs, rhs;
        for (std::int64_t r = 0; r < cfg.n; ++r) {
            const ojson& pl = payloads[static_cast<std::size_t>(r)];
            log_payload(runlog, "study", L, r, pl);
            if (payload_failed(pl)) continue;
            i1.push_back(pl.at("i1_raw").get<double>());
            i2.push_back(pl.at("i2_raw").get<double>());
            flux.push_back(pl.at("e0_flux_raw").get<double>());
            comm.push_back(pl.at("e0_comm_raw").get<double>());
            lhs.push_back(pl.at("pathwise_lhs").get<double>());
            rhs.push_back(pl.at("pathwise_rhs").get<double>());
            out.rows.push_back(std::to_string(L) + "," + fmt_g(eps) + "," + std::to_string(r) + "," +
                               fmt_g(i1.back()) + "," + fmt_g(i2.back()) + "," + fmt_g(flux.back()) + "," +
                               fmt_g(comm.back()) + "," + fmt_g(lhs.back()) + "," + fmt_g(rhs.back()));
        }
        const std::int64_t n = static_cast<std::int64_t>(i1.size());
        ojson block;
        block["parameter"] = L;
        block["eps"] = num(eps);
        block["n_requested"] = cfg.n;
        block["n_samples"] = n;
        block["i1"] = moments_block(moments_of(i1));
        block["i2"] = moments_block(moments_of(i2));
        if (n >= 2) {
            // E0 = (flux - study mean of flux) - comm; only the flux term is centered
            double flux_mean = 0.0;
            for (double x : flux) flux_mean += x;
            flux_mean /= static_cast<double>(n);
            double ms = 0.0;
            std::vector<double> sq(static_cast<std::size_t>(n));
            for (std::int64_t r = 0; r < n; ++r) {
                const double e0 = (flux[static_cast<std::size_t>(r)] - flux_mean) - comm[static_cast<std::size_t>(r)];
                sq[static_cast<std::size_t>(r)] = e0 * e0;
                ms += e0 * e0;
            }
            ms /= static_cast<double>(n);
            const double rms = std::sqrt(ms);
            const double ms_se = moments_of(sq).se;
            const double rms_se = rms > 0.0 ? ms_se / (2.0 * rms) : 0.0;
            block["e0_rms"] = num(rms);
            block["e0_rms_se"] = num(rms_se);
            double gap_max = 0.0, gap_sum = 0.0;
            for (std::int64_t r = 0; r < n; ++r) {
                const double scale = std::max({1.0, std::abs(lhs[static_cast<std::size_t>(r)]),
                                               std::abs(rhs[static_cast<std::size_t>(r)])});
                const double gap = std::abs(lhs[static_cast<std::size_t>(r)] - rhs[static_cast<std::size_t>(r)]) / scale;
                gap_max = std::max(gap_max, gap);
                gap_sum += gap;
            }
            block["pathwise_gap_max"] = num(gap_max);
            block["pathwise_gap_mean"] = num(gap_sum / static_cast<double>(n));
            if (rms > 0.0) pts.push_back({static_cast<double>(L), rms, rms_se});
        } else {
            block["error"] = "fewer than 2 converged realizations";
        }
        out.parameters.push_back(std::move(block));
    }
    const double log_power = cfg.d == 2 ? 0.5 : 0.0;
    if (pts.size() >= 3) out.fit = fit_block(pts, log_power, "e0_rms");
    return out;
}

StudyOutput run_gk_study(const ExperimentConfig& cfg, const Cache& cache, int workers,
                         std::vector<std::string>& runlog) {
    StudyOutput out;
    const int d = cfg.d;
    std::string header = "parameter,realization";
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) header += ",mean_xi_" + std::to_string(i) + std::to_string(j);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k)
                for (int l = 0; l < d; ++l)
                    header += ",t_" + std::to_string(i) + std::to_string(j) + std::to_string(k) + std::to_string(l);
    out.csv_header = std::move(header);

    // window statistics need one fixed reference; sides are window radii, the
    // torus is twice that, and the pilot doubles the torus once more
    PilotInfo pilot =
        compute_pilot(cfg, cache, workers, 2 * *std::max_element(cfg.sides.begin(), cfg.sides.end()), runlog);
    out.abar_ref = pilot_block(pilot);

    const std::size_t comps = static_cast<std::size_t>(d) * d * d * d;
    for (int L : cfg.sides) {
        TorusGrid grid(d, 2 * L);
        const std::int64_t batch_size = std::max<std::int64_t>(2, cfg.n / std::max<std::int64_t>(1, cfg.batches));
        GreenKuboAccumulator acc(grid, L, batch_size);
        auto payloads = run_pool(
            cfg.n, workers, [&](std::int64_t r) { return gk_payload(cache, cfg, L, r, acc, pilot.matrix); });
        for (std::int64_t r = 0; r < cfg.n; ++r) {
            const ojson& pl = payloads[static_cast<std::size_t>(r)];
            log_payload(runlog, "study", L, r, pl);
            if (payload_failed(pl)) continue;
            GreenKuboSample smp;
            smp.t = pl.at("t").get<std::vector<double>>();
            if (smp.t.size() != comps) throw std::runtime_error("cache payload: gk window size mismatch");
            smp.mean_xi = matrix_from(pl.at("mean_xi"));
            std::string row = std::to_string(L) + "," + std::to_string(r);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) row += "," + fmt_g(smp.mean_xi(i, j));
            for (double t : smp.t) row += "," + fmt_g(t);
            out.rows.push_back(std::move(row));
            acc.add(smp);
        }
        ojson block;
        block["parameter"] = L;
        block["torus_side"] = 2 * L;
        block["n_requested"] = cfg.n;
        block["n_samples"] = acc.count();
        block["batch_size"] = batch_size;
        block["batches_completed"] = acc.completed_batches();
        try {
            Tensor4 est = acc.estimate();
            block["q"] = tensor_json(est);
            block["q_norm"] = num(est.norm());
            block["q_1111"] = num(est.at(0, 0, 0, 0));
            if (acc.completed_batches() >= 2) {
                Tensor4 se = acc.standard_error();
                block["q_se"] = tensor_json(se);
                block["q_se_norm"] = num(se.norm());
                block["q_se_1111"] = num(se.at(0, 0, 0, 0));
            }
        } catch (const std::exception& e) {
            block["error"] = e.what();
        }
        out.parameters.push_back(std::move(block));
    }
    return out;
}

StudyOutput run_moments_study(const ExperimentConfig& cfg, const Cache& cache, int workers,
                              std::vector<std::string>& runlog) {
    StudyOutput out;
    out.csv_header = "parameter,realization,phi_m2,grad_m2";
    std::vector<ScalingPoint> pts;
    for (int L : cfg.sides) {
        auto payloads =
            run_pool(cfg.n, workers, [&](std::int64_t r) { return moments_payload(cache, cfg, L, r); });
        std::vector<double> m2s, gm2s;
        for (std::int64_t r = 0; r < cfg.n; ++r) {
            const ojson& pl = payloads[static_cast<std::size_t>(r)];
            log_payload(runlog, "study", L, r, pl);
            if (payload_failed(pl)) continue;
            const double m2 = pl.at("phi_m2").get<double>();
            const double gm2 = pl.at("grad_m2").get<double>();
            m2s.push_back(m2);
            gm2s.push_back(gm2);
            out.rows.push_back(std::to_string(L) + "," + std::to_string(r) + "," + fmt_g(m2) + "," + fmt_g(gm2));
        }
        ojson block;
        block["parameter"] = L;
        block["n_requested"] = cfg.n;
        block["n_samples"] = static_cast<std::int64_t>(m2s.size());
        Moments1 mm = moments_of(m2s);
        block["phi_m2"] = moments_block(mm);
        block["grad_m2"] = moments_block(moments_of(gm2s));
        if (mm.n >= 1 && mm.mean > 0.0) pts.push_back({static_cast<double>(L), mm.mean, mm.se});
        out.parameters.push_back(std::move(block));
    }
    const double log_power = cfg.d == 2 ? 1.0 : 0.0;
    if (pts.size() >= 3) out.fit = fit_block(pts, log_power, "phi_m2_mean");
    return out;
}

StudyOutput run_verify_study(const ExperimentConfig& cfg, std::vector<std::string>& runlog) {
    StudyOutput out;
    out.csv_header = "check,discrepancy,tolerance,pass";
    VerifyReport rep = run_verify(cfg);
    out.checks = ojson::array();
    for (const auto& c : rep.checks) {
        ojson rec;
        rec["name"] = c.name;
        rec["discrepancy"] = num(c.discrepancy);
        rec["tolerance"] = num(c.tolerance);
        rec["pass"] = c.pass;
        out.checks.push_back(rec);
        rec["phase"] = "check";
        runlog.push_back(rec.dump());
        out.rows.push_back(c.name + "," + fmt_g(c.discrepancy) + "," + fmt_g(c.tolerance) + "," +
                           (c.pass ? "1" : "0"));
    }
    out.all_pass = rep.all_pass;
    out.status = rep.all_pass ? 0 : 1;
    return out;
}

std::string sanitize_token(std::string s) {
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' && c != '-') c = '-';
    while (!s.empty() && s.back() == '-') s.pop_back();
    return s;
}

std::string descriptive_csv_name(const ExperimentConfig& cfg) {
    std::string sides;
    for (std::size_t i = 0; i < cfg.sides.size(); ++i) {
        if (i) sides += '-';
        sides += std::to_string(cfg.sides[i]);
    }
    return cfg.study + "_d" + std::to_string(cfg.d) + "_L" + sides + "_N" + std::to_string(cfg.n) + "_" +
           sanitize_token(cfg.law.canonical()) + "_" + sanitize_token(build_id()) + ".csv";
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    for (const auto& l : lines) out << l << '\n';
}

}  // namespace

// ---- law text form ----

ConductanceLaw parse_law(const std::string& text) {
    const std::string s = trim(text);
    const std::size_t lp = s.find('(');
    if (lp == std::string::npos || s.empty() || s.back() != ')')
        throw ConfigError("config: law: expected name(args), got '" + s + "'");
    const std::string name = trim(s.substr(0, lp));
    const std::string inner = s.substr(lp + 1, s.size() - lp - 2);
    std::vector<double> args;
    if (!trim(inner).empty())
        for (const auto& part : split(inner, ',')) args.push_back(parse_double("law", part));
    try {
        if (name == "two_point") {
            if (args.size() != 3) throw ConfigError("config: law: two_point takes (lo,hi,p)");
            return ConductanceLaw::two_point(args[0], args[1], args[2]);
        }
        if (name == "uniform") {
            if (args.size() == 2 && args[1] != 1.0)
                throw ConfigError("config: law: uniform upper endpoint is fixed at 1");
            if (args.empty() || args.size() > 2) throw ConfigError("config: law: uniform takes (lambda)");
            return ConductanceLaw::uniform(args[0]);
        }
        if (name == "scaled_beta") {
            if (args.size() != 3) throw ConfigError("config: law: scaled_beta takes (alpha,beta,lambda)");
            return ConductanceLaw::scaled_beta(args[0], args[1], args[2]);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: law: ") + e.what());
    }
    throw ConfigError("config: law: unknown law '" + name + "'");
}

// ---- configuration ----

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key = value");
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (key == "study") {
        study = value;
    } else if (key == "d") {
        d = parse_int(key, value);
    } else if (key == "L") {
        std::vector<int> parsed;
        for (const auto& part : split(value, ',')) parsed.push_back(parse_int(key, part));
        sides = std::move(parsed);  // assign only after the whole list parses
    } else if (key == "eps") {
        std::vector<double> parsed;
        if (value != "auto")
            for (const auto& part : split(value, ',')) parsed.push_back(parse_double(key, part));
        eps = std::move(parsed);
    } else if (key == "N") {
        n = parse_i64(key, value);
    } else if (key == "law") {
        law = parse_law(value);
    } else if (key == "seed") {
        seed = parse_u64(key, value);
    } else if (key == "tol") {
        solver.tol = parse_double(key, value);
    } else if (key == "max_iter") {
        solver.max_iter = parse_i64(key, value);
    } else if (key == "precond") {
        solver.precond = parse_precond(value);
    } else if (key == "backend") {
        solver.backend = parse_backend(value);
    } else if (key == "tolerance") {
        check_tolerance = parse_double(key, value);
    } else if (key == "abar_ref") {
        abar_ref = value;
    } else if (key == "kind") {
        tf_kind = parse_kind(value);
    } else if (key == "width") {
        tf_width = parse_double(key, value);
    } else if (key == "batches") {
        batches = parse_i64(key, value);
    } else if (key == "workers") {
        workers = parse_int(key, value);
    } else if (key == "out") {
        out = value;
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

void ExperimentConfig::apply_override(const std::string& keyval) {
    const std::size_t eq = keyval.find('=');
    if (eq == std::string::npos) throw ConfigError("config: --set expects key=value, got '" + keyval + "'");
    set(trim(keyval.substr(0, eq)), trim(keyval.substr(eq + 1)));
}

void ExperimentConfig::validate() const {
    const auto& names = study_names();
    if (std::find(names.begin(), names.end(), study) == names.end())
        throw ConfigError("config: study: unknown study '" + study + "'");
    if (d < 1 || d > kMaxDim) throw ConfigError("config: d: must be in [1," + std::to_string(kMaxDim) + "]");
    if (sides.empty()) throw ConfigError("config: L: at least one side required");
    for (int L : sides)
        if (L < 2 || L > 4096) throw ConfigError("config: L: side " + std::to_string(L) + " out of [2,4096]");
    if (!eps.empty() && eps.size() != sides.size())
        throw ConfigError("config: eps: need one value per side (or 'auto')");
    for (double e : eps)
        if (!(e > 0.0) || !std::isfinite(e)) throw ConfigError("config: eps: values must be positive");
    if (n < 1) throw ConfigError("config: N: must be >= 1");
    if (!(solver.tol > 0.0) || !std::isfinite(solver.tol) || solver.tol >= 1.0)
        throw ConfigError("config: tol: must be in (0,1)");
    if (solver.max_iter < 1) throw ConfigError("config: max_iter: must be >= 1");
    if (!(check_tolerance >= 0.0) || !std::isfinite(check_tolerance))
        throw ConfigError("config: tolerance: must be a finite nonnegative number");
    if (abar_ref != "pilot" && abar_ref != "per_realization")
        throw ConfigError("config: abar_ref: expected pilot|per_realization, got '" + abar_ref + "'");
    if (study == "gk" && abar_ref != "pilot")
        throw ConfigError("config: abar_ref: the gk study needs one fixed reference matrix (pilot)");
    if (!(tf_width > 0.0) || !std::isfinite(tf_width)) throw ConfigError("config: width: must be positive");
    if (study == "verify" || study == "clt" || study == "pathwise") {
        for (std::size_t i = 0; i < sides.size(); ++i) {
            const double box = sides[i] * eps_for(i);
            if (4.0 * tf_width > 0.5 * box)
                throw ConfigError("config: width: support 4*width = " + fmt_g(4.0 * tf_width) +
                                  " exceeds half the box side " + fmt_g(box));
        }
    }
    if (batches < 2) throw ConfigError("config: batches: must be >= 2");
    if (workers < 0) throw ConfigError("config: workers: must be >= 0 (0 = auto)");
    if (out.empty()) throw ConfigError("config: out: must not be empty");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::echo() const {
    std::vector<std::pair<std::string, std::string>> e;
    e.emplace_back("study", study);
    e.emplace_back("d", std::to_string(d));
    std::string l;
    for (std::size_t i = 0; i < sides.size(); ++i) {
        if (i) l += ',';
        l += std::to_string(sides[i]);
    }
    e.emplace_back("L", l);
    std::string ep = "auto";
    if (!eps.empty()) {
        ep.clear();
        for (std::size_t i = 0; i < eps.size(); ++i) {
            if (i) ep += ',';
            ep += fmt_g(eps[i]);
        }
    }
    e.emplace_back("eps", ep);
    e.emplace_back("N", std::to_string(n));
    e.emplace_back("law", law.canonical());
    e.emplace_back("seed", std::to_string(seed));
    e.emplace_back("tol", fmt_g(solver.tol));
    e.emplace_back("max_iter", std::to_string(solver.max_iter));
    e.emplace_back("precond", precond_name(solver.precond));
    e.emplace_back("backend", backend_name(solver.backend));
    e.emplace_back("tolerance", fmt_g(check_tolerance));
    e.emplace_back("abar_ref", abar_ref);
    e.emplace_back("kind", kind_name(tf_kind));
    e.emplace_back("width", fmt_g(tf_width));
    e.emplace_back("batches", std::to_string(batches));
    return e;
}

double ExperimentConfig::eps_for(std::size_t side_index) const {
    if (!eps.empty()) return eps[side_index];
    return 1.0 / static_cast<double>(sides[side_index]);
}

// ---- identity suite ----

VerifyReport run_verify(const ExperimentConfig& cfg) {
    cfg.validate();
    VerifyReport rep;
    const int d = cfg.d;
    const int L = cfg.sides.front();
    const double tol = cfg.check_tolerance;
    TorusGrid grid(d, L);

    auto push = [&](const std::string& name, double disc, double gate) {
        CheckResult c{name, disc, gate, disc <= gate};
        rep.all_pass = rep.all_pass && c.pass;
        rep.checks.push_back(std::move(c));
    };

    CounterStream cs = stream_for(SeedSpec{cfg.seed, 0, StreamPurpose::check_pick}, 0, 0);
    auto rand_node = [&] {
        NodeField u(grid);
        for (std::int64_t i = 0; i < grid.nodes; ++i) u[i] = cs.next_normal();
        return u;
    };
    auto rand_edge = [&] {
        EdgeField f(grid);
        for (std::int64_t i = 0; i < f.size(); ++i) f.data()[i] = cs.next_normal();
        return f;
    };
    auto sup_edge = [](const EdgeField& f) {
        double m = 0.0;
        for (std::int64_t i = 0; i < f.size(); ++i) m = std::max(m, std::abs(f.data()[i]));
        return m;
    };

    {
        double worst = 0.0;
        for (int rep4 = 0; rep4 < 4; ++rep4) {
            NodeField u = rand_node();
            EdgeField f = rand_edge();
            EdgeField gu = forward_gradient(u);
            NodeField dv = backward_divergence(f);
            const double lhs = dot(gu, f);
            const double rhs = dot(u, dv);
            const double scale = std::sqrt(dot(gu, gu)) * std::sqrt(dot(f, f)) + 1e-300;
            worst = std::max(worst, std::abs(lhs + rhs) / scale);
        }
        push("summation_by_parts", worst, 1e-2 * tol);
    }

    // constant reference matrix for the projector checks; slightly asymmetric
    // in d >= 2 so the adjoint pairing is not trivially symmetric
    Eigen::MatrixXd A = cfg.law.mean() * Eigen::MatrixXd::Identity(d, d);
    if (d >= 2) {
        A(0, 1) += 0.08 * cfg.law.mean();
        A(1, 0) += 0.03 * cfg.law.mean();
    }

    {
        NodeField u = rand_node();
        EdgeField gu = forward_gradient(u);
        EdgeField rec = helmholtz_project(A, apply_matrix(A, gu));
        double worst = 0.0;
        for (std::int64_t i = 0; i < rec.size(); ++i)
            worst = std::max(worst, std::abs(rec.data()[i] - gu.data()[i]));
        push("helmholtz_gradient_recovery", worst / std::max(1e-300, sup_edge(gu)), 10.0 * tol);
    }

    EdgeField f0 = rand_edge();
    {
        NodeField dv = backward_divergence(apply_matrix(A, leray_project(A, f0)));
        double worst = 0.0;
        for (std::int64_t i = 0; i < grid.nodes; ++i) worst = std::max(worst, std::abs(dv[i]));
        push("leray_divergence_free", worst / std::max(1e-300, sup_edge(f0)), 10.0 * tol);
    }
    {
        // P_L is an honest projection: abar P_L f is divergence free, so the
        // Helmholtz part of a Leray field vanishes and P_L(P_L f) = P_L f
        EdgeField l1 = leray_project(A, f0);
        EdgeField l2 = leray_project(A, l1);
        double worst = 0.0;
        for (std::int64_t i = 0; i < l1.size(); ++i)
            worst = std::max(worst, std::abs(l2.data()[i] - l1.data()[i]));
        push("leray_idempotent", worst / std::max(1.0, sup_edge(l1)), 10.0 * tol);
    }
    {
        EdgeField g0 = rand_edge();
        const double lhs = dot(helmholtz_project(A, f0), g0);
        const double rhs = dot(f0, helmholtz_project_adjoint(A, g0));
        const double scale = std::sqrt(dot(f0, f0)) * std::sqrt(dot(g0, g0)) + 1e-300;
        push("helmholtz_adjoint_pairing", std::abs(lhs - rhs) / scale, 10.0 * tol);
    }

    EdgeField a0 = sample_field(grid, cfg.law, SeedSpec{cfg.seed, 0, StreamPurpose::field_draw});
    {
        CorrectorPack pack = build_corrector_pack(a0, cfg.solver, true);
        double skew = 0.0, divergence = 0.0;
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k) {
                    const NodeField& s = pack.sigma_at(i, j, k);
                    const NodeField& st = pack.sigma_at(i, k, j);
                    for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx)
                        skew = std::max(skew, std::abs(s[nidx] + st[nidx]));
                }
            for (int j = 0; j < d; ++j)
                for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx) {
                    double div = 0.0;
                    for (int k = 0; k < d; ++k) {
                        const NodeField& s = pack.sigma_at(i, j, k);
                        div += s[nidx] - s[grid.neighbor(nidx, k, -1)];
                    }
                    divergence =
                        std::max(divergence, std::abs(div - pack.q[static_cast<std::size_t>(i)].at(nidx, j)));
                }
        }
        push("flux_corrector_skew", skew, 10.0 * tol);
        push("flux_corrector_divergence", divergence, 10.0 * tol);
    }

    {
        double worst = 0.0;
        for (int pick = 0; pick < 20; ++pick) {
            const auto r = static_cast<std::uint64_t>(cs.next_uniform() * 6.0);
            auto node = static_cast<std::int64_t>(cs.next_uniform() * static_cast<double>(grid.nodes));
            node = std::min(node, grid.nodes - 1);
            const int dir = std::min(d - 1, static_cast<int>(cs.next_uniform() * d));
            EdgeField ar = sample_field(grid, cfg.law, SeedSpec{cfg.seed, r, StreamPurpose::field_draw});
            worst = std::max(worst, vertical_derivative_check(
                                        ar, cfg.law, node, dir,
                                        SeedSpec{cfg.seed, 1000 + static_cast<std::uint64_t>(pick),
                                                 StreamPurpose::edge_resample},
                                        cfg.solver));
        }
        push("commutator_vertical_derivative", worst, 100.0 * tol);
    }

    TestFunction fn = TestFunction::vector_bump(d, cfg.tf_kind, cfg.tf_width);
    const double eps0 = cfg.eps_for(0);
    {
        double worst = 0.0;
        for (std::uint64_t r = 0; r < 3; ++r) {
            EdgeField a = sample_field(grid, cfg.law, SeedSpec{cfg.seed, 100 + r, StreamPurpose::field_draw});
            std::vector<NodeField> phi;
            for (int i = 0; i < d; ++i) phi.push_back(solve_corrector(a, i, cfg.solver).first);
            CommutatorField xi = commutator(a, phi, homogenized_coefficient(a, phi));
            FunctionalSample fs = solution_functionals(a, xi, fn, fn, eps0, cfg.solver);
            const double scale = std::max({1.0, std::abs(fs.pathwise_lhs), std::abs(fs.pathwise_rhs)});
            worst = std::max(worst, std::abs(fs.pathwise_lhs - fs.pathwise_rhs) / scale);
        }
        push("pathwise_duality", worst, 100.0 * tol);
    }

    if (d == 1) {
        EdgeField a = sample_field(grid, cfg.law, SeedSpec{cfg.seed, 200, StreamPurpose::field_draw});
        auto [phi, report] = solve_corrector(a, 0, cfg.solver);
        Eigen::MatrixXd abar = homogenized_coefficient(a, {phi});
        double inv_mean = 0.0;
        for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx) inv_mean += 1.0 / a.at(nidx, 0);
        inv_mean /= static_cast<double>(grid.nodes);
        const double hm = 1.0 / inv_mean;
        push("harmonic_mean_oracle", std::abs(abar(0, 0) - hm) / hm, 100.0 * tol);

        CommutatorField xi = commutator(a, {phi}, abar);
        FunctionalSample fs = solution_functionals(a, xi, fn, fn, eps0, cfg.solver);
        // conserved flux: a grad U + h = c with c the a^{-1}-weighted mean of h
        EdgeField fv = sample_vector_function(fn, grid, eps0);
        double numr = 0.0, den = 0.0;
        for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx) {
            numr += eps0 * fv.at(nidx, 0) / a.at(nidx, 0);
            den += 1.0 / a.at(nidx, 0);
        }
        const double c = numr / den;
        double i1 = 0.0;
        for (std::int64_t nidx = 0; nidx < grid.nodes; ++nidx) {
            const double grad = (c - eps0 * fv.at(nidx, 0)) / a.at(nidx, 0);
            i1 += fv.at(nidx, 0) * grad;
        }
        i1 *= std::pow(eps0, 0.5 * d - 1.0);
        push("i1_quadrature_oracle", std::abs(fs.i1_raw - i1) / std::max(1.0, std::abs(i1)), 1e4 * tol);
    }

    return rep;
}

// ---- study driver ----

int run_study(const ExperimentConfig& cfg) {
    cfg.validate();
    const int workers =
        cfg.workers > 0 ? cfg.workers : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    const fs::path outdir(cfg.out);
    Cache cache{outdir / "cache"};
    fs::create_directories(cache.dir);

    ojson cfgecho = ojson::object();
    for (const auto& [k, v] : cfg.echo()) cfgecho[k] = v;

    std::vector<std::string> runlog;
    {
        ojson head;
        head["record"] = "config";
        head["build"] = build_id();
        head["config"] = cfgecho;
        runlog.push_back(head.dump());
    }

    StudyOutput so;
    if (cfg.study == "verify") {
        so = run_verify_study(cfg, runlog);
    } else if (cfg.study == "rve" || cfg.study == "normality") {
        so = run_abar_study(cfg, cache, workers, runlog);
    } else if (cfg.study == "clt") {
        so = run_clt_study(cfg, cache, workers, runlog);
    } else if (cfg.study == "pathwise") {
        so = run_pathwise_study(cfg, cache, workers, runlog);
    } else if (cfg.study == "gk") {
        so = run_gk_study(cfg, cache, workers, runlog);
    } else {
        so = run_moments_study(cfg, cache, workers, runlog);
    }

    ojson summary;
    summary["study"] = cfg.study;
    summary["build"] = build_id();
    summary["config"] = cfgecho;
    if (!so.abar_ref.is_null()) summary["abar_ref"] = so.abar_ref;
    if (cfg.study == "verify") {
        summary["checks"] = so.checks;
        summary["all_pass"] = so.all_pass;
    } else {
        summary["parameters"] = so.parameters;
        if (!so.fit.is_null()) summary["fit"] = so.fit;
    }

    std::vector<std::string> csv;
    csv.reserve(so.rows.size() + 24);
    for (const auto& [k, v] : cfg.echo()) csv.push_back("# " + k + " = " + v);
    csv.push_back("# build = " + build_id());
    csv.push_back(so.csv_header);
    for (auto& row : so.rows) csv.push_back(std::move(row));

    write_lines(outdir / "study.csv", csv);
    write_lines(outdir / descriptive_csv_name(cfg), csv);
    write_lines(outdir / "run.log", runlog);
    {
        std::ofstream sj(outdir / "summary.json", std::ios::binary);
        if (!sj) throw std::runtime_error("cannot write summary.json");
        sj << summary.dump(2) << '\n';
    }
    return so.status;
}

}  // namespace homog
