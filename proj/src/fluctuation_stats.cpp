#include "homog/fluctuation_stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "homog/random_fields.hpp"
#include "spectral.hpp"

namespace homog {

namespace {

void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string(what) + ": non-finite value");
}

double box_side_of(const TorusGrid& grid, double eps) {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("eps must be positive");
    return eps * static_cast<double>(grid.L);
}

void check_support(const TestFunction& fn, double box_side) {
    if (!(fn.width > 0.0) || !std::isfinite(fn.width))
        throw std::invalid_argument("test function width must be positive");
    if (4.0 * fn.width > 0.5 * box_side) {
        char msg[160];
        std::snprintf(msg, sizeof(msg),
                      "test function support radius %.6g exceeds half the box side %.6g",
                      4.0 * fn.width, 0.5 * box_side);
        throw SupportOverflow(msg);
    }
}

void check_center(const TestFunction& fn, int d) {
    if (!fn.center.empty() && static_cast<int>(fn.center.size()) != d)
        throw std::invalid_argument("test function center dimension mismatch");
    for (double c : fn.center) require_finite(c, "test function center");
}

double edge_dot(const EdgeField& x, const EdgeField& y) { return dot(x, y); }

}  // namespace

TestFunction TestFunction::matrix_bump(int d, TestFunctionKind kind, double width) {
    TestFunction fn;
    fn.kind = kind;
    fn.width = width;
    fn.amplitude = Eigen::MatrixXd::Zero(d, d);
    fn.amplitude(0, 0) = 1.0;
    return fn;
}

TestFunction TestFunction::vector_bump(int d, TestFunctionKind kind, double width) {
    TestFunction fn;
    fn.kind = kind;
    fn.width = width;
    fn.amplitude = Eigen::MatrixXd::Zero(d, 1);
    fn.amplitude(0, 0) = 1.0;
    return fn;
}

double TestFunction::profile(const double* x, int d, double box_side) const {
    double t[kMaxDim];
    for (int m = 0; m < d; ++m) {
        double c = center.empty() ? 0.5 * box_side : center[static_cast<std::size_t>(m)];
        t[m] = std::remainder(x[m] - c, box_side);
    }
    switch (kind) {
        case TestFunctionKind::gaussian_bump: {
            double r2 = 0.0;
            for (int m = 0; m < d; ++m) r2 += t[m] * t[m];
            return std::exp(-r2 / (2.0 * width * width));
        }
        case TestFunctionKind::tensor_bump: {
            double prod = 1.0;
            for (int m = 0; m < d; ++m) {
                double s = t[m] / (4.0 * width);
                if (std::abs(s) >= 1.0) return 0.0;
                prod *= std::exp(1.0 - 1.0 / (1.0 - s * s));
            }
            return prod;
        }
        case TestFunctionKind::dipole: {
            double r2 = 0.0;
            for (int m = 0; m < d; ++m) r2 += t[m] * t[m];
            return -(t[0] / width) * std::exp(-r2 / (2.0 * width * width));
        }
    }
    throw std::invalid_argument("unknown test function kind");
}

MatrixField sample_matrix_function(const TestFunction& fn, const TorusGrid& grid, double eps) {
    double side = box_side_of(grid, eps);
    check_center(fn, grid.d);
    check_support(fn, side);
    if (fn.amplitude.rows() != grid.d || fn.amplitude.cols() != grid.d)
        throw std::invalid_argument("matrix test function needs a d x d amplitude");
    if (!fn.amplitude.allFinite()) throw std::invalid_argument("test function amplitude must be finite");
    MatrixField out(grid);
    double x[kMaxDim];
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx) {
        auto c = grid.coords(idx);
        for (int m = 0; m < grid.d; ++m) x[m] = eps * static_cast<double>(c[static_cast<std::size_t>(m)]);
        double p = fn.profile(x, grid.d, side);
        for (int i = 0; i < grid.d; ++i)
            for (int j = 0; j < grid.d; ++j) out.at(idx, i, j) = p * fn.amplitude(i, j);
    }
    return out;
}

EdgeField sample_vector_function(const TestFunction& fn, const TorusGrid& grid, double eps) {
    double side = box_side_of(grid, eps);
    check_center(fn, grid.d);
    check_support(fn, side);
    if (fn.amplitude.rows() != grid.d || fn.amplitude.cols() != 1)
        throw std::invalid_argument("vector test function needs a d x 1 amplitude");
    if (!fn.amplitude.allFinite()) throw std::invalid_argument("test function amplitude must be finite");
    EdgeField out(grid);
    double x[kMaxDim];
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx) {
        auto c = grid.coords(idx);
        for (int m = 0; m < grid.d; ++m) x[m] = eps * static_cast<double>(c[static_cast<std::size_t>(m)]);
        double p = fn.profile(x, grid.d, side);
        for (int m = 0; m < grid.d; ++m) out.at(idx, m) = p * fn.amplitude(m, 0);
    }
    return out;
}

Eigen::MatrixXd Tensor4::pair_matrix() const {
    int dd = d * d;
    Eigen::MatrixXd m(dd, dd);
    for (int p = 0; p < dd; ++p)
        for (int q = 0; q < dd; ++q) m(p, q) = v[static_cast<std::size_t>(p) * dd + q];
    return m;
}

double Tensor4::norm() const {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double j0_functional(const CommutatorField& xi, const MatrixField& F, double eps) {
    const TorusGrid& g = xi.xi.grid();
    if (F.grid() != g) throw std::invalid_argument("j0_functional: grid mismatch");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    int d = g.d;
    double acc = 0.0;
    for (std::int64_t idx = 0; idx < g.nodes; ++idx)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) acc += F.at(idx, i, j) * xi.xi.at(idx, i, j);
    double out = std::pow(eps, 0.5 * d) * acc;
    require_finite(out, "j0_functional");
    return out;
}

double j0_functional(const CommutatorField& xi, const TestFunction& F, double eps) {
    return j0_functional(xi, sample_matrix_function(F, xi.xi.grid(), eps), eps);
}

CorrectorFunctionals corrector_functionals(const CorrectorPack& pack, const Eigen::MatrixXd& abar_ref,
                                           const TestFunction& F, double eps) {
    const TorusGrid& g = pack.a.grid();
    int d = g.d;
    if (abar_ref.rows() != d || abar_ref.cols() != d || !abar_ref.allFinite())
        throw std::invalid_argument("corrector_functionals: abar_ref must be a finite d x d matrix");
    MatrixField FM = sample_matrix_function(F, g, eps);
    double j1 = 0.0, j2 = 0.0;
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) {
        for (int i = 0; i < d; ++i) {
            const NodeField& phi = pack.phi[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
                double gij = phi[g.neighbor(idx, j, +1)] - phi[idx];
                double fij = FM.at(idx, i, j);
                j1 += fij * gij;
                double flux = pack.a.at(idx, j) * (gij + (i == j ? 1.0 : 0.0));
                j2 += fij * (flux - abar_ref(j, i));
            }
        }
    }
    double pref = std::pow(eps, 0.5 * d);
    CorrectorFunctionals out{pref * j1, pref * j2};
    require_finite(out.j1, "corrector_functionals j1");
    require_finite(out.j2, "corrector_functionals j2");
    return out;
}

FunctionalSample solution_functionals(const EdgeField& a, const CommutatorField& xi,
                                      const TestFunction& f, const TestFunction& g, double eps,
                                      const SolveConfig& cfg) {
    const TorusGrid& grid = a.grid();
    if (xi.xi.grid() != grid) throw std::invalid_argument("solution_functionals: grid mismatch");
    int d = grid.d;
    const Eigen::MatrixXd& abar = xi.abar_ref;
    if (abar.rows() != d || abar.cols() != d)
        throw std::invalid_argument("solution_functionals: abar_ref must be d x d");

    EdgeField fvec = sample_vector_function(f, grid, eps);
    EdgeField gvec = sample_vector_function(g, grid, eps);
    EdgeField h(grid), hg(grid);
    for (std::int64_t e = 0; e < h.size(); ++e) {
        h.data()[e] = eps * fvec.data()[e];
        hg.data()[e] = eps * gvec.data()[e];
    }

    auto [U, rep_u] = solve_variable(a, h, cfg);
    auto [Ubar, rep_ubar] = solve_constant(abar, h, grid, cfg);
    auto [Vbar, rep_vbar] = solve_constant(abar.transpose(), hg, grid, cfg);

    EdgeField grad_u = forward_gradient(U);
    EdgeField grad_ubar = forward_gradient(Ubar);
    EdgeField grad_vbar = forward_gradient(Vbar);

    EdgeField a_grad_u(grid);
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx)
        for (int m = 0; m < d; ++m) a_grad_u.at(idx, m) = a.at(idx, m) * grad_u.at(idx, m);
    EdgeField flux_diff = a_grad_u;
    {
        EdgeField abar_grad_u = apply_matrix(abar, grad_u);
        for (std::int64_t e = 0; e < flux_diff.size(); ++e) flux_diff.data()[e] -= abar_grad_u.data()[e];
    }
    EdgeField grad_w = grad_u;
    for (std::int64_t e = 0; e < grad_w.size(); ++e) grad_w.data()[e] -= grad_ubar.data()[e];

    double pref1 = std::pow(eps, 0.5 * d - 1.0);
    double pref2 = std::pow(eps, 0.5 * d - 2.0);

    FunctionalSample out;
    out.eps = eps;
    out.i1_raw = pref1 * edge_dot(gvec, grad_u);
    out.i2_raw = pref1 * edge_dot(gvec, a_grad_u);
    out.e0_flux_raw = pref1 * edge_dot(gvec, flux_diff);
    out.pathwise_lhs = pref1 * edge_dot(gvec, grad_w);
    out.pathwise_rhs = pref2 * edge_dot(grad_vbar, flux_diff);
    double comm = 0.0;
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                comm += gvec.at(idx, j) * xi.xi.at(idx, i, j) * grad_ubar.at(idx, i);
    out.e0_comm_raw = pref1 * comm;
    out.reports = {rep_u, rep_ubar, rep_vbar};
    require_finite(out.i1_raw, "i1_raw");
    require_finite(out.i2_raw, "i2_raw");
    require_finite(out.e0_flux_raw, "e0_flux_raw");
    require_finite(out.e0_comm_raw, "e0_comm_raw");
    require_finite(out.pathwise_lhs, "pathwise_lhs");
    require_finite(out.pathwise_rhs, "pathwise_rhs");
    return out;
}

RveEstimate rve_statistics(const std::vector<Eigen::MatrixXd>& abar_samples, int d, int L) {
    std::int64_t n = static_cast<std::int64_t>(abar_samples.size());
    if (n < 2) throw InsufficientSamples("rve_statistics needs at least 2 samples");
    if (d < 1 || d > kMaxDim || L < 1) throw std::invalid_argument("rve_statistics: bad dimensions");
    for (const auto& s : abar_samples)
        if (s.rows() != d || s.cols() != d || !s.allFinite())
            throw std::invalid_argument("rve_statistics: samples must be finite d x d matrices");

    double nd = static_cast<double>(n);
    double Ld = std::pow(static_cast<double>(L), d);

    Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(d, d);
    for (const auto& s : abar_samples) s1 += s;
    Eigen::MatrixXd mean = s1 / nd;

    RveEstimate out;
    out.d = d;
    out.L = L;
    out.n_requested = n;
    out.n_samples = n;
    out.abar_mean = mean;
    out.q = Tensor4(d);
    out.q_se = Tensor4(d);

    for (const auto& s : abar_samples) {
        Eigen::MatrixXd dev = s - mean;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    for (int l = 0; l < d; ++l) out.q.at(i, j, k, l) += dev(j, i) * dev(l, k);
    }
    for (double& x : out.q.v) x *= Ld / (nd - 1.0);

    // sums for the leave-one-out shortcut below
    Tensor4 s2(d);
    for (const auto& s : abar_samples)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    for (int l = 0; l < d; ++l) s2.at(i, j, k, l) += s(j, i) * s(l, k);

    // jackknife standard errors; for the mean this reduces to s/sqrt(n)
    out.abar_se = Eigen::MatrixXd::Zero(d, d);
    {
        Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
        for (const auto& s : abar_samples) {
            Eigen::MatrixXd loo = (s1 - s) / (nd - 1.0);
            Eigen::MatrixXd dev = loo - mean;  // jackknife mean of leave-one-out means is the mean
            acc += dev.cwiseProduct(dev);
        }
        out.abar_se = ((nd - 1.0) / nd * acc).cwiseSqrt();
    }

    if (n < 3) {
        std::fill(out.q_se.v.begin(), out.q_se.v.end(), std::numeric_limits<double>::quiet_NaN());
        return out;
    }
    auto loo_q = [&](std::int64_t r, Tensor4& q) {
        const Eigen::MatrixXd& s = abar_samples[static_cast<std::size_t>(r)];
        Eigen::MatrixXd m = (s1 - s) / (nd - 1.0);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    for (int l = 0; l < d; ++l)
                        q.at(i, j, k, l) = Ld / (nd - 2.0) *
                                           (s2.at(i, j, k, l) - s(j, i) * s(l, k) -
                                            (nd - 1.0) * m(j, i) * m(l, k));
    };
    Tensor4 mean_q(d), tmp(d);
    for (std::int64_t r = 0; r < n; ++r) {
        loo_q(r, tmp);
        for (std::size_t e = 0; e < tmp.v.size(); ++e) mean_q.v[e] += tmp.v[e];
    }
    for (double& x : mean_q.v) x /= nd;
    Tensor4 acc(d);
    for (std::int64_t r = 0; r < n; ++r) {
        loo_q(r, tmp);
        for (std::size_t e = 0; e < tmp.v.size(); ++e) {
            double dev = tmp.v[e] - mean_q.v[e];
            acc.v[e] += dev * dev;
        }
    }
    for (std::size_t e = 0; e < acc.v.size(); ++e)
        out.q_se.v[e] = std::sqrt((nd - 1.0) / nd * acc.v[e]);
    return out;
}

RveEstimate rve_estimate(int d, int L, std::int64_t N, const ConductanceLaw& law,
                         std::uint64_t master_seed, const SolveConfig& cfg) {
    if (N < 2) throw std::invalid_argument("rve_estimate needs N >= 2");
    TorusGrid grid(d, L);
    std::vector<Eigen::MatrixXd> samples;
    samples.reserve(static_cast<std::size_t>(N));
    for (std::int64_t n = 0; n < N; ++n) {
        EdgeField a = sample_field(grid, law, SeedSpec{master_seed, static_cast<std::uint64_t>(n),
                                                       StreamPurpose::field_draw});
        try {
            std::vector<NodeField> phi;
            phi.reserve(static_cast<std::size_t>(d));
            for (int i = 0; i < d; ++i) phi.push_back(solve_corrector(a, i, cfg).first);
            samples.push_back(homogenized_coefficient(a, phi));
        } catch (const NonConvergence&) {
            continue;
        }
    }
    RveEstimate out = rve_statistics(samples, d, L);
    out.n_requested = N;
    out.n_samples = static_cast<std::int64_t>(samples.size());
    out.master_seed = master_seed;
    out.law = law.canonical();
    return out;
}

GreenKuboAccumulator::GreenKuboAccumulator(const TorusGrid& grid, int L, std::int64_t batch_size)
    : grid_(grid), L_(L), batch_size_(batch_size) {
    if (L < 1 || grid.L != 2 * L)
        throw std::invalid_argument("green_kubo: torus side must be 2L");
    if (batch_size < 2) throw std::invalid_argument("green_kubo: batch size must be >= 2");
    int d = grid.d;
    std::vector<std::complex<double>> w(static_cast<std::size_t>(grid.nodes));
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx) {
        auto c = grid.coords(idx);
        double prod = 1.0;
        for (int m = 0; m < d; ++m) {
            int x = c[static_cast<std::size_t>(m)];
            if (x >= L) x -= 2 * L;  // wrapped signed displacement in [-L, L)
            prod *= std::max(0.0, 1.0 - std::abs(static_cast<double>(x)) / static_cast<double>(L));
        }
        w[static_cast<std::size_t>(idx)] = prod;
    }
    spectral::dft(grid, w.data(), -1);
    weight_hat_ = std::move(w);
}

GreenKuboSample GreenKuboAccumulator::sample(const MatrixField& xi) const {
    if (xi.grid() != grid_) throw std::invalid_argument("green_kubo: grid mismatch");
    int d = grid_.d;
    std::size_t nodes = static_cast<std::size_t>(grid_.nodes);
    std::size_t comps = static_cast<std::size_t>(d) * d;
    std::vector<std::complex<double>> hat(comps * nodes);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            std::size_t p = static_cast<std::size_t>(i) * d + j;
            std::complex<double>* buf = hat.data() + p * nodes;
            const double* src = xi.plane(i, j);
            for (std::size_t k = 0; k < nodes; ++k) buf[k] = src[k];
            spectral::dft(grid_, buf, -1);
        }
    GreenKuboSample s;
    s.t.assign(comps * comps, 0.0);
    s.mean_xi = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) s.mean_xi(i, j) = xi.component_mean(i, j);
    double inv = 1.0 / (static_cast<double>(grid_.nodes) * static_cast<double>(grid_.nodes));
    for (std::size_t p = 0; p < comps; ++p)
        for (std::size_t q = 0; q < comps; ++q) {
            const std::complex<double>* fp = hat.data() + p * nodes;
            const std::complex<double>* fq = hat.data() + q * nodes;
            double acc = 0.0;
            for (std::size_t k = 0; k < nodes; ++k)
                acc += std::real(std::conj(weight_hat_[k]) * fp[k] * std::conj(fq[k]));
            s.t[p * comps + q] = inv * acc;
        }
    return s;
}

void GreenKuboAccumulator::add(const GreenKuboSample& s) {
    std::size_t comps = static_cast<std::size_t>(grid_.d) * grid_.d;
    if (s.t.size() != comps * comps || s.mean_xi.rows() != grid_.d || s.mean_xi.cols() != grid_.d)
        throw std::invalid_argument("green_kubo: sample shape mismatch");
    pending_.push_back(s);
    ++added_;
    if (static_cast<std::int64_t>(pending_.size()) == batch_size_) flush_batch();
}

void GreenKuboAccumulator::flush_batch() {
    int d = grid_.d;
    std::size_t comps = static_cast<std::size_t>(d) * d;
    double M = static_cast<double>(pending_.size());
    double W = std::pow(static_cast<double>(L_), d);  // total hat-window mass
    Eigen::MatrixXd cbar = Eigen::MatrixXd::Zero(d, d);
    for (const GreenKuboSample& s : pending_) cbar += s.mean_xi;
    cbar /= M;
    Tensor4 batch(d);
    for (std::size_t p = 0; p < comps; ++p)
        for (std::size_t q = 0; q < comps; ++q) {
            double tsum = 0.0;
            for (const GreenKuboSample& s : pending_) tsum += s.t[p * comps + q];
            double cp = cbar(static_cast<int>(p) / d, static_cast<int>(p) % d);
            double cq = cbar(static_cast<int>(q) / d, static_cast<int>(q) % d);
            batch.v[p * comps + q] = (tsum - W * M * cp * cq) / (M - 1.0);
        }
    batches_.push_back(batch);
    pending_.clear();
}

Tensor4 GreenKuboAccumulator::estimate() const {
    if (batches_.empty()) throw InsufficientSamples("green_kubo: no completed batch");
    Tensor4 out(grid_.d);
    for (const Tensor4& b : batches_)
        for (std::size_t e = 0; e < out.v.size(); ++e) out.v[e] += b.v[e];
    double nb = static_cast<double>(batches_.size());
    for (double& x : out.v) x /= nb;
    return out;
}

Tensor4 GreenKuboAccumulator::standard_error() const {
    if (batches_.size() < 2) throw InsufficientSamples("green_kubo: need >= 2 batches for errors");
    Tensor4 mean = estimate();
    Tensor4 out(grid_.d);
    double nb = static_cast<double>(batches_.size());
    for (const Tensor4& b : batches_)
        for (std::size_t e = 0; e < out.v.size(); ++e) {
            double dev = b.v[e] - mean.v[e];
            out.v[e] += dev * dev;
        }
    for (double& x : out.v) x = std::sqrt(x / (nb - 1.0) / nb);
    return out;
}

Tensor4 green_kubo_window(const std::vector<MatrixField>& xis, int L) {
    if (xis.size() < 2) throw InsufficientSamples("green_kubo needs at least 2 realizations");
    GreenKuboAccumulator acc(xis.front().grid(), L, static_cast<std::int64_t>(xis.size()));
    for (const MatrixField& xi : xis) acc.add(xi);
    return acc.estimate();
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must be in (0,1)");
    // Acklam's rational approximation
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                               1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                               6.680131188771972e+01,  -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                               -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static const double e[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                               3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1.0 - plow;
    double x;
    if (p < plow) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((e[0] * q + e[1]) * q + e[2]) * q + e[3]) * q + 1.0);
    } else if (p <= phigh) {
        double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((e[0] * q + e[1]) * q + e[2]) * q + e[3]) * q + 1.0);
    }
    // one Halley step against the exact CDF
    double err = normal_cdf(x) - p;
    double u = err * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    x = x - u / (1.0 + 0.5 * x * u);
    return x;
}

NormalityMetrics normality_metrics(const std::vector<double>& samples) {
    std::size_t n = samples.size();
    if (n < 100) throw InsufficientSamples("normality_metrics needs at least 100 samples");
    double mean = 0.0;
    for (double s : samples) {
        require_finite(s, "normality_metrics sample");
        mean += s;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(n - 1);
    if (!(var > 0.0)) throw DegenerateSample("normality_metrics: zero sample variance");
    double sd = std::sqrt(var);

    std::vector<double> z(samples);
    for (double& s : z) s = (s - mean) / sd;
    std::sort(z.begin(), z.end());

    NormalityMetrics out;
    for (std::size_t k = 0; k < n; ++k) {
        double cdf = normal_cdf(z[k]);
        double hi = static_cast<double>(k + 1) / static_cast<double>(n) - cdf;
        double lo = cdf - static_cast<double>(k) / static_cast<double>(n);
        out.kolmogorov = std::max(out.kolmogorov, std::max(hi, lo));
        double quant = normal_quantile((static_cast<double>(k) + 0.5) / static_cast<double>(n));
        out.wasserstein1 += std::abs(z[k] - quant);
    }
    out.wasserstein1 /= static_cast<double>(n);
    return out;
}

ScalingFit scaling_fit(std::vector<ScalingPoint> points, double log_power) {
    if (points.size() < 3) throw InsufficientPoints("scaling_fit needs at least 3 points");
    bool weighted = true;
    for (const ScalingPoint& p : points) {
        if (!(p.parameter > 0.0) || !(p.statistic > 0.0))
            throw std::invalid_argument("scaling_fit: parameters and statistics must be positive");
        if (!(p.error > 0.0)) weighted = false;
    }
    std::size_t n = points.size();
    std::vector<double> x(n), y(n), w(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double corr = std::pow(std::log(2.0 + points[i].parameter), log_power);
        x[i] = std::log(points[i].parameter);
        y[i] = std::log(points[i].statistic / corr);
        if (weighted) {
            double sigma = points[i].error / points[i].statistic;  // log-space error
            w[i] = 1.0 / (sigma * sigma);
        }
    }
    double W = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        W += w[i];
        sx += w[i] * x[i];
        sy += w[i] * y[i];
        sxx += w[i] * x[i] * x[i];
        sxy += w[i] * x[i] * y[i];
    }
    double denom = W * sxx - sx * sx;
    if (!(denom > 1e-12 * W * sxx))
        throw std::invalid_argument("scaling_fit: degenerate abscissae");
    ScalingFit fit;
    fit.slope = (W * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / W;
    if (weighted) {
        fit.slope_stderr = std::sqrt(W / denom);
    } else {
        double rss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double r = y[i] - (fit.intercept + fit.slope * x[i]);
            rss += r * r;
        }
        double s2 = rss / (n > 2 ? static_cast<double>(n - 2) : 1.0);
        fit.slope_stderr = std::sqrt(s2 * W / denom);  // W = n here
    }
    return fit;
}

}  // namespace homog
