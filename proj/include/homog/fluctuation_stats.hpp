#pragma once

#include "homog/correctors.hpp"

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace homog {

class SupportOverflow : public std::runtime_error {
public:
    explicit SupportOverflow(const std::string& what) : std::runtime_error(what) {}
};

class InsufficientSamples : public std::runtime_error {
public:
    explicit InsufficientSamples(const std::string& what) : std::runtime_error(what) {}
};

class DegenerateSample : public std::runtime_error {
public:
    explicit DegenerateSample(const std::string& what) : std::runtime_error(what) {}
};

class InsufficientPoints : public std::runtime_error {
public:
    explicit InsufficientPoints(const std::string& what) : std::runtime_error(what) {}
};

enum class TestFunctionKind { gaussian_bump, tensor_bump, dipole };

// Smooth test function on the macroscopic box [0, L*eps)^d.  The amplitude is
// a d x d matrix for matrix-valued functions F and a d x 1 column for vector
// valued f, g.  An empty center means "box midpoint", resolved when sampling.
// All kinds decay to numerical zero outside a ball of radius 4*width.
struct TestFunction {
    TestFunctionKind kind = TestFunctionKind::gaussian_bump;
    std::vector<double> center;
    double width = 0.125;
    Eigen::MatrixXd amplitude;

    static TestFunction matrix_bump(int d, TestFunctionKind kind = TestFunctionKind::gaussian_bump,
                                    double width = 0.125);
    static TestFunction vector_bump(int d, TestFunctionKind kind = TestFunctionKind::gaussian_bump,
                                    double width = 0.125);

    // scalar profile at macroscopic point x (d entries), displacements wrapped
    // to the box of side box_side
    double profile(const double* x, int d, double box_side) const;
};

// sample the scalar profile times amplitude at the nodes eps*x of the grid;
// throws SupportOverflow when 4*width exceeds half the box side L*eps
MatrixField sample_matrix_function(const TestFunction& fn, const TorusGrid& grid, double eps);
EdgeField sample_vector_function(const TestFunction& fn, const TorusGrid& grid, double eps);

// symmetric rank-4 tensor indexed ((i*d+j)*d+k)*d+l
struct Tensor4 {
    int d = 0;
    std::vector<double> v;

    Tensor4() = default;
    explicit Tensor4(int dim) : d(dim), v(static_cast<std::size_t>(dim) * dim * dim * dim, 0.0) {}
    double& at(int i, int j, int k, int l) { return v[idx(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return v[idx(i, j, k, l)]; }
    std::size_t idx(int i, int j, int k, int l) const {
        return static_cast<std::size_t>(((i * d + j) * d + k)) * d + l;
    }
    // reshape to the (d*d) x (d*d) matrix of the induced quadratic form on
    // d x d matrices
    Eigen::MatrixXd pair_matrix() const;
    double norm() const;   // Frobenius
};

struct FunctionalSample {
    std::int64_t realization = 0;
    double eps = 0.0;
    double j0 = 0.0;
    double j1 = 0.0;
    double j2 = 0.0;
    double i1_raw = 0.0;
    double i2_raw = 0.0;
    // two-scale expansion error pieces:  E0 = (e0_flux_raw - mean over the
    // study of e0_flux_raw) - e0_comm_raw
    double e0_flux_raw = 0.0;
    double e0_comm_raw = 0.0;
    // both sides of the per-realization duality identity
    double pathwise_lhs = 0.0;
    double pathwise_rhs = 0.0;
    std::vector<SolveReport> reports;
};

// J0 = eps^{d/2} sum_x F(eps x) : Xi(x)
double j0_functional(const CommutatorField& xi, const TestFunction& F, double eps);
// raw contraction against an already sampled matrix field (no support check)
double j0_functional(const CommutatorField& xi, const MatrixField& F, double eps);

struct CorrectorFunctionals {
    double j1 = 0.0;
    double j2 = 0.0;
};

// J1 = eps^{d/2} sum F(eps x) : grad phi(x),
// J2 = eps^{d/2} sum F(eps x) : (a(grad phi + Id) - abar_ref)
CorrectorFunctionals corrector_functionals(const CorrectorPack& pack, const Eigen::MatrixXd& abar_ref,
                                           const TestFunction& F, double eps);

// Solves -div* a grad U = div*(eps f_eps) and the constant-coefficient
// problems for abar_ref (and its transpose, with data g) and evaluates the
// raw solution functionals
//   i1_raw = eps^{d/2-1} <g_eps, grad U>
//   i2_raw = eps^{d/2-1} <g_eps, a grad U>
//   e0_flux_raw = eps^{d/2-1} <g_eps, (a - abar_ref) grad U>
//   e0_comm_raw = eps^{d/2-1} sum_x g_j(eps x) Xi_ij(x) grad_i Ubar(x)
//   pathwise_lhs = eps^{d/2-1} <g_eps, grad(U - Ubar)>
//   pathwise_rhs = eps^{d/2-2} <grad Vbar, (a - abar_ref) grad U>
// Centering across realizations is the caller's job.  xi must be built from
// the same a; its abar_ref is used for the constant-coefficient solves.
FunctionalSample solution_functionals(const EdgeField& a, const CommutatorField& xi,
                                      const TestFunction& f, const TestFunction& g, double eps,
                                      const SolveConfig& cfg = {});

struct RveEstimate {
    int d = 0;
    int L = 0;
    std::int64_t n_requested = 0;
    std::int64_t n_samples = 0;           // realizations that converged
    std::uint64_t master_seed = 0;
    std::string law;
    Eigen::MatrixXd abar_mean;            // sample mean of abar_L
    Eigen::MatrixXd abar_se;              // jackknife standard error, per entry
    Tensor4 q;                            // L^d * Bessel sample covariance of abar_L^T
    Tensor4 q_se;                         // jackknife standard error, per entry
};

// pure statistics from per-realization homogenized coefficients
RveEstimate rve_statistics(const std::vector<Eigen::MatrixXd>& abar_samples, int d, int L);

// runs N corrector pipelines (serially) and aggregates; realizations whose
// solves do not converge are skipped and n_samples reports the survivors
RveEstimate rve_estimate(int d, int L, std::int64_t N, const ConductanceLaw& law,
                         std::uint64_t master_seed, const SolveConfig& cfg = {});

// per-realization contribution: windowed raw cross-correlations (d^4 values,
// same index layout as Tensor4) plus the spatial mean of Xi
struct GreenKuboSample {
    std::vector<double> t;
    Eigen::MatrixXd mean_xi;
};

// Windowed covariance estimator of the fluctuation tensor from commutator
// fields on a torus of side 2L: sum over lags x of the cube-overlap weight
// prod_m max(0, 1 - |x_m|/L) times the sample covariance of (Xi(y+x), Xi(y)),
// averaged over base points y.  By stationarity the mean of Xi is constant in
// space, so the covariance subtracts the batch average of the per-realization
// spatial means.  Cross-correlations are computed spectrally.  Batches of
// realizations give independent estimates; estimate() averages the completed
// batches and standard_error() needs at least two of them.
class GreenKuboAccumulator {
public:
    GreenKuboAccumulator(const TorusGrid& grid, int L, std::int64_t batch_size);

    GreenKuboSample sample(const MatrixField& xi) const;
    void add(const GreenKuboSample& s);
    void add(const MatrixField& xi) { add(sample(xi)); }
    std::int64_t count() const { return added_; }
    std::int64_t completed_batches() const { return static_cast<std::int64_t>(batches_.size()); }
    Tensor4 estimate() const;
    Tensor4 standard_error() const;

private:
    void flush_batch();

    TorusGrid grid_;
    int L_ = 0;
    std::int64_t batch_size_ = 0;
    std::int64_t added_ = 0;
    std::vector<std::complex<double>> weight_hat_;
    std::vector<GreenKuboSample> pending_;
    std::vector<Tensor4> batches_;
};

// single batch over all realizations (point estimate only)
Tensor4 green_kubo_window(const std::vector<MatrixField>& xis, int L);

struct NormalityMetrics {
    double kolmogorov = 0.0;
    double wasserstein1 = 0.0;
};

// distances between the standardized empirical law and a standard normal
NormalityMetrics normality_metrics(const std::vector<double>& samples);

// inverse standard normal CDF (Acklam's rational approximation + one Halley
// correction step; |relative error| < 1e-9 over (0,1))
double normal_quantile(double p);
double normal_cdf(double z);

struct ScalingPoint {
    double parameter = 0.0;
    double statistic = 0.0;
    double error = 0.0;    // Monte Carlo error; nonpositive disables weighting
};

struct ScalingFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
};

// weighted least squares of log(statistic) on log(parameter); the optional
// correction log(2+parameter)^log_power is divided out of the statistic
// (and its error) before fitting
ScalingFit scaling_fit(std::vector<ScalingPoint> points, double log_power = 0.0);

struct StudyResult {
    std::vector<ScalingPoint> points;
    ScalingFit fit;
};

}  // namespace homog
