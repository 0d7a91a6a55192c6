#include "spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <utility>

#include <Eigen/Eigenvalues>

#include "homog/elliptic_solver.hpp"

namespace homog::spectral {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Plans are process-lived and keyed by geometry; creation is serialized because
// FFTW's planner is not thread safe (execution on distinct buffers is).
struct PlanPair {
    fftw_plan forward = nullptr;
    fftw_plan backward = nullptr;
};

PlanPair plans_for(const TorusGrid& grid) {
    static std::map<std::pair<int, int>, PlanPair> registry;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    const auto key = std::make_pair(grid.d, grid.L);
    auto it = registry.find(key);
    if (it != registry.end()) return it->second;

    std::vector<std::complex<double>> scratch(static_cast<std::size_t>(grid.nodes));
    auto* raw = reinterpret_cast<fftw_complex*>(scratch.data());
    int n[kMaxDim];
    for (int j = 0; j < grid.d; ++j) n[j] = grid.L;
    PlanPair p;
    // FFTW_ESTIMATE keeps planning deterministic; FFTW_UNALIGNED lets the same
    // plan run on any heap buffer via the new-array interface.
    p.forward = fftw_plan_dft(grid.d, n, raw, raw, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    p.backward = fftw_plan_dft(grid.d, n, raw, raw, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (p.forward == nullptr || p.backward == nullptr) throw std::runtime_error("fftw plan creation failed");
    registry.emplace(key, p);
    return p;
}

// Walks frequencies in node order, handing the per-axis symbols m_j(k) and the
// scalar symbol S(k) to the visitor. S is real for symmetric abar but kept
// complex so transposed (adjoint) calls are uniform.
template <typename Visit>
void for_each_frequency(const TorusGrid& grid, const Eigen::MatrixXd& abar, Visit&& visit) {
    const auto mtab = axis_symbols(grid.L);
    int k[kMaxDim] = {0, 0, 0, 0};
    std::complex<double> m[kMaxDim];
    for (int j = 0; j < grid.d; ++j) m[j] = mtab[0];
    for (std::int64_t idx = 0; idx < grid.nodes; ++idx) {
        std::complex<double> s{0.0, 0.0};
        for (int j = 0; j < grid.d; ++j)
            for (int l = 0; l < grid.d; ++l) s += std::conj(m[j]) * abar(j, l) * m[l];
        visit(idx, m, s);
        for (int j = grid.d - 1; j >= 0; --j) {
            if (++k[j] < grid.L) {
                m[j] = mtab[static_cast<std::size_t>(k[j])];
                break;
            }
            k[j] = 0;
            m[j] = mtab[0];
        }
    }
}

std::vector<std::complex<double>> forward_plane(const TorusGrid& grid, const double* plane) {
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(grid.nodes));
    for (std::int64_t i = 0; i < grid.nodes; ++i) buf[static_cast<std::size_t>(i)] = plane[i];
    dft(grid, buf.data(), -1);
    return buf;
}

void backward_into(const TorusGrid& grid, std::vector<std::complex<double>>& buf, double* out) {
    dft(grid, buf.data(), +1);
    const double scale = 1.0 / static_cast<double>(grid.nodes);
    for (std::int64_t i = 0; i < grid.nodes; ++i) out[i] = buf[static_cast<std::size_t>(i)].real() * scale;
}

}  // namespace

void dft(const TorusGrid& grid, std::complex<double>* buf, int sign) {
    const PlanPair p = plans_for(grid);
    auto* raw = reinterpret_cast<fftw_complex*>(buf);
    fftw_execute_dft(sign < 0 ? p.forward : p.backward, raw, raw);
}

std::vector<std::complex<double>> axis_symbols(int L) {
    std::vector<std::complex<double>> m(static_cast<std::size_t>(L));
    for (int k = 0; k < L; ++k) {
        const double t = kTwoPi * static_cast<double>(k) / static_cast<double>(L);
        m[static_cast<std::size_t>(k)] = std::complex<double>(std::cos(t) - 1.0, std::sin(t));
    }
    return m;
}

void require_positive_definite(const Eigen::MatrixXd& abar) {
    if (abar.rows() != abar.cols() || abar.rows() < 1) throw SingularSymbol("coefficient matrix must be square");
    if (!abar.allFinite()) throw SingularSymbol("coefficient matrix has non-finite entries");
    const Eigen::MatrixXd sym = 0.5 * (abar + abar.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0)
        throw SingularSymbol("coefficient matrix is not positive definite");
}

NodeField solve_constant(const Eigen::MatrixXd& abar, const EdgeField& h) {
    const TorusGrid grid = h.grid();
    require_positive_definite(abar);
    if (abar.rows() != grid.d) throw std::invalid_argument("coefficient matrix dimension mismatch");

    std::vector<std::complex<double>> num(static_cast<std::size_t>(grid.nodes), {0.0, 0.0});
    std::vector<std::vector<std::complex<double>>> hhat;
    hhat.reserve(static_cast<std::size_t>(grid.d));
    for (int j = 0; j < grid.d; ++j) hhat.push_back(forward_plane(grid, h.plane(j)));

    // -div*(abar grad u) = div*(h)  =>  S(k) u^(k) = -sum_j conj(m_j) h_j^(k), u^(0) = 0.
    for_each_frequency(grid, abar, [&](std::int64_t idx, const std::complex<double>* m, std::complex<double> s) {
        if (idx == 0) {
            num[0] = {0.0, 0.0};
            return;
        }
        std::complex<double> acc{0.0, 0.0};
        for (int j = 0; j < grid.d; ++j) acc += std::conj(m[j]) * hhat[static_cast<std::size_t>(j)][static_cast<std::size_t>(idx)];
        num[static_cast<std::size_t>(idx)] = -acc / s;
    });

    NodeField u(grid);
    backward_into(grid, num, u.data());
    u.shift_to_mean_zero();
    return u;
}

NodeField poisson_solve(const Eigen::MatrixXd& abar, const NodeField& r) {
    const TorusGrid grid = r.grid();
    std::vector<std::complex<double>> buf = forward_plane(grid, r.data());
    for_each_frequency(grid, abar, [&](std::int64_t idx, const std::complex<double>*, std::complex<double> s) {
        if (idx == 0)
            buf[0] = {0.0, 0.0};
        else
            buf[static_cast<std::size_t>(idx)] /= s;
    });
    NodeField z(grid);
    backward_into(grid, buf, z.data());
    return z;
}

EdgeField helmholtz(const Eigen::MatrixXd& abar, const EdgeField& f) {
    const TorusGrid grid = f.grid();
    require_positive_definite(abar);
    if (abar.rows() != grid.d) throw std::invalid_argument("coefficient matrix dimension mismatch");

    // w solves div*(abar grad w) = div*(f); the projection is grad w, i.e.
    // w^(k) = sum_j conj(m_j) f_j^(k) / S(k), then component l gets m_l w^.
    std::vector<std::complex<double>> what(static_cast<std::size_t>(grid.nodes), {0.0, 0.0});
    std::vector<std::vector<std::complex<double>>> fhat;
    fhat.reserve(static_cast<std::size_t>(grid.d));
    for (int j = 0; j < grid.d; ++j) fhat.push_back(forward_plane(grid, f.plane(j)));
    for_each_frequency(grid, abar, [&](std::int64_t idx, const std::complex<double>* m, std::complex<double> s) {
        if (idx == 0) return;
        std::complex<double> acc{0.0, 0.0};
        for (int j = 0; j < grid.d; ++j) acc += std::conj(m[j]) * fhat[static_cast<std::size_t>(j)][static_cast<std::size_t>(idx)];
        what[static_cast<std::size_t>(idx)] = acc / s;
    });

    EdgeField out(grid);
    const auto mtab = axis_symbols(grid.L);
    for (int l = 0; l < grid.d; ++l) {
        std::vector<std::complex<double>> comp(static_cast<std::size_t>(grid.nodes));
        const std::int64_t stride = grid.stride[l];
        for (std::int64_t idx = 0; idx < grid.nodes; ++idx) {
            const int kl = static_cast<int>((idx / stride) % grid.L);
            comp[static_cast<std::size_t>(idx)] = mtab[static_cast<std::size_t>(kl)] * what[static_cast<std::size_t>(idx)];
        }
        backward_into(grid, comp, out.plane(l));
    }
    return out;
}

}  // namespace homog::spectral
