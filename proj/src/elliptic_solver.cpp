#include "homog/elliptic_solver.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "spectral.hpp"

namespace homog {

namespace {

double norm2(const NodeField& v) { return std::sqrt(dot(v, v)); }

const char* precond_name(Preconditioner p) {
    switch (p) {
        case Preconditioner::none: return "cg:none";
        case Preconditioner::jacobi: return "cg:jacobi";
        case Preconditioner::constant_coefficient: return "cg:constant_coefficient";
    }
    return "cg";
}

using Apply = std::function<NodeField(const NodeField&)>;
using Precondition = std::function<NodeField(const NodeField&)>;

// Preconditioned CG on the mean-zero subspace. The operator maps mean-zero to
// mean-zero exactly (its range consists of discrete divergences), so only the
// preconditioner output needs re-projection. Convergence is certified against
// the true residual, not the recursion residual.
std::pair<NodeField, SolveReport> cg_solve(const TorusGrid& grid, const Apply& apply,
                                           const Precondition& precondition, const NodeField& b,
                                           const SolveConfig& cfg, const NodeField* guess,
                                           const char* backend) {
    if (cfg.tol <= 0.0) throw std::invalid_argument("solver tolerance must be positive");
    if (cfg.max_iter < 1) throw std::invalid_argument("max iterations must be at least 1");

    const double normb = norm2(b);
    SolveReport report;
    report.backend = backend;
    NodeField x(grid);
    if (normb == 0.0) return {std::move(x), report};

    if (guess != nullptr) {
        if (guess->grid() != grid) throw std::invalid_argument("initial guess lives on the wrong grid");
        x = *guess;
        x.shift_to_mean_zero();
    }

    NodeField r(grid);
    {
        NodeField ax = apply(x);
        for (std::int64_t i = 0; i < grid.nodes; ++i) r.data()[i] = b.data()[i] - ax.data()[i];
    }
    const double res0 = norm2(r);
    if (res0 <= cfg.tol * normb) {  // warm start already converged
        x.shift_to_mean_zero();
        report.relative_residual = res0 / normb;
        return {std::move(x), report};
    }
    NodeField z = precondition(r);
    z.shift_to_mean_zero();
    NodeField p = z;
    double rz = dot(r, z);

    NodeField best = x;
    double best_res = norm2(r);

    for (std::int64_t iter = 1; iter <= cfg.max_iter; ++iter) {
        NodeField ap = apply(p);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) break;  // loss of positivity: bail out with the best iterate
        const double alpha = rz / pap;
        for (std::int64_t i = 0; i < grid.nodes; ++i) {
            x.data()[i] += alpha * p.data()[i];
            r.data()[i] -= alpha * ap.data()[i];
        }
        double res = norm2(r);
        if (res < best_res) {
            best = x;
            best_res = res;
        }
        if (res <= cfg.tol * normb) {
            NodeField ax = apply(x);
            for (std::int64_t i = 0; i < grid.nodes; ++i) r.data()[i] = b.data()[i] - ax.data()[i];
            res = norm2(r);
            if (res <= cfg.tol * normb) {
                x.shift_to_mean_zero();
                report.iterations = iter;
                report.relative_residual = res / normb;
                return {std::move(x), report};
            }
            // recursion drifted from the true residual: restart from the fresh one
            z = precondition(r);
            z.shift_to_mean_zero();
            p = z;
            rz = dot(r, z);
            continue;
        }
        z = precondition(r);
        z.shift_to_mean_zero();
        const double rz_next = dot(r, z);
        const double beta = rz_next / rz;
        rz = rz_next;
        for (std::int64_t i = 0; i < grid.nodes; ++i) p.data()[i] = z.data()[i] + beta * p.data()[i];
    }

    best.shift_to_mean_zero();
    report.iterations = cfg.max_iter;
    report.relative_residual = best_res / normb;
    char msg[160];
    std::snprintf(msg, sizeof(msg), "cg stalled at relative residual %.3e after %lld iterations (target %.3e)",
                  report.relative_residual, static_cast<long long>(report.iterations), cfg.tol);
    throw NonConvergence(msg, std::move(best), report);
}

Precondition make_preconditioner(const EdgeField& a, const SolveConfig& cfg) {
    const TorusGrid grid = a.grid();
    switch (cfg.precond) {
        case Preconditioner::none:
            return [](const NodeField& r) { return r; };
        case Preconditioner::jacobi: {
            NodeField diag(grid);
            for (std::int64_t node = 0; node < grid.nodes; ++node) {
                double s = 0.0;
                for (int dir = 0; dir < grid.d; ++dir)
                    s += a.at(node, dir) + a.at(grid.neighbor(node, dir, -1), dir);
                diag.data()[node] = s;
            }
            return [diag = std::move(diag), grid](const NodeField& r) {
                NodeField z(grid);
                for (std::int64_t i = 0; i < grid.nodes; ++i) z.data()[i] = r.data()[i] / diag.data()[i];
                return z;
            };
        }
        case Preconditioner::constant_coefficient: {
            // Arithmetic per-direction means give a constant SPD surrogate whose
            // inverse is one FFT pair; iteration counts then stay L-independent.
            Eigen::MatrixXd a0 = Eigen::MatrixXd::Zero(grid.d, grid.d);
            for (int dir = 0; dir < grid.d; ++dir) a0(dir, dir) = a.component_mean(dir);
            return [a0](const NodeField& r) { return spectral::poisson_solve(a0, r); };
        }
    }
    throw std::invalid_argument("unknown preconditioner");
}

}  // namespace

EdgeField apply_matrix(const Eigen::MatrixXd& abar, const EdgeField& f) {
    const TorusGrid grid = f.grid();
    if (abar.rows() != grid.d || abar.cols() != grid.d)
        throw std::invalid_argument("coefficient matrix dimension mismatch");
    EdgeField out(grid);
    for (int j = 0; j < grid.d; ++j) {
        double* oj = out.plane(j);
        for (int l = 0; l < grid.d; ++l) {
            const double w = abar(j, l);
            if (w == 0.0) continue;
            const double* fl = f.plane(l);
            for (std::int64_t i = 0; i < grid.nodes; ++i) oj[i] += w * fl[i];
        }
    }
    return out;
}

std::pair<NodeField, SolveReport> solve_variable(const EdgeField& a, const EdgeField& h,
                                                 const SolveConfig& cfg, const NodeField* guess) {
    if (!(a.grid() == h.grid())) throw std::invalid_argument("conductance and data grids differ");
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (!(a.data()[i] > 0.0)) throw std::invalid_argument("conductances must be positive");

    const NodeField b = backward_divergence(h);
    const Apply apply = [&a](const NodeField& u) { return apply_operator(a, u); };
    return cg_solve(a.grid(), apply, make_preconditioner(a, cfg), b, cfg, guess, precond_name(cfg.precond));
}

std::pair<NodeField, SolveReport> solve_constant(const Eigen::MatrixXd& abar, const EdgeField& h,
                                                 const TorusGrid& grid, const SolveConfig& cfg) {
    if (!(h.grid() == grid)) throw std::invalid_argument("data grid mismatch");
    spectral::require_positive_definite(abar);
    if (abar.rows() != grid.d) throw std::invalid_argument("coefficient matrix dimension mismatch");

    const NodeField b = backward_divergence(h);
    const Apply apply = [&abar](const NodeField& u) {
        NodeField out = backward_divergence(apply_matrix(abar, forward_gradient(u)));
        for (std::int64_t i = 0; i < out.grid().nodes; ++i) out.data()[i] = -out.data()[i];
        return out;
    };

    if (cfg.backend == ConstantBackend::iterative) {
        const Precondition ident = [](const NodeField& r) { return r; };
        return cg_solve(grid, apply, ident, b, cfg, nullptr, "cg:constant");
    }

    NodeField u = spectral::solve_constant(abar, h);
    SolveReport report;
    report.backend = "spectral";
    const double normb = norm2(b);
    if (normb > 0.0) {
        NodeField au = apply(u);
        double s = 0.0;
        for (std::int64_t i = 0; i < grid.nodes; ++i) {
            const double e = au.data()[i] - b.data()[i];
            s += e * e;
        }
        report.relative_residual = std::sqrt(s) / normb;
    }
    return {std::move(u), report};
}

EdgeField helmholtz_project(const Eigen::MatrixXd& abar, const EdgeField& f) {
    return spectral::helmholtz(abar, f);
}

EdgeField helmholtz_project_adjoint(const Eigen::MatrixXd& abar, const EdgeField& f) {
    return spectral::helmholtz(abar.transpose(), f);
}

EdgeField leray_project(const Eigen::MatrixXd& abar, const EdgeField& f) {
    const EdgeField hf = spectral::helmholtz(abar, apply_matrix(abar, f));
    EdgeField out = f;
    for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] -= hf.data()[i];
    return out;
}

}  // namespace homog
