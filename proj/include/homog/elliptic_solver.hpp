#pragma once

// Solvers for -div*(a grad u) = div*(h) on the torus, plus the discrete
// Helmholtz/Leray projections for constant coefficients.
//
// Conventions. The operator is A u = -backward_divergence(a * forward_gradient(u)),
// which is symmetric positive semidefinite with kernel = constants; all solutions
// are gauged to mean zero. Right-hand sides are always divergence-form edge fields h,
// and the residual test is relative to ||div*(h)||_2.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "homog/lattice.hpp"

namespace homog {

enum class Preconditioner { none, jacobi, constant_coefficient };
enum class ConstantBackend { spectral, iterative };

struct SolveConfig {
    double tol = 1e-10;          // relative residual target
    std::int64_t max_iter = 100000;
    Preconditioner precond = Preconditioner::constant_coefficient;
    ConstantBackend backend = ConstantBackend::spectral;
};

struct SolveReport {
    std::int64_t iterations = 0;
    double relative_residual = 0.0;
    std::string backend;
};

class NonConvergence : public std::runtime_error {
public:
    NonConvergence(const std::string& what, NodeField best, SolveReport report)
        : std::runtime_error(what), best_(std::move(best)), report_(std::move(report)) {}
    const NodeField& best_iterate() const { return best_; }
    const SolveReport& report() const { return report_; }

private:
    NodeField best_;
    SolveReport report_;
};

class SingularSymbol : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// (abar * F)_j = sum_l abar(j,l) F_l, applied node by node.
EdgeField apply_matrix(const Eigen::MatrixXd& abar, const EdgeField& f);

// Mean-zero u with || A u - div*(h) || <= tol * || div*(h) ||.
// An optional initial guess warm-starts the iteration (its mean is discarded).
std::pair<NodeField, SolveReport> solve_variable(const EdgeField& a, const EdgeField& h,
                                                 const SolveConfig& cfg = {},
                                                 const NodeField* guess = nullptr);

// Constant-coefficient solve -div*(abar grad u) = div*(h); abar must be positive
// definite (SingularSymbol otherwise). The spectral backend diagonalizes the
// discrete symbol over torus frequencies and is exact to roundoff.
std::pair<NodeField, SolveReport> solve_constant(const Eigen::MatrixXd& abar, const EdgeField& h,
                                                 const TorusGrid& grid, const SolveConfig& cfg = {});

// P_H F = grad (div* abar grad)^{-1} div* F, and P_L F = F - P_H(abar F).
// Ansatz: P_H reproduces gradients of the abar-flux, P_H(abar grad u) = grad u,
// and abar * P_L F is divergence free. Adjoint variants transpose abar.
EdgeField helmholtz_project(const Eigen::MatrixXd& abar, const EdgeField& f);
EdgeField leray_project(const Eigen::MatrixXd& abar, const EdgeField& f);
EdgeField helmholtz_project_adjoint(const Eigen::MatrixXd& abar, const EdgeField& f);

}  // namespace homog
