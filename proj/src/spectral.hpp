#pragma once

// Internal FFT layer: cached FFTW plans keyed by (d, L) and the constant-coefficient
// kernels built on them. Node storage is row major with the last coordinate fastest,
// which is exactly FFTW's layout, so node indices double as frequency indices.

#include <complex>
#include <vector>

#include <Eigen/Core>

#include "homog/lattice.hpp"

namespace homog::spectral {

// In-place unnormalized DFT of a full node array; sign -1 forward, +1 backward.
void dft(const TorusGrid& grid, std::complex<double>* buf, int sign);

// Throws SingularSymbol unless the symmetric part of abar is positive definite.
void require_positive_definite(const Eigen::MatrixXd& abar);

// Per-axis symbol m_j(k) = exp(2*pi*i*k_j/L) - 1 and the scalar symbol
// S(k) = sum_jl conj(m_j) abar_jl m_l; S > 0 for k != 0 when abar is SPD.
std::vector<std::complex<double>> axis_symbols(int L);

// Mean-zero solution of -div*(abar grad u) = div*(h), exact to roundoff.
NodeField solve_constant(const Eigen::MatrixXd& abar, const EdgeField& h);

// Mean-zero solution of -div*(abar grad z) = r for a mean-zero node field r.
NodeField poisson_solve(const Eigen::MatrixXd& abar, const NodeField& r);

EdgeField helmholtz(const Eigen::MatrixXd& abar, const EdgeField& f);

}  // namespace homog::spectral
