#pragma once

// Per-realization objects of stochastic homogenization on the periodic lattice:
// corrector phi_i, flux q_i, flux corrector sigma_ijk, homogenized matrix abar_L,
// and the homogenization commutator Xi. Coefficients are symmetric (diagonal on
// edges), so the adjoint correctors coincide with phi and sigma.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "homog/elliptic_solver.hpp"
#include "homog/random_fields.hpp"

namespace homog {

struct CorrectorPack {
    EdgeField a;
    std::vector<NodeField> phi;    // phi[i], mean zero, -div*(a(grad phi_i + e_i)) = 0
    std::vector<EdgeField> q;      // q[i] = a(grad phi_i + e_i) - abar e_i, mean zero
    std::vector<NodeField> sigma;  // sigma[(i*d + j)*d + k], skew in (j,k), mean zero
    Eigen::MatrixXd abar;          // column i = spatial mean of a(grad phi_i + e_i)
    std::vector<SolveReport> reports;

    int dim() const { return a.grid().d; }
    const NodeField& sigma_at(int i, int j, int k) const {
        return sigma[static_cast<std::size_t>((i * dim() + j) * dim() + k)];
    }
};

// Commutator Xi_ij = e_j . [a(grad phi_i + e_i) - abar_ref(grad phi_i + e_i)].
// Its spatial mean is abar_L - abar_ref, hence zero exactly when abar_ref = abar_L.
struct CommutatorField {
    MatrixField xi;
    Eigen::MatrixXd abar_ref;
};

// Mean-zero solution of -div*(a(grad phi_i + e_i)) = 0.
std::pair<NodeField, SolveReport> solve_corrector(const EdgeField& a, int i, const SolveConfig& cfg = {},
                                                  const NodeField* guess = nullptr);

// Column i is the average flux of the i-th corrector; symmetric up to solver error.
Eigen::MatrixXd homogenized_coefficient(const EdgeField& a, const std::vector<NodeField>& phi);

// q_i = a(grad phi_i + e_i) - abar e_i; mean zero when abar = homogenized_coefficient.
EdgeField corrector_flux(const EdgeField& a, const NodeField& phi_i, int i, const Eigen::MatrixXd& abar);

// Mean-zero solutions of -div*(grad sigma_ijk) = grad_j q_ik - grad_k q_ij for j < k,
// extended by skew-symmetry; satisfies (div* sigma_i)_j = q_ij on the torus.
std::vector<NodeField> solve_flux_corrector(const EdgeField& a, const std::vector<NodeField>& phi,
                                            const Eigen::MatrixXd& abar, const SolveConfig& cfg = {});

// d corrector solves plus d*d(d-1)/2 Poisson solves (skipped when with_sigma is false).
CorrectorPack build_corrector_pack(const EdgeField& a, const SolveConfig& cfg = {}, bool with_sigma = true);

CommutatorField commutator(const EdgeField& a, const std::vector<NodeField>& phi,
                           const Eigen::MatrixXd& abar_ref);

// Resamples edge (node, dir), recomputes the commutator directly, and compares with
// the four-term vertical-derivative representation
//   D_b Xi_ij = (grad phi_j + e_j) . D_b a (grad phi_i^b + e_i)
//             - div*_k( phi_j(.+e_k) e_k . D_b a (grad phi_i^b + e_i) )
//             - div*_k( phi_j(.+e_k) e_k . a grad D_b phi_i )
//             - grad_k( sigma_jk l(.-e_k) grad_l D_b phi_i ),
// which is an exact lattice identity when Xi is formed with this realization's
// abar_L (the flux-corrector pairing produces that matrix and no other).
// Returns the maximum pointwise discrepancy over all components and nodes.
double vertical_derivative_check(const EdgeField& a, const ConductanceLaw& law, std::int64_t node, int dir,
                                 const SeedSpec& seed, const SolveConfig& cfg = {});

// Binary fields (prefix.a.bin, prefix.phi.bin, prefix.sigma.bin) plus a JSON
// sidecar (prefix.json) holding abar_L and the solver reports.
void save_pack(const std::string& prefix, const CorrectorPack& pack);
CorrectorPack load_pack(const std::string& prefix);

}  // namespace homog
