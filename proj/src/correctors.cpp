#include "homog/correctors.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace homog {

namespace {

void check_direction(const TorusGrid& g, int i) {
    if (i < 0 || i >= g.d) throw std::out_of_range("direction out of range");
}

}  // namespace

std::pair<NodeField, SolveReport> solve_corrector(const EdgeField& a, int i, const SolveConfig& cfg,
                                                  const NodeField* guess) {
    const TorusGrid& g = a.grid();
    check_direction(g, i);
    // -div*(a(grad phi + e_i)) = 0 as -div*(a grad phi) = div*(a e_i)
    EdgeField h(g);
    const double* ai = a.plane(i);
    double* hi = h.plane(i);
    for (std::int64_t n = 0; n < g.nodes; ++n) hi[n] = ai[n];
    return solve_variable(a, h, cfg, guess);
}

Eigen::MatrixXd homogenized_coefficient(const EdgeField& a, const std::vector<NodeField>& phi) {
    const TorusGrid& g = a.grid();
    if (static_cast<int>(phi.size()) != g.d) throw std::invalid_argument("need one corrector per direction");
    Eigen::MatrixXd abar(g.d, g.d);
    for (int i = 0; i < g.d; ++i) {
        const EdgeField grad = forward_gradient(phi[static_cast<std::size_t>(i)]);
        for (int j = 0; j < g.d; ++j) {
            const double* aj = a.plane(j);
            const double* gj = grad.plane(j);
            const double e = (i == j) ? 1.0 : 0.0;
            double s = 0.0;
            for (std::int64_t n = 0; n < g.nodes; ++n) s += aj[n] * (gj[n] + e);
            abar(j, i) = s / static_cast<double>(g.nodes);
        }
    }
    return abar;
}

EdgeField corrector_flux(const EdgeField& a, const NodeField& phi_i, int i, const Eigen::MatrixXd& abar) {
    const TorusGrid& g = a.grid();
    check_direction(g, i);
    const EdgeField grad = forward_gradient(phi_i);
    EdgeField q(g);
    for (int j = 0; j < g.d; ++j) {
        const double* aj = a.plane(j);
        const double* gj = grad.plane(j);
        double* qj = q.plane(j);
        const double e = (i == j) ? 1.0 : 0.0;
        const double mean_flux = abar(j, i);
        for (std::int64_t n = 0; n < g.nodes; ++n) qj[n] = aj[n] * (gj[n] + e) - mean_flux;
    }
    return q;
}

std::vector<NodeField> solve_flux_corrector(const EdgeField& a, const std::vector<NodeField>& phi,
                                            const Eigen::MatrixXd& abar, const SolveConfig& cfg) {
    const TorusGrid& g = a.grid();
    const int d = g.d;
    std::vector<NodeField> sigma(static_cast<std::size_t>(d * d * d), NodeField(g));
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
    for (int i = 0; i < d; ++i) {
        const EdgeField q = corrector_flux(a, phi[static_cast<std::size_t>(i)], i, abar);
        for (int j = 0; j < d; ++j)
            for (int k = j + 1; k < d; ++k) {
                // -div*(grad sigma) = grad_j q_ik - grad_k q_ij, i.e. div*(h) with
                // h_j(x) = q_ik(x+e_j), h_k(x) = -q_ij(x+e_k)
                EdgeField h(g);
                double* hj = h.plane(j);
                double* hk = h.plane(k);
                const double* qj = q.plane(j);
                const double* qk = q.plane(k);
                for (std::int64_t n = 0; n < g.nodes; ++n) {
                    hj[n] = qk[g.neighbor(n, j, +1)];
                    hk[n] = -qj[g.neighbor(n, k, +1)];
                }
                NodeField s = solve_constant(id, h, g, cfg).first;
                NodeField neg = s;
                for (std::int64_t n = 0; n < g.nodes; ++n) neg.data()[n] = -neg.data()[n];
                sigma[static_cast<std::size_t>((i * d + j) * d + k)] = std::move(s);
                sigma[static_cast<std::size_t>((i * d + k) * d + j)] = std::move(neg);
            }
    }
    return sigma;
}

CorrectorPack build_corrector_pack(const EdgeField& a, const SolveConfig& cfg, bool with_sigma) {
    CorrectorPack pack;
    pack.a = a;
    const int d = a.grid().d;
    pack.phi.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        auto [phi, report] = solve_corrector(a, i, cfg);
        pack.phi.push_back(std::move(phi));
        pack.reports.push_back(std::move(report));
    }
    pack.abar = homogenized_coefficient(a, pack.phi);
    pack.q.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i)
        pack.q.push_back(corrector_flux(a, pack.phi[static_cast<std::size_t>(i)], i, pack.abar));
    if (with_sigma) pack.sigma = solve_flux_corrector(a, pack.phi, pack.abar, cfg);
    return pack;
}

CommutatorField commutator(const EdgeField& a, const std::vector<NodeField>& phi,
                           const Eigen::MatrixXd& abar_ref) {
    const TorusGrid& g = a.grid();
    const int d = g.d;
    if (static_cast<int>(phi.size()) != d) throw std::invalid_argument("need one corrector per direction");
    if (abar_ref.rows() != d || abar_ref.cols() != d) throw std::invalid_argument("reference matrix dimension mismatch");
    CommutatorField out{MatrixField(g), abar_ref};
    for (int i = 0; i < d; ++i) {
        const EdgeField grad = forward_gradient(phi[static_cast<std::size_t>(i)]);
        for (int j = 0; j < d; ++j) {
            const double* aj = a.plane(j);
            const double* gj = grad.plane(j);
            double* xij = out.xi.plane(i, j);
            const double ej = (i == j) ? 1.0 : 0.0;
            for (std::int64_t n = 0; n < g.nodes; ++n) xij[n] = aj[n] * (gj[n] + ej);
            for (int l = 0; l < d; ++l) {
                const double w = abar_ref(j, l);
                if (w == 0.0) continue;
                const double* gl = grad.plane(l);
                const double el = (i == l) ? 1.0 : 0.0;
                for (std::int64_t n = 0; n < g.nodes; ++n) xij[n] -= w * (gl[n] + el);
            }
        }
    }
    return out;
}

double vertical_derivative_check(const EdgeField& a, const ConductanceLaw& law, std::int64_t node, int dir,
                                 const SeedSpec& seed, const SolveConfig& cfg) {
    const TorusGrid& g = a.grid();
    const int d = g.d;
    const CorrectorPack pack = build_corrector_pack(a, cfg, true);

    EdgePerturbation pert;
    const EdgeField ab = resample_edge(a, law, seed, node, dir, &pert);
    if (pert.new_value == pert.old_value) return 0.0;  // both sides vanish identically
    const double da = pert.old_value - pert.new_value;  // D_b f = f(a) - f(a^b)

    std::vector<NodeField> phib;
    phib.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i)
        phib.push_back(solve_corrector(ab, i, cfg, &pack.phi[static_cast<std::size_t>(i)]).first);

    const MatrixField xi = commutator(a, pack.phi, pack.abar).xi;
    const MatrixField xib = commutator(ab, phib, pack.abar).xi;

    std::vector<EdgeField> grad_phi, grad_phib, grad_dphi;
    for (int i = 0; i < d; ++i) {
        grad_phi.push_back(forward_gradient(pack.phi[static_cast<std::size_t>(i)]));
        grad_phib.push_back(forward_gradient(phib[static_cast<std::size_t>(i)]));
        NodeField dphi = pack.phi[static_cast<std::size_t>(i)];
        for (std::int64_t n = 0; n < g.nodes; ++n) dphi.data()[n] -= phib[static_cast<std::size_t>(i)][n];
        grad_dphi.push_back(forward_gradient(dphi));
    }

    double worst = 0.0;
    for (int i = 0; i < d; ++i) {
        // D_b a (grad phi_i^b + e_i) lives on the single resampled edge
        const double gval = da * (grad_phib[static_cast<std::size_t>(i)].at(node, dir) + ((i == dir) ? 1.0 : 0.0));
        const EdgeField& gd = grad_dphi[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) {
            const NodeField& phj = pack.phi[static_cast<std::size_t>(j)];
            NodeField formula(g);

            // term 1: (grad phi_j + e_j) . D_b a (grad phi_i^b + e_i)
            formula.data()[node] +=
                (grad_phi[static_cast<std::size_t>(j)].at(node, dir) + ((j == dir) ? 1.0 : 0.0)) * gval;

            // term 2: -div*_k( phi_j(.+e_k) e_k . D_b a (grad phi_i^b + e_i) )
            const double hval = phj[g.neighbor(node, dir, +1)] * gval;
            formula.data()[node] -= hval;
            formula.data()[g.neighbor(node, dir, +1)] += hval;

            // term 3: -div*_k( phi_j(.+e_k) a_k grad_k(D_b phi_i) )
            for (int k = 0; k < d; ++k) {
                const double* ak = a.plane(k);
                const double* gk = gd.plane(k);
                for (std::int64_t n = 0; n < g.nodes; ++n) {
                    const double p = phj[g.neighbor(n, k, +1)] * ak[n] * gk[n];
                    formula.data()[n] -= p;
                    formula.data()[g.neighbor(n, k, +1)] += p;
                }
            }

            // term 4: -grad_k( sigma_jkl(.-e_k) grad_l(D_b phi_i) ), gathered as
            // -sigma_jkl(x) grad_l(x+e_k) + sigma_jkl(x-e_k) grad_l(x)
            for (int k = 0; k < d; ++k)
                for (int l = 0; l < d; ++l) {
                    if (k == l) continue;
                    const NodeField& s = pack.sigma_at(j, k, l);
                    const double* gl = gd.plane(l);
                    for (std::int64_t n = 0; n < g.nodes; ++n) {
                        const std::int64_t up = g.neighbor(n, k, +1);
                        const std::int64_t down = g.neighbor(n, k, -1);
                        formula.data()[n] -= s[n] * gl[up] - s[down] * gl[n];
                    }
                }

            const double* direct_i = xi.plane(i, j);
            const double* direct_b = xib.plane(i, j);
            for (std::int64_t n = 0; n < g.nodes; ++n)
                worst = std::max(worst, std::abs(direct_i[n] - direct_b[n] - formula.data()[n]));
        }
    }
    return worst;
}

void save_pack(const std::string& prefix, const CorrectorPack& pack) {
    const TorusGrid& g = pack.a.grid();
    const int d = g.d;
    write_field(prefix + ".a.bin", pack.a);
    std::vector<double> buf(static_cast<std::size_t>(d) * static_cast<std::size_t>(g.nodes));
    for (int i = 0; i < d; ++i)
        for (std::int64_t n = 0; n < g.nodes; ++n)
            buf[static_cast<std::size_t>(i) * g.nodes + n] = pack.phi[static_cast<std::size_t>(i)][n];
    write_field(prefix + ".phi.bin", g, d, buf.data());
    if (!pack.sigma.empty()) {
        std::vector<double> sbuf(static_cast<std::size_t>(d * d * d) * static_cast<std::size_t>(g.nodes));
        for (std::size_t c = 0; c < pack.sigma.size(); ++c)
            for (std::int64_t n = 0; n < g.nodes; ++n) sbuf[c * static_cast<std::size_t>(g.nodes) + n] = pack.sigma[c][n];
        write_field(prefix + ".sigma.bin", g, d * d * d, sbuf.data());
    }

    nlohmann::json j;
    j["d"] = d;
    j["L"] = g.L;
    j["has_sigma"] = !pack.sigma.empty();
    j["abar"] = nlohmann::json::array();
    for (int r = 0; r < d; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < d; ++c) row.push_back(pack.abar(r, c));
        j["abar"].push_back(row);
    }
    j["reports"] = nlohmann::json::array();
    for (const auto& rep : pack.reports)
        j["reports"].push_back({{"iterations", rep.iterations},
                                {"relative_residual", rep.relative_residual},
                                {"backend", rep.backend}});
    std::ofstream out(prefix + ".json");
    if (!out) throw std::runtime_error("cannot write " + prefix + ".json");
    out << j.dump(2) << "\n";
}

CorrectorPack load_pack(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw std::runtime_error("cannot read " + prefix + ".json");
    nlohmann::json j;
    in >> j;

    CorrectorPack pack;
    pack.a = as_edge_field(read_field(prefix + ".a.bin"));
    const TorusGrid& g = pack.a.grid();
    const int d = g.d;
    if (j.at("d").get<int>() != d || j.at("L").get<int>() != g.L)
        throw std::runtime_error("pack sidecar does not match the stored fields");

    const FieldFile phif = read_field(prefix + ".phi.bin");
    if (phif.components != d || phif.grid != g) throw std::runtime_error("corrupt corrector file");
    for (int i = 0; i < d; ++i) {
        NodeField phi(g);
        for (std::int64_t n = 0; n < g.nodes; ++n)
            phi.data()[n] = phif.data[static_cast<std::size_t>(i) * g.nodes + n];
        pack.phi.push_back(std::move(phi));
    }

    pack.abar = Eigen::MatrixXd(d, d);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) pack.abar(r, c) = j.at("abar")[r][c].get<double>();

    for (int i = 0; i < d; ++i)
        pack.q.push_back(corrector_flux(pack.a, pack.phi[static_cast<std::size_t>(i)], i, pack.abar));

    if (j.at("has_sigma").get<bool>()) {
        const FieldFile sf = read_field(prefix + ".sigma.bin");
        if (sf.components != d * d * d || sf.grid != g) throw std::runtime_error("corrupt flux corrector file");
        for (int c = 0; c < d * d * d; ++c) {
            NodeField s(g);
            for (std::int64_t n = 0; n < g.nodes; ++n)
                s.data()[n] = sf.data[static_cast<std::size_t>(c) * g.nodes + n];
            pack.sigma.push_back(std::move(s));
        }
    }

    for (const auto& rep : j.at("reports")) {
        SolveReport r;
        r.iterations = rep.at("iterations").get<std::int64_t>();
        r.relative_residual = rep.at("relative_residual").get<double>();
        r.backend = rep.at("backend").get<std::string>();
        pack.reports.push_back(std::move(r));
    }
    return pack;
}

}  // namespace homog
