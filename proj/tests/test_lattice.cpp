#include "homog/lattice.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "doctest.h"

using namespace homog;

namespace {

NodeField random_node_field(const TorusGrid& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    NodeField u(g);
    for (std::int64_t i = 0; i < g.nodes; ++i) u[i] = dist(rng);
    return u;
}

EdgeField random_edge_field(const TorusGrid& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    EdgeField f(g);
    for (std::int64_t i = 0; i < f.size(); ++i) f.data()[i] = dist(rng);
    return f;
}

// translate a node field by the lattice vector t (periodically)
NodeField translate(const NodeField& u, const std::array<int, kMaxDim>& t) {
    const TorusGrid& g = u.grid();
    NodeField out(g);
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) {
        auto x = g.coords(idx);
        for (int i = 0; i < g.d; ++i) x[i] = (x[i] + t[i]) % g.L;
        out[g.index(x)] = u[idx];
    }
    return out;
}

EdgeField translate(const EdgeField& f, const std::array<int, kMaxDim>& t) {
    const TorusGrid& g = f.grid();
    EdgeField out(g);
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) {
        auto x = g.coords(idx);
        for (int i = 0; i < g.d; ++i) x[i] = (x[i] + t[i]) % g.L;
        const std::int64_t tgt = g.index(x);
        for (int c = 0; c < g.d; ++c) out.at(tgt, c) = f.at(idx, c);
    }
    return out;
}

}  // namespace

TEST_CASE("grid geometry: index/coords roundtrip and periodic neighbors") {
    TorusGrid g(2, 3);
    CHECK(g.nodes == 9);
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) CHECK(g.index(g.coords(idx)) == idx);

    // row-major, last coordinate fastest
    CHECK(g.index({0, 1}) == 1);
    CHECK(g.index({1, 0}) == 3);

    // wrap in both directions
    CHECK(g.neighbor(g.index({2, 1}), 0, +1) == g.index({0, 1}));
    CHECK(g.neighbor(g.index({0, 1}), 0, -1) == g.index({2, 1}));
    CHECK(g.neighbor(g.index({1, 2}), 1, +1) == g.index({1, 0}));

    TorusGrid tiny(3, 2);
    for (std::int64_t idx = 0; idx < tiny.nodes; ++idx)
        for (int dir = 0; dir < 3; ++dir)
            CHECK(tiny.neighbor(tiny.neighbor(idx, dir, +1), dir, +1) == idx);

    CHECK_THROWS_AS(TorusGrid(0, 4), std::invalid_argument);
    CHECK_THROWS_AS(TorusGrid(2, 1), std::invalid_argument);
    CHECK_THROWS_AS(g.coords(9), std::out_of_range);
}

TEST_CASE("forward gradient: constants, hand example, linearity") {
    TorusGrid g(1, 3);
    NodeField u(g);
    u[0] = 0;
    u[1] = 1;
    u[2] = 0;
    EdgeField du = forward_gradient(u);
    CHECK(du.at(0, 0) == 1.0);
    CHECK(du.at(1, 0) == -1.0);
    CHECK(du.at(2, 0) == 0.0);

    TorusGrid g2(2, 5);
    NodeField c(g2, 3.25);
    EdgeField dc = forward_gradient(c);
    for (std::int64_t i = 0; i < dc.size(); ++i) CHECK(dc.data()[i] == 0.0);

    NodeField a = random_node_field(g2, 1);
    NodeField b = random_node_field(g2, 2);
    NodeField sum(g2);
    for (std::int64_t i = 0; i < g2.nodes; ++i) sum[i] = a[i] + b[i];
    EdgeField da = forward_gradient(a), db = forward_gradient(b), dsum = forward_gradient(sum);
    for (std::int64_t i = 0; i < dsum.size(); ++i)
        CHECK(dsum.data()[i] == doctest::Approx(da.data()[i] + db.data()[i]).epsilon(1e-12));

    // gradient components have exact zero mean (telescoping)
    for (int dir = 0; dir < 2; ++dir) CHECK(std::abs(da.component_mean(dir)) < 1e-15);
}

TEST_CASE("backward divergence: constants, zero total mass, summation by parts") {
    TorusGrid g(2, 4);
    EdgeField c(g, -0.75);
    NodeField divc = backward_divergence(c);
    for (std::int64_t i = 0; i < g.nodes; ++i) CHECK(divc[i] == 0.0);

    for (int d = 1; d <= 3; ++d) {
        TorusGrid gg(d, 3);
        NodeField u = random_node_field(gg, 10 + d);
        EdgeField F = random_edge_field(gg, 20 + d);
        NodeField divF = backward_divergence(F);

        double total = 0.0;
        for (std::int64_t i = 0; i < gg.nodes; ++i) total += divF[i];
        CHECK(std::abs(total) < 1e-13);

        // <grad u, F> = -<u, div* F>, relative error at double precision
        const double lhs = dot(forward_gradient(u), F);
        const double rhs = -dot(u, divF);
        CHECK(std::abs(lhs - rhs) <= 1e-12 * (std::abs(lhs) + std::abs(rhs) + 1e-30));
    }
}

TEST_CASE("apply_operator: kernel, graph Laplacian example, symmetry, ellipticity") {
    TorusGrid g(1, 4);
    EdgeField ones(g, 1.0);
    NodeField u(g);
    u[0] = 1;
    NodeField Au = apply_operator(ones, u);
    CHECK(Au[0] == 2.0);
    CHECK(Au[1] == -1.0);
    CHECK(Au[2] == 0.0);
    CHECK(Au[3] == -1.0);

    TorusGrid g2(2, 4);
    NodeField c(g2, 2.5);
    EdgeField a = random_edge_field(g2, 3);
    for (std::int64_t i = 0; i < a.size(); ++i) a.data()[i] = 0.5 + 0.25 * (a.data()[i] + 1.0);  // [0.5,1]
    NodeField Ac = apply_operator(a, c);
    for (std::int64_t i = 0; i < g2.nodes; ++i) CHECK(std::abs(Ac[i]) < 1e-14);

    NodeField v = random_node_field(g2, 4);
    NodeField w = random_node_field(g2, 5);
    const double sym1 = dot(apply_operator(a, v), w);
    const double sym2 = dot(v, apply_operator(a, w));
    CHECK(std::abs(sym1 - sym2) <= 1e-12 * (std::abs(sym1) + 1e-30));

    const EdgeField dv = forward_gradient(v);
    const double energy = dot(v, apply_operator(a, v));
    CHECK(energy >= 0.5 * dot(dv, dv) - 1e-12);
    CHECK(std::abs(energy - dot(dv, forward_gradient(v))) >= 0.0);  // finite
}

TEST_CASE("torus translation equivariance of the calculus") {
    TorusGrid g(2, 5);
    NodeField u = random_node_field(g, 6);
    EdgeField a = random_edge_field(g, 7);
    for (std::int64_t i = 0; i < a.size(); ++i) a.data()[i] = 0.6 + 0.2 * a.data()[i];
    const std::array<int, kMaxDim> t{2, 4, 0, 0};

    EdgeField lhs = forward_gradient(translate(u, t));
    EdgeField rhs = translate(forward_gradient(u), t);
    for (std::int64_t i = 0; i < lhs.size(); ++i) CHECK(lhs.data()[i] == rhs.data()[i]);

    NodeField op_lhs = apply_operator(translate(a, t), translate(u, t));
    NodeField op_rhs_raw = apply_operator(a, u);
    NodeField op_rhs(g);
    {
        NodeField shifted = translate(op_rhs_raw, t);
        for (std::int64_t i = 0; i < g.nodes; ++i) op_rhs[i] = shifted[i];
    }
    for (std::int64_t i = 0; i < g.nodes; ++i) CHECK(op_lhs[i] == doctest::Approx(op_rhs[i]).epsilon(1e-13));
}

TEST_CASE("binary serialization roundtrips bit-exactly; type guards hold") {
    TorusGrid g(2, 6);
    NodeField u = random_node_field(g, 8);
    EdgeField f = random_edge_field(g, 9);
    MatrixField m(g);
    {
        std::mt19937_64 rng(10);
        std::uniform_real_distribution<double> dist(-2.0, 2.0);
        for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    }

    const std::string base = "lattice_io_test_";
    write_field(base + "u.bin", u);
    write_field(base + "f.bin", f);
    write_field(base + "m.bin", m);

    NodeField u2 = as_node_field(read_field(base + "u.bin"));
    EdgeField f2 = as_edge_field(read_field(base + "f.bin"));
    MatrixField m2 = as_matrix_field(read_field(base + "m.bin"));
    for (std::int64_t i = 0; i < u.size(); ++i) CHECK(u[i] == u2[i]);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(f.data()[i] == f2.data()[i]);
    for (std::int64_t i = 0; i < m.size(); ++i) CHECK(m.data()[i] == m2.data()[i]);

    CHECK_THROWS(as_edge_field(read_field(base + "u.bin")));
    CHECK_THROWS(as_node_field(read_field(base + "f.bin")));

    std::remove((base + "u.bin").c_str());
    std::remove((base + "f.bin").c_str());
    std::remove((base + "m.bin").c_str());
}

TEST_CASE("CSV serialization roundtrips through %.17g") {
    TorusGrid g(2, 4);
    EdgeField f = random_edge_field(g, 11);
    const std::string path = "lattice_io_test.csv";
    write_field_csv(path, g, g.d, f.data());
    FieldFile back = read_field_csv(path);
    CHECK(back.grid == g);
    CHECK(back.components == g.d);
    for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == f.data()[i]);
    std::remove(path.c_str());
}
