#include "homog/random_fields.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace homog {

namespace {

std::string fmt_params(const char* name, std::initializer_list<double> params) {
    std::string s(name);
    s += '(';
    char buf[32];
    bool first = true;
    for (double v : params) {
        if (!first) s += ',';
        std::snprintf(buf, sizeof buf, "%.17g", v);
        s += buf;
        first = false;
    }
    s += ')';
    return s;
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// Marsaglia-Tsang squeeze; consumes a variable number of draws from the
// stream, which stays reproducible because the stream itself is keyed.
double gamma_draw(CounterStream& s, double shape) {
    if (shape < 1.0) {
        const double u = s.next_positive_uniform();
        return gamma_draw(s, shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = s.next_normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = s.next_positive_uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

}  // namespace

ConductanceLaw ConductanceLaw::two_point(double lo, double hi, double p) {
    if (!(0.0 < lo && lo <= hi && hi <= 1.0)) throw std::invalid_argument("two_point: need 0 < lo <= hi <= 1");
    if (!(0.0 < p && p < 1.0)) throw std::invalid_argument("two_point: need 0 < p < 1");
    ConductanceLaw law;
    law.kind = LawKind::two_point;
    law.lo = lo;
    law.hi = hi;
    law.p = p;
    law.lambda = lo;
    return law;
}

ConductanceLaw ConductanceLaw::uniform(double lambda) {
    if (!(0.0 < lambda && lambda <= 1.0)) throw std::invalid_argument("uniform: need 0 < lambda <= 1");
    ConductanceLaw law;
    law.kind = LawKind::uniform;
    law.lambda = lambda;
    return law;
}

ConductanceLaw ConductanceLaw::scaled_beta(double alpha, double beta, double lambda) {
    if (!(alpha > 0.0 && beta > 0.0)) throw std::invalid_argument("scaled_beta: need alpha, beta > 0");
    if (!(0.0 < lambda && lambda <= 1.0)) throw std::invalid_argument("scaled_beta: need 0 < lambda <= 1");
    ConductanceLaw law;
    law.kind = LawKind::scaled_beta;
    law.alpha = alpha;
    law.beta = beta;
    law.lambda = lambda;
    return law;
}

double ConductanceLaw::lower_bound() const {
    return kind == LawKind::two_point ? lo : lambda;
}

double ConductanceLaw::mean() const {
    switch (kind) {
        case LawKind::two_point: return p * hi + (1.0 - p) * lo;
        case LawKind::uniform: return 0.5 * (lambda + 1.0);
        case LawKind::scaled_beta: return lambda + (1.0 - lambda) * alpha / (alpha + beta);
    }
    throw std::logic_error("ConductanceLaw::mean: bad kind");
}

double ConductanceLaw::variance() const {
    switch (kind) {
        case LawKind::two_point: return p * (1.0 - p) * (hi - lo) * (hi - lo);
        case LawKind::uniform: return (1.0 - lambda) * (1.0 - lambda) / 12.0;
        case LawKind::scaled_beta: {
            const double s = alpha + beta;
            return (1.0 - lambda) * (1.0 - lambda) * alpha * beta / (s * s * (s + 1.0));
        }
    }
    throw std::logic_error("ConductanceLaw::variance: bad kind");
}

std::string ConductanceLaw::canonical() const {
    switch (kind) {
        case LawKind::two_point: return fmt_params("two_point", {lo, hi, p});
        case LawKind::uniform: return fmt_params("uniform", {lambda, 1.0});
        case LawKind::scaled_beta: return fmt_params("scaled_beta", {alpha, beta, lambda});
    }
    throw std::logic_error("ConductanceLaw::canonical: bad kind");
}

std::uint64_t mix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double CounterStream::next_uniform() {
    const std::uint64_t bits = mix64(key + kGolden * counter++);
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

double CounterStream::next_positive_uniform() {
    const double u = next_uniform();
    return u > 0.0 ? u : 0x1.0p-53;
}

double CounterStream::next_normal() {
    const double u1 = next_positive_uniform();
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

CounterStream stream_for(const SeedSpec& seed, std::int64_t node, int dir) {
    std::uint64_t h = mix64(seed.master ^ 0x484f4d4f474c4142ull);
    h = mix64(h ^ static_cast<std::uint64_t>(seed.purpose));
    h = mix64(h ^ seed.realization);
    h = mix64(h ^ static_cast<std::uint64_t>(node));
    h = mix64(h ^ static_cast<std::uint64_t>(dir + 1));
    return CounterStream{h, 0};
}

double draw_conductance(const ConductanceLaw& law, CounterStream& s) {
    switch (law.kind) {
        case LawKind::two_point: return s.next_uniform() < law.p ? law.hi : law.lo;
        case LawKind::uniform: return law.lambda + (1.0 - law.lambda) * s.next_uniform();
        case LawKind::scaled_beta: {
            const double x = gamma_draw(s, law.alpha);
            const double y = gamma_draw(s, law.beta);
            return law.lambda + (1.0 - law.lambda) * (x / (x + y));
        }
    }
    throw std::logic_error("draw_conductance: bad kind");
}

EdgeField sample_field(const TorusGrid& grid, const ConductanceLaw& law, const SeedSpec& seed) {
    EdgeField a(grid);
    for (int dir = 0; dir < grid.d; ++dir) {
        double* plane = a.plane(dir);
        for (std::int64_t node = 0; node < grid.nodes; ++node) {
            CounterStream s = stream_for(seed, node, dir);
            plane[node] = draw_conductance(law, s);
        }
    }
    return a;
}

EdgeField resample_edge(const EdgeField& a, const ConductanceLaw& law, const SeedSpec& seed,
                        std::int64_t node, int dir, EdgePerturbation* perturbation) {
    const TorusGrid& g = a.grid();
    if (node < 0 || node >= g.nodes || dir < 0 || dir >= g.d)
        throw std::out_of_range("resample_edge: edge not on grid");
    SeedSpec resample = seed;
    resample.purpose = StreamPurpose::edge_resample;
    CounterStream s = stream_for(resample, node, dir);
    EdgeField out = a;
    const double fresh = draw_conductance(law, s);
    if (perturbation) *perturbation = EdgePerturbation{node, dir, a.at(node, dir), fresh};
    out.at(node, dir) = fresh;
    return out;
}

}  // namespace homog
