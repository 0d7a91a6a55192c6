#pragma once
// iid conductance fields on the torus. Draws are counter-based: the value on
// edge (z,i) of realization n is a pure function of (master seed, purpose, n,
// z, i), so fields replay bit-identically regardless of iteration order or
// parallel schedule, and resampling a single edge is an independent stream.

#include <cstdint>
#include <string>

#include "homog/lattice.hpp"

namespace homog {

enum class LawKind { two_point, uniform, scaled_beta };

struct ConductanceLaw {
    LawKind kind = LawKind::two_point;
    double lo = 0.5, hi = 1.0, p = 0.5;  // two_point: value hi with probability p
    double lambda = 0.5;                 // lower bound for uniform / scaled_beta
    double alpha = 2.0, beta = 2.0;      // scaled_beta shape parameters

    static ConductanceLaw two_point(double lo, double hi, double p);
    static ConductanceLaw uniform(double lambda);
    static ConductanceLaw scaled_beta(double alpha, double beta, double lambda);

    double lower_bound() const;  // ellipticity constant of the support [λ,1]
    double mean() const;
    double variance() const;
    std::string canonical() const;  // stable text form, used in cache keys and artifacts
};

enum class StreamPurpose : std::uint32_t {
    field_draw = 1,
    edge_resample = 2,
    check_pick = 3,   // verify-suite edge/realization picks
    synthetic = 4,    // auxiliary draws in tests/bootstrap
};

struct SeedSpec {
    std::uint64_t master = 0;
    std::uint64_t realization = 0;
    StreamPurpose purpose = StreamPurpose::field_draw;
};

std::uint64_t mix64(std::uint64_t x);

// SplitMix64 sequence anchored at a derived key; next_uniform() is a pure
// function of (key, counter).
struct CounterStream {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;

    double next_uniform();           // in [0,1)
    double next_positive_uniform();  // in (0,1)
    double next_normal();            // standard normal (Box-Muller)
};

CounterStream stream_for(const SeedSpec& seed, std::int64_t node, int dir);

double draw_conductance(const ConductanceLaw& law, CounterStream& stream);

EdgeField sample_field(const TorusGrid& grid, const ConductanceLaw& law, const SeedSpec& seed);

struct EdgePerturbation {
    std::int64_t node = 0;
    int dir = 0;
    double old_value = 0.0;
    double new_value = 0.0;
};

// a^b: coincides with a on every edge except b = (node,dir), where the value
// is an independent draw from the same law.
EdgeField resample_edge(const EdgeField& a, const ConductanceLaw& law, const SeedSpec& seed,
                        std::int64_t node, int dir, EdgePerturbation* perturbation = nullptr);

}  // namespace homog
