#pragma once
// Periodic lattice Z^d_L: grid geometry, field containers, and the discrete
// calculus (forward gradient, backward divergence, a-weighted operator) that
// every equation downstream is built from. Node indexing is row-major over
// [0,L)^d with the last coordinate fastest; this ordering is part of the
// reproducibility contract (seeded fields replay bit-identically).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace homog {

inline constexpr int kMaxDim = 4;

struct TorusGrid {
    TorusGrid() = default;
    TorusGrid(int dimension, int side);

    int d = 0;
    int L = 0;
    std::int64_t nodes = 0;
    std::array<std::int64_t, kMaxDim> stride{};  // stride[d-1] == 1

    std::int64_t index(const std::array<int, kMaxDim>& x) const;
    std::array<int, kMaxDim> coords(std::int64_t idx) const;
    // one periodic step along direction dir (0-based); step is +1 or -1
    std::int64_t neighbor(std::int64_t idx, int dir, int step) const;

    bool operator==(const TorusGrid& o) const { return d == o.d && L == o.L; }
    bool operator!=(const TorusGrid& o) const { return !(*this == o); }
};

// Scalar value per node.
class NodeField {
  public:
    NodeField() = default;
    explicit NodeField(const TorusGrid& g, double fill = 0.0);

    const TorusGrid& grid() const { return grid_; }
    std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }
    double& operator[](std::int64_t i) { return v_[i]; }
    double operator[](std::int64_t i) const { return v_[i]; }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double mean() const;
    void shift_to_mean_zero();

  private:
    TorusGrid grid_;
    std::vector<double> v_;
};

// d values per node; component i lives on the edge (x, x+e_i). Storage is
// plane-major: plane(i) is a contiguous array over nodes. Doubles as the
// diagonal conductance field a(x) = diag(a(x,x+e_1),...,a(x,x+e_d)).
class EdgeField {
  public:
    EdgeField() = default;
    explicit EdgeField(const TorusGrid& g, double fill = 0.0);

    const TorusGrid& grid() const { return grid_; }
    std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }
    double& at(std::int64_t node, int dir) { return v_[static_cast<std::size_t>(dir) * grid_.nodes + node]; }
    double at(std::int64_t node, int dir) const { return v_[static_cast<std::size_t>(dir) * grid_.nodes + node]; }
    double* plane(int dir) { return v_.data() + static_cast<std::size_t>(dir) * grid_.nodes; }
    const double* plane(int dir) const { return v_.data() + static_cast<std::size_t>(dir) * grid_.nodes; }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double component_mean(int dir) const;

  private:
    TorusGrid grid_;
    std::vector<double> v_;
};

// d*d values per node, entry (i,j) plane-major at plane i*d+j. Houses the
// commutator Xi_ij and discretized matrix test functions.
class MatrixField {
  public:
    MatrixField() = default;
    explicit MatrixField(const TorusGrid& g, double fill = 0.0);

    const TorusGrid& grid() const { return grid_; }
    std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }
    double& at(std::int64_t node, int i, int j) {
        return v_[static_cast<std::size_t>(i * grid_.d + j) * grid_.nodes + node];
    }
    double at(std::int64_t node, int i, int j) const {
        return v_[static_cast<std::size_t>(i * grid_.d + j) * grid_.nodes + node];
    }
    double* plane(int i, int j) { return v_.data() + static_cast<std::size_t>(i * grid_.d + j) * grid_.nodes; }
    const double* plane(int i, int j) const {
        return v_.data() + static_cast<std::size_t>(i * grid_.d + j) * grid_.nodes;
    }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double component_mean(int i, int j) const;

  private:
    TorusGrid grid_;
    std::vector<double> v_;
};

// ---- discrete calculus ----

// (grad u)_i(x) = u(x+e_i) - u(x), periodic wrap
EdgeField forward_gradient(const NodeField& u);

// (div* F)(x) = sum_i F_i(x) - F_i(x-e_i); -div* is the l2 adjoint of grad:
// <grad u, F> = -<u, div* F>
NodeField backward_divergence(const EdgeField& F);

// -div*(a grad u)(x) = sum_{z~x} a(x,z) (u(x) - u(z)); SPSD, kernel = constants
NodeField apply_operator(const EdgeField& a, const NodeField& u);

double dot(const NodeField& a, const NodeField& b);
double dot(const EdgeField& a, const EdgeField& b);

// ---- serialization ----
// Binary layout: three little-endian uint64 (d, L, components) followed by
// components*L^d doubles (little-endian IEEE-754), plane-major like the field
// containers. CSV (for small grids): header line, then one line per node with
// coordinates and values printed as %.17g.

struct FieldFile {
    TorusGrid grid;
    int components = 0;
    std::vector<double> data;
};

void write_field(const std::string& path, const TorusGrid& g, int components, const double* data);
void write_field(const std::string& path, const NodeField& f);
void write_field(const std::string& path, const EdgeField& f);
void write_field(const std::string& path, const MatrixField& f);
FieldFile read_field(const std::string& path);
NodeField as_node_field(const FieldFile& f);
EdgeField as_edge_field(const FieldFile& f);
MatrixField as_matrix_field(const FieldFile& f);

void write_field_csv(const std::string& path, const TorusGrid& g, int components, const double* data);
FieldFile read_field_csv(const std::string& path);

}  // namespace homog
