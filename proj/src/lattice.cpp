#include "homog/lattice.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "field serialization assumes a little-endian host");

namespace homog {

TorusGrid::TorusGrid(int dimension, int side) : d(dimension), L(side) {
    if (d < 1 || d > kMaxDim) throw std::invalid_argument("TorusGrid: dimension must be in [1," + std::to_string(kMaxDim) + "]");
    if (L < 2) throw std::invalid_argument("TorusGrid: side must be >= 2");
    nodes = 1;
    for (int i = 0; i < d; ++i) {
        if (nodes > (std::int64_t(1) << 40)) throw std::invalid_argument("TorusGrid: node count too large");
        nodes *= L;
    }
    stride.fill(0);
    std::int64_t s = 1;
    for (int i = d - 1; i >= 0; --i) {
        stride[i] = s;
        s *= L;
    }
}

std::int64_t TorusGrid::index(const std::array<int, kMaxDim>& x) const {
    std::int64_t idx = 0;
    for (int i = 0; i < d; ++i) {
        if (x[i] < 0 || x[i] >= L) throw std::out_of_range("TorusGrid::index: coordinate outside [0,L)");
        idx += x[i] * stride[i];
    }
    return idx;
}

std::array<int, kMaxDim> TorusGrid::coords(std::int64_t idx) const {
    if (idx < 0 || idx >= nodes) throw std::out_of_range("TorusGrid::coords: node index out of range");
    std::array<int, kMaxDim> x{};
    for (int i = 0; i < d; ++i) x[i] = static_cast<int>((idx / stride[i]) % L);
    return x;
}

std::int64_t TorusGrid::neighbor(std::int64_t idx, int dir, int step) const {
    if (dir < 0 || dir >= d) throw std::out_of_range("TorusGrid::neighbor: bad direction");
    const std::int64_t s = stride[dir];
    const int c = static_cast<int>((idx / s) % L);
    if (step == 1) return c == L - 1 ? idx + s - s * L : idx + s;
    if (step == -1) return c == 0 ? idx - s + s * L : idx - s;
    throw std::invalid_argument("TorusGrid::neighbor: step must be +1 or -1");
}

namespace {

void check_same_grid(const TorusGrid& a, const TorusGrid& b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": fields live on different grids");
}

// Walks all nodes in index order keeping the coordinate odometer in sync, so
// kernels get wrap decisions without div/mod per node.
template <class F>
void for_each_node(const TorusGrid& g, F&& f) {
    std::array<int, kMaxDim> x{};
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) {
        f(idx, x);
        for (int i = g.d - 1; i >= 0; --i) {
            if (++x[i] < g.L) break;
            x[i] = 0;
        }
    }
}

}  // namespace

NodeField::NodeField(const TorusGrid& g, double fill) : grid_(g), v_(static_cast<std::size_t>(g.nodes), fill) {
    if (g.nodes == 0) throw std::invalid_argument("NodeField: uninitialized grid");
}

double NodeField::mean() const {
    double s = 0.0;
    for (double x : v_) s += x;
    return s / static_cast<double>(v_.size());
}

void NodeField::shift_to_mean_zero() {
    const double m = mean();
    for (double& x : v_) x -= m;
}

EdgeField::EdgeField(const TorusGrid& g, double fill)
    : grid_(g), v_(static_cast<std::size_t>(g.nodes) * g.d, fill) {
    if (g.nodes == 0) throw std::invalid_argument("EdgeField: uninitialized grid");
}

double EdgeField::component_mean(int dir) const {
    const double* p = plane(dir);
    double s = 0.0;
    for (std::int64_t i = 0; i < grid_.nodes; ++i) s += p[i];
    return s / static_cast<double>(grid_.nodes);
}

MatrixField::MatrixField(const TorusGrid& g, double fill)
    : grid_(g), v_(static_cast<std::size_t>(g.nodes) * g.d * g.d, fill) {
    if (g.nodes == 0) throw std::invalid_argument("MatrixField: uninitialized grid");
}

double MatrixField::component_mean(int i, int j) const {
    const double* p = plane(i, j);
    double s = 0.0;
    for (std::int64_t n = 0; n < grid_.nodes; ++n) s += p[n];
    return s / static_cast<double>(grid_.nodes);
}

EdgeField forward_gradient(const NodeField& u) {
    const TorusGrid& g = u.grid();
    EdgeField out(g);
    for (int dir = 0; dir < g.d; ++dir) {
        const std::int64_t s = g.stride[dir];
        const std::int64_t wrap = s - s * g.L;
        double* o = out.plane(dir);
        const double* uu = u.data();
        for_each_node(g, [&](std::int64_t idx, const std::array<int, kMaxDim>& x) {
            const std::int64_t up = idx + (x[dir] == g.L - 1 ? wrap : s);
            o[idx] = uu[up] - uu[idx];
        });
    }
    return out;
}

NodeField backward_divergence(const EdgeField& F) {
    const TorusGrid& g = F.grid();
    NodeField out(g);
    for (int dir = 0; dir < g.d; ++dir) {
        const std::int64_t s = g.stride[dir];
        const std::int64_t span = s * g.L;
        const double* f = F.plane(dir);
        double* o = out.data();
        for_each_node(g, [&](std::int64_t idx, const std::array<int, kMaxDim>& x) {
            const std::int64_t down = idx - (x[dir] == 0 ? s - span : s);
            o[idx] += f[idx] - f[down];
        });
    }
    return out;
}

NodeField apply_operator(const EdgeField& a, const NodeField& u) {
    check_same_grid(a.grid(), u.grid(), "apply_operator");
    const TorusGrid& g = u.grid();
    NodeField out(g);
    const double* uu = u.data();
    double* o = out.data();
    for (int dir = 0; dir < g.d; ++dir) {
        const std::int64_t s = g.stride[dir];
        const std::int64_t span = s * g.L;
        const double* ad = a.plane(dir);
        for_each_node(g, [&](std::int64_t idx, const std::array<int, kMaxDim>& x) {
            const std::int64_t up = idx + (x[dir] == g.L - 1 ? s - span : s);
            const std::int64_t down = idx - (x[dir] == 0 ? s - span : s);
            o[idx] += ad[idx] * (uu[idx] - uu[up]) + ad[down] * (uu[idx] - uu[down]);
        });
    }
    return out;
}

double dot(const NodeField& a, const NodeField& b) {
    check_same_grid(a.grid(), b.grid(), "dot");
    double s = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double dot(const EdgeField& a, const EdgeField& b) {
    check_same_grid(a.grid(), b.grid(), "dot");
    double s = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < a.size(); ++i) s += pa[i] * pb[i];
    return s;
}

// ---- serialization ----

void write_field(const std::string& path, const TorusGrid& g, int components, const double* data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_field: cannot open " + path);
    const std::uint64_t header[3] = {static_cast<std::uint64_t>(g.d), static_cast<std::uint64_t>(g.L),
                                     static_cast<std::uint64_t>(components)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(g.nodes) * components));
    if (!out) throw std::runtime_error("write_field: short write to " + path);
}

void write_field(const std::string& path, const NodeField& f) { write_field(path, f.grid(), 1, f.data()); }
void write_field(const std::string& path, const EdgeField& f) { write_field(path, f.grid(), f.grid().d, f.data()); }
void write_field(const std::string& path, const MatrixField& f) {
    write_field(path, f.grid(), f.grid().d * f.grid().d, f.data());
}

FieldFile read_field(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_field: cannot open " + path);
    std::uint64_t header[3];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in) throw std::runtime_error("read_field: truncated header in " + path);
    FieldFile f;
    f.grid = TorusGrid(static_cast<int>(header[0]), static_cast<int>(header[1]));
    f.components = static_cast<int>(header[2]);
    if (f.components < 1 || f.components > f.grid.d * f.grid.d * f.grid.d)
        throw std::runtime_error("read_field: bad component count in " + path);
    f.data.resize(static_cast<std::size_t>(f.grid.nodes) * f.components);
    in.read(reinterpret_cast<char*>(f.data.data()),
            static_cast<std::streamsize>(sizeof(double) * f.data.size()));
    if (!in) throw std::runtime_error("read_field: truncated data in " + path);
    return f;
}

NodeField as_node_field(const FieldFile& f) {
    if (f.components != 1) throw std::runtime_error("as_node_field: component count != 1");
    NodeField out(f.grid);
    std::memcpy(out.data(), f.data.data(), sizeof(double) * f.data.size());
    return out;
}

EdgeField as_edge_field(const FieldFile& f) {
    if (f.components != f.grid.d) throw std::runtime_error("as_edge_field: component count != d");
    EdgeField out(f.grid);
    std::memcpy(out.data(), f.data.data(), sizeof(double) * f.data.size());
    return out;
}

MatrixField as_matrix_field(const FieldFile& f) {
    if (f.components != f.grid.d * f.grid.d) throw std::runtime_error("as_matrix_field: component count != d*d");
    MatrixField out(f.grid);
    std::memcpy(out.data(), f.data.data(), sizeof(double) * f.data.size());
    return out;
}

void write_field_csv(const std::string& path, const TorusGrid& g, int components, const double* data) {
    if (g.nodes > 1000000) throw std::invalid_argument("write_field_csv: grid too large for CSV dump");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_field_csv: cannot open " + path);
    out << "# d=" << g.d << " L=" << g.L << " components=" << components << "\n";
    for (int i = 0; i < g.d; ++i) out << "x" << i << ",";
    for (int c = 0; c < components; ++c) out << "v" << c << (c + 1 < components ? "," : "\n");
    char buf[32];
    for (std::int64_t idx = 0; idx < g.nodes; ++idx) {
        const auto x = g.coords(idx);
        for (int i = 0; i < g.d; ++i) out << x[i] << ",";
        for (int c = 0; c < components; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", data[static_cast<std::size_t>(c) * g.nodes + idx]);
            out << buf << (c + 1 < components ? "," : "\n");
        }
    }
    if (!out) throw std::runtime_error("write_field_csv: short write to " + path);
}

FieldFile read_field_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_field_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_field_csv: empty file " + path);
    int d = 0, L = 0, components = 0;
    if (std::sscanf(line.c_str(), "# d=%d L=%d components=%d", &d, &L, &components) != 3)
        throw std::runtime_error("read_field_csv: bad header in " + path);
    FieldFile f;
    f.grid = TorusGrid(d, L);
    f.components = components;
    f.data.assign(static_cast<std::size_t>(f.grid.nodes) * components, 0.0);
    std::getline(in, line);  // column names
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::array<int, kMaxDim> x{};
        std::string tok;
        for (int i = 0; i < d; ++i) {
            std::getline(ss, tok, ',');
            x[i] = std::stoi(tok);
        }
        const std::int64_t idx = f.grid.index(x);
        for (int c = 0; c < components; ++c) {
            std::getline(ss, tok, ',');
            f.data[static_cast<std::size_t>(c) * f.grid.nodes + idx] = std::stod(tok);
        }
    }
    return f;
}

}  // namespace homog
