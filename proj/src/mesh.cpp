#include "elfin/mesh.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace elfin {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string strip_comment(const std::string& line) {
    auto pos = line.find('#');
    return pos == std::string::npos ? line : line.substr(0, pos);
}

bool blank(const std::string& s) {
    return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

// Reads the next non-blank, comment-stripped line; returns false on EOF.
bool next_content_line(std::istream& in, std::string& out, int& line_no) {
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        out = strip_comment(raw);
        if (!blank(out)) return true;
    }
    return false;
}

double tet_volume(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3) {
    Mat3 edges;
    edges.col(0) = p1 - p0;
    edges.col(1) = p2 - p0;
    edges.col(2) = p3 - p0;
    return edges.determinant() / 6.0;
}

} // namespace

VecX pack_nodes(const std::vector<Vec3>& nodes) {
    VecX x(3 * static_cast<int>(nodes.size()));
    for (int v = 0; v < static_cast<int>(nodes.size()); ++v) x.segment<3>(3 * v) = nodes[v];
    return x;
}

VecX TetMesh::rest_positions() const { return pack_nodes(nodes); }

std::vector<bool> TetMesh::fixed_mask() const {
    std::vector<bool> mask(num_nodes(), false);
    for (int v : fixed_vertices) mask[v] = true;
    return mask;
}

void TetMesh::validate() const {
    const int n = num_nodes();
    for (int e = 0; e < num_elements(); ++e) {
        for (int v : tets[e]) {
            if (v < 0 || v >= n)
                fail("element " + std::to_string(e) + " references node " +
                     std::to_string(v) + " outside [0, " + std::to_string(n) + ")");
        }
    }
    std::vector<int> bad;
    for (int e = 0; e < num_elements(); ++e)
        if (element_volume(*this, e) <= 0.0) bad.push_back(e);
    if (!bad.empty()) {
        std::ostringstream msg;
        msg << "non-positive rest volume for element(s):";
        for (size_t i = 0; i < bad.size() && i < 16; ++i) msg << ' ' << bad[i];
        if (bad.size() > 16) msg << " and " << bad.size() - 16 << " more";
        fail(msg.str());
    }
    for (int v : fixed_vertices)
        if (v < 0 || v >= n) fail("fixed vertex " + std::to_string(v) + " out of range");
    if (!std::is_sorted(fixed_vertices.begin(), fixed_vertices.end()))
        fail("fixed_vertices must be sorted");
    if (std::adjacent_find(fixed_vertices.begin(), fixed_vertices.end()) !=
        fixed_vertices.end())
        fail("fixed_vertices must be unique");
}

double element_volume(const TetMesh& mesh, int e) {
    const auto& t = mesh.tets[e];
    return tet_volume(mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]],
                      mesh.nodes[t[3]]);
}

double element_volume(const TetMesh& mesh, const VecX& positions, int e) {
    const auto& t = mesh.tets[e];
    return tet_volume(node_of(positions, t[0]), node_of(positions, t[1]),
                      node_of(positions, t[2]), node_of(positions, t[3]));
}

ClusterMap build_cluster_weights(const TetMesh& mesh,
                                 const std::vector<int>& labels,
                                 int num_clusters) {
    const int m = mesh.num_elements();
    if (static_cast<int>(labels.size()) != m)
        fail("label count " + std::to_string(labels.size()) +
             " does not match element count " + std::to_string(m));
    for (int e = 0; e < m; ++e)
        if (labels[e] < 0 || labels[e] >= num_clusters)
            fail("cluster label " + std::to_string(labels[e]) + " for element " +
                 std::to_string(e) + " outside [0, " + std::to_string(num_clusters) + ")");

    std::vector<std::vector<int>> vertex_elements(mesh.num_nodes());
    for (int e = 0; e < m; ++e)
        for (int v : mesh.tets[e]) vertex_elements[v].push_back(e);

    ClusterMap map;
    map.num_clusters = num_clusters;
    map.weights.resize(m);
    std::set<int> seen;
    for (int e = 0; e < m; ++e) {
        seen.clear();
        seen.insert(labels[e]);
        for (int v : mesh.tets[e])
            for (int other : vertex_elements[v]) seen.insert(labels[other]);
        auto& row = map.weights[e];
        if (seen.size() == 1) {
            row.emplace_back(labels[e], 1.0);
        } else {
            // Uniform blend; the last weight absorbs rounding so rows sum to 1.
            const double w = 1.0 / static_cast<double>(seen.size());
            double used = 0.0;
            size_t i = 0;
            for (int c : seen) {
                double wi = (i + 1 == seen.size()) ? 1.0 - used : w;
                row.emplace_back(c, wi);
                used += w;
                ++i;
            }
        }
    }
    return map;
}

void PoseObservation::validate(const TetMesh& mesh) const {
    if (observed_ids.size() != targets.size())
        fail("observed id / target count mismatch");
    const auto mask = mesh.fixed_mask();
    std::unordered_set<int> seen;
    for (int v : observed_ids) {
        if (v < 0 || v >= mesh.num_nodes())
            fail("observed vertex " + std::to_string(v) + " out of range");
        if (mask[v]) fail("observed vertex " + std::to_string(v) + " is fixed");
        if (!seen.insert(v).second)
            fail("observed vertex " + std::to_string(v) + " repeated");
    }
    if (gravity.norm() > 2.0 * 9.81)
        fail("gravity magnitude " + std::to_string(gravity.norm()) +
             " exceeds sanity bound");
}

// --- Tetgen I/O -------------------------------------------------------------

namespace {

std::ifstream open_or_fail(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open '" + path + "'");
    return in;
}

} // namespace

TetMesh load_mesh(const std::string& node_path, const std::string& ele_path) {
    TetMesh mesh;

    { // .node
        auto in = open_or_fail(node_path);
        int line_no = 0;
        std::string line;
        if (!next_content_line(in, line, line_no))
            fail(node_path + ": empty file");
        std::istringstream hdr(line);
        long n = 0, dim = 0, attrs = 0, markers = 0;
        if (!(hdr >> n >> dim) || n < 0)
            fail(node_path + ":" + std::to_string(line_no) + ": malformed header");
        hdr >> attrs >> markers;
        if (dim != 3)
            fail(node_path + ":" + std::to_string(line_no) +
                 ": expected dimension 3, got " + std::to_string(dim));

        mesh.nodes.assign(n, Vec3::Zero());
        std::vector<bool> present(n, false);
        for (long i = 0; i < n; ++i) {
            if (!next_content_line(in, line, line_no))
                fail(node_path + ": unexpected end of file, expected " +
                     std::to_string(n) + " vertex rows");
            std::istringstream row(line);
            long id = 0;
            double x, y, z;
            if (!(row >> id >> x >> y >> z))
                fail(node_path + ":" + std::to_string(line_no) + ": malformed vertex row");
            if (id < 1 || id > n)
                fail(node_path + ":" + std::to_string(line_no) + ": vertex index " +
                     std::to_string(id) + " outside [1, " + std::to_string(n) + "]");
            if (present[id - 1])
                fail(node_path + ":" + std::to_string(line_no) + ": duplicate vertex index " +
                     std::to_string(id));
            present[id - 1] = true;
            mesh.nodes[id - 1] = Vec3(x, y, z);
        }
    }

    { // .ele
        auto in = open_or_fail(ele_path);
        int line_no = 0;
        std::string line;
        if (!next_content_line(in, line, line_no))
            fail(ele_path + ": empty file");
        std::istringstream hdr(line);
        long m = 0, per = 0, attrs = 0;
        if (!(hdr >> m >> per) || m < 0)
            fail(ele_path + ":" + std::to_string(line_no) + ": malformed header");
        hdr >> attrs;
        if (per != 4)
            fail(ele_path + ":" + std::to_string(line_no) +
                 ": expected 4 nodes per element, got " + std::to_string(per));

        const long n = mesh.num_nodes();
        mesh.tets.reserve(m);
        for (long i = 0; i < m; ++i) {
            if (!next_content_line(in, line, line_no))
                fail(ele_path + ": unexpected end of file, expected " +
                     std::to_string(m) + " element rows");
            std::istringstream row(line);
            long id = 0, a, b, c, d;
            if (!(row >> id >> a >> b >> c >> d))
                fail(ele_path + ":" + std::to_string(line_no) + ": malformed element row");
            for (long v : {a, b, c, d})
                if (v < 1 || v > n)
                    fail(ele_path + ":" + std::to_string(line_no) + ": node index " +
                         std::to_string(v) + " outside [1, " + std::to_string(n) + "]");
            mesh.tets.push_back({static_cast<int>(a - 1), static_cast<int>(b - 1),
                                 static_cast<int>(c - 1), static_cast<int>(d - 1)});
        }
    }

    mesh.validate();
    return mesh;
}

void save_mesh(const TetMesh& mesh, const std::string& node_path,
               const std::string& ele_path) {
    save_node_file(mesh.nodes, node_path);
    std::ofstream out(ele_path);
    if (!out) fail("cannot write '" + ele_path + "'");
    out << mesh.num_elements() << " 4 0\n";
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto& t = mesh.tets[e];
        out << e + 1 << ' ' << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << ' '
            << t[3] + 1 << '\n';
    }
}

void save_node_file(const std::vector<Vec3>& nodes, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot write '" + path + "'");
    out << nodes.size() << " 3 0 0\n";
    char buf[128];
    for (size_t v = 0; v < nodes.size(); ++v) {
        std::snprintf(buf, sizeof(buf), "%zu %.17g %.17g %.17g\n", v + 1,
                      nodes[v].x(), nodes[v].y(), nodes[v].z());
        out << buf;
    }
}

void save_node_file(const VecX& positions, const std::string& path) {
    std::vector<Vec3> nodes(positions.size() / 3);
    for (size_t v = 0; v < nodes.size(); ++v)
        nodes[v] = positions.segment<3>(3 * static_cast<int>(v));
    save_node_file(nodes, path);
}

std::vector<Vec3> load_node_file(const std::string& path) {
    auto in = open_or_fail(path);
    int line_no = 0;
    std::string line;
    if (!next_content_line(in, line, line_no)) fail(path + ": empty file");
    std::istringstream hdr(line);
    long n = 0, dim = 0;
    if (!(hdr >> n >> dim) || n < 0 || dim != 3)
        fail(path + ":" + std::to_string(line_no) + ": malformed header");
    std::vector<Vec3> nodes(n, Vec3::Zero());
    for (long i = 0; i < n; ++i) {
        if (!next_content_line(in, line, line_no))
            fail(path + ": unexpected end of file");
        std::istringstream row(line);
        long id;
        double x, y, z;
        if (!(row >> id >> x >> y >> z) || id < 1 || id > n)
            fail(path + ":" + std::to_string(line_no) + ": malformed vertex row");
        nodes[id - 1] = Vec3(x, y, z);
    }
    return nodes;
}

std::vector<int> load_fixed_vertices(const std::string& path, int num_nodes) {
    auto in = open_or_fail(path);
    std::vector<int> out;
    int line_no = 0;
    std::string line;
    while (next_content_line(in, line, line_no)) {
        std::istringstream row(line);
        long v;
        while (row >> v) {
            if (v < 0 || v >= num_nodes)
                fail(path + ":" + std::to_string(line_no) + ": vertex index " +
                     std::to_string(v) + " outside [0, " + std::to_string(num_nodes) + ")");
            out.push_back(static_cast<int>(v));
        }
        if (!row.eof())
            fail(path + ":" + std::to_string(line_no) + ": malformed index");
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<int> load_labels(const std::string& path, int num_elements) {
    auto in = open_or_fail(path);
    std::vector<int> out;
    int line_no = 0;
    std::string line;
    while (next_content_line(in, line, line_no)) {
        std::istringstream row(line);
        long c;
        while (row >> c) out.push_back(static_cast<int>(c));
        if (!row.eof())
            fail(path + ":" + std::to_string(line_no) + ": malformed label");
    }
    if (static_cast<int>(out.size()) != num_elements)
        fail(path + ": expected " + std::to_string(num_elements) + " labels, found " +
             std::to_string(out.size()));
    return out;
}

} // namespace elfin
