#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "elfin/mesh.hpp"
#include "elfin/synth.hpp"
#include "oracles.hpp"

using namespace elfin;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / ("elfin_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

// One positively oriented tet plus a second one sharing a face.
TetMesh two_tets() {
    TetMesh m;
    m.nodes = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1),
               Vec3(1, 1, 1)};
    m.tets = {{0, 1, 2, 3}, {1, 2, 3, 4}};
    return m;
}

} // namespace

TEST_CASE("element volumes match the determinant formula") {
    TetMesh m = two_tets();
    // V = det[x1-x0 | x2-x0 | x3-x0] / 6; unit right-corner tet has V = 1/6.
    CHECK(element_volume(m, 0) == doctest::Approx(1.0 / 6.0).epsilon(1e-14));
    CHECK(element_volume(m, 1) > 0.0);

    VecX x = m.rest_positions();
    CHECK(element_volume(m, x, 0) == element_volume(m, 0));

    // Swapping two vertices of a tet flips the sign.
    std::swap(m.tets[0][0], m.tets[0][1]);
    CHECK(element_volume(m, 0) == doctest::Approx(-1.0 / 6.0).epsilon(1e-14));
}

TEST_CASE("validate rejects bad meshes") {
    TetMesh m = two_tets();
    CHECK_NOTHROW(m.validate());

    SUBCASE("out-of-range vertex index") {
        m.tets[1][3] = 5;
        CHECK_THROWS_AS(m.validate(), std::runtime_error);
    }
    SUBCASE("inverted element") {
        std::swap(m.tets[0][0], m.tets[0][1]);
        CHECK_THROWS_AS(m.validate(), std::runtime_error);
    }
    SUBCASE("fixed vertex out of range") {
        m.fixed_vertices = {7};
        CHECK_THROWS_AS(m.validate(), std::runtime_error);
    }
}

TEST_CASE("rest_positions and pack_nodes agree") {
    TetMesh m = two_tets();
    VecX a = m.rest_positions();
    VecX b = pack_nodes(m.nodes);
    REQUIRE(a.size() == 15);
    CHECK((a - b).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(node_of(a, 4) == Vec3(1, 1, 1));
}

TEST_CASE("fixed_mask marks exactly the fixed set") {
    TetMesh m = two_tets();
    m.fixed_vertices = {0, 3};
    auto mask = m.fixed_mask();
    REQUIRE(mask.size() == 5);
    CHECK(mask[0]);
    CHECK_FALSE(mask[1]);
    CHECK_FALSE(mask[2]);
    CHECK(mask[3]);
    CHECK_FALSE(mask[4]);
}

TEST_CASE("tetgen save/load round trip is bit exact") {
    TetMesh m = make_block_mesh(3, 2, 2, 0.013);
    // Perturb so coordinates are not short decimals.
    for (auto& p : m.nodes) p += Vec3(1.0 / 3.0, 1.0 / 7.0, 1.0 / 11.0) * 1e-3;

    auto dir = temp_dir();
    save_mesh(m, (dir / "m.node").string(), (dir / "m.ele").string());
    TetMesh back = load_mesh((dir / "m.node").string(), (dir / "m.ele").string());

    REQUIRE(back.num_nodes() == m.num_nodes());
    REQUIRE(back.num_elements() == m.num_elements());
    for (int v = 0; v < m.num_nodes(); ++v) CHECK(back.nodes[v] == m.nodes[v]);
    CHECK(back.tets == m.tets);
    fs::remove_all(dir);
}

TEST_CASE("loader reports malformed input with a line number") {
    auto dir = temp_dir();
    write_file(dir / "bad.node", "2 3 0 0\n1 0.0 0.0 0.0\n2 nonsense 0.0 0.0\n");
    write_file(dir / "ok.ele", "1 4 0\n1 1 2 3 4\n");
    try {
        load_mesh((dir / "bad.node").string(), (dir / "ok.ele").string());
        FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("loader rejects non-positive rest volumes") {
    auto dir = temp_dir();
    write_file(dir / "m.node",
               "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n");
    // Vertex order gives negative volume.
    write_file(dir / "m.ele", "1 4 0\n1 2 1 3 4\n");
    CHECK_THROWS_AS(load_mesh((dir / "m.node").string(), (dir / "m.ele").string()),
                    std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("node file round trip preserves positions") {
    auto dir = temp_dir();
    std::vector<Vec3> nodes = {Vec3(0.1, -0.2, 1.0 / 3.0), Vec3(1e-17, 2e8, -3.5)};
    save_node_file(nodes, (dir / "n.node").string());
    auto back = load_node_file((dir / "n.node").string());
    REQUIRE(back.size() == nodes.size());
    for (size_t i = 0; i < nodes.size(); ++i) CHECK(back[i] == nodes[i]);
    fs::remove_all(dir);
}

TEST_CASE("fixed vertex list parsing") {
    auto dir = temp_dir();
    write_file(dir / "fixed.txt", "# clamp\n2\n0\n2\n");
    auto ids = load_fixed_vertices((dir / "fixed.txt").string(), 5);
    CHECK(ids == std::vector<int>{0, 2});

    write_file(dir / "oob.txt", "9\n");
    CHECK_THROWS_AS(load_fixed_vertices((dir / "oob.txt").string(), 5),
                    std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("label loading enforces the element count") {
    auto dir = temp_dir();
    write_file(dir / "labels.txt", "0\n1\n");
    CHECK(load_labels((dir / "labels.txt").string(), 2) == std::vector<int>{0, 1});
    CHECK_THROWS_AS(load_labels((dir / "labels.txt").string(), 3), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("cluster weights blend only across label boundaries") {
    TetMesh m = make_block_mesh(4, 1, 1, 0.01);
    auto labels = band_labels(m, 2);
    ClusterMap cm = build_cluster_weights(m, labels, 2);

    REQUIRE(cm.num_clusters == 2);
    REQUIRE(static_cast<int>(cm.weights.size()) == m.num_elements());

    int pure = 0, blended = 0;
    for (int e = 0; e < m.num_elements(); ++e) {
        double sum = 0.0;
        for (auto [c, w] : cm.weights[e]) {
            CHECK(c >= 0);
            CHECK(c < 2);
            CHECK(w > 0.0);
            sum += w;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
        if (cm.weights[e].size() == 1) {
            // Pure rows keep the element's own label at weight one.
            CHECK(cm.weights[e][0].first == labels[e]);
            pure++;
        } else {
            blended++;
        }
    }
    // The band boundary exists, and so do interior elements away from it.
    CHECK(pure > 0);
    CHECK(blended > 0);
}

TEST_CASE("pose observation validation") {
    TetMesh m = two_tets();
    PoseObservation p;
    p.gravity = Vec3(0, 0, -9.81);
    p.observed_ids = {1, 4};
    p.targets = {Vec3::Zero(), Vec3::Zero()};
    CHECK_NOTHROW(p.validate(m));

    SUBCASE("id out of range") {
        p.observed_ids[1] = 11;
        CHECK_THROWS_AS(p.validate(m), std::runtime_error);
    }
    SUBCASE("target count mismatch") {
        p.targets.pop_back();
        CHECK_THROWS_AS(p.validate(m), std::runtime_error);
    }
}
