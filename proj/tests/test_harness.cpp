#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iwd/digest.hpp"
#include "iwd/harness.hpp"

namespace fs = std::filesystem;
using namespace iwd;
using namespace iwd::harness;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void push_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& raster) {
    std::vector<unsigned char> v;
    push_u32_be(v, 0x00000803u);
    push_u32_be(v, n);
    push_u32_be(v, rows);
    push_u32_be(v, cols);
    v.insert(v.end(), raster.begin(), raster.end());
    return v;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& ys) {
    std::vector<unsigned char> v;
    push_u32_be(v, 0x00000801u);
    push_u32_be(v, static_cast<std::uint32_t>(ys.size()));
    v.insert(v.end(), ys.begin(), ys.end());
    return v;
}

} // namespace

TEST_CASE("idx files parse big-endian headers and byte rasters") {
    TempDir tmp("iwd_test_idx");
    write_bytes(tmp.file("im.idx"), idx_images(2, 2, 2, {0, 128, 255, 64, 10, 20, 30, 40}));
    write_bytes(tmp.file("lb.idx"), idx_labels({1, 0}));

    const Dataset ds = load_idx(tmp.file("im.idx"), tmp.file("lb.idx"));
    REQUIRE(ds.size() == 2);
    CHECK(ds.images[0].height == 2);
    CHECK(ds.images[0].width == 2);
    CHECK(ds.images[0].channels == 1);
    CHECK(ds.images[0].pixels[0] == 0.0);
    CHECK(ds.images[0].pixels[1] == 128.0 / 255.0);
    CHECK(ds.images[0].pixels[2] == 1.0);
    CHECK(ds.images[1].pixels[3] == 40.0 / 255.0);
    CHECK(ds.labels == std::vector<int>{1, 0});
    CHECK(ds.class_count == 2);
}

TEST_CASE("idx error messages locate the problem") {
    TempDir tmp("iwd_test_idx_err");
    // label magic where an image magic belongs
    std::vector<unsigned char> bad;
    push_u32_be(bad, 0x00000801u);
    push_u32_be(bad, 1);
    write_bytes(tmp.file("bad.idx"), bad);
    write_bytes(tmp.file("lb.idx"), idx_labels({0}));
    try {
        (void)load_idx(tmp.file("bad.idx"), tmp.file("lb.idx"));
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("0x00000801") != std::string::npos);
        CHECK(msg.find("offset 0") != std::string::npos);
    }

    // count mismatch names both files
    write_bytes(tmp.file("im.idx"), idx_images(2, 2, 2, std::vector<unsigned char>(8, 7)));
    write_bytes(tmp.file("lb3.idx"), idx_labels({0, 1, 0}));
    try {
        (void)load_idx(tmp.file("im.idx"), tmp.file("lb3.idx"));
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2 items") != std::string::npos);
        CHECK(msg.find("3") != std::string::npos);
    }

    // truncated raster reports the read position
    write_bytes(tmp.file("trunc.idx"), idx_images(2, 2, 2, std::vector<unsigned char>(7, 1)));
    write_bytes(tmp.file("lb2.idx"), idx_labels({0, 1}));
    try {
        (void)load_idx(tmp.file("trunc.idx"), tmp.file("lb2.idx"));
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("truncated at offset 23") != std::string::npos);
    }

    CHECK_THROWS_AS((void)load_idx(tmp.file("absent.idx"), tmp.file("lb.idx")), IoError);
}

TEST_CASE("synthetic textures are deterministic and byte-quantized") {
    SyntheticParams p;
    p.classes = 3;
    p.per_class = 4;
    p.height = 9;
    p.width = 9;
    p.sigma = 0.05;
    const Dataset a = generate_synthetic(42, p);
    const Dataset b = generate_synthetic(42, p);
    REQUIRE(a.size() == 12);
    CHECK(a.class_count == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.images[i].pixels == b.images[i].pixels);
        CHECK(a.labels[i] == static_cast<int>(i) / 4);
        for (double v : a.images[i].pixels) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            CHECK(std::round(v * 255.0) == v * 255.0); // on the 1/255 grid
        }
    }
    const Dataset c = generate_synthetic(43, p);
    CHECK(c.images[0].pixels != a.images[0].pixels);

    // sigma = 0 repeats the class template and classes still differ
    p.sigma = 0.0;
    const Dataset d = generate_synthetic(7, p);
    CHECK(d.images[0].pixels == d.images[1].pixels);
    CHECK(d.images[0].pixels != d.images[4].pixels);
}

TEST_CASE("synthetic params are validated") {
    SyntheticParams p;
    p.classes = 0;
    CHECK_THROWS_AS((void)generate_synthetic(0, p), ValidationError);
    p = SyntheticParams{};
    p.per_class = 0;
    CHECK_THROWS_AS((void)generate_synthetic(0, p), ValidationError);
    p = SyntheticParams{};
    p.height = 0;
    CHECK_THROWS_AS((void)generate_synthetic(0, p), ValidationError);
    p = SyntheticParams{};
    p.sigma = -0.1;
    CHECK_THROWS_AS((void)generate_synthetic(0, p), ValidationError);
}

TEST_CASE("idx round trip preserves quantized pixels bitwise") {
    TempDir tmp("iwd_test_idx_rt");
    SyntheticParams p;
    p.classes = 2;
    p.per_class = 3;
    p.height = 6;
    p.width = 6;
    const Dataset ds = generate_synthetic(5, p);
    save_idx(ds, tmp.file("im.idx"), tmp.file("lb.idx"));
    const Dataset back = load_idx(tmp.file("im.idx"), tmp.file("lb.idx"));
    REQUIRE(back.size() == ds.size());
    CHECK(back.labels == ds.labels);
    CHECK(back.class_count == ds.class_count);
    for (std::size_t i = 0; i < ds.size(); ++i)
        CHECK(back.images[i].pixels == ds.images[i].pixels);
}

TEST_CASE("checkerboard tiles alternate and tile must divide the shape") {
    const Image b = checkerboard_image(6, 9, 3);
    CHECK(b.at(0, 0, 0) == 0.0);
    CHECK(b.at(0, 3, 0) == 1.0);
    CHECK(b.at(0, 6, 0) == 0.0);
    CHECK(b.at(3, 0, 0) == 1.0);
    CHECK(b.at(5, 5, 0) == 0.0); // tile (1,1)
    CHECK(b.at(2, 2, 0) == 0.0); // within tile (0,0)
    CHECK_THROWS_AS((void)checkerboard_image(7, 9, 3), ValidationError);
    CHECK_THROWS_AS((void)checkerboard_image(6, 9, 0), ValidationError);
}

TEST_CASE("zero-transport ball of a checkerboard has a large l2 diameter") {
    const Image board = checkerboard_image(12, 12, 3);
    const double diam = estimate_ball_diameter(board, 0.0, BallMetric::iwd, 64, 1);
    // swapping two adjacent opposite tiles moves 18 pixels by 1 each
    CHECK(diam >= std::sqrt(18.0) - 1e-9);
    CHECK(diam > 4.0);

    // a constant image has only one point in its permutation orbit
    Image flat = board;
    for (auto& v : flat.pixels) v = 0.5;
    CHECK(estimate_ball_diameter(flat, 0.0, BallMetric::iwd, 16, 1) == 0.0);
}

TEST_CASE("linf ball diameter obeys the box bound") {
    const Image board = checkerboard_image(12, 12, 3);
    CHECK(estimate_ball_diameter(board, 0.0, BallMetric::linf, 8, 2) == 0.0);
    const double eps = 8.0 / 255.0;
    const double diam = estimate_ball_diameter(board, eps, BallMetric::linf, 32, 2);
    CHECK(diam > 0.0);
    CHECK(diam <= 2.0 * eps * std::sqrt(144.0) + 1e-12);
    CHECK_THROWS_AS((void)estimate_ball_diameter(board, 0.1, BallMetric::linf, 1, 0),
                    ValidationError);
    CHECK_THROWS_AS((void)estimate_ball_diameter(board, -0.1, BallMetric::linf, 8, 0),
                    ValidationError);
}

TEST_CASE("experiment kinds round trip by name") {
    for (ExperimentKind k :
         {ExperimentKind::attack_table, ExperimentKind::defense_table,
          ExperimentKind::perturbation_histogram, ExperimentKind::ablation_tau,
          ExperimentKind::ablation_beta, ExperimentKind::theorem1_demo})
        CHECK(parse_experiment_kind(experiment_kind_name(k)) == k);
    CHECK_THROWS_AS((void)parse_experiment_kind("figure_12"), ValidationError);
}

TEST_CASE("experiment config json round trip") {
    ExperimentConfig c;
    c.kind = ExperimentKind::ablation_tau;
    c.out_dir = "runs/tau";
    c.seed = 99;
    c.threads = 2;
    c.data.classes = 4;
    c.data.per_class = 50;
    c.data.height = 15;
    c.data.width = 9;
    c.data.sigma = 0.125;
    c.idx_images = "im.idx";
    c.idx_labels = "lb.idx";
    c.model_path = "m.bin";
    c.sweep = {0.01, 0.05, 0.1};
    c.train_per_class = 80;
    c.test_per_class = 20;
    c.epochs = 12;
    c.iwdd_epochs = 6;
    c.batch = 16;
    c.attack_images = 64;
    c.restarts = 3;
    c.seeds = 2;

    const ExperimentConfig d = config_from_json(config_to_json(c));
    CHECK(d.kind == c.kind);
    CHECK(d.out_dir == c.out_dir);
    CHECK(d.seed == c.seed);
    CHECK(d.threads == c.threads);
    CHECK(d.data.classes == c.data.classes);
    CHECK(d.data.per_class == c.data.per_class);
    CHECK(d.data.height == c.data.height);
    CHECK(d.data.width == c.data.width);
    CHECK(d.data.sigma == c.data.sigma);
    CHECK(d.idx_images == c.idx_images);
    CHECK(d.idx_labels == c.idx_labels);
    CHECK(d.model_path == c.model_path);
    CHECK(d.sweep == c.sweep);
    CHECK(d.train_per_class == c.train_per_class);
    CHECK(d.test_per_class == c.test_per_class);
    CHECK(d.epochs == c.epochs);
    CHECK(d.iwdd_epochs == c.iwdd_epochs);
    CHECK(d.batch == c.batch);
    CHECK(d.attack_images == c.attack_images);
    CHECK(d.restarts == c.restarts);
    CHECK(d.seeds == c.seeds);

    CHECK_THROWS_AS((void)config_from_json("{"), ValidationError);
    CHECK_THROWS_AS((void)config_from_json("{\"experiment\":\"nope\"}"), ValidationError);

    ExperimentConfig bad;
    bad.kind = ExperimentKind::ablation_beta;
    bad.sweep = {};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("report numbers use six significant digits, percents two decimals") {
    CHECK(format_percent(0.6978) == "69.78");
    CHECK(format_percent(1.0) == "100.00");
    CHECK(format_percent(0.45) == "45.00");
    CHECK(format_percent(0.46) == "46.00");
    CHECK(format_number(0.5) == "0.5");
    CHECK(format_number(3.14159265) == "3.14159");
    CHECK(format_number(1234567.0) == "1.23457e+06");
    CHECK(format_number(100.0) == "100");
    CHECK(format_number(0.000123456789) == "0.000123457");
}

TEST_CASE("relative data paths resolve through IWD_DATA_DIR") {
    TempDir tmp("iwd_test_datadir");
    CHECK(resolve_data_path("/abs/file.idx") == "/abs/file.idx");
    CHECK(resolve_data_path("") == "");

    write_bytes(tmp.file("present.idx"), {1, 2, 3});
    REQUIRE(setenv("IWD_DATA_DIR", tmp.path.string().c_str(), 1) == 0);
    CHECK(resolve_data_path("anywhere.idx") == (tmp.path / "anywhere.idx").string());
    // an existing relative path wins over the data dir
    const std::string local = "iwd_test_local_probe.tmp";
    write_bytes(local, {9});
    CHECK(resolve_data_path(local) == local);
    fs::remove(local);
    REQUIRE(unsetenv("IWD_DATA_DIR") == 0);
    CHECK(resolve_data_path("anywhere.idx") == "anywhere.idx");
}

TEST_CASE("model files round trip parameters bitwise with metadata") {
    TempDir tmp("iwd_test_model");
    SyntheticParams p;
    p.classes = 2;
    p.per_class = 4;
    p.height = 6;
    p.width = 6;
    const Dataset ds = generate_synthetic(11, p);
    diffcore::NetworkSpec spec;
    spec.layer_widths = {36, 8, 2};
    spec.activation = diffcore::Activation::relu;
    spec.output = diffcore::OutputKind::logits;
    const auto m = defense::natural_train(ds.images, ds.labels, spec,
                                          {diffcore::OptimizerKind::sgd, 0.1}, 2, 4, 17);

    save_model(m, tmp.file("model.bin"));
    CHECK(fs::exists(tmp.file("model.bin.meta.json")));
    const auto back = load_model(tmp.file("model.bin"));
    CHECK(back.classifier.params.values == m.classifier.params.values);
    CHECK(back.classifier.spec.layer_widths == m.classifier.spec.layer_widths);
    CHECK(back.classifier.spec.activation == m.classifier.spec.activation);
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.epochs_completed == m.epochs_completed);
    CHECK(back.seed == m.seed);
    CHECK(back.train_accuracy == m.train_accuracy);
    CHECK(back.skipped_batches == m.skipped_batches);
    CHECK_THROWS_AS((void)load_model(tmp.file("missing.bin")), IoError);
}

TEST_CASE("experiments write reports plus a manifest and resume bitwise") {
    TempDir tmp("iwd_test_experiment");
    ExperimentConfig cfg;
    cfg.kind = ExperimentKind::theorem1_demo;
    cfg.out_dir = tmp.file("run");
    cfg.seed = 3;
    cfg.data.height = 12;
    cfg.data.width = 12;

    const auto paths = run_experiment(cfg);
    REQUIRE(paths.size() == 3);
    for (const auto& p : paths) CHECK(fs::exists(p));
    CHECK(fs::path(paths.back()).filename() == "manifest.json");

    const auto rep = nlohmann::json::parse(slurp((fs::path(cfg.out_dir) / "theorem1_demo.json").string()));
    CHECK(rep.at("inequality_holds").get<bool>());
    CHECK(rep.at("sampled_zero_iwd_l2_diameter").get<double>() > 4.0);
    CHECK(rep.at("linf_ball_l2_bound").get<double>() ==
          doctest::Approx(2.0 * (8.0 / 255.0) * 12.0));
    const auto csv = slurp((fs::path(cfg.out_dir) / "theorem1_demo.csv").string());
    CHECK(csv.rfind("quantity,value\n", 0) == 0);
    CHECK(csv.find("inequality_holds,1") != std::string::npos);

    const auto manifest = nlohmann::json::parse(slurp(paths.back()));
    CHECK(manifest.at("completed").get<bool>());
    CHECK(manifest.at("experiment").get<std::string>() == "theorem1_demo");

    // a completed run is reused; outputs stay byte-identical
    std::vector<std::string> before;
    for (const auto& p : paths) before.push_back(slurp(p));
    const auto again = run_experiment(cfg);
    CHECK(again == paths);
    for (std::size_t i = 0; i < paths.size(); ++i) CHECK(slurp(paths[i]) == before[i]);

    // a damaged output forces a recompute that restores the same bytes
    write_bytes(paths[0], {'x'});
    const auto healed = run_experiment(cfg);
    CHECK(healed == paths);
    for (std::size_t i = 0; i < paths.size(); ++i) CHECK(slurp(paths[i]) == before[i]);

    // a different seed is a different run
    ExperimentConfig other = cfg;
    other.seed = 4;
    const auto moved = run_experiment(other);
    CHECK(slurp(moved.back()) != before.back());
}
