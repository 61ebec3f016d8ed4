// Persistence: binary checkpoints (bit-exact round trips, momentum, mixed
// precision, malformation diagnostics), the flat run-configuration table,
// fixed-format metrics CSVs, and PPM previews.

#include <doctest.h>

#include <fstream>
#include <string>
#include <vector>

#include "stylemine/io.hpp"
#include "test_util.hpp"

using namespace stylemine;

namespace {

ParamSet<float> demo_params() {
  ParamSet<float> ps;
  ps.add("w", Tensor32({2, 3}, {1.5f, -2.25f, 0.125f, 3.0f, -0.5f, 7.75f}));
  ps.add("b", Tensor32({3}, {0.1f, 0.2f, 0.3f}));
  // nonzero momentum must survive the trip
  auto& w = ps.at("w");
  for (size_t i = 0; i < w.momentum.data.size(); ++i) w.momentum.data[i] = 0.01f * static_cast<float>(i + 1);
  ps.at("b").momentum.data = {9.0f, 8.0f, 7.0f};
  return ps;
}

}  // namespace

TEST_CASE("checkpoint round trip restores values and momentum bit-exactly") {
  const std::string path = testutil::scratch_dir("ckpt") + "/params.asmc";
  ParamSet<float> ps = demo_params();
  io::Checkpoint ck;
  io::pack_params(ck, "task", ps);
  io::save_checkpoint(path, ck);

  io::Checkpoint back = io::load_checkpoint(path);
  REQUIRE(back.entries.size() == 4);  // 2 values + 2 momentum companions

  ParamSet<float> fresh;
  fresh.add("w", Tensor32::zeros({2, 3}));
  fresh.add("b", Tensor32::zeros({3}));
  io::unpack_params(back, "task", fresh);
  CHECK(fresh.at("w").value.data == ps.at("w").value.data);
  CHECK(fresh.at("b").value.data == ps.at("b").value.data);
  CHECK(fresh.at("w").momentum.data == ps.at("w").momentum.data);
  CHECK(fresh.at("b").momentum.data == ps.at("b").momentum.data);
  CHECK(fresh.content_hash() == ps.content_hash());
}

TEST_CASE("checkpoint holds f64 entries without narrowing") {
  const std::string path = testutil::scratch_dir("ckpt64") + "/mixed.asmc";
  io::Checkpoint ck;
  ck.add("eps", Tensor64({1, 3}, {0.1, -0.2, 1e-17}));
  ck.add("scale", Tensor32({2}, {1.0f, 2.0f}));
  io::save_checkpoint(path, ck);

  io::Checkpoint back = io::load_checkpoint(path);
  const io::CheckpointEntry* e = back.find("eps");
  REQUIRE(e != nullptr);
  CHECK(e->dtype == 1);
  CHECK(e->f64.data == std::vector<double>{0.1, -0.2, 1e-17});
  CHECK(back.find_f32("eps") == nullptr);  // not silently viewable as f32
  const Tensor32* s = back.find_f32("scale");
  REQUIRE(s != nullptr);
  CHECK(s->data == std::vector<float>{1.0f, 2.0f});
  CHECK(back.find("absent") == nullptr);
}

TEST_CASE("checkpoint rejects malformed files with located diagnostics") {
  const std::string dir = testutil::scratch_dir("ckpt_bad");
  const std::string path = dir + "/params.asmc";
  io::Checkpoint ck;
  ck.add("w", Tensor32({2}, {1.0f, 2.0f}));
  io::save_checkpoint(path, ck);
  const auto good = testutil::read_bytes(path);

  // flipped magic
  auto bad = good;
  bad[0] = 'X';
  testutil::write_bytes(path, bad);
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);

  // unsupported version
  bad = good;
  bad[4] = 9;
  testutil::write_bytes(path, bad);
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);

  // truncated payload
  bad = good;
  bad.resize(good.size() - 3);
  testutil::write_bytes(path, bad);
  CHECK_THROWS_AS(io::load_checkpoint(path), FormatError);

  CHECK_THROWS_AS(io::load_checkpoint(dir + "/missing.asmc"), FormatError);
}

TEST_CASE("unpacking flags missing entries and shape drift") {
  const std::string path = testutil::scratch_dir("ckpt_unpack") + "/params.asmc";
  ParamSet<float> ps = demo_params();
  io::Checkpoint ck;
  io::pack_params(ck, "task", ps);
  io::save_checkpoint(path, ck);
  io::Checkpoint back = io::load_checkpoint(path);

  ParamSet<float> wrong_prefix;
  wrong_prefix.add("w", Tensor32::zeros({2, 3}));
  CHECK_THROWS_AS(io::unpack_params(back, "generator", wrong_prefix), FormatError);

  ParamSet<float> wrong_shape;
  wrong_shape.add("w", Tensor32::zeros({3, 2}));
  CHECK_THROWS_AS(io::unpack_params(back, "task", wrong_shape), FormatError);
}

TEST_CASE("run config starts at documented defaults") {
  io::RunConfig cfg;
  CHECK(cfg.seed == 1);
  CHECK(cfg.out_dir == "out");
  CHECK(cfg.classes == 10);
  CHECK(cfg.strategy == "asm");
  CHECK(cfg.depth >= 1);
  CHECK(cfg.beta > 0.0);
  CHECK(cfg.lambda_consist == 2e-4);
  CHECK(cfg.mine_lr == 2.5e-4);
  CHECK(cfg.lr_power == 0.9);
  CHECK(cfg.num_seeds == 5);
  CHECK_FALSE(cfg.consistency_whole_batch);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("run config applies flat key/value overrides") {
  io::RunConfig cfg;
  cfg.apply("depth", "3");
  cfg.apply("beta", "0.125");
  cfg.apply("strategy", "anchored");
  cfg.apply("rain_bypass_vae", "true");
  cfg.apply("seed", "42");
  CHECK(cfg.depth == 3);
  CHECK(cfg.beta == 0.125);
  CHECK(cfg.strategy == "anchored");
  CHECK(cfg.rain_bypass_vae);
  CHECK(cfg.seed == 42);

  CHECK_THROWS_AS(cfg.apply("no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.apply("depth", "abc"), ConfigError);
  CHECK_THROWS_AS(cfg.apply("depth", "5x"), ConfigError);
  CHECK_THROWS_AS(cfg.apply("beta", "fast"), ConfigError);
  CHECK_THROWS_AS(cfg.apply("rain_bypass_vae", "yes"), ConfigError);
}

TEST_CASE("run config validation rejects out-of-range values") {
  io::RunConfig cfg;
  cfg.depth = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = io::RunConfig{};
  cfg.beta = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = io::RunConfig{};
  cfg.divergence_cap = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = io::RunConfig{};
  cfg.mine_lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = io::RunConfig{};
  cfg.out_dir.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("run config files merge over defaults") {
  const std::string dir = testutil::scratch_dir("cfg");

  // empty object: defaults untouched
  const std::string empty_path = dir + "/empty.json";
  testutil::write_bytes(empty_path, {'{', '}', '\n'});
  io::RunConfig cfg;
  cfg.load_file(empty_path);
  CHECK(cfg.serialize_json() == io::RunConfig{}.serialize_json());

  // partial override
  const std::string part_path = dir + "/part.json";
  {
    std::ofstream out(part_path);
    out << "{\"depth\": 2, \"strategy\": \"random\", \"shift_hue\": 90.0}\n";
  }
  cfg.load_file(part_path);
  CHECK(cfg.depth == 2);
  CHECK(cfg.strategy == "random");
  CHECK(cfg.shift_hue == 90.0);
  CHECK(cfg.mine_iters == io::RunConfig{}.mine_iters);

  // unknown key / wrong type / malformed syntax / missing file
  const std::string bad_key = dir + "/bad_key.json";
  {
    std::ofstream out(bad_key);
    out << "{\"depht\": 2}\n";
  }
  CHECK_THROWS_AS(io::RunConfig{}.load_file(bad_key), ConfigError);
  const std::string bad_type = dir + "/bad_type.json";
  {
    std::ofstream out(bad_type);
    out << "{\"depth\": \"deep\"}\n";
  }
  CHECK_THROWS_AS(io::RunConfig{}.load_file(bad_type), ConfigError);
  const std::string bad_syntax = dir + "/bad_syntax.json";
  {
    std::ofstream out(bad_syntax);
    out << "{\"depth\": }\n";
  }
  CHECK_THROWS_AS(io::RunConfig{}.load_file(bad_syntax), ConfigError);
  CHECK_THROWS_AS(io::RunConfig{}.load_file(dir + "/missing.json"), ConfigError);
}

TEST_CASE("run config serialization round trips to an equal config") {
  const std::string path = testutil::scratch_dir("cfg_rt") + "/full.json";
  io::RunConfig cfg;
  cfg.apply("depth", "4");
  cfg.apply("beta", "0.07");
  cfg.apply("out_dir", "elsewhere");
  cfg.apply("consistency_whole_batch", "true");
  cfg.apply("generator_ckpt", "g.asmc");
  {
    std::ofstream out(path);
    out << cfg.serialize_json();
  }
  io::RunConfig back;
  back.load_file(path);
  CHECK(back.serialize_json() == cfg.serialize_json());
  CHECK(back.depth == 4);
  CHECK(back.beta == 0.07);
  CHECK(back.out_dir == "elsewhere");
  CHECK(back.consistency_whole_batch);
  CHECK(back.generator_ckpt == "g.asmc");
}

TEST_CASE("metric numbers keep nine digits after the decimal point") {
  CHECK(io::format_fixed9(0.000123456789) == "0.000123457");
  CHECK(io::format_fixed9(0.5) == "0.500000000");
  CHECK(io::format_fixed9(2.0) == "2.000000000");
  CHECK(io::format_fixed9(-1.25) == "-1.250000000");
  CHECK(io::format_fixed9(2.302585093) == "2.302585093");
}

TEST_CASE("metrics files carry exactly one header") {
  const std::string dir = testutil::scratch_dir("metrics");
  const std::string path = dir + "/log.csv";
  {
    io::MetricsWriter mw(path, {"iter", "loss"});
    mw.row({"1", io::format_fixed9(0.5)});
    mw.row({"2", io::format_fixed9(0.25)});
  }
  CHECK(testutil::read_text(path) == "iter,loss\n1,0.500000000\n2,0.250000000\n");

  // appending continues under the existing header without repeating it
  {
    io::MetricsWriter mw(path, {"iter", "loss"}, true);
    mw.row({"3", io::format_fixed9(0.125)});
  }
  CHECK(testutil::read_text(path) == "iter,loss\n1,0.500000000\n2,0.250000000\n3,0.125000000\n");

  // appending under a different schema is refused
  CHECK_THROWS_AS(io::MetricsWriter(path, {"iter", "acc"}, true), ContractError);

  // no rows -> header-only file
  const std::string empty_path = dir + "/empty.csv";
  { io::MetricsWriter mw(empty_path, {"a", "b", "c"}); }
  CHECK(testutil::read_text(empty_path) == "a,b,c\n");

  io::MetricsWriter strict(dir + "/strict.csv", {"x", "y"});
  CHECK_THROWS_AS(strict.row({"only_one"}), ContractError);
  CHECK_THROWS_AS(io::MetricsWriter(dir + "/none.csv", {}), ContractError);
}

TEST_CASE("ppm previews encode clamped bytes in raster order") {
  const std::string path = testutil::scratch_dir("ppm") + "/img.ppm";
  // (3,2,2): R=1 everywhere, G=0, B=0.25; plus out-of-range corners
  Tensor32 img({3, 2, 2}, {1.0f, 1.0f, 1.0f, 1.5f,      // R (1.5 clamps to 1)
                           0.0f, 0.0f, -0.2f, 0.0f,     // G (-0.2 clamps to 0)
                           0.25f, 0.25f, 0.25f, 0.25f}); // B
  io::write_ppm(path, img);
  const auto bytes = testutil::read_bytes(path);
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) == header);
  const std::vector<unsigned char> pixels(bytes.begin() + static_cast<long>(header.size()), bytes.end());
  CHECK(pixels == std::vector<unsigned char>{255, 0, 64, 255, 0, 64, 255, 0, 64, 255, 0, 64});

  CHECK_THROWS_AS(io::write_ppm(path, Tensor32({2, 2, 2})), ShapeError);
  CHECK_THROWS_AS(io::write_ppm(path, Tensor32({3, 4})), ShapeError);
}

TEST_CASE("image tiling packs row-major with black padding") {
  Tensor32 imgs({3, 3, 2, 2});
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t k = 0; k < 12; ++k) imgs.data[static_cast<size_t>(i * 12 + k)] = 0.1f * static_cast<float>(i + 1);
  Tensor32 grid = io::tile_images(imgs, 2);
  CHECK(grid.shape == Shape{3, 4, 4});
  auto at = [&](int64_t c, int64_t y, int64_t x) { return grid.data[static_cast<size_t>(c * 16 + y * 4 + x)]; };
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(at(c, 0, 0) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(at(c, 1, 1) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(at(c, 0, 2) == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(at(c, 2, 0) == doctest::Approx(0.3).epsilon(1e-6));
    CHECK(at(c, 2, 2) == 0.0f);  // padding cell
    CHECK(at(c, 3, 3) == 0.0f);
  }
  CHECK_THROWS_AS(io::tile_images(imgs, 0), ContractError);
  CHECK_THROWS_AS(io::tile_images(Tensor32({2, 1, 2, 2}), 2), ShapeError);
}
