#include "episeg/tilestore.hpp"

#include <fstream>

#include "doctest.h"
#include "episeg/png_io.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace episeg;
using episeg::test::TempDir;
using episeg::test::random_image;
using episeg::test::random_mask;

TEST_CASE("levels halve down to a single tile") {
    Rng rng(1);
    ImageU8 img = random_image(rng, 512, 512, 3);

    TileStore s64 = build_store(img, 64, 0.24);
    CHECK(s64.meta().levels == 4);  // 512, 256, 128, 64
    CHECK(s64.level_dims(0) == std::pair<int, int>{512, 512});
    CHECK(s64.level_dims(3) == std::pair<int, int>{64, 64});

    TileStore s256 = build_store(img, 256, 0.24);
    CHECK(s256.meta().levels == 2);  // 512, 256

    // level-0 read-back is bit-identical
    CHECK(s256.read_level(0) == img);
}

TEST_CASE("pyramid mean downsampling") {
    ImageU8 flat(4, 4, 1, 100);
    TileStore s = build_store(flat, 64, 0.5);
    CHECK(s.meta().levels == 1);  // already fits one tile
    // force pyramid by explicit downsample helper
    ImageU8 l1 = downsample_mean(flat);
    for (auto v : l1.data) CHECK(v == 100);

    ImageU8 block(2, 2, 1);
    block.at(0, 0) = 10;
    block.at(1, 0) = 20;
    block.at(0, 1) = 30;
    block.at(1, 1) = 40;
    ImageU8 down = downsample_mean(block);
    CHECK(down.w == 1);
    CHECK(down.at(0, 0) == 25);  // hand-computed box mean
}

TEST_CASE("build_store input validation") {
    ImageU8 empty;
    CHECK_THROWS_WITH_AS(build_store(empty, 256, 0.24), doctest::Contains("EmptyRaster"), Error);
    ImageU8 img(8, 8, 1, 1);
    CHECK_THROWS_AS(build_store(img, 100, 0.24), Error);   // not a power of two
    CHECK_THROWS_AS(build_store(img, 32, 0.24), Error);    // below 64
    CHECK_THROWS_AS(build_store(img, 8192, 0.24), Error);  // above 4096
    try {
        build_store(img, 100, 0.24);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::bad_tile_size);
    }
}

TEST_CASE("mpp snapping") {
    Rng rng(2);
    ImageU8 img = random_image(rng, 300, 200, 1);
    TileStore s = build_store(img, 64, 0.24);
    REQUIRE(s.meta().levels >= 2);

    CHECK(s.snap_level(0.24) == 0);
    CHECK(s.snap_level(0.48) == 1);
    CHECK(s.snap_level(0.50) == 1);  // |log2(0.50/0.48)| = 0.059 <= 0.15
    CHECK_THROWS_AS(s.snap_level(0.24 * 1.35), Error);  // |log2 1.35| = 0.43
    try {
        s.snap_level(0.24 * 1.35);
        FAIL("expected NoSuchLevel");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::no_such_level);
    }
}

TEST_CASE("read_region equals brute-force crop at every level") {
    Rng rng(3);
    ImageU8 img = random_image(rng, 200, 160, 3);
    TempDir td("tilestore");
    TileStore mem = TileStore::create(td.str(), img, 64, 0.24);
    TileStore disk = TileStore::open(td.str());

    for (int level = 0; level < mem.meta().levels; ++level) {
        ImageU8 plane = mem.read_level(level);
        for (int trial = 0; trial < 25; ++trial) {
            int w = 1 + static_cast<int>(rng.uniform_int(plane.w));
            int h = 1 + static_cast<int>(rng.uniform_int(plane.h));
            long x = static_cast<long>(rng.uniform_int(plane.w - w + 1));
            long y = static_cast<long>(rng.uniform_int(plane.h - h + 1));
            ImageU8 expect = plane.crop(static_cast<int>(x), static_cast<int>(y), w, h);
            CHECK(mem.read_region(level, x, y, w, h) == expect);
            CHECK(disk.read_region(level, x, y, w, h) == expect);
        }
    }
    CHECK_THROWS_AS(mem.read_region(0, 150, 0, 100, 10), Error);  // out of bounds
    CHECK_THROWS_AS(mem.read_region(9, 0, 0, 1, 1), Error);       // no such level
}

TEST_CASE("region spec reads through the snap rule") {
    Rng rng(4);
    ImageU8 img = random_image(rng, 256, 256, 3);
    TileStore s = build_store(img, 64, 0.24);

    RegionSpec spec;
    spec.x = 40;
    spec.y = 60;
    spec.width_px = 30;
    spec.height_px = 20;
    spec.mpp = 0.48;
    ImageU8 got = s.read_region(spec);
    ImageU8 level1 = s.read_level(1);
    CHECK(got == level1.crop(20, 30, 30, 20));

    spec.mpp = 0.24;  // identity with stored level 0
    CHECK(s.read_region(spec) == img.crop(40, 60, 30, 20));
}

TEST_CASE("level-0 round-trip is bit-exact for random rasters") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        int w = 1 + static_cast<int>(rng.uniform_int(120));
        int h = 1 + static_cast<int>(rng.uniform_int(120));
        int ch = rng.coin() ? 1 : 3;
        ImageU8 img = random_image(rng, w, h, ch);
        TileStore s = build_store(img, 64, 0.24);
        CHECK(s.read_level(0) == img);
    }
}

TEST_CASE("disk round-trip preserves every level") {
    Rng rng(6);
    ImageU8 img = random_image(rng, 130, 70, 3);
    TempDir td("roundtrip");
    TileStore mem = TileStore::create(td.str(), img, 64, 0.31);
    TileStore disk = TileStore::open(td.str());
    CHECK(disk.meta().levels == mem.meta().levels);
    CHECK(disk.meta().mpp_level0 == doctest::Approx(0.31));
    for (int level = 0; level < mem.meta().levels; ++level)
        CHECK(disk.read_level(level) == mem.read_level(level));
}

TEST_CASE("index.json carries the exact documented keys") {
    Rng rng(7);
    TempDir td("index");
    TileStore::create(td.str(), random_image(rng, 70, 50, 1), 64, 0.24);
    std::ifstream f(td.path() / "index.json");
    nlohmann::json idx;
    f >> idx;
    for (const char* key : {"width_px", "height_px", "channels", "bit_depth", "levels",
                            "tile_size_px", "mpp_level0"})
        CHECK(idx.contains(key));
    CHECK(idx["width_px"] == 70);
    CHECK(idx["height_px"] == 50);
    CHECK(idx["bit_depth"] == 8);
}

TEST_CASE("mask pyramid uses majority vote with ties to zero") {
    // checkerboard: every 2x2 block ties -> 0
    ImageU8 checker(4, 4, 1);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) checker.at(x, y) = (x + y) % 2;
    CHECK(downsample_majority(checker) == ImageU8(2, 2, 1, 0));

    // 3x3 blob of ones in 8x8: only the full 2x2 block survives
    ImageU8 blob(8, 8, 1, 0);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) blob.at(x, y) = 1;
    ImageU8 l1 = downsample_majority(blob);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            int ones = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) ones += blob.at(2 * x + dx, 2 * y + dy);
            CHECK(l1.at(x, y) == (ones >= 3 ? 1 : 0));
        }
    CHECK(l1.at(0, 0) == 1);
    CHECK(l1.at(1, 0) == 0);  // 2 of 4: tie -> 0

    TempDir td("mask");
    ImageU8 zeros(160, 90, 1, 0);
    write_mask(td.sub("zeros"), zeros, 64, 0.24);
    TileStore zstore = open_mask_store(td.sub("zeros"));
    for (int level = 0; level < zstore.meta().levels; ++level) {
        ImageU8 plane = zstore.read_level(level);
        for (auto v : plane.data) CHECK(v == 0);
    }
}

TEST_CASE("mask stores reject non-binary values") {
    TempDir td("badmask");
    ImageU8 bad(32, 32, 1, 0);
    bad.at(3, 3) = 7;
    CHECK_THROWS_AS(write_mask(td.sub("bad"), bad, 64, 0.24), Error);
    try {
        write_mask(td.sub("bad"), bad, 64, 0.24);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::bad_label_value);
    }

    // corrupting a persisted tile trips validation on read
    Rng rng(8);
    ImageU8 good = random_mask(rng, 32, 32);
    write_mask(td.sub("good"), good, 64, 0.24);
    {
        std::ofstream tf(td.path() / "good" / "L0_X0_Y0.bin", std::ios::binary | std::ios::trunc);
        std::vector<char> bytes(32 * 32, 9);
        tf.write(bytes.data(), bytes.size());
    }
    CHECK_THROWS_AS(read_mask(td.sub("good")), Error);
}

TEST_CASE("mask round-trip is bit-exact at level 0") {
    Rng rng(9);
    TempDir td("maskrt");
    ImageU8 mask = random_mask(rng, 100, 80, 0.3);
    write_mask(td.sub("m"), mask, 64, 0.48);
    CHECK(read_mask(td.sub("m")) == mask);
}

TEST_CASE("tiles load lazily: a small read touches at most 4 tiles") {
    // A 16384x16384 store is synthesized on disk with only the four tiles
    // the read needs; a non-lazy reader would fault on the missing ones.
    TempDir td("lazy");
    nlohmann::json idx;
    idx["width_px"] = 16384;
    idx["height_px"] = 16384;
    idx["channels"] = 1;
    idx["bit_depth"] = 8;
    idx["levels"] = 7;  // 16384 >> 6 = 256 = one tile
    idx["tile_size_px"] = 256;
    idx["mpp_level0"] = 0.24;
    std::ofstream(td.path() / "index.json") << idx.dump();

    // the region [1000,1000)x[1256,1256) spans tiles (3..4, 3..4) at level 0
    std::vector<char> tile_bytes(256 * 256, 42);
    for (int ty = 3; ty <= 4; ++ty)
        for (int tx = 3; tx <= 4; ++tx) {
            std::ofstream tf(td.path() / ("L0_X" + std::to_string(tx) + "_Y" + std::to_string(ty) +
                                          ".bin"),
                             std::ios::binary);
            tf.write(tile_bytes.data(), tile_bytes.size());
        }

    TileStore s = TileStore::open(td.str());
    ImageU8 region = s.read_region(0, 1000, 1000, 256, 256);
    CHECK(region.w == 256);
    CHECK(s.tiles_loaded() <= 4);
    for (auto v : region.data) CHECK(v == 42);

    // tiles outside the materialized set are genuinely missing
    CHECK_THROWS_AS(s.read_region(0, 0, 0, 16, 16), Error);
}

TEST_CASE("png import/export round-trip") {
    Rng rng(10);
    TempDir td("png");
    ImageU8 rgb = random_image(rng, 90, 40, 3);
    write_png(td.sub("a.png"), rgb);
    CHECK(read_png(td.sub("a.png")) == rgb);

    ImageU8 gray = random_image(rng, 33, 57, 1);
    write_png(td.sub("g.png"), gray);
    CHECK(read_png(td.sub("g.png")) == gray);

    TileStore s = import_png(td.sub("a.png"), 64, 0.24);
    CHECK(s.read_level(0) == rgb);
    export_png(s, 1, td.sub("l1.png"));
    CHECK(read_png(td.sub("l1.png")) == s.read_level(1));
}
