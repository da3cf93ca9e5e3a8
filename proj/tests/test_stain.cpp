#include "episeg/stain.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace episeg;
using episeg::test::TempDir;
using episeg::test::random_mask;

namespace {

// Set-theoretic morphology oracle with outside-as-background, independent of
// the production implementation.
struct MorphOracle {
    static bool inside(const ImageU8& m, int x, int y) {
        return x >= 0 && y >= 0 && x < m.w && y < m.h && m.at(x, y) != 0;
    }
    static ImageU8 dilate(const ImageU8& m, int r) {
        ImageU8 out(m.w, m.h, 1);
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) {
                bool hit = false;
                for (int dy = -r; dy <= r && !hit; ++dy)
                    for (int dx = -r; dx <= r && !hit; ++dx)
                        if (dx * dx + dy * dy <= r * r && inside(m, x + dx, y + dy)) hit = true;
                out.at(x, y) = hit;
            }
        return out;
    }
    static ImageU8 erode(const ImageU8& m, int r) {
        ImageU8 out(m.w, m.h, 1);
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) {
                bool all = true;
                for (int dy = -r; dy <= r && all; ++dy)
                    for (int dx = -r; dx <= r && all; ++dx)
                        if (dx * dx + dy * dy <= r * r && !inside(m, x + dx, y + dy)) all = false;
                out.at(x, y) = all;
            }
        return out;
    }
    static ImageU8 close(const ImageU8& m, int r) { return erode(dilate(m, r), r); }
    static ImageU8 open(const ImageU8& m, int r) { return dilate(erode(m, r), r); }
};

Mat3 random_unit_matrix(Rng& rng) {
    Mat3 m;
    for (int c = 0; c < 3; ++c) {
        double n = 0;
        while (n < 1e-3) {
            for (int i = 0; i < 3; ++i) m[c][i] = rng.uniform(-1.0, 1.0);
            n = std::sqrt(m[c][0] * m[c][0] + m[c][1] * m[c][1] + m[c][2] * m[c][2]);
        }
        for (int i = 0; i < 3; ++i) m[c][i] /= n;
    }
    return m;
}

}  // namespace

TEST_CASE("optical density closed forms") {
    Vec3 od = rgb_to_od({255, 255, 255});
    for (int c = 0; c < 3; ++c) CHECK(od[c] == doctest::Approx(0.0));

    od = rgb_to_od({24.6, 24.6, 24.6});  // (24.6+1)/256 = 10^-1
    for (int c = 0; c < 3; ++c) CHECK(od[c] == doctest::Approx(1.0).epsilon(1e-12));

    od = rgb_to_od({0, 0, 0});
    for (int c = 0; c < 3; ++c) CHECK(od[c] == doctest::Approx(std::log10(256.0)));

    // monotone decreasing in intensity
    CHECK(rgb_to_od({10, 0, 0})[0] > rgb_to_od({11, 0, 0})[0]);
}

TEST_CASE("deconvolution solves the stain mixture exactly") {
    StainModel ident;
    ident.columns = {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
    ident.names = {"a", "b", "c"};
    Vec3 c = deconvolve({0.3, 0.1, 0.0}, ident);
    CHECK(c[0] == doctest::Approx(0.3));
    CHECK(c[1] == doctest::Approx(0.1));
    CHECK(c[2] == doctest::Approx(0.0));

    Vec3 zero = deconvolve({0, 0, 0}, default_ihc_model());
    for (int i = 0; i < 3; ++i) CHECK(zero[i] == doctest::Approx(0.0));
}

TEST_CASE("deconvolve round-trips random mixtures") {
    Rng rng(11);
    int tested = 0;
    while (tested < 2000) {
        StainModel m;
        m.columns = random_unit_matrix(rng);
        m.names = {"x", "y", "z"};
        if (m.condition_number() > 1e4) continue;
        ++tested;
        Vec3 conc = {rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)};
        Vec3 od;
        for (int i = 0; i < 3; ++i)
            od[i] = m.columns[0][i] * conc[0] + m.columns[1][i] * conc[1] + m.columns[2][i] * conc[2];
        Vec3 back = deconvolve(od, m);
        for (int i = 0; i < 3; ++i) CHECK(back[i] == doctest::Approx(conc[i]).epsilon(1e-8));
    }
}

TEST_CASE("singular stain matrices are rejected") {
    StainModel m;
    Vec3 col = {0.57735026918962576, 0.57735026918962576, 0.57735026918962576};
    m.columns = {col, col, col};
    m.names = {"a", "a", "res"};
    CHECK_THROWS_AS(m.inverse(), Error);
    try {
        m.inverse();
    } catch (const Error& e) {
        CHECK(e.code() == Errc::singular_stain_matrix);
    }

    StainModel bad_norm;
    bad_norm.columns = {Vec3{2, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
    CHECK_THROWS_AS(bad_norm.validate(), Error);
}

TEST_CASE("default models are valid and well-conditioned") {
    CHECK_NOTHROW(default_ihc_model().validate());
    CHECK_NOTHROW(default_he_model().validate());
    CHECK(default_ihc_model().condition_number() < 100);
    CHECK(default_he_model().condition_number() < 100);
}

TEST_CASE("stains.json round-trip") {
    TempDir td("stains");
    StainModel m = default_he_model();
    save_stains_json(m, td.sub("stains.json"));
    StainModel back = load_stains_json(td.sub("stains.json"));
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 3; ++i) CHECK(back.columns[c][i] == doctest::Approx(m.columns[c][i]));
    CHECK(back.names[1] == "eosin");
}

TEST_CASE("he_recompose inverts the od transform") {
    StainModel he = default_he_model();

    ImageF zero(4, 4, 3, 0.0f);
    ImageU8 white = he_recompose(zero, he);
    for (auto v : white.data) CHECK(v == 255);

    ImageF huge(2, 2, 3, 50.0f);
    ImageU8 black = he_recompose(huge, he);
    for (auto v : black.data) CHECK(v == 0);

    // rgb -> od -> concentrations -> rgb within one intensity step
    Rng rng(12);
    ImageU8 rgb(16, 16, 3);
    for (auto& v : rgb.data) v = static_cast<uint8_t>(rng.uniform_int(256));
    ImageF conc = deconvolve_raster(rgb, he);
    ImageU8 back = he_recompose(conc, he);
    for (size_t i = 0; i < rgb.data.size(); ++i)
        CHECK(std::abs(static_cast<int>(rgb.data[i]) - static_cast<int>(back.data[i])) <= 1);
}

TEST_CASE("morphology basics") {
    Rng rng(13);
    ImageU8 m = random_mask(rng, 24, 24, 0.4);
    CHECK(binary_close(m, 0) == m);
    CHECK(binary_open(m, 0) == m);

    for (int trial = 0; trial < 20; ++trial) {
        ImageU8 mask = random_mask(rng, 32, 32, rng.uniform(0.2, 0.8));
        int r = 1 + static_cast<int>(rng.uniform_int(2));
        ImageU8 opened = binary_open(mask, r);
        CHECK(binary_open(opened, r) == opened);  // idempotent
        ImageU8 closed = binary_close(mask, r);
        CHECK(binary_close(closed, r) == closed);
    }
}

TEST_CASE("morphology matches the brute-force oracle on random masks") {
    Rng rng(14);
    for (int trial = 0; trial < 30; ++trial) {
        ImageU8 mask = random_mask(rng, 16, 16, rng.uniform(0.2, 0.8));
        for (int r : {1, 2}) {
            CHECK(binary_close(mask, r) == MorphOracle::close(mask, r));
            CHECK(binary_open(mask, r) == MorphOracle::open(mask, r));
        }
    }
}

TEST_CASE("open/close duality away from the border") {
    // open(m) == ~close(~m) holds wherever the border convention cannot
    // leak in; compare on the interior window
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        int r = 1 + static_cast<int>(rng.uniform_int(2));
        ImageU8 m(20, 20, 1, 0);
        ImageU8 inner = random_mask(rng, 8, 8, 0.5);
        m.paste(inner, 6, 6);

        ImageU8 opened = binary_open(m, r);
        ImageU8 flipped = m;
        for (auto& v : flipped.data) v = v ? 0 : 1;
        ImageU8 closed_flip = binary_close(flipped, r);
        for (int y = 2 * r + 1; y < 20 - 2 * r - 1; ++y)
            for (int x = 2 * r + 1; x < 20 - 2 * r - 1; ++x)
                CHECK(opened.at(x, y) == (closed_flip.at(x, y) ? 0 : 1));
    }
}

TEST_CASE("positivity_mask examples") {
    StainConfig cfg;
    cfg.channel_threshold = 0.15;
    cfg.morph_radius = 2;
    cfg.min_object_px = 4;

    // uniform channel above threshold -> all ones (replicate-padded cleanup)
    ImageF uniform(20, 20, 1, 0.25f);
    ImageU8 ones = positivity_mask(uniform, cfg);
    for (auto v : ones.data) CHECK(v == 1);

    // single isolated positive pixel is erased by opening
    ImageF lone(20, 20, 1, 0.0f);
    lone.at(10, 10) = 1.0f;
    ImageU8 none = positivity_mask(lone, cfg);
    for (auto v : none.data) CHECK(v == 0);

    // interior 1-px hole in a 20x20 square is filled by closing
    ImageF square(28, 28, 1, 0.0f);
    for (int y = 4; y < 24; ++y)
        for (int x = 4; x < 24; ++x) square.at(x, y) = 0.5f;
    square.at(14, 14) = 0.0f;
    ImageU8 filled = positivity_mask(square, cfg);
    CHECK(filled.at(14, 14) == 1);

    // oracle comparison on the same grid: threshold, replicate-pad, close,
    // open, crop, drop small components
    {
        Rng rng(16);
        ImageU8 thresh(20, 20, 1);
        ImageF chan(20, 20, 1);
        for (int i = 0; i < 400; ++i) {
            chan.data[i] = static_cast<float>(rng.uniform(0.0, 0.3));
            thresh.data[i] = chan.data[i] >= cfg.channel_threshold ? 1 : 0;
        }
        int pad = 2 * cfg.morph_radius;
        ImageU8 padded(20 + 2 * pad, 20 + 2 * pad, 1);
        for (int y = 0; y < padded.h; ++y)
            for (int x = 0; x < padded.w; ++x)
                padded.at(x, y) = thresh.at(std::clamp(x - pad, 0, 19), std::clamp(y - pad, 0, 19));
        ImageU8 oracle = MorphOracle::open(MorphOracle::close(padded, cfg.morph_radius),
                                           cfg.morph_radius)
                             .crop(pad, pad, 20, 20);
        oracle = remove_small_components(oracle, cfg.min_object_px);
        CHECK(positivity_mask(chan, cfg) == oracle);
    }
}

TEST_CASE("positivity threshold is monotone before morphology") {
    Rng rng(17);
    ImageF chan(24, 24, 1);
    for (auto& v : chan.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    StainConfig lo, hi;
    lo.channel_threshold = 0.3;
    hi.channel_threshold = 0.6;
    lo.morph_radius = hi.morph_radius = 0;
    lo.min_object_px = hi.min_object_px = 0;
    ImageU8 mlo = positivity_mask(chan, lo), mhi = positivity_mask(chan, hi);
    for (size_t i = 0; i < mlo.data.size(); ++i)
        if (mhi.data[i]) CHECK(mlo.data[i] == 1);  // mask(hi) subset of mask(lo)
}

TEST_CASE("small components are removed") {
    ImageU8 m(16, 16, 1, 0);
    m.at(2, 2) = 1;  // area 1
    for (int y = 8; y < 12; ++y)
        for (int x = 8; x < 12; ++x) m.at(x, y) = 1;  // area 16
    ImageU8 out = remove_small_components(m, 4);
    CHECK(out.at(2, 2) == 0);
    CHECK(out.at(9, 9) == 1);
}

TEST_CASE("tissue_mask extremes") {
    StainConfig cfg;
    ImageU8 white(30, 30, 3, 255);
    ImageU8 none = tissue_mask(white, cfg);
    for (auto v : none.data) CHECK(v == 0);

    ImageU8 black(30, 30, 3, 0);
    ImageU8 all = tissue_mask(black, cfg);
    for (auto v : all.data) CHECK(v == 1);
}
