#include "episeg.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "episeg/synth.hpp"
#include "episeg/tilestore.hpp"
#include "json.hpp"
#include "test_util.hpp"

using episeg::test::TempDir;
namespace fs = std::filesystem;

TEST_CASE("store handles: create, meta, read, close") {
    TempDir td("capi_store");
    std::vector<uint8_t> pixels(120 * 80 * 3);
    for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<uint8_t>(i * 7u);

    episeg_store* store = nullptr;
    REQUIRE(episeg_store_create(td.sub("s").c_str(), pixels.data(), 120, 80, 3, 64, 0.24,
                                &store) == EPISEG_OK);
    episeg_meta meta{};
    REQUIRE(episeg_store_meta(store, &meta) == EPISEG_OK);
    CHECK(meta.width_px == 120);
    CHECK(meta.height_px == 80);
    CHECK(meta.channels == 3);
    CHECK(meta.levels >= 2);
    CHECK(meta.mpp_level0 == doctest::Approx(0.24));

    int32_t lw = 0, lh = 0;
    REQUIRE(episeg_store_level_dims(store, 1, &lw, &lh) == EPISEG_OK);
    CHECK(lw == 60);
    CHECK(lh == 40);

    std::vector<uint8_t> region(10 * 10 * 3);
    REQUIRE(episeg_store_read_region(store, 0, 5, 5, 10, 10, region.data()) == EPISEG_OK);
    CHECK(region[0] == pixels[(5 * 120 + 5) * 3]);

    // out of bounds surfaces as an input error, not a crash
    CHECK(episeg_store_read_region(store, 0, 119, 0, 10, 10, region.data()) == EPISEG_E_INPUT);
    CHECK(std::strlen(episeg_last_error()) > 0);
    episeg_store_close(store);

    // reopen from disk
    episeg_store* again = nullptr;
    REQUIRE(episeg_store_open(td.sub("s").c_str(), &again) == EPISEG_OK);
    episeg_store_close(again);

    CHECK(episeg_store_open(td.sub("missing").c_str(), &again) == EPISEG_E_INPUT);
    CHECK(episeg_store_open(nullptr, &again) == EPISEG_E_INPUT);
}

TEST_CASE("command surface: synth then deconvolve through the C API") {
    TempDir td("capi_cmd");
    nlohmann::json sj;
    sj["width"] = 192;
    sj["height"] = 192;
    sj["seed"] = 3;
    sj["gland_count"] = {4, 5};
    sj["gland_radius"] = {14.0, 20.0};
    sj["ring_thickness_px"] = 7;
    sj["slides"] = {{"train", 1}, {"val", 1}, {"test", 1}};
    sj["tile_size"] = 64;
    std::ofstream(td.path() / "synth.json") << sj.dump();

    episeg_run_opts opts{};
    std::string cohort = td.sub("cohort");
    opts.out_dir = cohort.c_str();
    REQUIRE(episeg_synth(td.sub("synth.json").c_str(), &opts) == EPISEG_OK);
    CHECK(fs::exists(td.path() / "cohort" / "regions.json"));

    std::string dec_out = td.sub("dec");
    episeg_run_opts dopts{};
    dopts.out_dir = dec_out.c_str();
    REQUIRE(episeg_deconvolve((cohort + "/train_00/ihc").c_str(), nullptr, 0.48, &dopts) ==
            EPISEG_OK);
    CHECK(fs::exists(td.path() / "dec" / "mask" / "index.json"));

    // bad input maps to the input error code
    CHECK(episeg_deconvolve(td.sub("absent").c_str(), nullptr, 0.48, &dopts) == EPISEG_E_INPUT);
    CHECK(episeg_synth(nullptr, &opts) == EPISEG_E_INPUT);

    // transfer with a dimension-mismatched field is an input error
    {
        episeg::DisplacementField tiny(8, 8, 1.0);
        episeg::save_field(tiny, td.sub("badfield"));
        episeg_run_opts topts{};
        std::string tout = td.sub("tout");
        topts.out_dir = tout.c_str();
        CHECK(episeg_transfer((dec_out + "/mask").c_str(), td.sub("badfield").c_str(), 0.48,
                              &topts) == EPISEG_E_INPUT);
    }
}

TEST_CASE("version string") { CHECK(std::strlen(episeg_version()) > 0); }
