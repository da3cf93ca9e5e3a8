#include "episeg.h"

#include <cstring>
#include <fstream>
#include <string>

#include "episeg/pipeline.hpp"
#include "episeg/tilestore.hpp"
#include "json.hpp"

namespace {

thread_local std::string g_last_error;

int map_error(const episeg::Error& e) {
    g_last_error = e.what();
    return episeg::errc_is_numeric(e.code()) ? EPISEG_E_NUMERIC : EPISEG_E_INPUT;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return EPISEG_OK;
    } catch (const episeg::Error& e) {
        return map_error(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return EPISEG_E_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return EPISEG_E_INTERNAL;
    }
}

episeg::RunOptions to_options(const episeg_run_opts* opts) {
    episeg::RunOptions ro;
    if (opts) {
        if (opts->out_dir) ro.out_dir = opts->out_dir;
        if (opts->has_seed) ro.seed = static_cast<uint64_t>(opts->seed);
        ro.jobs = opts->jobs > 1 ? opts->jobs : 1;
        ro.force = opts->force != 0;
        ro.dry_run = opts->dry_run != 0;
    }
    return ro;
}

nlohmann::json load_optional_json(const char* path) {
    if (!path || !*path) return nlohmann::json::object();
    std::ifstream f(path);
    if (!f) episeg::raise(episeg::Errc::io_failure, std::string("cannot open config: ") + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        episeg::raise(episeg::Errc::io_failure, std::string("bad config json: ") + e.what());
    }
    return j;
}

}  // namespace

struct episeg_store {
    episeg::TileStore store;
};

extern "C" {

const char* episeg_last_error(void) { return g_last_error.c_str(); }

const char* episeg_version(void) { return "0.1.0"; }

int episeg_store_open(const char* dir, episeg_store** out) {
    if (!dir || !out) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] { *out = new episeg_store{episeg::TileStore::open(dir)}; });
}

int episeg_store_create(const char* dir, const uint8_t* pixels, int32_t width, int32_t height,
                        int32_t channels, int32_t tile_size, double mpp_level0,
                        episeg_store** out) {
    if (!dir || !pixels || !out) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        episeg::ImageU8 img(width, height, channels);
        std::memcpy(img.data.data(), pixels, img.size());
        *out = new episeg_store{episeg::TileStore::create(dir, img, tile_size, mpp_level0)};
    });
}

void episeg_store_close(episeg_store* store) { delete store; }

int episeg_store_meta(const episeg_store* store, episeg_meta* out) {
    if (!store || !out) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        const episeg::ImageMeta& m = store->store.meta();
        out->width_px = m.width_px;
        out->height_px = m.height_px;
        out->channels = m.channels;
        out->bit_depth = m.bit_depth;
        out->levels = m.levels;
        out->tile_size_px = m.tile_size_px;
        out->mpp_level0 = m.mpp_level0;
    });
}

int episeg_store_level_dims(const episeg_store* store, int32_t level, int32_t* w, int32_t* h) {
    if (!store || !w || !h) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        auto [lw, lh] = store->store.level_dims(level);
        *w = lw;
        *h = lh;
    });
}

int episeg_store_read_region(const episeg_store* store, int32_t level, int64_t x, int64_t y,
                             int32_t w, int32_t h, uint8_t* buffer) {
    if (!store || !buffer) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        episeg::ImageU8 img = store->store.read_region(level, static_cast<long>(x),
                                                       static_cast<long>(y), w, h);
        std::memcpy(buffer, img.data.data(), img.size());
    });
}

int episeg_synth(const char* synth_json, const episeg_run_opts* opts) {
    if (!synth_json) {
        g_last_error = "null synth config path";
        return EPISEG_E_INPUT;
    }
    return guarded([&] { episeg::run_synth(synth_json, to_options(opts)); });
}

int episeg_deconvolve(const char* ihc_store_dir, const char* config_json, double mpp,
                      const episeg_run_opts* opts) {
    if (!ihc_store_dir) {
        g_last_error = "null store path";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        nlohmann::json j = load_optional_json(config_json);
        episeg::StainConfig cfg;
        cfg.channel_threshold = j.value("channel_threshold", cfg.channel_threshold);
        cfg.morph_radius = j.value("morph_radius", cfg.morph_radius);
        cfg.min_object_px = j.value("min_object_px", cfg.min_object_px);
        cfg.tissue_od_threshold = j.value("tissue_od_threshold", cfg.tissue_od_threshold);
        std::string stains = j.value("stains", "");
        episeg::run_deconvolve(ihc_store_dir, stains, cfg, mpp, to_options(opts));
    });
}

int episeg_register(const char* fixed_store_dir, const char* moving_store_dir,
                    const char* config_json, double mpp, int32_t skip_patchwise,
                    const episeg_run_opts* opts) {
    if (!fixed_store_dir || !moving_store_dir) {
        g_last_error = "null store path";
        return EPISEG_E_INPUT;
    }
    return guarded([&] {
        nlohmann::json j = load_optional_json(config_json);
        episeg::RegistrationConfig cfg;
        cfg.ngf_epsilon = j.value("ngf_epsilon", cfg.ngf_epsilon);
        cfg.curvature_weight = j.value("curvature_weight", cfg.curvature_weight);
        cfg.pyramid_levels = j.value("pyramid_levels", cfg.pyramid_levels);
        cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
        cfg.gradient_tolerance = j.value("gradient_tolerance", cfg.gradient_tolerance);
        cfg.patch_size_px = j.value("patch_size_px", cfg.patch_size_px);
        cfg.patch_overlap_px = j.value("patch_overlap_px", cfg.patch_overlap_px);
        cfg.merge_data_weight = j.value("merge_data_weight", cfg.merge_data_weight);
        cfg.max_cg_iterations = j.value("max_cg_iterations", cfg.max_cg_iterations);
        episeg::run_register(fixed_store_dir, moving_store_dir, cfg, mpp, skip_patchwise != 0,
                             to_options(opts));
    });
}

int episeg_transfer(const char* mask_store_dir, const char* field_dir, double mpp,
                    const episeg_run_opts* opts) {
    if (!mask_store_dir || !field_dir) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded(
        [&] { episeg::run_transfer(mask_store_dir, field_dir, mpp, to_options(opts)); });
}

int episeg_train(const char* train_json, const char* profile, const episeg_run_opts* opts) {
    if (!train_json || !profile) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded([&] { episeg::run_train(train_json, profile, to_options(opts)); });
}

int episeg_evaluate(const char* pred_root, const char* truth_root, const char* regions_json,
                    const episeg_run_opts* opts) {
    if (!pred_root || !truth_root || !regions_json) {
        g_last_error = "null argument";
        return EPISEG_E_INPUT;
    }
    return guarded(
        [&] { episeg::run_evaluate(pred_root, truth_root, regions_json, to_options(opts)); });
}

int episeg_pipeline(const char* manifest_json, const episeg_run_opts* opts) {
    if (!manifest_json) {
        g_last_error = "null manifest path";
        return EPISEG_E_INPUT;
    }
    return guarded([&] { episeg::run_pipeline(manifest_json, to_options(opts)); });
}

}  // extern "C"
