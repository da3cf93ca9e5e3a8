#include "episeg/tilestore.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <unordered_map>

#include "episeg/png_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace episeg {

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int ceil_shift(int v, int k) { return (v + (1 << k) - 1) >> k; }

int compute_levels(int w, int h, int tile) {
    // Halve until the level fits within a single tile.
    int levels = 1;
    while (std::max(ceil_shift(w, levels - 1), ceil_shift(h, levels - 1)) > tile) ++levels;
    return levels;
}

std::string tile_name(int level, int tx, int ty) {
    return "L" + std::to_string(level) + "_X" + std::to_string(tx) + "_Y" + std::to_string(ty) +
           ".bin";
}

void validate_mask_pixels(const ImageU8& img, const std::string& what) {
    for (uint8_t v : img.data)
        if (v > 1) raise(Errc::bad_label_value, what + ": mask values must be 0 or 1");
}

}  // namespace

struct TileStore::Impl {
    ImageMeta meta;
    bool mask = false;  // validate {0,1} on tile load

    // In-memory mode: full raster per level.
    std::vector<ImageU8> levels_mem;

    // Disk mode.
    std::string dir;
    mutable std::unordered_map<uint64_t, ImageU8> cache;
    mutable std::mutex cache_mu;
    mutable size_t loaded = 0;

    bool in_memory() const { return !levels_mem.empty(); }

    std::pair<int, int> dims(int level) const {
        return {ceil_shift(meta.width_px, level), ceil_shift(meta.height_px, level)};
    }

    const ImageU8& tile(int level, int tx, int ty) const {
        uint64_t key = (static_cast<uint64_t>(level) << 48) | (static_cast<uint64_t>(tx) << 24) |
                       static_cast<uint64_t>(ty);
        std::scoped_lock lk(cache_mu);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;

        auto [lw, lh] = dims(level);
        int t = meta.tile_size_px;
        int tw = std::min(t, lw - tx * t), th = std::min(t, lh - ty * t);
        fs::path p = fs::path(dir) / tile_name(level, tx, ty);
        std::ifstream f(p, std::ios::binary);
        if (!f) raise(Errc::missing_tile, p.string());
        ImageU8 img(tw, th, meta.channels);
        f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
        if (f.gcount() != static_cast<std::streamsize>(img.size()))
            raise(Errc::io_failure, "tile truncated: " + p.string());
        if (mask) validate_mask_pixels(img, p.string());
        ++loaded;
        return cache.emplace(key, std::move(img)).first->second;
    }
};

TileStore TileStore::build(const ImageU8& raster, int tile_size, double mpp_level0,
                           Downsample kind) {
    if (raster.empty()) raise(Errc::empty_raster, "build_store");
    if (!is_pow2(tile_size) || tile_size < 64 || tile_size > 4096)
        raise(Errc::bad_tile_size, "tile_size must be a power of two in [64, 4096]");
    if (raster.ch != 1 && raster.ch != 3)
        raise(Errc::bad_config, "stores hold 1 or 3 channel rasters");
    if (kind == Downsample::majority) validate_mask_pixels(raster, "build_store");

    TileStore s;
    s.impl_ = std::make_shared<Impl>();
    auto& im = *s.impl_;
    im.meta.width_px = raster.w;
    im.meta.height_px = raster.h;
    im.meta.channels = raster.ch;
    im.meta.bit_depth = 8;
    im.meta.tile_size_px = tile_size;
    im.meta.mpp_level0 = mpp_level0;
    im.meta.levels = compute_levels(raster.w, raster.h, tile_size);
    im.mask = kind == Downsample::majority;

    im.levels_mem.reserve(im.meta.levels);
    im.levels_mem.push_back(raster);
    for (int k = 1; k < im.meta.levels; ++k) {
        const ImageU8& prev = im.levels_mem.back();
        im.levels_mem.push_back(kind == Downsample::box_mean ? downsample_mean(prev)
                                                             : downsample_majority(prev));
    }
    return s;
}

TileStore TileStore::create(const std::string& dir, const ImageU8& raster, int tile_size,
                            double mpp_level0, Downsample kind) {
    TileStore s = build(raster, tile_size, mpp_level0, kind);
    s.save(dir);
    return s;
}

void TileStore::save(const std::string& dir) const {
    if (!impl_ || !impl_->in_memory()) raise(Errc::bad_config, "save: store not in memory");
    const auto& im = *impl_;
    fs::create_directories(dir);

    nlohmann::json idx;
    idx["width_px"] = im.meta.width_px;
    idx["height_px"] = im.meta.height_px;
    idx["channels"] = im.meta.channels;
    idx["bit_depth"] = im.meta.bit_depth;
    idx["levels"] = im.meta.levels;
    idx["tile_size_px"] = im.meta.tile_size_px;
    idx["mpp_level0"] = im.meta.mpp_level0;
    std::ofstream jf(fs::path(dir) / "index.json", std::ios::trunc);
    jf << idx.dump(2) << "\n";
    if (!jf) raise(Errc::io_failure, "cannot write index.json under " + dir);

    int t = im.meta.tile_size_px;
    for (int level = 0; level < im.meta.levels; ++level) {
        const ImageU8& plane = im.levels_mem[level];
        int ntx = (plane.w + t - 1) / t, nty = (plane.h + t - 1) / t;
        for (int ty = 0; ty < nty; ++ty) {
            for (int tx = 0; tx < ntx; ++tx) {
                int tw = std::min(t, plane.w - tx * t), th = std::min(t, plane.h - ty * t);
                ImageU8 tile = plane.crop(tx * t, ty * t, tw, th);
                std::ofstream f(fs::path(dir) / tile_name(level, tx, ty),
                                std::ios::binary | std::ios::trunc);
                f.write(reinterpret_cast<const char*>(tile.data.data()),
                        static_cast<std::streamsize>(tile.size()));
                if (!f) raise(Errc::io_failure, "cannot write tile under " + dir);
            }
        }
    }
}

TileStore TileStore::open(const std::string& dir) {
    fs::path idx_path = fs::path(dir) / "index.json";
    std::ifstream f(idx_path);
    if (!f) raise(Errc::io_failure, "no index.json in " + dir);
    nlohmann::json idx;
    try {
        f >> idx;
    } catch (const std::exception& e) {
        raise(Errc::io_failure, "bad index.json in " + dir + ": " + e.what());
    }

    TileStore s;
    s.impl_ = std::make_shared<Impl>();
    auto& im = *s.impl_;
    try {
        im.meta.width_px = idx.at("width_px").get<int>();
        im.meta.height_px = idx.at("height_px").get<int>();
        im.meta.channels = idx.at("channels").get<int>();
        im.meta.bit_depth = idx.at("bit_depth").get<int>();
        im.meta.levels = idx.at("levels").get<int>();
        im.meta.tile_size_px = idx.at("tile_size_px").get<int>();
        im.meta.mpp_level0 = idx.at("mpp_level0").get<double>();
    } catch (const std::exception& e) {
        raise(Errc::io_failure, "index.json missing keys in " + dir + ": " + e.what());
    }
    if (im.meta.bit_depth != 8) raise(Errc::bad_config, "only 8-bit stores supported");
    im.dir = dir;
    return s;
}

const ImageMeta& TileStore::meta() const {
    if (!impl_) raise(Errc::bad_config, "empty store handle");
    return impl_->meta;
}

std::pair<int, int> TileStore::level_dims(int level) const {
    const auto& m = meta();
    if (level < 0 || level >= m.levels) raise(Errc::no_such_level, std::to_string(level));
    return impl_->dims(level);
}

int TileStore::snap_level(double req_mpp) const {
    const auto& m = meta();
    if (!(req_mpp > 0)) raise(Errc::no_such_level, "requested mpp must be positive");
    int best = -1;
    double best_err = 1e300;
    for (int k = 0; k < m.levels; ++k) {
        double err = std::abs(std::log2(req_mpp / m.mpp_at(k)));
        if (err < best_err) {
            best_err = err;
            best = k;
        }
    }
    if (best_err > 0.15)
        raise(Errc::no_such_level,
              "no level within snap tolerance of mpp " + std::to_string(req_mpp));
    return best;
}

ImageU8 TileStore::read_region(int level, long x, long y, int w, int h) const {
    const auto& m = meta();
    if (level < 0 || level >= m.levels) raise(Errc::no_such_level, std::to_string(level));
    auto [lw, lh] = impl_->dims(level);
    if (w <= 0 || h <= 0 || x < 0 || y < 0 || x + w > lw || y + h > lh)
        raise(Errc::out_of_bounds, "region outside level " + std::to_string(level));

    if (impl_->in_memory()) return impl_->levels_mem[level].crop(static_cast<int>(x), static_cast<int>(y), w, h);

    ImageU8 out(w, h, m.channels);
    int t = m.tile_size_px;
    int tx0 = static_cast<int>(x) / t, tx1 = static_cast<int>(x + w - 1) / t;
    int ty0 = static_cast<int>(y) / t, ty1 = static_cast<int>(y + h - 1) / t;
    for (int ty = ty0; ty <= ty1; ++ty) {
        for (int tx = tx0; tx <= tx1; ++tx) {
            const ImageU8& tile = impl_->tile(level, tx, ty);
            long ox = static_cast<long>(tx) * t, oy = static_cast<long>(ty) * t;
            long sx0 = std::max(x, ox), sy0 = std::max(y, oy);
            long sx1 = std::min(x + w, ox + tile.w), sy1 = std::min(y + h, oy + tile.h);
            for (long sy = sy0; sy < sy1; ++sy) {
                const uint8_t* src = &tile.data[((sy - oy) * tile.w + (sx0 - ox)) * m.channels];
                uint8_t* dst = &out.data[((sy - y) * w + (sx0 - x)) * m.channels];
                std::copy_n(src, (sx1 - sx0) * m.channels, dst);
            }
        }
    }
    return out;
}

ImageU8 TileStore::read_region(const RegionSpec& spec) const {
    if (spec.width_px <= 0 || spec.height_px <= 0)
        raise(Errc::bad_config, "region extent must be positive");
    int level = snap_level(spec.mpp);
    long xk = spec.x >> level, yk = spec.y >> level;
    return read_region(level, xk, yk, spec.width_px, spec.height_px);
}

ImageU8 TileStore::read_level(int level) const {
    auto [lw, lh] = level_dims(level);
    return read_region(level, 0, 0, lw, lh);
}

size_t TileStore::tiles_loaded() const {
    if (!impl_) return 0;
    std::scoped_lock lk(impl_->cache_mu);
    return impl_->loaded;
}

void TileStore::enable_mask_validation() {
    if (!impl_) raise(Errc::bad_config, "empty store handle");
    impl_->mask = true;
}

TileStore build_store(const ImageU8& raster, int tile_size, double mpp_level0) {
    return TileStore::build(raster, tile_size, mpp_level0, Downsample::box_mean);
}

void write_mask(const std::string& dir, const ImageU8& mask, int tile_size, double mpp_level0) {
    if (mask.ch != 1) raise(Errc::bad_config, "masks are single-channel");
    TileStore::create(dir, mask, tile_size, mpp_level0, Downsample::majority);
}

ImageU8 read_mask(const std::string& dir) {
    TileStore s = open_mask_store(dir);
    return s.read_level(0);
}

TileStore open_mask_store(const std::string& dir) {
    TileStore s = TileStore::open(dir);
    if (s.meta().channels != 1) raise(Errc::bad_config, "mask store must be single-channel");
    s.enable_mask_validation();
    return s;
}

TileStore import_png(const std::string& png_path, int tile_size, double mpp_level0) {
    return build_store(read_png(png_path), tile_size, mpp_level0);
}

void export_png(const TileStore& store, int level, const std::string& png_path) {
    write_png(png_path, store.read_level(level));
}

}  // namespace episeg
