#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "episeg/image.hpp"

namespace episeg {

struct ImageMeta {
    int width_px = 0;
    int height_px = 0;
    int channels = 1;       // 1 gray, 3 RGB
    int bit_depth = 8;
    int levels = 1;
    int tile_size_px = 256; // power of two
    double mpp_level0 = 0.24;

    double mpp_at(int level) const { return mpp_level0 * static_cast<double>(1 << level); }
};

struct RegionSpec {
    std::string slide_id;
    long x = 0, y = 0;      // level-0 pixel coordinates of the top-left corner
    int width_px = 0;       // extent in target-level pixels
    int height_px = 0;
    double mpp = 0.0;       // target resolution; snapped to the nearest level
    std::string label;      // "benign" | "tumor" (| "artefact" for sampling manifests)
    std::vector<int> grades;  // empty, {primary, secondary} or {primary, secondary, tertiary}
    std::string id;
};

enum class Downsample { box_mean, majority };

// Pyramidal tiled raster. Copies share state; reads are thread-safe.
// Disk layout: index.json plus one raw 8-bit row-major file per tile,
// L{level}_X{tx}_Y{ty}.bin (border tiles are clipped to the level bounds).
class TileStore {
public:
    TileStore() = default;

    // Builds the full pyramid in memory. Level 0 is stored losslessly.
    static TileStore build(const ImageU8& raster, int tile_size, double mpp_level0,
                           Downsample kind = Downsample::box_mean);

    // build + save in one step.
    static TileStore create(const std::string& dir, const ImageU8& raster, int tile_size,
                            double mpp_level0, Downsample kind = Downsample::box_mean);

    // Opens a store directory; tiles load lazily on first touch.
    static TileStore open(const std::string& dir);

    void save(const std::string& dir) const;

    bool valid() const { return impl_ != nullptr; }
    const ImageMeta& meta() const;

    std::pair<int, int> level_dims(int level) const;

    // Nearest level for a requested resolution: argmin |log2(req/level_mpp)|,
    // rejected (NoSuchLevel) when the best match is off by more than 0.15.
    int snap_level(double req_mpp) const;

    ImageU8 read_region(int level, long x, long y, int w, int h) const;
    ImageU8 read_region(const RegionSpec& spec) const;
    ImageU8 read_level(int level) const;

    // Tiles fetched from disk so far (diagnostic; 0 for in-memory stores).
    size_t tiles_loaded() const;

    // Validate {0,1} pixel values as tiles load (mask stores).
    void enable_mask_validation();

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

// Spec-facing helpers.
TileStore build_store(const ImageU8& raster, int tile_size, double mpp_level0);

// Masks hold values {0,1}; pyramid levels are majority-vote downsampled.
void write_mask(const std::string& dir, const ImageU8& mask, int tile_size, double mpp_level0);
ImageU8 read_mask(const std::string& dir);          // level 0, validated
TileStore open_mask_store(const std::string& dir);  // validated lazily per tile

// PNG interop.
TileStore import_png(const std::string& png_path, int tile_size, double mpp_level0);
void export_png(const TileStore& store, int level, const std::string& png_path);

}  // namespace episeg
