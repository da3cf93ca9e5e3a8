#pragma once

#include <array>
#include <string>

#include "episeg/image.hpp"

namespace episeg {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;  // column-major: mat[j] is stain column j

// Optical-density stain matrix. Columns are unit-norm OD vectors:
// stain 1 (chromogen), stain 2 (counterstain), residual.
struct StainModel {
    Mat3 columns{};
    std::array<std::string, 3> names{};
    double background_intensity = 255.0;

    // Throws BadConfig for non-unit columns, SingularStainMatrix when
    // cond(M) > 1e8.
    void validate() const;
    Mat3 inverse() const;
    double condition_number() const;
};

StainModel default_ihc_model();  // combined chromogen + orthogonalized hematoxylin
StainModel default_he_model();   // hematoxylin + eosin + residual

StainModel load_stains_json(const std::string& path);
void save_stains_json(const StainModel& model, const std::string& path);

struct StainConfig {
    double channel_threshold = 0.15;   // concentration threshold for positivity
    int morph_radius = 2;              // disk radius at 0.48 um/px
    int min_object_px = 16;            // connected-component area floor
    double tissue_od_threshold = 0.05; // mean-OD threshold for tissue detection
};

// od_c = -log10((I_c + 1) / (I0 + 1)); total, monotone decreasing in I.
Vec3 rgb_to_od(const Vec3& rgb, double background_intensity = 255.0);

// Solves M c = od. Throws SingularStainMatrix via model.validate().
Vec3 deconvolve(const Vec3& od, const StainModel& model);

// Per-pixel deconvolution of an RGB raster into 3 concentration channels.
ImageF deconvolve_raster(const ImageU8& rgb, const StainModel& model);

// I_c = (I0+1) * 10^-(Mc)_c - 1, clamped to [0,255] and rounded.
ImageU8 he_recompose(const ImageF& concentrations, const StainModel& model);

// Disk structuring element {(dx,dy): dx^2+dy^2 <= r^2}; outside the raster
// is background.
ImageU8 binary_dilate(const ImageU8& mask, int radius);
ImageU8 binary_erode(const ImageU8& mask, int radius);
ImageU8 binary_close(const ImageU8& mask, int radius);  // erode(dilate(m))
ImageU8 binary_open(const ImageU8& mask, int radius);   // dilate(erode(m))

// 8-connected components with area < min_px removed.
ImageU8 remove_small_components(const ImageU8& mask, int min_px);

// (c >= tau) -> close -> open (on a replicate-padded canvas so uniform
// inputs stay uniform) -> small-component removal.
ImageU8 positivity_mask(const ImageF& channel, const StainConfig& cfg);

// Mean OD over channels >= threshold, then close/open as above.
ImageU8 tissue_mask(const ImageU8& rgb, const StainConfig& cfg);

}  // namespace episeg
