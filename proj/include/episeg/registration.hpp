#pragma once

#include <string>
#include <vector>

#include "episeg/image.hpp"

namespace episeg {

// Dense 2-vector displacement field on a nodal grid. Convention is
// moving-to-fixed sampling: warped(x) = moving(x + u(x)). Node (i, j) sits
// at pixel (i * spacing, j * spacing); values are in pixels.
struct DisplacementField {
    int grid_w = 0, grid_h = 0;
    double spacing = 1.0;
    std::vector<double> u;  // row-major, (ux, uy) interleaved

    DisplacementField() = default;
    DisplacementField(int w, int h, double sp = 1.0)
        : grid_w(w), grid_h(h), spacing(sp), u(static_cast<size_t>(w) * h * 2, 0.0) {}

    size_t nodes() const { return static_cast<size_t>(grid_w) * grid_h; }
    double& ux(int x, int y) { return u[(static_cast<size_t>(y) * grid_w + x) * 2]; }
    double& uy(int x, int y) { return u[(static_cast<size_t>(y) * grid_w + x) * 2 + 1]; }
    double ux(int x, int y) const { return u[(static_cast<size_t>(y) * grid_w + x) * 2]; }
    double uy(int x, int y) const { return u[(static_cast<size_t>(y) * grid_w + x) * 2 + 1]; }

    // Bilinear field value at pixel position (px, py).
    void value_at(double px, double py, double& ox, double& oy) const;
};

// Orientation-preserving 2x2 linear map plus translation, applied about the
// domain center c: y = c + A (x - c) + t.
struct AffineTransform {
    double a00 = 1, a01 = 0, a10 = 0, a11 = 1;
    double tx = 0, ty = 0;

    double det() const { return a00 * a11 - a01 * a10; }
};

struct RegistrationConfig {
    double ngf_epsilon = 10.0;        // edge parameter, intensity units
    double curvature_weight = 0.1;    // alpha
    int pyramid_levels = 4;
    int max_iterations = 50;          // per pyramid level
    double gradient_tolerance = 1e-3; // per-pixel; absolute tol is this * N
    int patch_size_px = 512;
    int patch_overlap_px = 128;
    double merge_data_weight = 1.0;   // beta
    int max_cg_iterations = 30;
    int jobs = 1;

    void validate() const;
};

struct IterationRecord {
    std::string stage;  // "affine" | "nonparametric" | "patch<k>"
    int level = 0;
    int iteration = 0;
    double objective = 0;
    double step = 0;
};
using Diagnostics = std::vector<IterationRecord>;

void write_diagnostics_csv(const Diagnostics& diag, const std::string& path);

// g = 0.299 R + 0.587 G + 0.114 B, kept real-valued.
ImageD to_grayscale(const ImageU8& rgb);

// NGF distance: D = sum_x [1 - ((<gT,gR> + eps^2)^2 / ((|gT|^2+eps^2)(|gR|^2+eps^2)))],
// central differences inside, one-sided at borders. Returns the analytic
// gradient with respect to the warped image.
struct NgfResult {
    double value = 0;
    ImageD gradient;
};
NgfResult ngf_distance(const ImageD& fixed, const ImageD& warped, double epsilon);
double ngf_value(const ImageD& fixed, const ImageD& warped, double epsilon);

// Curvature energy S = 1/2 sum_i sum_nodes (Lap u_i)^2 on a unit grid.
// The Laplacian uses zero second differences across the border (ghost nodes
// by linear extrapolation), which makes affine fields its exact nullspace.
struct CurvatureResult {
    double value = 0;
    std::vector<double> gradient;  // same layout as DisplacementField::u
};
CurvatureResult curvature_energy(const DisplacementField& field);

enum class Interp { bilinear, nearest };

ImageU8 warp_image(const ImageU8& moving, const DisplacementField& field, Interp interp,
                   uint8_t background = 255);
ImageU8 warp_image(const ImageU8& moving, const AffineTransform& t, Interp interp,
                   uint8_t background = 255);
ImageU8 warp_mask(const ImageU8& mask, const DisplacementField& field);  // nearest, bg 0
ImageD warp_image(const ImageD& moving, const DisplacementField& field, double background = 255.0);

DisplacementField field_from_affine(const AffineTransform& t, int w, int h);

AffineTransform register_affine(const ImageD& fixed, const ImageD& moving,
                                const RegistrationConfig& cfg, Diagnostics* diag = nullptr);

DisplacementField register_nonparametric(const ImageD& fixed, const ImageD& moving,
                                         const DisplacementField& init,
                                         const RegistrationConfig& cfg,
                                         Diagnostics* diag = nullptr);

DisplacementField register_patchwise(const ImageD& fixed, const ImageD& moving,
                                     const DisplacementField& global_field,
                                     const RegistrationConfig& cfg,
                                     Diagnostics* diag = nullptr);

// Overlap-balancing merge used by register_patchwise: a feather-weighted
// data term balanced against the curvature regularizer, solved on nodes
// covered by two or more patches; single-coverage nodes keep their patch's
// value.
struct PatchField {
    int x0 = 0, y0 = 0;
    DisplacementField field;
};
DisplacementField merge_patch_fields(int width, int height,
                                     const std::vector<PatchField>& patches,
                                     const RegistrationConfig& cfg);

// field.json (grid_w, grid_h, spacing) + field.bin (row-major float32 LE,
// (u_x, u_y) interleaved).
void save_field(const DisplacementField& field, const std::string& dir);
DisplacementField load_field(const std::string& dir);

}  // namespace episeg
