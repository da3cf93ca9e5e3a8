#pragma once

#include <optional>
#include <string>
#include <vector>

#include "episeg/registration.hpp"
#include "episeg/rng.hpp"
#include "episeg/stain.hpp"

namespace episeg {

struct SynthDeformation {
    enum class Kind { none, affine, gaussian_bumps };
    Kind kind = Kind::none;
    AffineTransform affine;      // Kind::affine
    int bump_count = 4;          // Kind::gaussian_bumps
    double max_amplitude_px = 8.0;
    double sigma_px = 48.0;      // injectivity needs max_amplitude < sigma
};

struct SynthConfig {
    int width = 640, height = 640;
    uint64_t rng_seed = 1;
    int gland_count_min = 10, gland_count_max = 16;
    double gland_radius_min = 28, gland_radius_max = 48;
    double lumen_fraction = 0.55;       // inner/outer radius before thickness
    double ring_thickness_px = 14;      // epithelium ring
    int artefact_count = 3;             // stained debris blobs inside lumina
    double artefact_radius_min = 4, artefact_radius_max = 7;
    double intensity_jitter = 0.15;     // relative per-gland stain spread
    SynthDeformation deformation;
    StainModel ihc_model;               // empty -> default_ihc_model()
    StainModel he_model;                // empty -> default_he_model()

    void validate() const;
};

struct GlandInfo {
    double cx = 0, cy = 0;
    double radius = 0;       // nominal outer radius
    double inner = 0;        // nominal lumen radius
};

struct SynthTruth {
    ImageU8 epithelium;      // layout (= IHC) frame
    ImageU8 tissue;
    ImageU8 artefacts;
    ImageU8 epithelium_he;   // H&E frame (differs when deformed)
    ImageU8 tissue_he;
    ImageU8 artefacts_he;
    bool has_field = false;
    DisplacementField field; // H&E frame -> layout frame displacement
    ImageF conc_ihc;         // true stain concentrations per rendering
    ImageF conc_he;
    std::vector<GlandInfo> glands;
};

struct SynthPair {
    ImageU8 he_image;
    ImageU8 ihc_image;
    SynthTruth truth;
};

// Renders the same gland layout twice (IHC-like and H&E-like) with a known
// stain matrix each, a perfect epithelium mask, chromogen-stained artefact
// blobs inside lumina, and an optional known smooth deformation applied to
// the H&E rendering. Deterministic per seed.
SynthPair generate_pair(const SynthConfig& cfg);

// Smooth random displacement field as a sum of Gaussian bumps, scaled so the
// maximum displacement magnitude equals max_amp.
DisplacementField make_bump_field(int w, int h, int count, double max_amp, double sigma, Rng& rng);

// Stain matrix the generator renders the IHC image with: a DAB-like
// chromogen, a hematoxylin counterstain, and their cross product. All stain
// columns are non-negative, so rendering stays inside the 8-bit range and
// deconvolution recovers the true concentrations.
StainModel synth_ihc_model();

// Shared with registration.warp_image; exposed here for truth bookkeeping.
ImageU8 apply_known_warp(const ImageU8& image, const DisplacementField& field,
                         bool is_mask = false);

SynthConfig load_synth_config(const std::string& path);

// On-disk cohort for the end-to-end pipeline: per-slide tile stores for the
// two renderings and the truth masks, plus regions.json and manifest.json.
struct CohortLayout {
    std::string dir;
    std::vector<std::string> train_ids, val_ids, test_ids;
};
CohortLayout generate_cohort(const SynthConfig& base, int n_train, int n_val, int n_test,
                             const std::string& out_dir, int tile_size = 256,
                             double mpp_level0 = 0.24);

}  // namespace episeg
