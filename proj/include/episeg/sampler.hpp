#pragma once

#include <optional>
#include <string>
#include <vector>

#include "episeg/image.hpp"
#include "episeg/rng.hpp"
#include "episeg/tilestore.hpp"

namespace episeg {

struct PatchBatch {
    ImageU8 image;   // RGB patch
    ImageU8 labels;  // {0,1}
    ImageF weights;  // per-pixel loss weights, mean 1 over the patch
    std::string slide_id;
    long x = 0, y = 0;  // level-0 coordinates of the patch origin
    double mpp = 0;
};

enum class SamplingPolicy { class_uniform, artefact_oversample };

struct SamplerConfig {
    int patch_size_px = 512;   // 512 for the IHC profile, 1024 for H&E
    double mpp = 0.48;
    SamplingPolicy policy = SamplingPolicy::class_uniform;
    double artefact_multiplier = 4.0;
    uint64_t rng_seed = 1;
    std::string slide_id;
};

// Inverse class-frequency weights: w_c = 1 / (K f_c) over the K classes
// present, normalized to patch mean 1. Single-class patches get all ones.
ImageF loss_weight_map(const ImageU8& labels);

// Patch sampler over one slide. Class-conditional center lists are built
// once from the mask at a coarse level (~7.7 um/px) so draws never scan
// full resolution.
class Sampler {
public:
    Sampler(TileStore image, TileStore mask, std::optional<TileStore> tissue,
            const SamplerConfig& cfg, const std::vector<RegionSpec>& manifest_regions = {});

    PatchBatch sample(Rng& rng) const;

    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    TileStore image_;
    TileStore mask_;
    SamplerConfig cfg_;
    int target_level_ = 0;
    int coarse_level_ = 0;
    std::vector<std::pair<int, int>> positive_centers_;
    std::vector<std::pair<int, int>> background_centers_;
    std::vector<std::pair<int, int>> artefact_centers_;
    std::vector<std::string> warnings_;

    PatchBatch cut_patch(int cx, int cy, Rng& rng) const;
};

struct AugmentationConfig {
    bool flip = true;
    bool rot90 = true;
    bool free_rotation = false;
    double max_rotation_deg = 180.0;
    double noise_sigma_max = 10.0;   // additive Gaussian, intensity units
    double blur_sigma_max = 2.0;
    double saturation_min = 0.75, saturation_max = 1.25;
    double contrast_min = 0.75, contrast_max = 1.25;
    double brightness_min = 0.75, brightness_max = 1.25;
    bool scaling = false;            // H&E profile only
    double scale_min = 0.9, scale_max = 1.1;
    bool he_shift = false;           // H&E color-space perturbation
    double he_delta = 0.15;

    void validate() const;  // ranges must contain the identity value

    static AugmentationConfig identity();
    static AugmentationConfig ihc_profile();
    static AugmentationConfig he_profile();
};

// Geometric ops hit image, labels (nearest) and weights identically;
// photometric ops hit the image only. With the identity config the batch
// passes through bit-exact.
PatchBatch augment(const PatchBatch& batch, const AugmentationConfig& cfg, Rng& rng);

}  // namespace episeg
