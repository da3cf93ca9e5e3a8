#include "episeg/sampler.hpp"

#include <cmath>

#include "episeg/stain.hpp"

namespace episeg {

ImageF loss_weight_map(const ImageU8& labels) {
    if (labels.ch != 1) raise(Errc::bad_config, "loss_weight_map takes a single-channel mask");
    size_t n = labels.pixels();
    size_t ones = 0;
    for (uint8_t v : labels.data) {
        if (v > 1) raise(Errc::bad_label_value, "labels must be 0 or 1");
        ones += v;
    }
    ImageF w(labels.w, labels.h, 1, 1.0f);
    if (ones == 0 || ones == n) return w;  // single class: all ones

    double f1 = static_cast<double>(ones) / static_cast<double>(n);
    double f0 = 1.0 - f1;
    double w1 = 1.0 / (2.0 * f1), w0 = 1.0 / (2.0 * f0);
    // mean is already 1 (sum_c f_c / (K f_c) = 1); normalize anyway to pin
    // the invariant against rounding
    double mean = f1 * w1 + f0 * w0;
    w1 /= mean;
    w0 /= mean;
    for (size_t i = 0; i < n; ++i) w.data[i] = static_cast<float>(labels.data[i] ? w1 : w0);
    return w;
}

namespace {

constexpr double kCoarseMpp = 7.7;

int nearest_level(const TileStore& store, double mpp) {
    const auto& m = store.meta();
    int best = 0;
    double best_err = 1e300;
    for (int k = 0; k < m.levels; ++k) {
        double err = std::abs(std::log2(mpp / m.mpp_at(k)));
        if (err < best_err) {
            best_err = err;
            best = k;
        }
    }
    return best;
}

}  // namespace

Sampler::Sampler(TileStore image, TileStore mask, std::optional<TileStore> tissue,
                 const SamplerConfig& cfg, const std::vector<RegionSpec>& manifest_regions)
    : image_(std::move(image)), mask_(std::move(mask)), cfg_(cfg) {
    target_level_ = image_.snap_level(cfg_.mpp);
    auto [tw, th] = image_.level_dims(target_level_);
    if (tw < cfg_.patch_size_px || th < cfg_.patch_size_px)
        raise(Errc::bad_config, "slide smaller than the patch size at the sampling resolution");

    coarse_level_ = nearest_level(mask_, kCoarseMpp);
    ImageU8 coarse_mask = mask_.read_level(coarse_level_);
    ImageU8 coarse_tissue;
    if (tissue) {
        coarse_tissue = tissue->read_level(nearest_level(*tissue, kCoarseMpp));
        if (!coarse_tissue.same_shape(coarse_mask))
            raise(Errc::dimension_mismatch, "tissue and mask stores disagree at the coarse level");
    }

    // artefact rectangles in coarse coordinates
    std::vector<std::array<long, 4>> artefact_rects;
    for (const auto& r : manifest_regions) {
        if (r.label != "artefact") continue;
        int rl = image_.snap_level(r.mpp);
        long w0 = static_cast<long>(r.width_px) << rl, h0 = static_cast<long>(r.height_px) << rl;
        artefact_rects.push_back({r.x >> coarse_level_, r.y >> coarse_level_,
                                  (r.x + w0) >> coarse_level_, (r.y + h0) >> coarse_level_});
    }

    for (int y = 0; y < coarse_mask.h; ++y) {
        for (int x = 0; x < coarse_mask.w; ++x) {
            bool tissue_here = coarse_tissue.empty() ? true : coarse_tissue.at(x, y) != 0;
            if (!tissue_here) continue;
            bool positive = coarse_mask.at(x, y) != 0;
            (positive ? positive_centers_ : background_centers_).emplace_back(x, y);
            for (const auto& rc : artefact_rects)
                if (x >= rc[0] && x < rc[2] && y >= rc[1] && y < rc[3]) {
                    artefact_centers_.emplace_back(x, y);
                    break;
                }
        }
    }
    if (background_centers_.empty() && positive_centers_.empty())
        raise(Errc::bad_config, "no candidate patch centers (empty tissue)");
    if (positive_centers_.empty() && cfg_.policy == SamplingPolicy::class_uniform)
        warnings_.push_back("NoPositivePixels: slide has no epithelium at the index level; "
                            "falling back to uniform tissue sampling");
}

PatchBatch Sampler::cut_patch(int cx, int cy, Rng& rng) const {
    // coarse center -> target-level coordinates with sub-cell jitter
    int shift = coarse_level_ - target_level_;
    long scale = 1L << std::max(shift, 0);
    long tx = (static_cast<long>(cx) * scale) + static_cast<long>(rng.uniform_int(scale));
    long ty = (static_cast<long>(cy) * scale) + static_cast<long>(rng.uniform_int(scale));

    auto [lw, lh] = image_.level_dims(target_level_);
    long x0 = std::clamp(tx - cfg_.patch_size_px / 2, 0L, static_cast<long>(lw - cfg_.patch_size_px));
    long y0 = std::clamp(ty - cfg_.patch_size_px / 2, 0L, static_cast<long>(lh - cfg_.patch_size_px));

    PatchBatch b;
    b.image = image_.read_region(target_level_, x0, y0, cfg_.patch_size_px, cfg_.patch_size_px);
    int mask_level = mask_.snap_level(cfg_.mpp);
    b.labels = mask_.read_region(mask_level, x0, y0, cfg_.patch_size_px, cfg_.patch_size_px);
    b.weights = loss_weight_map(b.labels);
    b.slide_id = cfg_.slide_id;
    b.x = x0 << target_level_;
    b.y = y0 << target_level_;
    b.mpp = image_.meta().mpp_at(target_level_);
    return b;
}

PatchBatch Sampler::sample(Rng& rng) const {
    const std::vector<std::pair<int, int>>* pool = nullptr;
    if (cfg_.policy == SamplingPolicy::class_uniform) {
        bool want_positive = rng.coin();
        if (positive_centers_.empty())
            pool = &background_centers_;
        else if (background_centers_.empty())
            pool = &positive_centers_;
        else
            pool = want_positive ? &positive_centers_ : &background_centers_;
    } else {
        // artefact centers drawn with probability proportional to the
        // multiplier; everything else uniform over tissue
        double wa = cfg_.artefact_multiplier * static_cast<double>(artefact_centers_.size());
        double wrest = static_cast<double>(positive_centers_.size() + background_centers_.size());
        if (wa > 0 && rng.uniform() < wa / (wa + wrest)) {
            pool = &artefact_centers_;
        } else {
            size_t total = positive_centers_.size() + background_centers_.size();
            size_t pick = rng.uniform_int(total);
            if (pick < positive_centers_.size()) {
                auto [cx, cy] = positive_centers_[pick];
                return cut_patch(cx, cy, rng);
            }
            auto [cx, cy] = background_centers_[pick - positive_centers_.size()];
            return cut_patch(cx, cy, rng);
        }
    }
    auto [cx, cy] = (*pool)[rng.uniform_int(pool->size())];
    return cut_patch(cx, cy, rng);
}

void AugmentationConfig::validate() const {
    auto contains_one = [](double lo, double hi) { return lo <= 1.0 && hi >= 1.0 && lo <= hi; };
    if (noise_sigma_max < 0 || blur_sigma_max < 0)
        raise(Errc::bad_config, "noise/blur sigma ranges start at 0");
    if (!contains_one(saturation_min, saturation_max) ||
        !contains_one(contrast_min, contrast_max) ||
        !contains_one(brightness_min, brightness_max))
        raise(Errc::bad_config, "photometric factor ranges must contain 1");
    if (scaling && !contains_one(scale_min, scale_max))
        raise(Errc::bad_config, "scale range must contain 1");
    if (he_delta < 0 || he_delta >= 1) raise(Errc::bad_config, "he_delta must lie in [0,1)");
    if (max_rotation_deg < 0) raise(Errc::bad_config, "max_rotation_deg must be >= 0");
}

AugmentationConfig AugmentationConfig::identity() {
    AugmentationConfig c;
    c.flip = false;
    c.rot90 = false;
    c.free_rotation = false;
    c.noise_sigma_max = 0;
    c.blur_sigma_max = 0;
    c.saturation_min = c.saturation_max = 1.0;
    c.contrast_min = c.contrast_max = 1.0;
    c.brightness_min = c.brightness_max = 1.0;
    c.scaling = false;
    c.he_shift = false;
    return c;
}

AugmentationConfig AugmentationConfig::ihc_profile() { return AugmentationConfig{}; }

AugmentationConfig AugmentationConfig::he_profile() {
    AugmentationConfig c;
    c.scaling = true;
    c.he_shift = true;
    return c;
}

namespace {

template <typename T>
Image<T> flip_h(const Image<T>& img) {
    Image<T> out(img.w, img.h, img.ch);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.ch; ++c) out.at(x, y, c) = img.at(img.w - 1 - x, y, c);
    return out;
}

template <typename T>
Image<T> flip_v(const Image<T>& img) {
    Image<T> out(img.w, img.h, img.ch);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.ch; ++c) out.at(x, y, c) = img.at(x, img.h - 1 - y, c);
    return out;
}

// 90 degrees counter-clockwise.
template <typename T>
Image<T> rot90_once(const Image<T>& img) {
    Image<T> out(img.h, img.w, img.ch);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int c = 0; c < img.ch; ++c) out.at(x, y, c) = img.at(img.w - 1 - y, x, c);
    return out;
}

double reflect_coord(double v, int extent) {
    if (extent == 1) return 0;
    double period = 2.0 * (extent - 1);
    v = std::fmod(std::abs(v), period);
    return v <= extent - 1 ? v : period - v;
}

// Rotation + scale about the patch center, reflection padding. Nearest
// keeps labels/weights valid.
template <typename T>
Image<T> resample_affine(const Image<T>& img, double angle_rad, double scale, bool bilinear) {
    Image<T> out(img.w, img.h, img.ch);
    double cx = (img.w - 1) / 2.0, cy = (img.h - 1) / 2.0;
    double ca = std::cos(angle_rad) / scale, sa = std::sin(angle_rad) / scale;
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double dx = x - cx, dy = y - cy;
            double sx = reflect_coord(cx + ca * dx + sa * dy, img.w);
            double sy = reflect_coord(cy - sa * dx + ca * dy, img.h);
            if (bilinear) {
                int x0 = std::min(static_cast<int>(sx), std::max(img.w - 2, 0));
                int y0 = std::min(static_cast<int>(sy), std::max(img.h - 2, 0));
                int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
                double fx = sx - x0, fy = sy - y0;
                for (int c = 0; c < img.ch; ++c) {
                    double v = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
                               fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
                    if constexpr (std::is_integral_v<T>)
                        out.at(x, y, c) = static_cast<T>(std::lround(std::clamp(v, 0.0, 255.0)));
                    else
                        out.at(x, y, c) = static_cast<T>(v);
                }
            } else {
                int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, img.w - 1);
                int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, img.h - 1);
                for (int c = 0; c < img.ch; ++c) out.at(x, y, c) = img.at(nx, ny, c);
            }
        }
    }
    return out;
}

void gaussian_blur_inplace(ImageU8& img, double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    ImageD tmp(img.w, img.h, img.ch);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.ch; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    int sx = static_cast<int>(reflect_coord(x + i, img.w));
                    acc += kernel[i + radius] * img.at(sx, y, c);
                }
                tmp.at(x, y, c) = acc;
            }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < img.ch; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    int sy = static_cast<int>(reflect_coord(y + i, img.h));
                    acc += kernel[i + radius] * tmp.at(x, sy, c);
                }
                img.at(x, y, c) = clamp_u8(acc);
            }
}

}  // namespace

PatchBatch augment(const PatchBatch& batch, const AugmentationConfig& cfg, Rng& rng) {
    cfg.validate();
    PatchBatch out = batch;
    bool geometric_resampled = false;

    if (cfg.flip) {
        if (rng.coin()) {
            out.image = flip_h(out.image);
            out.labels = flip_h(out.labels);
            out.weights = flip_h(out.weights);
        }
        if (rng.coin()) {
            out.image = flip_v(out.image);
            out.labels = flip_v(out.labels);
            out.weights = flip_v(out.weights);
        }
    }
    if (cfg.rot90) {
        int k = static_cast<int>(rng.uniform_int(4));
        for (int i = 0; i < k; ++i) {
            out.image = rot90_once(out.image);
            out.labels = rot90_once(out.labels);
            out.weights = rot90_once(out.weights);
        }
    }
    {
        double angle = cfg.free_rotation
                           ? rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0
                           : 0.0;
        double scale = cfg.scaling ? rng.uniform(cfg.scale_min, cfg.scale_max) : 1.0;
        if (angle != 0.0 || scale != 1.0) {
            out.image = resample_affine(out.image, angle, scale, true);
            out.labels = resample_affine(out.labels, angle, scale, false);
            out.weights = resample_affine(out.weights, angle, scale, false);
            geometric_resampled = true;
        }
    }

    if (cfg.noise_sigma_max > 0) {
        double sigma = rng.uniform(0.0, cfg.noise_sigma_max);
        if (sigma > 0)
            for (auto& v : out.image.data)
                v = clamp_u8(static_cast<double>(v) + sigma * rng.normal());
    }
    if (cfg.blur_sigma_max > 0) {
        double sigma = rng.uniform(0.0, cfg.blur_sigma_max);
        if (sigma > 0.05) gaussian_blur_inplace(out.image, sigma);
    }
    if (cfg.saturation_min != 1.0 || cfg.saturation_max != 1.0) {
        double f = rng.uniform(cfg.saturation_min, cfg.saturation_max);
        if (f != 1.0 && out.image.ch == 3) {
            for (size_t p = 0; p < out.image.pixels(); ++p) {
                double g = 0.299 * out.image.data[p * 3] + 0.587 * out.image.data[p * 3 + 1] +
                           0.114 * out.image.data[p * 3 + 2];
                for (int c = 0; c < 3; ++c)
                    out.image.data[p * 3 + c] = clamp_u8(g + f * (out.image.data[p * 3 + c] - g));
            }
        }
    }
    if (cfg.contrast_min != 1.0 || cfg.contrast_max != 1.0) {
        double f = rng.uniform(cfg.contrast_min, cfg.contrast_max);
        if (f != 1.0) {
            double mean = 0;
            for (uint8_t v : out.image.data) mean += v;
            mean /= static_cast<double>(out.image.size());
            for (auto& v : out.image.data) v = clamp_u8(mean + f * (v - mean));
        }
    }
    if (cfg.brightness_min != 1.0 || cfg.brightness_max != 1.0) {
        double f = rng.uniform(cfg.brightness_min, cfg.brightness_max);
        if (f != 1.0)
            for (auto& v : out.image.data) v = clamp_u8(f * v);
    }
    if (cfg.he_shift && cfg.he_delta > 0 && out.image.ch == 3) {
        double f0 = rng.uniform(1.0 - cfg.he_delta, 1.0 + cfg.he_delta);
        double f1 = rng.uniform(1.0 - cfg.he_delta, 1.0 + cfg.he_delta);
        double f2 = rng.uniform(1.0 - cfg.he_delta, 1.0 + cfg.he_delta);
        StainModel he = default_he_model();
        ImageF conc = deconvolve_raster(out.image, he);
        for (size_t p = 0; p < conc.pixels(); ++p) {
            conc.data[p * 3] *= static_cast<float>(f0);
            conc.data[p * 3 + 1] *= static_cast<float>(f1);
            conc.data[p * 3 + 2] *= static_cast<float>(f2);
        }
        out.image = he_recompose(conc, he);
    }

    if (geometric_resampled) {
        // restore the mean-1 weight convention after resampling
        double mean = 0;
        for (float v : out.weights.data) mean += v;
        mean /= static_cast<double>(out.weights.size());
        if (mean > 0 && std::abs(mean - 1.0) > 1e-12)
            for (float& v : out.weights.data) v = static_cast<float>(v / mean);
    }
    return out;
}

}  // namespace episeg
