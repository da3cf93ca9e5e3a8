#include "episeg/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "episeg/eval.hpp"
#include "episeg/tilestore.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace episeg {

void SynthConfig::validate() const {
    if (width < 64 || height < 64) raise(Errc::bad_config, "synth canvas must be at least 64x64");
    if (gland_count_min < 0 || gland_count_max < gland_count_min)
        raise(Errc::bad_config, "bad gland count range");
    if (!(gland_radius_min > 0 && gland_radius_max >= gland_radius_min))
        raise(Errc::bad_config, "bad gland radius range");
    if (!(lumen_fraction > 0 && lumen_fraction < 1))
        raise(Errc::bad_config, "lumen_fraction must lie in (0,1)");
    if (!(ring_thickness_px > 0)) raise(Errc::bad_config, "ring thickness must be positive");
    if (artefact_count < 0 || artefact_radius_min <= 0 ||
        artefact_radius_max < artefact_radius_min)
        raise(Errc::bad_config, "bad artefact configuration");
    if (intensity_jitter < 0 || intensity_jitter >= 0.5)
        raise(Errc::bad_config, "intensity_jitter must lie in [0, 0.5)");
    if (deformation.kind == SynthDeformation::Kind::gaussian_bumps) {
        if (!(deformation.max_amplitude_px < deformation.sigma_px))
            raise(Errc::bad_config, "warp injectivity needs max_amplitude < sigma");
        if (deformation.bump_count < 1) raise(Errc::bad_config, "need at least one bump");
    }
    if (deformation.kind == SynthDeformation::Kind::affine && !(deformation.affine.det() > 0))
        raise(Errc::bad_config, "affine deformation must preserve orientation");
}

namespace {

struct NoiseField {
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    double offset = 0.5, scale = 0.5;

    static NoiseField make(Rng& rng, double base_freq) {
        NoiseField n;
        double total = 0;
        for (int k = 0; k < 6; ++k) {
            double f = base_freq * (1.0 + k);
            double angle = rng.uniform(0, 2 * M_PI);
            double amp = 1.0 / (1.0 + k);
            n.waves.push_back({f * std::cos(angle), f * std::sin(angle),
                               rng.uniform(0, 2 * M_PI), amp});
            total += amp;
        }
        n.scale = 0.5 / total;
        return n;
    }

    // in [0,1]
    double operator()(double x, double y) const {
        double v = 0;
        for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
        return offset + scale * v;
    }
};

struct Gland {
    double cx, cy, radius, inner, jitter;
    double mod1_amp, mod1_phase, mod2_amp, mod2_phase;

    double outer_at(double theta) const {
        return radius * (1.0 + mod1_amp * std::sin(3 * theta + mod1_phase) +
                         mod2_amp * std::sin(5 * theta + mod2_phase));
    }
};

struct Artefact {
    double cx, cy, radius, jitter;
};

constexpr uint8_t kBackground = 0, kStroma = 1, kLumen = 2, kEpithelium = 3, kArtefact = 4;

}  // namespace

DisplacementField make_bump_field(int w, int h, int count, double max_amp, double sigma,
                                  Rng& rng) {
    DisplacementField f(w, h, 1.0);
    struct Bump {
        double cx, cy, ax, ay;
    };
    std::vector<Bump> bumps;
    for (int k = 0; k < count; ++k) {
        double cx = rng.uniform(0.15 * w, 0.85 * w);
        double cy = rng.uniform(0.15 * h, 0.85 * h);
        double angle = rng.uniform(0, 2 * M_PI);
        double mag = max_amp * rng.uniform(0.5, 1.0);
        bumps.push_back({cx, cy, mag * std::cos(angle), mag * std::sin(angle)});
    }
    double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double max_norm = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double vx = 0, vy = 0;
            for (const auto& b : bumps) {
                double dx = x - b.cx, dy = y - b.cy;
                double g = std::exp(-(dx * dx + dy * dy) * inv2s2);
                vx += b.ax * g;
                vy += b.ay * g;
            }
            f.ux(x, y) = vx;
            f.uy(x, y) = vy;
            max_norm = std::max(max_norm, std::hypot(vx, vy));
        }
    }
    if (max_norm > 0) {
        double s = max_amp / max_norm;
        for (double& v : f.u) v *= s;
    }
    return f;
}

ImageU8 apply_known_warp(const ImageU8& image, const DisplacementField& field, bool is_mask) {
    return is_mask ? warp_mask(image, field)
                   : warp_image(image, field, Interp::bilinear, 255);
}

StainModel synth_ihc_model() {
    StainModel m;
    auto normalized = [](Vec3 v) {
        double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        return Vec3{v[0] / n, v[1] / n, v[2] / n};
    };
    Vec3 chrom = normalized({0.27, 0.57, 0.78});
    Vec3 hema = normalized({0.644, 0.717, 0.267});
    Vec3 residual = normalized({chrom[1] * hema[2] - chrom[2] * hema[1],
                                chrom[2] * hema[0] - chrom[0] * hema[2],
                                chrom[0] * hema[1] - chrom[1] * hema[0]});
    m.columns = {chrom, hema, residual};
    m.names = {"DAB+NovaRED combined", "hematoxylin", "residual"};
    return m;
}

SynthPair generate_pair(const SynthConfig& cfg_in) {
    SynthConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.ihc_model.names[0].empty()) cfg.ihc_model = synth_ihc_model();
    if (cfg.he_model.names[0].empty()) cfg.he_model = default_he_model();

    Rng rng(cfg.rng_seed);
    int w = cfg.width, h = cfg.height;

    // tissue footprint: wavy ellipse covering most of the canvas
    double fcx = w / 2.0, fcy = h / 2.0;
    double frx = 0.46 * w, fry = 0.46 * h;
    double fmod_amp = rng.uniform(0.04, 0.09), fmod_phase = rng.uniform(0, 2 * M_PI);
    auto in_footprint = [&](double x, double y) {
        double dx = (x - fcx) / frx, dy = (y - fcy) / fry;
        double rho = std::sqrt(dx * dx + dy * dy);
        double theta = std::atan2(dy, dx);
        return rho <= 1.0 + fmod_amp * std::sin(3 * theta + fmod_phase);
    };

    NoiseField stroma_noise = NoiseField::make(rng, 2 * M_PI / (0.21 * w));
    NoiseField detail_noise = NoiseField::make(rng, 2 * M_PI / (0.07 * w));

    // glands: rejection-sampled non-overlapping centers inside the footprint
    int gland_target = cfg.gland_count_min +
                       static_cast<int>(rng.uniform_int(
                           static_cast<uint64_t>(cfg.gland_count_max - cfg.gland_count_min + 1)));
    std::vector<Gland> glands;
    for (int attempts = 0; static_cast<int>(glands.size()) < gland_target && attempts < 4000;
         ++attempts) {
        Gland g;
        g.radius = rng.uniform(cfg.gland_radius_min, cfg.gland_radius_max);
        double margin = g.radius * 1.25 + 4;
        g.cx = rng.uniform(margin, w - margin);
        g.cy = rng.uniform(margin, h - margin);
        if (!in_footprint(g.cx, g.cy) || !in_footprint(g.cx + margin * 0.8, g.cy) ||
            !in_footprint(g.cx - margin * 0.8, g.cy) || !in_footprint(g.cx, g.cy + margin * 0.8) ||
            !in_footprint(g.cx, g.cy - margin * 0.8))
            continue;
        bool clash = false;
        for (const auto& other : glands)
            if (std::hypot(g.cx - other.cx, g.cy - other.cy) <
                1.18 * (g.radius + other.radius) + 6) {
                clash = true;
                break;
            }
        if (clash) continue;
        g.inner = std::max(4.0, g.radius - cfg.ring_thickness_px);
        g.jitter = 1.0 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0);
        g.mod1_amp = rng.uniform(0.03, 0.10);
        g.mod1_phase = rng.uniform(0, 2 * M_PI);
        g.mod2_amp = rng.uniform(0.02, 0.06);
        g.mod2_phase = rng.uniform(0, 2 * M_PI);
        glands.push_back(g);
    }

    // artefact blobs strictly inside lumina
    std::vector<Artefact> artefacts;
    for (int k = 0; k < cfg.artefact_count && !glands.empty(); ++k) {
        const Gland& g = glands[rng.uniform_int(glands.size())];
        double min_inner = g.inner * (1.0 - g.mod1_amp - g.mod2_amp) - cfg.ring_thickness_px * 0.2;
        double radius = std::min(rng.uniform(cfg.artefact_radius_min, cfg.artefact_radius_max),
                                 0.45 * min_inner);
        if (radius < 1.5) continue;
        double max_off = std::max(0.0, min_inner - radius - 3.0);
        double angle = rng.uniform(0, 2 * M_PI);
        double off = rng.uniform(0, max_off);
        artefacts.push_back({g.cx + off * std::cos(angle), g.cy + off * std::sin(angle), radius,
                             1.0 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0)});
    }

    // class map
    ImageU8 cls(w, h, 1, kBackground);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (in_footprint(x, y)) cls.at(x, y) = kStroma;
    for (const auto& g : glands) {
        int x0 = std::max(0, static_cast<int>(g.cx - g.radius * 1.25));
        int x1 = std::min(w - 1, static_cast<int>(g.cx + g.radius * 1.25));
        int y0 = std::max(0, static_cast<int>(g.cy - g.radius * 1.25));
        int y1 = std::min(h - 1, static_cast<int>(g.cy + g.radius * 1.25));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double dx = x - g.cx, dy = y - g.cy;
                double rho = std::hypot(dx, dy);
                double outer = g.outer_at(std::atan2(dy, dx));
                double inner = outer - cfg.ring_thickness_px;
                if (rho <= inner)
                    cls.at(x, y) = kLumen;
                else if (rho <= outer)
                    cls.at(x, y) = kEpithelium;
            }
    }
    for (const auto& a : artefacts) {
        int x0 = std::max(0, static_cast<int>(a.cx - a.radius - 1));
        int x1 = std::min(w - 1, static_cast<int>(a.cx + a.radius + 1));
        int y0 = std::max(0, static_cast<int>(a.cy - a.radius - 1));
        int y1 = std::min(h - 1, static_cast<int>(a.cy + a.radius + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (std::hypot(x - a.cx, y - a.cy) <= a.radius && cls.at(x, y) == kLumen)
                    cls.at(x, y) = kArtefact;
    }

    // per-gland jitter lookup for the epithelium pixels
    auto gland_jitter_at = [&](int x, int y) {
        for (const auto& g : glands)
            if (std::hypot(x - g.cx, y - g.cy) <= g.radius * 1.25) return g.jitter;
        return 1.0;
    };
    auto artefact_jitter_at = [&](int x, int y) {
        for (const auto& a : artefacts)
            if (std::hypot(x - a.cx, y - a.cy) <= a.radius + 1) return a.jitter;
        return 1.0;
    };

    double ihc_global = 1.0 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0);
    double he_global = 1.0 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0);

    ImageF conc_ihc(w, h, 3), conc_he(w, h, 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double n1 = stroma_noise(x, y), n2 = detail_noise(x, y);
            double chrom = 0, counter = 0.01;
            double hema = 0, eosin = 0.01;
            switch (cls.at(x, y)) {
                case kBackground:
                    break;
                case kStroma:
                    chrom = 0.015 + 0.025 * n2;
                    counter = (0.28 + 0.30 * n1) * ihc_global;
                    hema = (0.12 + 0.10 * n1) * he_global;
                    eosin = (0.35 + 0.25 * n1) * he_global;
                    break;
                case kLumen:
                    chrom = 0.01;
                    counter = 0.12 + 0.02 * n1;
                    hema = 0.06;
                    eosin = 0.08 + 0.02 * n1;
                    break;
                case kEpithelium: {
                    double jg = gland_jitter_at(x, y);
                    chrom = std::max(0.40, 0.85 * jg * ihc_global);
                    counter = 0.25 * ihc_global;
                    hema = std::max(0.35, 0.65 * jg * he_global);
                    eosin = 0.25 * he_global;
                    break;
                }
                case kArtefact: {
                    double ja = artefact_jitter_at(x, y);
                    chrom = std::max(0.40, 0.75 * ja * ihc_global);
                    counter = 0.15;
                    hema = 0.20;
                    eosin = std::max(0.30, 0.50 * ja * he_global);
                    break;
                }
            }
            conc_ihc.at(x, y, 0) = static_cast<float>(chrom);
            conc_ihc.at(x, y, 1) = static_cast<float>(counter);
            conc_he.at(x, y, 0) = static_cast<float>(hema);
            conc_he.at(x, y, 1) = static_cast<float>(eosin);
        }
    }

    SynthPair out;
    out.ihc_image = he_recompose(conc_ihc, cfg.ihc_model);
    ImageU8 he_ideal = he_recompose(conc_he, cfg.he_model);

    SynthTruth& truth = out.truth;
    truth.epithelium = ImageU8(w, h, 1);
    truth.tissue = ImageU8(w, h, 1);
    truth.artefacts = ImageU8(w, h, 1);
    for (size_t i = 0; i < cls.data.size(); ++i) {
        truth.epithelium.data[i] = cls.data[i] == kEpithelium ? 1 : 0;
        truth.tissue.data[i] = cls.data[i] != kBackground ? 1 : 0;
        truth.artefacts.data[i] = cls.data[i] == kArtefact ? 1 : 0;
    }
    truth.conc_ihc = std::move(conc_ihc);
    truth.conc_he = std::move(conc_he);
    for (const auto& g : glands) truth.glands.push_back({g.cx, g.cy, g.radius, g.inner});

    switch (cfg.deformation.kind) {
        case SynthDeformation::Kind::none:
            out.he_image = std::move(he_ideal);
            truth.epithelium_he = truth.epithelium;
            truth.tissue_he = truth.tissue;
            truth.artefacts_he = truth.artefacts;
            break;
        case SynthDeformation::Kind::affine:
            truth.field = field_from_affine(cfg.deformation.affine, w, h);
            truth.has_field = true;
            break;
        case SynthDeformation::Kind::gaussian_bumps:
            truth.field = make_bump_field(w, h, cfg.deformation.bump_count,
                                          cfg.deformation.max_amplitude_px,
                                          cfg.deformation.sigma_px, rng);
            truth.has_field = true;
            break;
    }
    if (truth.has_field) {
        out.he_image = warp_image(he_ideal, truth.field, Interp::bilinear, 255);
        truth.epithelium_he = warp_mask(truth.epithelium, truth.field);
        truth.tissue_he = warp_mask(truth.tissue, truth.field);
        truth.artefacts_he = warp_mask(truth.artefacts, truth.field);
    }
    return out;
}

SynthConfig load_synth_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(Errc::io_failure, "cannot open synth config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        raise(Errc::io_failure, std::string("bad synth json: ") + e.what());
    }
    SynthConfig cfg;
    try {
        cfg.width = j.value("width", cfg.width);
        cfg.height = j.value("height", cfg.height);
        cfg.rng_seed = j.value("seed", cfg.rng_seed);
        if (j.contains("gland_count")) {
            cfg.gland_count_min = j["gland_count"][0].get<int>();
            cfg.gland_count_max = j["gland_count"][1].get<int>();
        }
        if (j.contains("gland_radius")) {
            cfg.gland_radius_min = j["gland_radius"][0].get<double>();
            cfg.gland_radius_max = j["gland_radius"][1].get<double>();
        }
        cfg.lumen_fraction = j.value("lumen_fraction", cfg.lumen_fraction);
        cfg.ring_thickness_px = j.value("ring_thickness_px", cfg.ring_thickness_px);
        cfg.artefact_count = j.value("artefact_count", cfg.artefact_count);
        if (j.contains("artefact_radius")) {
            cfg.artefact_radius_min = j["artefact_radius"][0].get<double>();
            cfg.artefact_radius_max = j["artefact_radius"][1].get<double>();
        }
        cfg.intensity_jitter = j.value("intensity_jitter", cfg.intensity_jitter);
        if (j.contains("deformation")) {
            const auto& d = j["deformation"];
            std::string kind = d.value("kind", "none");
            if (kind == "none")
                cfg.deformation.kind = SynthDeformation::Kind::none;
            else if (kind == "affine") {
                cfg.deformation.kind = SynthDeformation::Kind::affine;
                cfg.deformation.affine.a00 = d.value("a00", 1.0);
                cfg.deformation.affine.a01 = d.value("a01", 0.0);
                cfg.deformation.affine.a10 = d.value("a10", 0.0);
                cfg.deformation.affine.a11 = d.value("a11", 1.0);
                cfg.deformation.affine.tx = d.value("tx", 0.0);
                cfg.deformation.affine.ty = d.value("ty", 0.0);
            } else if (kind == "gaussian_bumps") {
                cfg.deformation.kind = SynthDeformation::Kind::gaussian_bumps;
                cfg.deformation.bump_count = d.value("bump_count", cfg.deformation.bump_count);
                cfg.deformation.max_amplitude_px =
                    d.value("max_amplitude_px", cfg.deformation.max_amplitude_px);
                cfg.deformation.sigma_px = d.value("sigma_px", cfg.deformation.sigma_px);
            } else {
                raise(Errc::bad_config, "unknown deformation kind: " + kind);
            }
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        raise(Errc::bad_config, std::string("bad synth schema: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

namespace {

std::vector<RegionSpec> artefact_regions_for(const std::string& slide_id, const ImageU8& artefacts,
                                             double mpp_level0) {
    // bounding boxes of artefact components, padded a little
    std::vector<RegionSpec> out;
    ImageU8 seen(artefacts.w, artefacts.h, 1);
    std::vector<size_t> stack;
    int count = 0;
    for (size_t start = 0; start < artefacts.pixels(); ++start) {
        if (!artefacts.data[start] || seen.data[start]) continue;
        int minx = artefacts.w, maxx = 0, miny = artefacts.h, maxy = 0;
        stack.assign(1, start);
        seen.data[start] = 1;
        while (!stack.empty()) {
            size_t p = stack.back();
            stack.pop_back();
            int x = static_cast<int>(p % artefacts.w), y = static_cast<int>(p / artefacts.w);
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int nx = x + dx, ny = y + dy;
                    if (nx < 0 || ny < 0 || nx >= artefacts.w || ny >= artefacts.h) continue;
                    size_t q = static_cast<size_t>(ny) * artefacts.w + nx;
                    if (artefacts.data[q] && !seen.data[q]) {
                        seen.data[q] = 1;
                        stack.push_back(q);
                    }
                }
        }
        RegionSpec r;
        r.id = slide_id + "_artefact_" + std::to_string(count++);
        r.slide_id = slide_id;
        r.x = std::max(0, minx - 4);
        r.y = std::max(0, miny - 4);
        r.width_px = std::min(artefacts.w - static_cast<int>(r.x), maxx - minx + 9);
        r.height_px = std::min(artefacts.h - static_cast<int>(r.y), maxy - miny + 9);
        r.mpp = mpp_level0;
        r.label = "artefact";
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace

CohortLayout generate_cohort(const SynthConfig& base, int n_train, int n_val, int n_test,
                             const std::string& out_dir, int tile_size, double mpp_level0) {
    if (n_train < 1 || n_val < 1 || n_test < 1)
        raise(Errc::bad_config, "cohort needs at least one slide per role");
    fs::create_directories(out_dir);

    CohortLayout layout;
    layout.dir = out_dir;
    std::vector<std::pair<std::string, std::string>> slides;  // (id, role)
    char buf[32];
    for (int i = 0; i < n_train; ++i) {
        std::snprintf(buf, sizeof buf, "train_%02d", i);
        slides.emplace_back(buf, "train");
        layout.train_ids.push_back(buf);
    }
    for (int i = 0; i < n_val; ++i) {
        std::snprintf(buf, sizeof buf, "val_%02d", i);
        slides.emplace_back(buf, "val");
        layout.val_ids.push_back(buf);
    }
    for (int i = 0; i < n_test; ++i) {
        std::snprintf(buf, sizeof buf, "test_%02d", i);
        slides.emplace_back(buf, "test");
        layout.test_ids.push_back(buf);
    }

    std::vector<RegionSpec> regions;
    const std::vector<std::vector<int>> grade_cycle = {{3, 3}, {3, 4}, {4, 3}, {4, 4, 5}, {4, 5}};
    int tumor_counter = 0;

    // the generator's own stain matrix, for the deconvolution stage
    save_stains_json(synth_ihc_model(), (fs::path(out_dir) / "stains.json").string());

    nlohmann::json manifest;
    manifest["mpp"] = mpp_level0 * 2.0;  // the training/eval resolution
    manifest["regions"] = "regions.json";
    manifest["stains"] = "stains.json";
    manifest["slides"] = nlohmann::json::array();

    for (size_t idx = 0; idx < slides.size(); ++idx) {
        const auto& [id, role] = slides[idx];
        SynthConfig cfg = base;
        cfg.rng_seed = base.rng_seed * 1000003ull + idx * 7919ull + 13ull;
        SynthPair pair = generate_pair(cfg);

        fs::path slide_dir = fs::path(out_dir) / id;
        TileStore::create((slide_dir / "he").string(), pair.he_image, tile_size, mpp_level0);
        TileStore::create((slide_dir / "ihc").string(), pair.ihc_image, tile_size, mpp_level0);
        write_mask((slide_dir / "truth_epithelium").string(), pair.truth.epithelium, tile_size,
                   mpp_level0);
        write_mask((slide_dir / "truth_epithelium_he").string(), pair.truth.epithelium_he,
                   tile_size, mpp_level0);
        write_mask((slide_dir / "truth_tissue").string(), pair.truth.tissue, tile_size, mpp_level0);
        write_mask((slide_dir / "truth_tissue_he").string(), pair.truth.tissue_he, tile_size,
                   mpp_level0);
        write_mask((slide_dir / "truth_artefacts").string(), pair.truth.artefacts, tile_size,
                   mpp_level0);
        if (pair.truth.has_field) save_field(pair.truth.field, (slide_dir / "truth_field").string());

        nlohmann::json s;
        s["id"] = id;
        s["role"] = role;
        s["he"] = id + "/he";
        s["ihc"] = id + "/ihc";
        s["truth_epithelium"] = id + "/truth_epithelium";
        s["truth_epithelium_he"] = id + "/truth_epithelium_he";
        s["truth_tissue"] = id + "/truth_tissue";
        manifest["slides"].push_back(std::move(s));

        auto art = artefact_regions_for(id, pair.truth.artefacts, mpp_level0);
        regions.insert(regions.end(), art.begin(), art.end());

        if (role == "test") {
            // two evaluation regions per test slide at the working resolution
            int lw = (cfg.width + 1) / 2, lh = (cfg.height + 1) / 2;
            int rw = std::min(lw, lh) * 2 / 3;
            rw -= rw % 2;
            for (int ri = 0; ri < 2; ++ri) {
                RegionSpec r;
                r.id = id + "_r" + std::to_string(ri);
                r.slide_id = id;
                r.width_px = rw;
                r.height_px = rw;
                long max_x = 2L * (lw - rw), max_y = 2L * (lh - rw);
                r.x = ri == 0 ? 16 : std::max(0L, max_x - 16);
                r.y = ri == 0 ? 16 : std::max(0L, max_y - 16);
                r.mpp = mpp_level0 * 2.0;
                if (ri == 0) {
                    r.label = "benign";
                } else {
                    r.label = "tumor";
                    r.grades = grade_cycle[tumor_counter++ % grade_cycle.size()];
                }
                regions.push_back(std::move(r));
            }
        }
    }

    save_regions(regions, (fs::path(out_dir) / "regions.json").string());
    std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) raise(Errc::io_failure, "cannot write cohort manifest under " + out_dir);
    return layout;
}

}  // namespace episeg
