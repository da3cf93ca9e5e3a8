#include "episeg/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "episeg/model.hpp"
#include "episeg/parallel.hpp"
#include "episeg/png_io.hpp"
#include "episeg/sampler.hpp"
#include "episeg/synth.hpp"
#include "episeg/tilestore.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace episeg {

namespace {

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(Errc::io_failure, "cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        raise(Errc::io_failure, "bad json in " + path + ": " + e.what());
    }
    return j;
}

std::string resolve(const std::string& path, const fs::path& base) {
    fs::path p(path);
    return p.is_absolute() ? p.string() : (base / p).string();
}

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) return "";
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

RegistrationConfig reg_config_from_json(const nlohmann::json& j) {
    RegistrationConfig cfg;
    cfg.ngf_epsilon = j.value("ngf_epsilon", cfg.ngf_epsilon);
    cfg.curvature_weight = j.value("curvature_weight", cfg.curvature_weight);
    cfg.pyramid_levels = j.value("pyramid_levels", cfg.pyramid_levels);
    cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
    cfg.gradient_tolerance = j.value("gradient_tolerance", cfg.gradient_tolerance);
    cfg.patch_size_px = j.value("patch_size_px", cfg.patch_size_px);
    cfg.patch_overlap_px = j.value("patch_overlap_px", cfg.patch_overlap_px);
    cfg.merge_data_weight = j.value("merge_data_weight", cfg.merge_data_weight);
    cfg.max_cg_iterations = j.value("max_cg_iterations", cfg.max_cg_iterations);
    return cfg;
}

StainConfig stain_config_from_json(const nlohmann::json& j) {
    StainConfig cfg;
    cfg.channel_threshold = j.value("channel_threshold", cfg.channel_threshold);
    cfg.morph_radius = j.value("morph_radius", cfg.morph_radius);
    cfg.min_object_px = j.value("min_object_px", cfg.min_object_px);
    cfg.tissue_od_threshold = j.value("tissue_od_threshold", cfg.tissue_od_threshold);
    return cfg;
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j, int default_patience) {
    OptimizerConfig opt;
    opt.plateau_patience = default_patience;
    opt.beta1 = j.value("beta1", opt.beta1);
    opt.beta2 = j.value("beta2", opt.beta2);
    opt.learning_rate = j.value("learning_rate", opt.learning_rate);
    opt.epsilon_hat = j.value("epsilon_hat", opt.epsilon_hat);
    opt.plateau_patience = j.value("plateau_patience", opt.plateau_patience);
    opt.lr_halving_factor = j.value("lr_halving_factor", opt.lr_halving_factor);
    return opt;
}

AugmentationConfig augmentation_by_name(const std::string& name) {
    if (name == "identity") return AugmentationConfig::identity();
    if (name == "he") return AugmentationConfig::he_profile();
    if (name == "ihc") return AugmentationConfig::ihc_profile();
    raise(Errc::bad_config, "unknown augmentation profile: " + name);
}

struct TrainParams {
    int patch_size_px = 64;
    int epochs = 6;
    int steps_per_epoch = 60;
    int base_filters = 8;
    int val_patches_per_slide = 4;
    OptimizerConfig opt;
    std::string augmentation = "ihc";
    SamplingPolicy policy = SamplingPolicy::class_uniform;
    double artefact_multiplier = 4.0;
    uint64_t seed = 1;
};

TrainParams train_params_from_json(const nlohmann::json& j, const std::string& profile) {
    TrainParams p;
    if (profile == "ihc") {
        p.opt.plateau_patience = 5;
        p.policy = SamplingPolicy::artefact_oversample;
        p.augmentation = "ihc";
    } else if (profile == "he") {
        p.opt.plateau_patience = 10;
        p.policy = SamplingPolicy::class_uniform;
        p.augmentation = "he";
    } else {
        raise(Errc::bad_config, "profile must be 'ihc' or 'he'");
    }
    p.patch_size_px = j.value("patch_size_px", p.patch_size_px);
    p.epochs = j.value("epochs", p.epochs);
    p.steps_per_epoch = j.value("steps_per_epoch", p.steps_per_epoch);
    p.base_filters = j.value("base_filters", p.base_filters);
    p.val_patches_per_slide = j.value("val_patches_per_slide", p.val_patches_per_slide);
    p.opt = optimizer_from_json(j.value("optimizer", nlohmann::json::object()),
                                p.opt.plateau_patience);
    p.augmentation = j.value("augmentation", p.augmentation);
    if (j.contains("policy")) {
        std::string pol = j["policy"].get<std::string>();
        if (pol == "class_uniform")
            p.policy = SamplingPolicy::class_uniform;
        else if (pol == "artefact_oversample")
            p.policy = SamplingPolicy::artefact_oversample;
        else
            raise(Errc::bad_config, "unknown sampling policy: " + pol);
    }
    p.artefact_multiplier = j.value("artefact_multiplier", p.artefact_multiplier);
    p.seed = j.value("seed", p.seed);
    return p;
}

// Region coordinates are level-0 pixels of the canonical slide. Derived
// stores (masks, predictions) start at the working resolution, so reads
// rescale through the canonical mpp.
ImageU8 read_region_scaled(const TileStore& store, const RegionSpec& spec, double canonical_mpp0) {
    int level = store.snap_level(spec.mpp);
    double scale = canonical_mpp0 / store.meta().mpp_at(level);
    long x = static_cast<long>(std::llround(spec.x * scale));
    long y = static_cast<long>(std::llround(spec.y * scale));
    return store.read_region(level, x, y, spec.width_px, spec.height_px);
}

struct SlideSet {
    std::string id, role;
    std::string he, ihc, truth_epi, truth_epi_he, truth_tissue;
};

struct ManifestData {
    fs::path base;
    std::vector<SlideSet> slides;
    std::string regions_path;
    double mpp = 0.48;
    std::string ihc_labels = "corrected";
    std::string he_labels = "ihc_net";
    std::string stains_json;
    StainConfig stain_cfg;
    RegistrationConfig reg_cfg;
    bool skip_patchwise = false;
    nlohmann::json train_ihc = nlohmann::json::object();
    nlohmann::json train_he = nlohmann::json::object();
};

ManifestData parse_manifest(const std::string& path) {
    nlohmann::json j = load_json(path);
    ManifestData m;
    m.base = fs::path(path).parent_path();
    try {
        for (const auto& s : j.at("slides")) {
            SlideSet e;
            e.id = s.at("id").get<std::string>();
            e.role = s.at("role").get<std::string>();
            e.he = resolve(s.at("he").get<std::string>(), m.base);
            e.ihc = resolve(s.at("ihc").get<std::string>(), m.base);
            if (s.contains("truth_epithelium"))
                e.truth_epi = resolve(s["truth_epithelium"].get<std::string>(), m.base);
            if (s.contains("truth_epithelium_he"))
                e.truth_epi_he = resolve(s["truth_epithelium_he"].get<std::string>(), m.base);
            if (s.contains("truth_tissue"))
                e.truth_tissue = resolve(s["truth_tissue"].get<std::string>(), m.base);
            m.slides.push_back(std::move(e));
        }
    } catch (const std::exception& e) {
        raise(Errc::bad_config, std::string("bad manifest slides: ") + e.what());
    }
    if (j.contains("regions")) m.regions_path = resolve(j["regions"].get<std::string>(), m.base);
    m.mpp = j.value("mpp", m.mpp);
    m.ihc_labels = j.value("ihc_labels", m.ihc_labels);
    m.he_labels = j.value("he_labels", m.he_labels);
    if (j.contains("stains")) m.stains_json = resolve(j["stains"].get<std::string>(), m.base);
    m.stain_cfg = stain_config_from_json(j.value("stain_config", nlohmann::json::object()));
    m.reg_cfg = reg_config_from_json(j.value("registration", nlohmann::json::object()));
    if (j.contains("registration"))
        m.skip_patchwise = j["registration"].value("skip_patchwise", false);
    m.train_ihc = j.value("train_ihc", nlohmann::json::object());
    m.train_he = j.value("train_he", nlohmann::json::object());
    if (m.ihc_labels != "corrected" && m.ihc_labels != "raw")
        raise(Errc::bad_config, "ihc_labels must be 'corrected' or 'raw'");
    if (m.he_labels != "ihc_net" && m.he_labels != "raw_deconv")
        raise(Errc::bad_config, "he_labels must be 'ihc_net' or 'raw_deconv'");
    return m;
}

StainModel stain_model_for(const std::string& stains_json) {
    return stains_json.empty() ? default_ihc_model() : load_stains_json(stains_json);
}

// training over a set of slides with per-slide samplers
struct TrainSlide {
    Sampler sampler;
    std::string id;
};

MiniSegmenter train_over_slides(std::vector<TrainSlide>& train_slides,
                                std::vector<TrainSlide>& val_slides, const TrainParams& params,
                                const std::string& log_csv_path) {
    if (train_slides.empty()) raise(Errc::bad_config, "no training slides");
    if (val_slides.empty()) raise(Errc::bad_config, "no validation slides");
    AugmentationConfig aug = augmentation_by_name(params.augmentation);

    Rng val_rng(params.seed * 77003ull + 5ull);
    std::vector<PatchBatch> val_set;
    for (auto& vs : val_slides)
        for (int i = 0; i < params.val_patches_per_slide; ++i)
            val_set.push_back(vs.sampler.sample(val_rng));

    auto stream_rng = std::make_shared<Rng>(params.seed);
    auto source = [&train_slides, stream_rng, aug]() {
        size_t idx = stream_rng->uniform_int(train_slides.size());
        PatchBatch b = train_slides[idx].sampler.sample(*stream_rng);
        return augment(b, aug, *stream_rng);
    };

    MiniSegmenter net(params.base_filters, params.seed * 40009ull + 3ull);
    TrainConfig tc;
    tc.opt = params.opt;
    tc.epochs = params.epochs;
    tc.steps_per_epoch = params.steps_per_epoch;
    tc.seed = params.seed;
    TrainResult res = train(net, source, val_set, tc);
    if (!log_csv_path.empty()) write_train_log_csv(res.log, log_csv_path);
    return net;
}

// ---- stage checkpointing -------------------------------------------------

class StageState {
public:
    StageState(const fs::path& out_dir, bool force, bool dry)
        : path_(out_dir / "pipeline_state.json"), force_(force), dry_(dry) {
        if (fs::exists(path_)) {
            try {
                state_ = load_json(path_.string());
            } catch (...) {
                state_ = nlohmann::json::object();
            }
        }
        if (!state_.contains("stages")) state_["stages"] = nlohmann::json::object();
    }

    bool needs_run(const std::string& stage, uint64_t hash) const {
        if (force_) return true;
        const auto& stages = state_["stages"];
        if (!stages.contains(stage)) return true;
        return stages[stage].value("hash", "") != std::to_string(hash);
    }

    void mark_done(const std::string& stage, uint64_t hash) {
        if (dry_) return;
        state_["stages"][stage] = {{"hash", std::to_string(hash)}, {"done", true}};
        std::ofstream f(path_, std::ios::trunc);
        f << state_.dump(2) << "\n";
    }

private:
    fs::path path_;
    nlohmann::json state_;
    bool force_, dry_;
};

std::vector<RegionSpec> regions_for_slide(const std::vector<RegionSpec>& all,
                                          const std::string& slide_id, const std::string& label) {
    std::vector<RegionSpec> out;
    for (const auto& r : all)
        if (r.slide_id == slide_id && (label.empty() || r.label == label)) out.push_back(r);
    return out;
}

}  // namespace

void run_synth(const std::string& synth_json, const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "synth needs an output directory");
    nlohmann::json j = load_json(synth_json);
    SynthConfig cfg = load_synth_config(synth_json);
    if (opts.seed) cfg.rng_seed = *opts.seed;
    int n_train = 1, n_val = 1, n_test = 1, tile_size = 256;
    double mpp0 = 0.24;
    if (j.contains("slides")) {
        n_train = j["slides"].value("train", n_train);
        n_val = j["slides"].value("val", n_val);
        n_test = j["slides"].value("test", n_test);
    }
    tile_size = j.value("tile_size", tile_size);
    mpp0 = j.value("mpp_level0", mpp0);
    if (opts.dry_run) {
        std::cout << "synth: would generate " << n_train << " train / " << n_val << " val / "
                  << n_test << " test slide pairs under " << opts.out_dir << "\n";
        return;
    }
    generate_cohort(cfg, n_train, n_val, n_test, opts.out_dir, tile_size, mpp0);
}

void run_deconvolve(const std::string& ihc_store_dir, const std::string& stains_json,
                    const StainConfig& stain_cfg, double mpp, const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "deconvolve needs an output directory");
    TileStore ihc = TileStore::open(ihc_store_dir);
    StainModel model = stain_model_for(stains_json);
    int level = ihc.snap_level(mpp);
    if (opts.dry_run) {
        std::cout << "deconvolve: would process " << ihc_store_dir << " at level " << level
                  << " into " << opts.out_dir << "\n";
        return;
    }
    ImageU8 rgb = ihc.read_level(level);
    ImageF conc = deconvolve_raster(rgb, model);

    // concentration store: fixed point, 64 steps per unit concentration
    ImageU8 conc_u8(conc.w, conc.h, 3);
    for (size_t i = 0; i < conc.data.size(); ++i)
        conc_u8.data[i] = clamp_u8(conc.data[i] * 64.0);
    double level_mpp = ihc.meta().mpp_at(level);
    int tile = ihc.meta().tile_size_px;
    TileStore::create((fs::path(opts.out_dir) / "concentrations").string(), conc_u8, tile,
                      level_mpp);

    ImageF chromogen(conc.w, conc.h, 1);
    for (size_t p = 0; p < chromogen.pixels(); ++p) chromogen.data[p] = conc.data[p * 3];
    ImageU8 mask = positivity_mask(chromogen, stain_cfg);
    write_mask((fs::path(opts.out_dir) / "mask").string(), mask, tile, level_mpp);
}

void run_register(const std::string& fixed_store_dir, const std::string& moving_store_dir,
                  const RegistrationConfig& reg_cfg, double mpp, bool skip_patchwise,
                  const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "register needs an output directory");
    TileStore fixed_store = TileStore::open(fixed_store_dir);
    TileStore moving_store = TileStore::open(moving_store_dir);
    if (opts.dry_run) {
        std::cout << "register: would align " << moving_store_dir << " to " << fixed_store_dir
                  << " into " << opts.out_dir << "\n";
        return;
    }
    ImageD fixed = to_grayscale(fixed_store.read_level(fixed_store.snap_level(mpp)));
    ImageD moving = to_grayscale(moving_store.read_level(moving_store.snap_level(mpp)));

    RegistrationConfig cfg = reg_cfg;
    cfg.jobs = opts.jobs;
    Diagnostics diag;
    AffineTransform affine = register_affine(fixed, moving, cfg, &diag);
    DisplacementField field = register_nonparametric(
        fixed, moving, field_from_affine(affine, fixed.w, fixed.h), cfg, &diag);
    if (!skip_patchwise) field = register_patchwise(fixed, moving, field, cfg, &diag);

    fs::create_directories(opts.out_dir);
    save_field(field, opts.out_dir);
    write_diagnostics_csv(diag, (fs::path(opts.out_dir) / "diagnostics.csv").string());
}

void run_transfer(const std::string& mask_store_dir, const std::string& field_dir, double mpp,
                  const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "transfer needs an output directory");
    TileStore mask_store = open_mask_store(mask_store_dir);
    DisplacementField field = load_field(field_dir);
    int level = mask_store.snap_level(mpp);
    if (opts.dry_run) {
        std::cout << "transfer: would warp " << mask_store_dir << " through " << field_dir
                  << " into " << opts.out_dir << "\n";
        return;
    }
    ImageU8 mask = mask_store.read_level(level);
    if (mask.w != field.grid_w || mask.h != field.grid_h)
        raise(Errc::dimension_mismatch,
              "mask level dims do not match the field grid; check --mpp");
    ImageU8 warped = warp_mask(mask, field);
    write_mask(opts.out_dir, warped, mask_store.meta().tile_size_px,
               mask_store.meta().mpp_at(level));
}

void run_train(const std::string& train_json, const std::string& profile, const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "train needs an output directory");
    nlohmann::json j = load_json(train_json);
    fs::path base = fs::path(train_json).parent_path();
    TrainParams params = train_params_from_json(j, profile);
    if (opts.seed) params.seed = *opts.seed;
    double mpp = j.value("mpp", 0.48);

    std::vector<RegionSpec> regions;
    if (j.contains("regions")) regions = load_regions(resolve(j["regions"].get<std::string>(), base));

    if (opts.dry_run) {
        std::cout << "train(" << profile << "): would train on " << j.at("slides").size()
                  << " slides into " << opts.out_dir << "\n";
        return;
    }

    std::vector<TrainSlide> train_slides, val_slides;
    for (const auto& s : j.at("slides")) {
        std::string id = s.at("id").get<std::string>();
        std::string role = s.value("role", "train");
        TileStore image = TileStore::open(resolve(s.at("image").get<std::string>(), base));
        TileStore mask = open_mask_store(resolve(s.at("mask").get<std::string>(), base));
        std::optional<TileStore> tissue;
        if (s.contains("tissue"))
            tissue = open_mask_store(resolve(s["tissue"].get<std::string>(), base));
        SamplerConfig sc;
        sc.patch_size_px = params.patch_size_px;
        sc.mpp = mpp;
        sc.policy = params.policy;
        sc.artefact_multiplier = params.artefact_multiplier;
        sc.slide_id = id;
        TrainSlide ts{Sampler(std::move(image), std::move(mask), std::move(tissue), sc,
                              regions_for_slide(regions, id, "artefact")),
                      id};
        (role == "val" ? val_slides : train_slides).push_back(std::move(ts));
    }
    if (val_slides.empty() && train_slides.size() > 1) {
        val_slides.push_back(std::move(train_slides.back()));
        train_slides.pop_back();
    }

    fs::create_directories(opts.out_dir);
    MiniSegmenter net =
        train_over_slides(train_slides, val_slides, params,
                          (fs::path(opts.out_dir) / "train_log.csv").string());
    net.save((fs::path(opts.out_dir) / "checkpoint.bin").string());
}

namespace {

std::string root_for(const std::string& root, const std::string& id) {
    std::string out = root;
    auto pos = out.find("{id}");
    if (pos != std::string::npos) return out.replace(pos, 4, id);
    return (fs::path(root) / id).string();
}

}  // namespace

EvaluateResult run_evaluate(const std::string& pred_root, const std::string& truth_root,
                            const std::string& regions_json, const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "evaluate needs an output directory");
    std::vector<RegionSpec> regions = load_regions(regions_json);
    if (opts.dry_run) {
        std::cout << "evaluate: would score " << regions.size() << " regions into " << opts.out_dir
                  << "\n";
        return {};
    }
    fs::create_directories(fs::path(opts.out_dir) / "overlays");

    std::vector<RegionReport> reports;
    for (const auto& spec : regions) {
        if (spec.label != "benign" && spec.label != "tumor") continue;
        TileStore pred = open_mask_store(root_for(pred_root, spec.slide_id));
        TileStore truth = open_mask_store(root_for(truth_root, spec.slide_id));
        double canonical = truth.meta().mpp_level0;
        ImageU8 pred_img = read_region_scaled(pred, spec, canonical);
        ImageU8 truth_img = read_region_scaled(truth, spec, canonical);
        RegionReport rep = score_region(spec.id, spec, pred_img, truth_img);
        reports.push_back(rep);
        write_png((fs::path(opts.out_dir) / "overlays" / (spec.id + ".png")).string(),
                  render_overlay(pred_img, truth_img));
    }
    if (reports.empty()) raise(Errc::empty_input, "no benign/tumor regions matched");

    write_region_csv(reports, (fs::path(opts.out_dir) / "report.csv").string());
    std::vector<SummaryRow> rows = aggregate(reports, GroupBy::all);
    auto label_rows = aggregate(reports, GroupBy::label);
    auto grade_rows = aggregate(reports, GroupBy::grade_group);
    rows.insert(rows.end(), label_rows.begin(), label_rows.end());
    rows.insert(rows.end(), grade_rows.begin(), grade_rows.end());
    write_summary_csv(rows, (fs::path(opts.out_dir) / "summary.csv").string());

    EvaluateResult res;
    res.mean_f1 = rows[0].f1_mean;
    res.mean_accuracy = rows[0].accuracy_mean;
    res.mean_jaccard = rows[0].jaccard_mean;
    res.regions = rows[0].n;
    return res;
}

PipelineResult run_pipeline(const std::string& manifest_json, const RunOptions& opts) {
    if (opts.out_dir.empty()) raise(Errc::bad_config, "pipeline needs an output directory");
    ManifestData m = parse_manifest(manifest_json);
    uint64_t seed = opts.seed.value_or(1);
    fs::path out(opts.out_dir);
    if (!opts.dry_run) fs::create_directories(out);

    std::vector<RegionSpec> regions;
    if (!m.regions_path.empty()) regions = load_regions(m.regions_path);

    StainModel ihc_model = stain_model_for(m.stains_json);

    // Stage hashes chain stage-relevant config only, so e.g. switching
    // he_labels reruns transfer onward but keeps the registration fields.
    // Slide content is fingerprinted through each store's index.json plus
    // its first tile.
    uint64_t chain = fnv1a(std::to_string(seed));
    for (const auto& s : m.slides) {
        chain = fnv1a(s.id + s.role, chain);
        for (const std::string& p : {s.he, s.ihc}) {
            chain = fnv1a(file_bytes((fs::path(p) / "index.json").string()), chain);
            chain = fnv1a(file_bytes((fs::path(p) / "L0_X0_Y0.bin").string()), chain);
        }
    }
    chain = fnv1a(std::to_string(m.mpp), chain);
    if (!m.regions_path.empty()) chain = fnv1a(file_bytes(m.regions_path), chain);
    if (!m.stains_json.empty()) chain = fnv1a(file_bytes(m.stains_json), chain);
    {
        nlohmann::json sc{{"tau", m.stain_cfg.channel_threshold},
                          {"r", m.stain_cfg.morph_radius},
                          {"min", m.stain_cfg.min_object_px},
                          {"tod", m.stain_cfg.tissue_od_threshold}};
        chain = fnv1a(sc.dump(), chain);
    }
    StageState state(out, opts.force, opts.dry_run);

    auto stage_plan = [&](const std::string& name, uint64_t hash, auto&& body) {
        bool run = state.needs_run(name, hash);
        if (opts.dry_run) {
            std::cout << "stage " << name << ": " << (run ? "would run" : "up to date") << "\n";
            return;
        }
        if (run) {
            body();
            state.mark_done(name, hash);
        } else {
            std::cout << "stage " << name << ": up to date, skipping\n";
        }
    };

    std::vector<const SlideSet*> train_val, all, test;
    for (const auto& s : m.slides) {
        all.push_back(&s);
        if (s.role == "test")
            test.push_back(&s);
        else
            train_val.push_back(&s);
    }
    if (test.empty() || train_val.empty())
        raise(Errc::bad_config, "manifest needs both train/val and test slides");

    auto masks_raw_dir = [&](const std::string& id) { return (out / "masks_raw" / id).string(); };
    auto masks_cor_dir = [&](const std::string& id) {
        return (out / "masks_corrected" / id).string();
    };
    auto tissue_ihc_dir = [&](const std::string& id) { return (out / "tissue_ihc" / id).string(); };
    auto tissue_he_dir = [&](const std::string& id) { return (out / "tissue_he" / id).string(); };
    auto masks_ihc_dir = [&](const std::string& id) { return (out / "masks_ihc" / id).string(); };
    auto field_dir = [&](const std::string& id) { return (out / "fields" / id).string(); };
    auto masks_he_dir = [&](const std::string& id) { return (out / "masks_he" / id).string(); };
    auto pred_he_dir = [&](const std::string& id) { return (out / "pred_he" / id).string(); };

    // ---- stage 1: color deconvolution masks + tissue detection ----
    chain = fnv1a("deconvolve", chain);
    stage_plan("deconvolve", chain, [&] {
        parallel_for(all.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *all[i];
            TileStore ihc = TileStore::open(s.ihc);
            int level = ihc.snap_level(m.mpp);
            ImageU8 rgb = ihc.read_level(level);
            double level_mpp = ihc.meta().mpp_at(level);
            int tile = ihc.meta().tile_size_px;
            ImageF conc = deconvolve_raster(rgb, ihc_model);
            ImageF chrom(conc.w, conc.h, 1);
            for (size_t p = 0; p < chrom.pixels(); ++p) chrom.data[p] = conc.data[p * 3];
            write_mask(masks_raw_dir(s.id), positivity_mask(chrom, m.stain_cfg), tile, level_mpp);
            write_mask(tissue_ihc_dir(s.id), tissue_mask(rgb, m.stain_cfg), tile, level_mpp);

            TileStore he = TileStore::open(s.he);
            ImageU8 he_rgb = he.read_level(he.snap_level(m.mpp));
            write_mask(tissue_he_dir(s.id), tissue_mask(he_rgb, m.stain_cfg), tile, level_mpp);
        });
    });

    // ---- stage 2: corrections (annotated artefact regions zeroed) ----
    chain = fnv1a("mask:" + m.ihc_labels, chain);
    stage_plan("mask", chain, [&] {
        parallel_for(all.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *all[i];
            TileStore raw = open_mask_store(masks_raw_dir(s.id));
            ImageU8 mask = raw.read_level(0);
            double level_mpp = raw.meta().mpp_level0;
            double canonical = TileStore::open(s.ihc).meta().mpp_level0;
            for (const auto& r : regions_for_slide(regions, s.id, "artefact")) {
                long x0 = std::llround(r.x * canonical / level_mpp);
                long y0 = std::llround(r.y * canonical / level_mpp);
                long x1 = x0 + std::llround(r.width_px * r.mpp / level_mpp);
                long y1 = y0 + std::llround(r.height_px * r.mpp / level_mpp);
                for (long y = std::max(0L, y0); y < std::min<long>(mask.h, y1); ++y)
                    for (long x = std::max(0L, x0); x < std::min<long>(mask.w, x1); ++x)
                        mask.at(static_cast<int>(x), static_cast<int>(y)) = 0;
            }
            write_mask(masks_cor_dir(s.id), mask, raw.meta().tile_size_px, level_mpp);
        });
    });

    auto make_train_slides = [&](const std::string& image_kind, const std::string& mask_kind,
                                 const TrainParams& params) {
        std::vector<TrainSlide> train_slides, val_slides;
        for (const SlideSet* sp : train_val) {
            const SlideSet& s = *sp;
            TileStore image = TileStore::open(image_kind == "he" ? s.he : s.ihc);
            std::string mask_path = mask_kind == "corrected" ? masks_cor_dir(s.id)
                                    : mask_kind == "raw"     ? masks_raw_dir(s.id)
                                    : mask_kind == "he"      ? masks_he_dir(s.id)
                                                             : mask_kind;
            TileStore mask = open_mask_store(mask_path);
            std::optional<TileStore> tissue = open_mask_store(
                image_kind == "he" ? tissue_he_dir(s.id) : tissue_ihc_dir(s.id));
            SamplerConfig sc;
            sc.patch_size_px = params.patch_size_px;
            sc.mpp = m.mpp;
            sc.policy = params.policy;
            sc.artefact_multiplier = params.artefact_multiplier;
            sc.slide_id = s.id;
            TrainSlide ts{Sampler(std::move(image), std::move(mask), std::move(tissue), sc,
                                  regions_for_slide(regions, s.id, "artefact")),
                          s.id};
            (s.role == "val" ? val_slides : train_slides).push_back(std::move(ts));
        }
        if (val_slides.empty() && train_slides.size() > 1) {
            val_slides.push_back(std::move(train_slides.back()));
            train_slides.pop_back();
        }
        return std::make_pair(std::move(train_slides), std::move(val_slides));
    };

    // ---- stage 3: train the IHC-side network on the deconvolution masks ----
    std::string ckpt_ihc = (out / "ckpt_ihc.bin").string();
    chain = fnv1a("train-ihc:" + m.ihc_labels + m.train_ihc.dump(), chain);
    stage_plan("train-ihc", chain, [&] {
        TrainParams params = train_params_from_json(m.train_ihc, "ihc");
        params.seed = seed * 2654435761ull + 101ull;
        std::string labels = m.ihc_labels == "corrected" ? "corrected" : "raw";
        auto [train_slides, val_slides] = make_train_slides("ihc", labels, params);
        MiniSegmenter net = train_over_slides(train_slides, val_slides, params,
                                              (out / "log_ihc.csv").string());
        net.save(ckpt_ihc);
    });

    // ---- stage 4: apply the IHC network to every IHC slide ----
    chain = fnv1a("infer-ihc", chain);
    stage_plan("infer-ihc", chain, [&] {
        MiniSegmenter net = MiniSegmenter::load(ckpt_ihc);
        parallel_for(all.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *all[i];
            TileStore ihc = TileStore::open(s.ihc);
            int level = ihc.snap_level(m.mpp);
            ImageU8 rgb = ihc.read_level(level);
            write_mask(masks_ihc_dir(s.id), predict_mask(net, rgb), ihc.meta().tile_size_px,
                       ihc.meta().mpp_at(level));
        });
    });

    // ---- stage 5: register H&E (fixed) to IHC (moving) per pair ----
    {
        nlohmann::json rc{{"eps", m.reg_cfg.ngf_epsilon},
                          {"alpha", m.reg_cfg.curvature_weight},
                          {"levels", m.reg_cfg.pyramid_levels},
                          {"iters", m.reg_cfg.max_iterations},
                          {"patch", m.reg_cfg.patch_size_px},
                          {"overlap", m.reg_cfg.patch_overlap_px},
                          {"beta", m.reg_cfg.merge_data_weight},
                          {"skip", m.skip_patchwise}};
        chain = fnv1a("register:" + rc.dump(), chain);
    }
    stage_plan("register", chain, [&] {
        parallel_for(train_val.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *train_val[i];
            TileStore he = TileStore::open(s.he);
            TileStore ihc = TileStore::open(s.ihc);
            ImageD fixed = to_grayscale(he.read_level(he.snap_level(m.mpp)));
            ImageD moving = to_grayscale(ihc.read_level(ihc.snap_level(m.mpp)));
            RegistrationConfig cfg = m.reg_cfg;
            cfg.jobs = 1;  // slides already run in parallel
            Diagnostics diag;
            AffineTransform affine = register_affine(fixed, moving, cfg, &diag);
            DisplacementField field = register_nonparametric(
                fixed, moving, field_from_affine(affine, fixed.w, fixed.h), cfg, &diag);
            if (!m.skip_patchwise) field = register_patchwise(fixed, moving, field, cfg, &diag);
            save_field(field, field_dir(s.id));
            write_diagnostics_csv(diag, (fs::path(field_dir(s.id)) / "diagnostics.csv").string());
        });
    });

    // ---- stage 6: transfer masks into the H&E frame ----
    chain = fnv1a("transfer:" + m.he_labels, chain);
    stage_plan("transfer", chain, [&] {
        parallel_for(train_val.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *train_val[i];
            std::string src =
                m.he_labels == "ihc_net" ? masks_ihc_dir(s.id) : masks_raw_dir(s.id);
            TileStore mask_store = open_mask_store(src);
            DisplacementField field = load_field(field_dir(s.id));
            ImageU8 mask = mask_store.read_level(0);
            if (mask.w != field.grid_w || mask.h != field.grid_h)
                raise(Errc::dimension_mismatch, "mask/field grid mismatch for slide " + s.id);
            write_mask(masks_he_dir(s.id), warp_mask(mask, field),
                       mask_store.meta().tile_size_px, mask_store.meta().mpp_level0);
        });
    });

    // ---- stage 7: train the H&E network on the transferred masks ----
    std::string ckpt_he = (out / "ckpt_he.bin").string();
    chain = fnv1a("train-he:" + m.train_he.dump(), chain);
    stage_plan("train-he", chain, [&] {
        TrainParams params = train_params_from_json(m.train_he, "he");
        params.seed = seed * 1099511628211ull + 17ull;
        auto [train_slides, val_slides] = make_train_slides("he", "he", params);
        MiniSegmenter net = train_over_slides(train_slides, val_slides, params,
                                              (out / "log_he.csv").string());
        net.save(ckpt_he);
    });

    // ---- stage 8: evaluate on the held-out test slides ----
    chain = fnv1a("evaluate", chain);
    stage_plan("evaluate", chain, [&] {
        MiniSegmenter net = MiniSegmenter::load(ckpt_he);
        parallel_for(test.size(), opts.jobs, [&](size_t i) {
            const SlideSet& s = *test[i];
            TileStore he = TileStore::open(s.he);
            int level = he.snap_level(m.mpp);
            ImageU8 rgb = he.read_level(level);
            write_mask(pred_he_dir(s.id), predict_mask(net, rgb), he.meta().tile_size_px,
                       he.meta().mpp_at(level));
        });

        auto score_side = [&](const std::string& tag,
                              const std::function<std::string(const SlideSet&)>& pred_of,
                              const std::function<std::string(const SlideSet&)>& truth_of) {
            std::vector<RegionReport> reports;
            fs::create_directories(out / ("overlays_" + tag));
            for (const SlideSet* sp : test) {
                const SlideSet& s = *sp;
                if (truth_of(s).empty())
                    raise(Errc::bad_config, "manifest lacks truth masks for slide " + s.id);
                TileStore pred = open_mask_store(pred_of(s));
                TileStore truth = open_mask_store(truth_of(s));
                double canonical = truth.meta().mpp_level0;
                for (const auto& spec : regions_for_slide(regions, s.id, "")) {
                    if (spec.label != "benign" && spec.label != "tumor") continue;
                    ImageU8 pred_img = read_region_scaled(pred, spec, canonical);
                    ImageU8 truth_img = read_region_scaled(truth, spec, canonical);
                    reports.push_back(score_region(spec.id, spec, pred_img, truth_img));
                    write_png((out / ("overlays_" + tag) / (spec.id + ".png")).string(),
                              render_overlay(pred_img, truth_img));
                }
            }
            if (reports.empty()) raise(Errc::empty_input, "no evaluation regions for test slides");
            write_region_csv(reports, (out / ("report_" + tag + ".csv")).string());
            std::vector<SummaryRow> rows = aggregate(reports, GroupBy::all);
            auto label_rows = aggregate(reports, GroupBy::label);
            auto grade_rows = aggregate(reports, GroupBy::grade_group);
            rows.insert(rows.end(), label_rows.begin(), label_rows.end());
            rows.insert(rows.end(), grade_rows.begin(), grade_rows.end());
            write_summary_csv(rows, (out / ("summary_" + tag + ".csv")).string());
        };
        score_side("he", [&](const SlideSet& s) { return pred_he_dir(s.id); },
                   [](const SlideSet& s) { return s.truth_epi_he; });
        score_side("ihc", [&](const SlideSet& s) { return masks_ihc_dir(s.id); },
                   [](const SlideSet& s) { return s.truth_epi; });
    });

    PipelineResult result;
    if (!opts.dry_run) {
        auto read_all_f1 = [&](const std::string& tag) {
            std::ifstream f(out / ("summary_" + tag + ".csv"));
            if (!f) raise(Errc::io_failure, "missing summary_" + tag + ".csv");
            std::string line;
            std::getline(f, line);  // header
            if (!std::getline(f, line)) raise(Errc::io_failure, "empty summary_" + tag + ".csv");
            // group,n,f1_mean,...
            size_t p1 = line.find(','), p2 = line.find(',', p1 + 1);
            size_t p3 = line.find(',', p2 + 1);
            return std::stod(line.substr(p2 + 1, p3 - p2 - 1));
        };
        result.he_test_mean_f1 = read_all_f1("he");
        result.ihc_test_mean_f1 = read_all_f1("ihc");
    }
    return result;
}

}  // namespace episeg
