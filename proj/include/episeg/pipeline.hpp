#pragma once

#include <optional>
#include <string>

#include "episeg/eval.hpp"
#include "episeg/registration.hpp"
#include "episeg/stain.hpp"

namespace episeg {

struct RunOptions {
    std::string out_dir;
    std::optional<uint64_t> seed;
    int jobs = 1;
    bool force = false;
    bool dry_run = false;
};

// synth.json -> cohort on disk (slides + truth + regions.json + manifest.json)
void run_synth(const std::string& synth_json, const RunOptions& opts);

// IHC store -> concentration store (fixed-point x64) + positivity mask store
void run_deconvolve(const std::string& ihc_store_dir, const std::string& stains_json,
                    const StainConfig& stain_cfg, double mpp, const RunOptions& opts);

// gray -> affine -> nonparametric -> patchwise; field + diagnostics CSV
void run_register(const std::string& fixed_store_dir, const std::string& moving_store_dir,
                  const RegistrationConfig& reg_cfg, double mpp, bool skip_patchwise,
                  const RunOptions& opts);

// mask store + field -> warped mask store (nearest)
void run_transfer(const std::string& mask_store_dir, const std::string& field_dir, double mpp,
                  const RunOptions& opts);

// train.json + profile ("ihc" patience 5 / "he" patience 10) -> checkpoint + log
void run_train(const std::string& train_json, const std::string& profile, const RunOptions& opts);

// prediction stores vs truth stores over regions.json -> report/summary CSVs
// + overlay PNGs. Roots may contain "{id}" which is substituted per slide;
// otherwise "/<id>" is appended.
struct EvaluateResult {
    double mean_f1 = 0;
    double mean_accuracy = 0;
    double mean_jaccard = 0;
    int regions = 0;
};
EvaluateResult run_evaluate(const std::string& pred_root, const std::string& truth_root,
                            const std::string& regions_json, const RunOptions& opts);

// Full two-step pipeline over a cohort manifest, with resumable stage
// checkpoints in pipeline_state.json.
struct PipelineResult {
    double ihc_test_mean_f1 = 0;  // step-1 masks vs truth on test slides
    double he_test_mean_f1 = 0;   // step-2 predictions vs truth on test slides
};
PipelineResult run_pipeline(const std::string& manifest_json, const RunOptions& opts);

}  // namespace episeg
