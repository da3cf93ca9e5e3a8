// episeg CLI: orchestrates the two-step weak-label pipeline through the C
// API (libepiseg_c). Exit codes: 0 success, 2 usage/input error, 3
// numerical failure.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "episeg.h"

namespace {

struct CommonOpts {
    std::string out;
    std::string config;
    int64_t seed = 0;
    bool has_seed = false;
    int jobs = 1;
    bool force = false;
    bool dry_run = false;

    episeg_run_opts to_c() const {
        episeg_run_opts r{};
        r.out_dir = out.c_str();
        r.seed = seed;
        r.has_seed = has_seed ? 1 : 0;
        r.jobs = jobs;
        r.force = force ? 1 : 0;
        r.dry_run = dry_run ? 1 : 0;
        return r;
    }
};

void add_common(CLI::App* cmd, CommonOpts& c, bool out_required = true) {
    auto* out = cmd->add_option("--out", c.out, "Output directory");
    if (out_required) out->required();
    cmd->add_option("--config", c.config, "JSON config file");
    cmd->add_option("--seed", c.seed, "Seed for all randomness")->each([&c](const std::string&) {
        c.has_seed = true;
    });
    cmd->add_option("--jobs", c.jobs, "Worker threads for tile/patch/region parallelism");
    cmd->add_flag("--force", c.force, "Rerun stages even when checkpointed");
    cmd->add_flag("--dry-run", c.dry_run, "Print the plan without writing");
}

int finish(int status) {
    if (status != EPISEG_OK) std::fprintf(stderr, "error: %s\n", episeg_last_error());
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"episeg: two-step weak-label epithelium segmentation"};
    app.require_subcommand(1);
    int status = EPISEG_OK;

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic slide-pair cohort");
    CommonOpts synth_c;
    add_common(synth, synth_c);
    synth->get_option("--config")->required();
    synth->callback([&] {
        auto o = synth_c.to_c();
        status = finish(episeg_synth(synth_c.config.c_str(), &o));
    });

    // deconvolve
    auto* dec = app.add_subcommand("deconvolve", "Color deconvolution + positivity masks");
    CommonOpts dec_c;
    std::string dec_input;
    double dec_mpp = 0.48;
    add_common(dec, dec_c);
    dec->add_option("--input", dec_input, "IHC tile store directory")->required();
    dec->add_option("--mpp", dec_mpp, "Working resolution (um/px)");
    dec->callback([&] {
        auto o = dec_c.to_c();
        status = finish(episeg_deconvolve(dec_input.c_str(),
                                          dec_c.config.empty() ? nullptr : dec_c.config.c_str(),
                                          dec_mpp, &o));
    });

    // register
    auto* reg = app.add_subcommand("register", "Affine + nonparametric + patchwise registration");
    CommonOpts reg_c;
    std::string reg_fixed, reg_moving;
    double reg_mpp = 0.48;
    bool skip_patchwise = false;
    add_common(reg, reg_c);
    reg->add_option("--fixed", reg_fixed, "Fixed tile store (H&E)")->required();
    reg->add_option("--moving", reg_moving, "Moving tile store (IHC)")->required();
    reg->add_option("--mpp", reg_mpp, "Working resolution (um/px)");
    reg->add_flag("--skip-patchwise", skip_patchwise, "Stop after the nonparametric stage");
    reg->callback([&] {
        auto o = reg_c.to_c();
        status = finish(episeg_register(reg_fixed.c_str(), reg_moving.c_str(),
                                        reg_c.config.empty() ? nullptr : reg_c.config.c_str(),
                                        reg_mpp, skip_patchwise ? 1 : 0, &o));
    });

    // transfer
    auto* tr = app.add_subcommand("transfer", "Warp a mask store through a displacement field");
    CommonOpts tr_c;
    std::string tr_mask, tr_field;
    double tr_mpp = 0.48;
    add_common(tr, tr_c);
    tr->add_option("--mask", tr_mask, "Mask store directory")->required();
    tr->add_option("--field", tr_field, "Field directory (field.json + field.bin)")->required();
    tr->add_option("--mpp", tr_mpp, "Resolution the field was computed at (um/px)");
    tr->callback([&] {
        auto o = tr_c.to_c();
        status = finish(episeg_transfer(tr_mask.c_str(), tr_field.c_str(), tr_mpp, &o));
    });

    // train
    auto* train = app.add_subcommand("train", "Train a segmenter from a train.json manifest");
    CommonOpts train_c;
    std::string profile;
    add_common(train, train_c);
    train->get_option("--config")->required();
    train->add_option("--profile", profile, "Training profile: ihc or he")->required();
    train->callback([&] {
        auto o = train_c.to_c();
        status = finish(episeg_train(train_c.config.c_str(), profile.c_str(), &o));
    });

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score predictions against truth over regions");
    CommonOpts ev_c;
    std::string ev_pred, ev_truth, ev_regions;
    add_common(ev, ev_c);
    ev->add_option("--pred", ev_pred, "Prediction store root ({id} substituted)")->required();
    ev->add_option("--truth", ev_truth, "Truth store root ({id} substituted)")->required();
    ev->add_option("--regions", ev_regions, "regions.json manifest")->required();
    ev->callback([&] {
        auto o = ev_c.to_c();
        status = finish(
            episeg_evaluate(ev_pred.c_str(), ev_truth.c_str(), ev_regions.c_str(), &o));
    });

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "Run the full two-step pipeline from a manifest");
    CommonOpts pipe_c;
    std::string manifest;
    add_common(pipe, pipe_c);
    pipe->add_option("--manifest", manifest, "Cohort manifest.json");
    pipe->callback([&] {
        std::string path = manifest.empty() ? pipe_c.config : manifest;
        if (path.empty()) {
            std::fprintf(stderr, "error: pipeline needs --manifest or --config\n");
            status = EPISEG_E_INPUT;
            return;
        }
        auto o = pipe_c.to_c();
        status = finish(episeg_pipeline(path.c_str(), &o));
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return EPISEG_E_INPUT;
    }
    return status;
}
