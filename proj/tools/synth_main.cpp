#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "synth/errors.hpp"
#include "synth/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config = "config.json";
    uint64_t seed = 0;
    std::string experiment = "default";
    std::string artifact_root;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
    auto* opt = cmd->add_option("--config", o.config, "experiment config file");
    if (config_required) opt->required();
    cmd->add_option("--seed", o.seed, "experiment seed");
    cmd->add_option("--experiment", o.experiment, "experiment id");
    cmd->add_option("--artifact-root", o.artifact_root,
                    "artifact root (overrides SYNTH_ARTIFACT_ROOT)");
}

std::optional<std::filesystem::path> root_of(const CommonOpts& o) {
    if (o.artifact_root.empty()) return {};
    return std::filesystem::path(o.artifact_root);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-stage diffusion pipeline for multi-class dataset synthesis"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::vector<std::pair<synth::Stage, CLI::App*>> stage_cmds;
    for (synth::Stage st :
         {synth::Stage::ingest, synth::Stage::train_ssi_all, synth::Stage::train_adapter,
          synth::Stage::generate_organs, synth::Stage::compose, synth::Stage::refine,
          synth::Stage::evaluate_quality, synth::Stage::seg_train, synth::Stage::seg_eval,
          synth::Stage::report}) {
        CLI::App* cmd = app.add_subcommand(synth::stage_name(st), "run the " +
                                                                      synth::stage_name(st) +
                                                                      " stage");
        add_common(cmd, opts, st != synth::Stage::report);
        stage_cmds.emplace_back(st, cmd);
    }
    CLI::App* all_cmd = app.add_subcommand("run-all", "run every stage in pipeline order");
    add_common(all_cmd, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (all_cmd->parsed()) {
            const auto records = synth::run_all(opts.config, opts.seed, opts.experiment,
                                                root_of(opts));
            for (const auto& r : records)
                std::printf("%-18s %6ld ms  %zu artifacts\n", r.stage.c_str(), r.wall_ms,
                            r.outputs.size());
            return 0;
        }
        for (const auto& [st, cmd] : stage_cmds) {
            if (!cmd->parsed()) continue;
            const bool config_given = cmd->count("--config") > 0;
            const auto r = st == synth::Stage::report && !config_given
                               ? synth::run_report(opts.seed, opts.experiment, root_of(opts))
                               : synth::run_stage(st, opts.config, opts.seed, opts.experiment,
                                                  root_of(opts));
            std::printf("%-18s %6ld ms  %zu artifacts\n", r.stage.c_str(), r.wall_ms,
                        r.outputs.size());
            return 0;
        }
    } catch (const synth::DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return 3;
    } catch (const synth::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const synth::ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
