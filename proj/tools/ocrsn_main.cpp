// Command-line front end for the OCR-sensitivity pipeline: dataset
// generation, model init, head training, CKA/neuron profiling and the
// neutralisation sweep, all driven by a JSON config with file-based
// hand-offs between stages.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ocrsn/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"OCR-noise sensitivity analysis pipeline"};
    app.require_subcommand(1);

    struct Common {
        std::string config_path;
        std::optional<std::uint64_t> seed;
        std::optional<std::string> out;
        std::optional<int> workers;
        std::optional<std::string> level;
        std::vector<double> alphas;
    };

    std::vector<std::pair<CLI::App*, std::shared_ptr<Common>>> subs;
    for (const char* name : {"gen-dataset", "init-model", "train-head", "profile", "sweep"}) {
        CLI::App* sub = app.add_subcommand(name, "");
        auto common = std::make_shared<Common>();
        sub->add_option("--config", common->config_path, "run config (JSON)")
            ->required();
        sub->add_option("--seed", common->seed, "override the master seed");
        sub->add_option("--out", common->out, "override the output directory");
        sub->add_option("--workers", common->workers, "override the worker count");
        sub->add_option("--level", common->level,
                        "override the noise level used for neuron selection");
        sub->add_option("--alpha", common->alphas, "restrict the sweep to these alpha values");
        subs.emplace_back(sub, common);
    }
    app.get_subcommand("gen-dataset")->description("generate the noise-augmented token dataset");
    app.get_subcommand("init-model")->description("initialise and save the toy model");
    app.get_subcommand("train-head")->description("train the token-classification head");
    app.get_subcommand("profile")->description("per-layer CKA profile and sensitive neurons");
    app.get_subcommand("sweep")->description("neutralisation sweep and improvement heatmaps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    for (auto& [sub, common] : subs) {
        if (!sub->parsed()) continue;
        try {
            ocrsn::pipeline::RunConfig cfg =
                ocrsn::pipeline::RunConfig::from_json_file(common->config_path);
            if (common->seed) cfg.seed = *common->seed;
            if (common->out) cfg.out_dir = *common->out;
            if (common->workers) cfg.workers = *common->workers;
            if (common->level) cfg.sensitivity_level = *common->level;
            if (!common->alphas.empty()) cfg.grid.alphas = common->alphas;
            return ocrsn::pipeline::run_command(sub->get_name(), cfg);
        } catch (const ocrsn::pipeline::ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 3;
        }
    }
    return 2;
}
