#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ocrsn/model.hpp"
#include "ocrsn/noise.hpp"
#include "ocrsn/sweep.hpp"

namespace ocrsn::pipeline {

// Configuration / validation problems map to exit code 2; other runtime
// errors map to exit code 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "out";
    int workers = 1;

    std::vector<std::string> corpus;
    std::string confusion_table;  // optional JSON path; built-in table otherwise
    std::string allowlist;        // optional path, one token per line
    std::string ner_config;       // SynthNerConfig JSON path

    std::size_t min_token_length = 4;
    bool lowercase = false;
    double substitution_prob = 0.7;
    int max_retries = 50;

    model::ModelConfig model;  // vocab_size and seed are filled at init time
    sweep::SweepGrid grid;
    model::HeadTrainOptions head;
    int baseline_repetitions = 5;
    std::string selection_mode = "sensitivity-ranked";  // or "positional"
    std::string sensitivity_level = "high";
    double sensitivity_threshold = 0.9;
    bool sensitivity_leave_one_out = true;
    bool sensitivity_activated_only = false;
    bool profile_emit_pairs = false;  // also dump the raw per-pair CKA values
    std::vector<noise::NoiseLevel> levels = noise::default_levels();

    static RunConfig from_json_file(const std::string& path);

    noise::CorruptOptions corrupt_options() const;
    noise::TokenFilter token_filter() const;  // loads the allowlist when set

    // Stable over everything that shapes outputs; out_dir and workers are
    // excluded so reruns into other directories or at other worker counts
    // produce byte-identical artifacts.
    std::string config_hash() const;
};

void cmd_gen_dataset(const RunConfig& cfg);
void cmd_init_model(const RunConfig& cfg);
void cmd_train_head(const RunConfig& cfg);
void cmd_profile(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);

// Maps exceptions onto exit codes: 0 ok, 2 config/validation, 3 runtime.
int run_command(const std::string& name, const RunConfig& cfg);

}  // namespace ocrsn::pipeline
