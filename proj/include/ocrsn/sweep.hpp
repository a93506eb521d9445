#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "ocrsn/analysis.hpp"
#include "ocrsn/model.hpp"
#include "ocrsn/noise.hpp"
#include "ocrsn/rng.hpp"

namespace ocrsn::sweep {

struct SynthNerConfig {
    std::map<std::string, std::vector<std::string>> gazetteers;  // label key -> entries
    std::vector<std::string> templates;                          // with {LABEL} slots
    std::size_t train_size = 64;
    std::size_t test_size = 48;
    std::string noise_level = "average";  // or "none" for a clean test split

    static SynthNerConfig from_json_file(const std::string& path);
    void validate() const;
};

struct NerSentence {
    std::u32string chars;
    std::vector<int> labels;  // per codepoint
};

struct NerDataset {
    std::vector<std::string> label_names;  // [0] == "O", then B-/I- per type
    std::vector<NerSentence> train;        // clean
    std::vector<NerSentence> test;         // corrupted at the configured level

    int n_labels() const { return int(label_names.size()); }
};

// Instantiates templates from gazetteers with character-level IOB2 labels;
// corrupts the test split's words and realigns labels through the edits
// (a deleted character drops its label position).
NerDataset generate_ner_data(const SynthNerConfig& cfg,
                             const std::vector<noise::NoiseLevel>& levels,
                             const noise::CharConfusionTable& table, const RngState& rng,
                             const noise::CorruptOptions& opts = {});

// Token-level micro-averaged F1 over non-O labels; 0 when precision and
// recall are both 0.
double micro_f1(std::span<const int> pred, std::span<const int> gold, int o_label = 0);

struct SweepGrid {
    std::vector<int> layers;  // empty = all layers
    int bin_start = 16;
    int bin_step = 16;
    int bin_stop = 160;
    std::vector<double> alphas = {0.1, 0.5, 0.9};
    // When set, each (bin, alpha) cell masks the selected neurons of every
    // grid layer simultaneously; such cells carry layer = -1.
    bool multi_layer = false;

    std::vector<int> bin_sizes() const;
    std::vector<int> layer_list(int n_layers) const;
    void validate(int n_layers, int d_mlp) const;
};

struct ImprovementCell {
    int layer = 0;
    int bin_size = 0;
    double alpha = 1.0;
    double f1_neutralised = 0.0;
    double f1_baseline = 0.0;
    double improvement_percent = 0.0;
};

double improvement_percent(double f1_neutralised, double f1_baseline);

struct BaselineResult {
    double mean_f1 = 0.0;
    double std_f1 = 0.0;  // population
    std::vector<double> run_f1;
    model::ClassifierHead first_head;
    double first_head_loss = 0.0;
};

// Trains the head `repetitions` times with derived seeds ("head/<i>") on the
// clean train split and evaluates each on the noisy test split without
// masking. Keeps the first head for the sweep.
BaselineResult baseline_eval(const model::ModelWeights& weights,
                             const model::CharTokenizer& tokenizer, const NerDataset& data,
                             const model::HeadTrainOptions& opts, int repetitions,
                             const RngState& master);

// First bin_size neurons ranked by (consistency desc, mean_diff desc, index).
std::vector<int> select_neurons(const analysis::SensitivityReport& report, int layer,
                                int bin_size);
std::vector<int> select_neurons_positional(int d_mlp, int bin_size);

double evaluate_f1(const model::ModelWeights& weights, const model::CharTokenizer& tokenizer,
                   const model::ClassifierHead& head, std::span<const NerSentence> sentences,
                   const model::AblationMask* mask = nullptr);

// One cell per (layer, bin, alpha), in that order. The per-cell baseline is
// the given head's unmasked F1 on the same test split, so an alpha of 1
// yields improvement exactly 0.
std::vector<ImprovementCell> run_sweep(const model::ModelWeights& weights,
                                       const model::CharTokenizer& tokenizer,
                                       const model::ClassifierHead& head,
                                       std::span<const NerSentence> test, const SweepGrid& grid,
                                       const analysis::SensitivityReport* report,
                                       int workers = 1);

// Bin sizes as rows, layers as columns. Rejects an incomplete grid, listing
// the missing cells. Values carry 6 significant digits.
std::string heatmap_csv(std::span<const ImprovementCell> cells, double alpha);

std::string cells_to_jsonl(std::span<const ImprovementCell> cells);
std::vector<ImprovementCell> cells_from_jsonl(const std::string& text);

}  // namespace ocrsn::sweep
