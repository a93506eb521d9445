#pragma once

#include <span>
#include <string>
#include <vector>

#include "ocrsn/matrix.hpp"
#include "ocrsn/model.hpp"
#include "ocrsn/noise.hpp"
#include "ocrsn/running_stats.hpp"

namespace ocrsn::analysis {

struct CkaValue {
    double value = 0.0;
    bool defined = false;
};

// Linear CKA via centered feature cross-products:
// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F). Undefined when either
// centered representation has (near-)zero norm.
CkaValue linear_cka(const Matrix& x, const Matrix& y);

// Mean-pools each trace over sequence positions and returns the squared
// Pearson correlation of the pooled d_mlp vectors — the single-feature
// degeneration of linear CKA, usable when the two sequences differ in length.
CkaValue token_pair_cka(const model::ActivationTrace& correct,
                        const model::ActivationTrace& altered, int layer);

struct ProfileCell {
    int layer = 0;
    noise::Level level = noise::Level::low;
    double mean = 0.0, median = 0.0, q10 = 0.0, q90 = 0.0;
    std::size_t n_pairs = 0;      // pairs evaluated (variant present)
    std::size_t n_undefined = 0;  // excluded from the aggregates
};

struct LayerCkaProfile {
    std::vector<ProfileCell> cells;  // ordered (layer, level)
};

// One raw CKA observation, ordered (record, level, layer).
struct PairCka {
    std::size_t record = 0;
    int layer = 0;
    noise::Level level = noise::Level::low;
    bool defined = false;
    double value = 0.0;
};

// When pair_values is non-null it receives the raw per-pair observations
// behind the aggregates.
LayerCkaProfile profile_layers(const model::ModelWeights& weights,
                               const model::CharTokenizer& tokenizer,
                               std::span<const noise::TokenPairRecord> dataset,
                               int workers = 1, std::vector<PairCka>* pair_values = nullptr);

// |column mean of correct - column mean of altered| per neuron. With
// activated_only, means run over strictly positive activations and an empty
// selection contributes 0.
std::vector<double> neuron_pair_diff(const model::ActivationTrace& correct,
                                     const model::ActivationTrace& altered, int layer,
                                     bool activated_only = false);

// Neuron n is significant iff diff_n > mean + population std of the diffs of
// all *other* neurons in the layer (leave-one-out), or of all neurons when
// leave_one_out is false.
std::vector<int> significant_neurons(std::span<const double> diff, bool leave_one_out = true);

struct NeuronStat {
    int neuron = 0;
    double consistency = 0.0;
    double mean_diff = 0.0;
};

struct LayerSensitivity {
    int layer = 0;
    std::vector<NeuronStat> neurons;  // all d_mlp neurons, index order
    std::vector<int> sensitive;       // consistency > threshold
};

struct SensitivityReport {
    noise::Level level = noise::Level::low;
    double threshold = 0.9;
    std::size_t n_pairs = 0;
    std::vector<LayerSensitivity> layers;
};

struct SensitivityOptions {
    double threshold = 0.9;
    bool leave_one_out = true;
    bool activated_only = false;
};

// Streaming per-neuron accumulation over (correct, altered) trace pairs:
// per-pair significance hits, diff sums, and Welford activation statistics
// kept separately for the correct and altered sides. Partials merge
// deterministically when folded in a fixed order.
class SensitivityAccumulator {
public:
    SensitivityAccumulator() = default;
    SensitivityAccumulator(int n_layers, int d_mlp, SensitivityOptions opts = {});

    void add_pair(const model::ActivationTrace& correct, const model::ActivationTrace& altered);
    void merge(const SensitivityAccumulator& o);
    SensitivityReport finalize(noise::Level level) const;

    std::size_t n_pairs() const { return n_pairs_; }
    const RunningStats& correct_activation_stats(int layer, int neuron) const;
    const RunningStats& altered_activation_stats(int layer, int neuron) const;

private:
    SensitivityOptions opts_;
    int n_layers_ = 0;
    int d_mlp_ = 0;
    std::size_t n_pairs_ = 0;
    std::vector<std::vector<std::int64_t>> hits_;       // [layer][neuron]
    std::vector<std::vector<double>> diff_sum_;         // [layer][neuron]
    std::vector<std::vector<RunningStats>> correct_;    // [layer][neuron]
    std::vector<std::vector<RunningStats>> altered_;    // [layer][neuron]
};

SensitivityReport sensitivity_report(const model::ModelWeights& weights,
                                     const model::CharTokenizer& tokenizer,
                                     std::span<const noise::TokenPairRecord> dataset,
                                     noise::Level level, const SensitivityOptions& opts = {},
                                     int workers = 1);

// CSV: layer,level,mean,median,q10,q90,n_pairs,n_undefined
std::string profile_to_csv(const LayerCkaProfile& profile);

// CSV: record,layer,level,cka (blank value for undefined observations)
std::string pair_values_to_csv(std::span<const PairCka> pairs);

std::string report_to_json(const SensitivityReport& report, const std::string& config_hash = "");
SensitivityReport report_from_json_file(const std::string& path);

// CSV: layer,level,sensitive_count — one row per (layer, level).
std::string sensitive_counts_csv(std::span<const SensitivityReport> reports);

}  // namespace ocrsn::analysis
