#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ocrsn/matrix.hpp"
#include "ocrsn/rng.hpp"
#include "ocrsn/tokenizer.hpp"

namespace ocrsn::model {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int d_mlp = 172;
    int n_heads = 4;
    int vocab_size = 0;
    int max_seq = 128;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;  // throws std::invalid_argument
};

struct BlockWeights {
    Matrix wq, wk, wv, wo;       // d_model x d_model
    Matrix w_gate, w_up;         // d_mlp x d_model
    Matrix w_down;               // d_model x d_mlp
    std::vector<double> b_in;    // d_mlp
    std::vector<double> b_out;   // d_model
    std::vector<double> attn_norm_gain, mlp_norm_gain;  // d_model
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // vocab_size x d_model
    std::vector<BlockWeights> blocks;
    std::vector<double> final_norm_gain;
};

// Per-layer multiplicative factors on the MLP intermediate; all ones by
// default, alpha at neutralised indices. Entries must stay in [0, 1].
class AblationMask {
public:
    AblationMask() = default;
    AblationMask(int n_layers, int d_mlp);

    void set(int layer, int neuron, double factor);
    void neutralize(int layer, std::span<const int> neurons, double alpha);

    std::span<const double> layer_row(int layer) const;
    int n_layers() const { return n_layers_; }
    int d_mlp() const { return d_mlp_; }

private:
    int n_layers_ = 0;
    int d_mlp_ = 0;
    std::vector<double> factors_;
};

// Captured MLP intermediates (post-nonlinearity, post-mask), one
// (sequence x d_mlp) matrix per requested layer.
struct ActivationTrace {
    std::map<int, Matrix> layers;

    bool has(int layer) const { return layers.count(layer) != 0; }
    const Matrix& layer(int l) const;  // throws if the layer was not captured
};

struct ForwardResult {
    Matrix hidden;  // sequence x d_model, after the final norm
    ActivationTrace trace;
};

ModelWeights init_model(const ModelConfig& config);

struct MlpResult {
    std::vector<double> intermediate;  // d_mlp, post-mask
    std::vector<double> output;        // d_model
};

// a = silu(W_gate x) ⊙ (W_up x + b_in); h' = a ⊙ mask; out = W_down h' + b_out.
// An empty mask_row means no masking.
MlpResult mlp_forward(std::span<const double> x, const BlockWeights& block,
                      std::span<const double> mask_row = {});

ForwardResult forward(const ModelWeights& w, std::span<const int> token_ids,
                      const AblationMask* mask = nullptr,
                      const std::set<int>& capture_layers = {});

struct ClassifierHead {
    Matrix w;  // n_labels x d_model
    std::vector<double> b;

    int n_labels() const { return int(w.rows); }
};

// Per-row softmax(W h + b); returns sequence x n_labels probabilities.
Matrix classify_tokens(const Matrix& hidden, const ClassifierHead& head);

struct HeadGrad {
    double loss = 0.0;  // mean cross-entropy
    Matrix dw;
    std::vector<double> db;
};

HeadGrad head_loss_and_grad(const Matrix& hidden, std::span<const int> labels,
                            const ClassifierHead& head);

struct HeadTrainOptions {
    double lr = 0.5;
    int epochs = 200;
};

struct HeadTrainResult {
    ClassifierHead head;
    double final_loss = 0.0;
    std::vector<double> epoch_loss;  // loss before each update
};

// Full-batch gradient descent on (W, b) over precomputed hidden rows.
HeadTrainResult train_head_on_hidden(const Matrix& hidden, std::span<const int> labels,
                                     int n_labels, const HeadTrainOptions& opts, RngState rng);

// Runs the frozen backbone once per sequence, caches the hidden states, and
// trains the head on them.
HeadTrainResult train_head(const ModelWeights& model,
                           const std::vector<std::vector<int>>& token_seqs,
                           const std::vector<std::vector<int>>& label_seqs, int n_labels,
                           const HeadTrainOptions& opts, RngState rng);

// Binary format: magic + JSON header (config, alphabet, tensor manifest,
// payload checksum) + little-endian float32 payload. Weights are stored
// 32-bit and computed 64-bit.
void save_weights(const ModelWeights& w, const CharTokenizer& tokenizer, const std::string& path,
                  const std::map<std::string, std::string>& extra_header = {});

struct LoadedModel {
    ModelWeights weights;
    CharTokenizer tokenizer;
};

LoadedModel load_weights(const std::string& path);

}  // namespace ocrsn::model
