#include "ocrsn/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "ocrsn/nn_ops.hpp"
#include "ocrsn/utf8.hpp"

namespace ocrsn::model {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kRopeBase = 10000.0;

void fill_gaussian(Matrix& m, RngState rng, double std_dev) {
    for (double& v : m.data) v = rng.next_gaussian() * std_dev;
}

// Rotates the head-dim pairs of q/k in place for the given position.
void rope_inplace(std::span<double> vec, int n_heads, int head_dim, std::size_t pos) {
    for (int h = 0; h < n_heads; ++h) {
        double* head = vec.data() + std::size_t(h) * std::size_t(head_dim);
        for (int i = 0; i * 2 + 1 < head_dim; ++i) {
            double theta = double(pos) * std::pow(kRopeBase, -2.0 * double(i) / double(head_dim));
            double c = std::cos(theta), s = std::sin(theta);
            double a = head[2 * i], b = head[2 * i + 1];
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1) {
        throw std::invalid_argument("ModelConfig: d_model and n_heads must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("ModelConfig: d_model (" + std::to_string(d_model) +
                                    ") not divisible by n_heads (" + std::to_string(n_heads) +
                                    ")");
    }
    if (d_mlp <= d_model) {
        throw std::invalid_argument("ModelConfig: d_mlp (" + std::to_string(d_mlp) +
                                    ") must exceed d_model (" + std::to_string(d_model) + ")");
    }
    if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
    if (max_seq < 1) throw std::invalid_argument("ModelConfig: max_seq must be >= 1");
}

ModelWeights init_model(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    RngState rng(config.seed);
    const int D = config.d_model, M = config.d_mlp;
    const double attn_std = 1.0 / std::sqrt(double(D));
    const double down_std = 1.0 / std::sqrt(double(M));

    w.embedding = Matrix(std::size_t(config.vocab_size), std::size_t(D));
    fill_gaussian(w.embedding, rng.split("embedding"), attn_std);

    w.blocks.resize(std::size_t(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        BlockWeights& blk = w.blocks[std::size_t(l)];
        std::string p = "block" + std::to_string(l) + "/";
        blk.wq = Matrix(std::size_t(D), std::size_t(D));
        blk.wk = Matrix(std::size_t(D), std::size_t(D));
        blk.wv = Matrix(std::size_t(D), std::size_t(D));
        blk.wo = Matrix(std::size_t(D), std::size_t(D));
        fill_gaussian(blk.wq, rng.split(p + "wq"), attn_std);
        fill_gaussian(blk.wk, rng.split(p + "wk"), attn_std);
        fill_gaussian(blk.wv, rng.split(p + "wv"), attn_std);
        fill_gaussian(blk.wo, rng.split(p + "wo"), attn_std);
        blk.w_gate = Matrix(std::size_t(M), std::size_t(D));
        blk.w_up = Matrix(std::size_t(M), std::size_t(D));
        blk.w_down = Matrix(std::size_t(D), std::size_t(M));
        fill_gaussian(blk.w_gate, rng.split(p + "w_gate"), attn_std);
        fill_gaussian(blk.w_up, rng.split(p + "w_up"), attn_std);
        fill_gaussian(blk.w_down, rng.split(p + "w_down"), down_std);
        blk.b_in.assign(std::size_t(M), 0.0);
        blk.b_out.assign(std::size_t(D), 0.0);
        blk.attn_norm_gain.assign(std::size_t(D), 1.0);
        blk.mlp_norm_gain.assign(std::size_t(D), 1.0);
    }
    w.final_norm_gain.assign(std::size_t(D), 1.0);
    return w;
}

// ---------------------------------------------------------------------------
// Ablation mask
// ---------------------------------------------------------------------------

AblationMask::AblationMask(int n_layers, int d_mlp)
    : n_layers_(n_layers), d_mlp_(d_mlp),
      factors_(std::size_t(n_layers) * std::size_t(d_mlp), 1.0) {
    if (n_layers < 1 || d_mlp < 1) {
        throw std::invalid_argument("AblationMask: dimensions must be positive");
    }
}

void AblationMask::set(int layer, int neuron, double factor) {
    if (layer < 0 || layer >= n_layers_ || neuron < 0 || neuron >= d_mlp_) {
        throw std::invalid_argument("AblationMask::set: index out of range");
    }
    if (!(factor >= 0.0 && factor <= 1.0)) {
        throw std::invalid_argument("AblationMask::set: factor must lie in [0, 1]");
    }
    factors_[std::size_t(layer) * std::size_t(d_mlp_) + std::size_t(neuron)] = factor;
}

void AblationMask::neutralize(int layer, std::span<const int> neurons, double alpha) {
    for (int n : neurons) set(layer, n, alpha);
}

std::span<const double> AblationMask::layer_row(int layer) const {
    if (layer < 0 || layer >= n_layers_) {
        throw std::invalid_argument("AblationMask::layer_row: layer out of range");
    }
    return {factors_.data() + std::size_t(layer) * std::size_t(d_mlp_), std::size_t(d_mlp_)};
}

const Matrix& ActivationTrace::layer(int l) const {
    auto it = layers.find(l);
    if (it == layers.end()) {
        throw std::invalid_argument("ActivationTrace: layer " + std::to_string(l) +
                                    " was not captured");
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

MlpResult mlp_forward(std::span<const double> x, const BlockWeights& block,
                      std::span<const double> mask_row) {
    const std::size_t M = block.w_gate.rows;
    const std::size_t D = block.w_down.rows;
    if (block.w_gate.cols != x.size() || block.w_up.cols != x.size() ||
        block.w_down.cols != M || block.b_in.size() != M || block.b_out.size() != D) {
        throw std::invalid_argument("mlp_forward: inconsistent shapes");
    }
    if (!mask_row.empty() && mask_row.size() != M) {
        throw std::invalid_argument("mlp_forward: mask length " +
                                    std::to_string(mask_row.size()) + " != d_mlp " +
                                    std::to_string(M));
    }
    MlpResult res;
    res.intermediate.resize(M);
    for (std::size_t j = 0; j < M; ++j) {
        double g = nn::dot({block.w_gate.row(j), x.size()}, x);
        double u = nn::dot({block.w_up.row(j), x.size()}, x) + block.b_in[j];
        double a = nn::silu(g) * u;
        if (!mask_row.empty()) a *= mask_row[j];
        res.intermediate[j] = a;
    }
    res.output.resize(D);
    for (std::size_t o = 0; o < D; ++o) {
        res.output[o] = nn::dot({block.w_down.row(o), M}, res.intermediate) + block.b_out[o];
    }
    return res;
}

ForwardResult forward(const ModelWeights& w, std::span<const int> token_ids,
                      const AblationMask* mask, const std::set<int>& capture_layers) {
    const ModelConfig& cfg = w.config;
    const std::size_t T = token_ids.size();
    if (T == 0) throw std::invalid_argument("forward: empty token sequence");
    if (int(T) > cfg.max_seq) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                    " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (int id : token_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                        " outside vocabulary of size " +
                                        std::to_string(cfg.vocab_size));
        }
    }
    if (mask != nullptr && (mask->n_layers() != cfg.n_layers || mask->d_mlp() != cfg.d_mlp)) {
        throw std::invalid_argument("forward: mask shape does not match model");
    }
    for (int l : capture_layers) {
        if (l < 0 || l >= cfg.n_layers) {
            throw std::invalid_argument("forward: capture layer " + std::to_string(l) +
                                        " out of range");
        }
    }

    const std::size_t D = std::size_t(cfg.d_model);
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));

    Matrix x(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        std::memcpy(x.row(t), w.embedding.row(std::size_t(token_ids[t])), D * sizeof(double));
    }

    ForwardResult res;
    std::vector<double> normed(D), q(T * D), k(T * D), v(T * D), concat(D), proj(D);
    std::vector<double> scores;

    for (int l = 0; l < cfg.n_layers; ++l) {
        const BlockWeights& blk = w.blocks[std::size_t(l)];

        // Attention sublayer (pre-norm, strictly causal, RoPE positions).
        for (std::size_t t = 0; t < T; ++t) {
            nn::rms_norm_into({x.row(t), D}, blk.attn_norm_gain, kRmsEps, normed);
            nn::matvec(blk.wq, normed, {q.data() + t * D, D});
            nn::matvec(blk.wk, normed, {k.data() + t * D, D});
            nn::matvec(blk.wv, normed, {v.data() + t * D, D});
            rope_inplace({q.data() + t * D, D}, H, hd, t);
            rope_inplace({k.data() + t * D, D}, H, hd, t);
        }
        for (std::size_t t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) {
                const std::size_t off = std::size_t(h) * std::size_t(hd);
                const double* qt = q.data() + t * D + off;
                scores.assign(t + 1, 0.0);
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = nn::dot({qt, std::size_t(hd)},
                                        {k.data() + s * D + off, std::size_t(hd)}) *
                                scale;
                }
                nn::softmax_inplace(scores);
                for (int j = 0; j < hd; ++j) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) {
                        acc += scores[s] * v[s * D + off + std::size_t(j)];
                    }
                    concat[off + std::size_t(j)] = acc;
                }
            }
            nn::matvec(blk.wo, concat, proj);
            double* xt = x.row(t);
            for (std::size_t i = 0; i < D; ++i) xt[i] += proj[i];
        }

        // MLP sublayer with the block's mask row.
        const bool cap = capture_layers.count(l) != 0;
        Matrix* trace_mat = nullptr;
        if (cap) {
            trace_mat = &res.trace.layers
                             .emplace(l, Matrix(T, std::size_t(cfg.d_mlp)))
                             .first->second;
        }
        std::span<const double> mrow = mask ? mask->layer_row(l) : std::span<const double>{};
        for (std::size_t t = 0; t < T; ++t) {
            nn::rms_norm_into({x.row(t), D}, blk.mlp_norm_gain, kRmsEps, normed);
            MlpResult mlp = mlp_forward(normed, blk, mrow);
            if (cap) {
                std::memcpy(trace_mat->row(t), mlp.intermediate.data(),
                            std::size_t(cfg.d_mlp) * sizeof(double));
            }
            double* xt = x.row(t);
            for (std::size_t i = 0; i < D; ++i) xt[i] += mlp.output[i];
        }
    }

    res.hidden = Matrix(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        nn::rms_norm_into({x.row(t), D}, w.final_norm_gain, kRmsEps, {res.hidden.row(t), D});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Classification head
// ---------------------------------------------------------------------------

Matrix classify_tokens(const Matrix& hidden, const ClassifierHead& head) {
    if (hidden.cols != head.w.cols || head.b.size() != head.w.rows) {
        throw std::invalid_argument("classify_tokens: shape mismatch hidden " +
                                    hidden.shape_str() + " vs head " + head.w.shape_str());
    }
    Matrix probs(hidden.rows, head.w.rows);
    std::vector<double> logits(head.w.rows);
    for (std::size_t t = 0; t < hidden.rows; ++t) {
        nn::matvec(head.w, {hidden.row(t), hidden.cols}, logits);
        for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += head.b[j];
        nn::softmax_inplace(logits);
        std::memcpy(probs.row(t), logits.data(), logits.size() * sizeof(double));
    }
    return probs;
}

HeadGrad head_loss_and_grad(const Matrix& hidden, std::span<const int> labels,
                            const ClassifierHead& head) {
    if (hidden.rows != labels.size()) {
        throw std::invalid_argument("head_loss_and_grad: rows vs labels mismatch");
    }
    if (hidden.rows == 0) throw std::invalid_argument("head_loss_and_grad: empty data");
    const std::size_t N = hidden.rows;
    const std::size_t L = head.w.rows;
    const std::size_t D = head.w.cols;
    HeadGrad g;
    g.dw = Matrix(L, D);
    g.db.assign(L, 0.0);
    std::vector<double> logits(L);
    double loss = 0.0;
    const double inv_n = 1.0 / double(N);
    for (std::size_t t = 0; t < N; ++t) {
        int y = labels[t];
        if (y < 0 || std::size_t(y) >= L) {
            throw std::invalid_argument("head_loss_and_grad: label " + std::to_string(y) +
                                        " out of range");
        }
        nn::matvec(head.w, {hidden.row(t), D}, logits);
        for (std::size_t j = 0; j < L; ++j) logits[j] += head.b[j];
        nn::softmax_inplace(logits);
        double p = logits[std::size_t(y)];
        loss -= std::log(p < 1e-300 ? 1e-300 : p);
        // d(loss)/d(logit_j) = (p_j - [j == y]) / N
        const double* h = hidden.row(t);
        for (std::size_t j = 0; j < L; ++j) {
            double d = (logits[j] - (std::size_t(y) == j ? 1.0 : 0.0)) * inv_n;
            g.db[j] += d;
            double* dwr = g.dw.row(j);
            for (std::size_t i = 0; i < D; ++i) dwr[i] += d * h[i];
        }
    }
    g.loss = loss * inv_n;
    return g;
}

HeadTrainResult train_head_on_hidden(const Matrix& hidden, std::span<const int> labels,
                                     int n_labels, const HeadTrainOptions& opts, RngState rng) {
    if (n_labels < 2) throw std::invalid_argument("train_head: need at least 2 labels");
    if (hidden.rows == 0) throw std::invalid_argument("train_head: empty data");
    if (opts.epochs < 0) throw std::invalid_argument("train_head: negative epoch count");

    HeadTrainResult res;
    res.head.w = Matrix(std::size_t(n_labels), hidden.cols);
    fill_gaussian(res.head.w, rng.split("head_w"), 1.0 / std::sqrt(double(hidden.cols)));
    res.head.b.assign(std::size_t(n_labels), 0.0);

    for (int e = 0; e < opts.epochs; ++e) {
        HeadGrad g = head_loss_and_grad(hidden, labels, res.head);
        res.epoch_loss.push_back(g.loss);
        for (std::size_t i = 0; i < res.head.w.data.size(); ++i) {
            res.head.w.data[i] -= opts.lr * g.dw.data[i];
        }
        for (std::size_t j = 0; j < res.head.b.size(); ++j) {
            res.head.b[j] -= opts.lr * g.db[j];
        }
    }
    res.final_loss = head_loss_and_grad(hidden, labels, res.head).loss;
    return res;
}

HeadTrainResult train_head(const ModelWeights& model,
                           const std::vector<std::vector<int>>& token_seqs,
                           const std::vector<std::vector<int>>& label_seqs, int n_labels,
                           const HeadTrainOptions& opts, RngState rng) {
    if (token_seqs.empty() || token_seqs.size() != label_seqs.size()) {
        throw std::invalid_argument("train_head: empty or mismatched training data");
    }
    std::size_t total = 0;
    for (std::size_t s = 0; s < token_seqs.size(); ++s) {
        if (token_seqs[s].size() != label_seqs[s].size()) {
            throw std::invalid_argument("train_head: sequence " + std::to_string(s) +
                                        " has mismatched token/label lengths");
        }
        total += token_seqs[s].size();
    }
    if (total == 0) throw std::invalid_argument("train_head: empty data");

    Matrix hidden(total, std::size_t(model.config.d_model));
    std::vector<int> labels;
    labels.reserve(total);
    std::size_t row = 0;
    for (std::size_t s = 0; s < token_seqs.size(); ++s) {
        ForwardResult fr = forward(model, token_seqs[s]);
        for (std::size_t t = 0; t < fr.hidden.rows; ++t) {
            std::memcpy(hidden.row(row++), fr.hidden.row(t), hidden.cols * sizeof(double));
        }
        labels.insert(labels.end(), label_seqs[s].begin(), label_seqs[s].end());
    }
    return train_head_on_hidden(hidden, labels, n_labels, opts, rng);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'O', 'S', 'N', 'W'};

std::uint64_t fnv1a64_bytes(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[std::size_t(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

struct TensorRef {
    std::string name;
    const std::vector<double>* vec = nullptr;
    const Matrix* mat = nullptr;

    std::size_t count() const { return mat ? mat->data.size() : vec->size(); }
    std::vector<std::size_t> shape() const {
        if (mat) return {mat->rows, mat->cols};
        return {vec->size()};
    }
};

std::vector<TensorRef> manifest_of(const ModelWeights& w) {
    std::vector<TensorRef> out;
    out.push_back({"embedding", nullptr, &w.embedding});
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        const BlockWeights& b = w.blocks[l];
        std::string p = "block" + std::to_string(l) + ".";
        out.push_back({p + "wq", nullptr, &b.wq});
        out.push_back({p + "wk", nullptr, &b.wk});
        out.push_back({p + "wv", nullptr, &b.wv});
        out.push_back({p + "wo", nullptr, &b.wo});
        out.push_back({p + "w_gate", nullptr, &b.w_gate});
        out.push_back({p + "w_up", nullptr, &b.w_up});
        out.push_back({p + "w_down", nullptr, &b.w_down});
        out.push_back({p + "b_in", &b.b_in, nullptr});
        out.push_back({p + "b_out", &b.b_out, nullptr});
        out.push_back({p + "attn_norm_gain", &b.attn_norm_gain, nullptr});
        out.push_back({p + "mlp_norm_gain", &b.mlp_norm_gain, nullptr});
    }
    out.push_back({"final_norm_gain", &w.final_norm_gain, nullptr});
    return out;
}

void append_f32_le(std::string& out, double v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(float(v));
    out.push_back(char(bits & 0xFF));
    out.push_back(char((bits >> 8) & 0xFF));
    out.push_back(char((bits >> 16) & 0xFF));
    out.push_back(char((bits >> 24) & 0xFF));
}

double read_f32_le(const char* p) {
    std::uint32_t bits = std::uint32_t(static_cast<unsigned char>(p[0])) |
                         (std::uint32_t(static_cast<unsigned char>(p[1])) << 8) |
                         (std::uint32_t(static_cast<unsigned char>(p[2])) << 16) |
                         (std::uint32_t(static_cast<unsigned char>(p[3])) << 24);
    return double(std::bit_cast<float>(bits));
}

}  // namespace

void save_weights(const ModelWeights& w, const CharTokenizer& tokenizer, const std::string& path,
                  const std::map<std::string, std::string>& extra_header) {
    auto tensors = manifest_of(w);
    std::string payload;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    for (const TensorRef& t : tensors) {
        manifest.push_back({{"name", t.name}, {"shape", t.shape()}});
        if (t.mat) {
            for (double v : t.mat->data) append_f32_le(payload, v);
        } else {
            for (double v : *t.vec) append_f32_le(payload, v);
        }
    }

    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["config"] = {{"n_layers", w.config.n_layers},   {"d_model", w.config.d_model},
                        {"d_mlp", w.config.d_mlp},         {"n_heads", w.config.n_heads},
                        {"vocab_size", w.config.vocab_size}, {"max_seq", w.config.max_seq},
                        {"seed", w.config.seed}};
    header["alphabet"] = utf8_encode(tokenizer.alphabet());
    header["tensors"] = manifest;
    header["payload_checksum"] = hex64(fnv1a64_bytes(payload));
    for (const auto& [k, v] : extra_header) header[k] = v;
    std::string header_bytes = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write model file: " + path);
    out.write(kMagic, 4);
    std::uint64_t hlen = header_bytes.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = char((hlen >> (8 * i)) & 0xFF);
    out.write(lenbuf, 8);
    out.write(header_bytes.data(), std::streamsize(header_bytes.size()));
    out.write(payload.data(), std::streamsize(payload.size()));
    if (!out) throw std::runtime_error("failed writing model file: " + path);
}

LoadedModel load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read model file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw std::runtime_error("load_weights: " + path + " is not a model file");
    }
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) {
        hlen |= std::uint64_t(static_cast<unsigned char>(bytes[4 + std::size_t(i)])) << (8 * i);
    }
    if (12 + hlen > bytes.size()) {
        throw std::runtime_error("load_weights: truncated header in " + path);
    }
    nlohmann::json header = nlohmann::json::parse(bytes.substr(12, hlen));

    ModelConfig cfg;
    const auto& jc = header.at("config");
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.d_mlp = jc.at("d_mlp").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.max_seq = jc.at("max_seq").get<int>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();
    cfg.validate();

    LoadedModel lm;
    lm.weights.config = cfg;
    lm.weights.embedding = Matrix(std::size_t(cfg.vocab_size), std::size_t(cfg.d_model));
    lm.weights.blocks.resize(std::size_t(cfg.n_layers));
    for (auto& b : lm.weights.blocks) {
        const std::size_t D = std::size_t(cfg.d_model), M = std::size_t(cfg.d_mlp);
        b.wq = Matrix(D, D);
        b.wk = Matrix(D, D);
        b.wv = Matrix(D, D);
        b.wo = Matrix(D, D);
        b.w_gate = Matrix(M, D);
        b.w_up = Matrix(M, D);
        b.w_down = Matrix(D, M);
        b.b_in.assign(M, 0.0);
        b.b_out.assign(D, 0.0);
        b.attn_norm_gain.assign(D, 0.0);
        b.mlp_norm_gain.assign(D, 0.0);
    }
    lm.weights.final_norm_gain.assign(std::size_t(cfg.d_model), 0.0);
    lm.tokenizer = CharTokenizer(utf8_decode(header.at("alphabet").get<std::string>()));
    if (lm.tokenizer.vocab_size() != cfg.vocab_size) {
        throw std::runtime_error("load_weights: alphabet size does not match vocab_size");
    }

    // Walk the expected manifest against the stored one, tensor by tensor.
    auto expected = manifest_of(lm.weights);
    const auto& stored = header.at("tensors");
    if (stored.size() != expected.size()) {
        throw std::runtime_error("load_weights: manifest mismatch: expected " +
                                 std::to_string(expected.size()) + " tensors, file has " +
                                 std::to_string(stored.size()));
    }
    std::string payload = bytes.substr(12 + hlen);
    std::size_t expected_floats = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& js = stored[i];
        std::string name = js.at("name").get<std::string>();
        auto shape = js.at("shape").get<std::vector<std::size_t>>();
        if (name != expected[i].name || shape != expected[i].shape()) {
            std::string want;
            for (auto s : expected[i].shape()) want += std::to_string(s) + " ";
            std::string got;
            for (auto s : shape) got += std::to_string(s) + " ";
            throw std::runtime_error("load_weights: tensor '" + expected[i].name +
                                     "': expected shape [ " + want + "], file has '" + name +
                                     "' shape [ " + got + "]");
        }
        expected_floats += expected[i].count();
    }
    if (payload.size() != expected_floats * 4) {
        throw std::runtime_error("load_weights: truncated payload: expected " +
                                 std::to_string(expected_floats * 4) + " bytes, found " +
                                 std::to_string(payload.size()));
    }
    std::string checksum = hex64(fnv1a64_bytes(payload));
    if (checksum != header.at("payload_checksum").get<std::string>()) {
        throw std::runtime_error("load_weights: payload checksum mismatch in " + path);
    }

    // Fill tensors in manifest order.
    std::size_t off = 0;
    auto targets = manifest_of(lm.weights);
    for (const TensorRef& t : targets) {
        std::size_t n = t.count();
        double* dst = t.mat ? const_cast<Matrix*>(t.mat)->data.data()
                            : const_cast<std::vector<double>*>(t.vec)->data();
        for (std::size_t i = 0; i < n; ++i) {
            dst[i] = read_f32_le(payload.data() + (off + i) * 4);
        }
        off += n;
    }
    for (const TensorRef& t : targets) {
        if (t.mat) {
            nn::assert_finite(t.mat->data, t.name.c_str());
        } else {
            nn::assert_finite(*t.vec, t.name.c_str());
        }
    }
    return lm;
}

}  // namespace ocrsn::model
