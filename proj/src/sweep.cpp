#include "ocrsn/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ocrsn/parallel.hpp"
#include "ocrsn/running_stats.hpp"
#include "ocrsn/utf8.hpp"

namespace ocrsn::sweep {

namespace {

std::string tag_for(const std::string& key) {
    if (key == "PERSON") return "PERS";
    if (key == "LOCATION") return "LOC";
    if (key == "ORGANISATION" || key == "ORGANIZATION") return "ORG";
    return key;
}

std::string fmt6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

SynthNerConfig SynthNerConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read NER config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("NER config " + path + ": " + e.what());
    }
    SynthNerConfig cfg;
    for (auto it = j.at("gazetteers").begin(); it != j.at("gazetteers").end(); ++it) {
        cfg.gazetteers[it.key()] = it.value().get<std::vector<std::string>>();
    }
    cfg.templates = j.at("templates").get<std::vector<std::string>>();
    if (j.contains("train_size")) cfg.train_size = j["train_size"].get<std::size_t>();
    if (j.contains("test_size")) cfg.test_size = j["test_size"].get<std::size_t>();
    if (j.contains("noise_level")) cfg.noise_level = j["noise_level"].get<std::string>();
    cfg.validate();
    return cfg;
}

void SynthNerConfig::validate() const {
    if (gazetteers.empty()) throw std::invalid_argument("NER config: no gazetteers");
    for (const auto& [key, entries] : gazetteers) {
        if (entries.empty()) {
            throw std::invalid_argument("NER config: empty gazetteer for '" + key + "'");
        }
    }
    if (templates.empty()) throw std::invalid_argument("NER config: no templates");
    if (noise_level != "none") noise::level_from_name(noise_level);
}

// ---------------------------------------------------------------------------
// Data generation
// ---------------------------------------------------------------------------

NerDataset generate_ner_data(const SynthNerConfig& cfg,
                             const std::vector<noise::NoiseLevel>& levels,
                             const noise::CharConfusionTable& table, const RngState& rng,
                             const noise::CorruptOptions& opts) {
    cfg.validate();
    NerDataset data;
    data.label_names.push_back("O");
    std::map<std::string, std::pair<int, int>> slot_labels;  // key -> (B id, I id)
    for (const auto& [key, entries] : cfg.gazetteers) {
        (void)entries;
        std::string tag = tag_for(key);
        slot_labels[key] = {int(data.label_names.size()), int(data.label_names.size()) + 1};
        data.label_names.push_back("B-" + tag);
        data.label_names.push_back("I-" + tag);
    }

    auto instantiate = [&](RngState& sub) {
        const std::string& tmpl =
            cfg.templates[std::size_t(sub.next_below(cfg.templates.size()))];
        std::u32string tcps = utf8_decode(tmpl);
        NerSentence sent;
        std::size_t i = 0;
        while (i < tcps.size()) {
            if (tcps[i] == U'{') {
                std::size_t close = i + 1;
                while (close < tcps.size() && tcps[close] != U'}') ++close;
                if (close >= tcps.size()) {
                    throw std::invalid_argument("NER template has an unclosed slot: " + tmpl);
                }
                std::string key = utf8_encode(std::u32string_view(tcps).substr(i + 1, close - i - 1));
                auto git = cfg.gazetteers.find(key);
                if (git == cfg.gazetteers.end()) {
                    throw std::invalid_argument("NER template references missing gazetteer: " +
                                                key);
                }
                const std::string& entry =
                    git->second[std::size_t(sub.next_below(git->second.size()))];
                std::u32string ecps = utf8_decode(entry);
                auto [b_id, i_id] = slot_labels.at(key);
                for (std::size_t c = 0; c < ecps.size(); ++c) {
                    sent.chars.push_back(ecps[c]);
                    sent.labels.push_back(c == 0 ? b_id : i_id);
                }
                i = close + 1;
            } else {
                sent.chars.push_back(tcps[i]);
                sent.labels.push_back(0);
                ++i;
            }
        }
        return sent;
    };

    // Corrupts every letter run long enough for the corruption contract and
    // realigns labels: deleted characters drop their label position.
    auto apply_noise = [&](NerSentence& sent, const noise::NoiseLevel& level, RngState& sub) {
        NerSentence out;
        std::size_t i = 0;
        std::size_t run_index = 0;
        while (i < sent.chars.size()) {
            if (!noise::is_letter(sent.chars[i])) {
                out.chars.push_back(sent.chars[i]);
                out.labels.push_back(sent.labels[i]);
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < sent.chars.size() && noise::is_letter(sent.chars[j])) ++j;
            std::u32string word = sent.chars.substr(i, j - i);
            if (word.size() < opts.min_token_length) {
                for (std::size_t p = i; p < j; ++p) {
                    out.chars.push_back(sent.chars[p]);
                    out.labels.push_back(sent.labels[p]);
                }
            } else {
                RngState wrng = sub.split("w/" + std::to_string(run_index));
                auto res = noise::corrupt(word, level, table, wrng, opts);
                if (!res) {
                    for (std::size_t p = i; p < j; ++p) {
                        out.chars.push_back(sent.chars[p]);
                        out.labels.push_back(sent.labels[p]);
                    }
                } else {
                    std::vector<bool> deleted(word.size(), false);
                    std::vector<char32_t> repl(word.size(), 0);
                    for (const noise::Edit& e : res->edits) {
                        if (e.is_substitution) {
                            repl[e.pos] = e.replacement;
                        } else {
                            deleted[e.pos] = true;
                        }
                    }
                    for (std::size_t p = 0; p < word.size(); ++p) {
                        if (deleted[p]) continue;
                        out.chars.push_back(repl[p] ? repl[p] : word[p]);
                        out.labels.push_back(sent.labels[i + p]);
                    }
                }
            }
            ++run_index;
            i = j;
        }
        sent = std::move(out);
    };

    for (std::size_t s = 0; s < cfg.train_size; ++s) {
        RngState sub = rng.split("ner/train/" + std::to_string(s));
        data.train.push_back(instantiate(sub));
    }
    const bool noisy = cfg.noise_level != "none";
    const noise::NoiseLevel* level =
        noisy ? &noise::level_by_name(levels, noise::level_from_name(cfg.noise_level)) : nullptr;
    for (std::size_t s = 0; s < cfg.test_size; ++s) {
        RngState sub = rng.split("ner/test/" + std::to_string(s));
        NerSentence sent = instantiate(sub);
        if (noisy) {
            RngState nsub = rng.split("ner/noise/" + std::to_string(s));
            apply_noise(sent, *level, nsub);
        }
        data.test.push_back(std::move(sent));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

double micro_f1(std::span<const int> pred, std::span<const int> gold, int o_label) {
    if (pred.size() != gold.size()) {
        throw std::invalid_argument("micro_f1: length mismatch (" + std::to_string(pred.size()) +
                                    " vs " + std::to_string(gold.size()) + ")");
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool p_ent = pred[i] != o_label;
        bool g_ent = gold[i] != o_label;
        if (p_ent && g_ent && pred[i] == gold[i]) {
            ++tp;
        } else {
            if (p_ent) ++fp;
            if (g_ent) ++fn;
        }
    }
    if (tp == 0) return 0.0;
    double precision = double(tp) / double(tp + fp);
    double recall = double(tp) / double(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

double evaluate_f1(const model::ModelWeights& weights, const model::CharTokenizer& tokenizer,
                   const model::ClassifierHead& head, std::span<const NerSentence> sentences,
                   const model::AblationMask* mask) {
    std::vector<int> pred, gold;
    for (const NerSentence& sent : sentences) {
        if (sent.chars.empty()) continue;
        auto ids = tokenizer.encode(sent.chars);
        model::ForwardResult fr = model::forward(weights, ids, mask);
        Matrix probs = model::classify_tokens(fr.hidden, head);
        for (std::size_t t = 0; t < probs.rows; ++t) {
            const double* row = probs.row(t);
            int best = 0;
            for (std::size_t j = 1; j < probs.cols; ++j) {
                if (row[j] > row[best]) best = int(j);
            }
            pred.push_back(best);
            gold.push_back(sent.labels[t]);
        }
    }
    return micro_f1(pred, gold);
}

// ---------------------------------------------------------------------------
// Baseline and sweep
// ---------------------------------------------------------------------------

BaselineResult baseline_eval(const model::ModelWeights& weights,
                             const model::CharTokenizer& tokenizer, const NerDataset& data,
                             const model::HeadTrainOptions& opts, int repetitions,
                             const RngState& master) {
    if (repetitions < 1) throw std::invalid_argument("baseline_eval: repetitions must be >= 1");
    if (data.train.empty() || data.test.empty()) {
        throw std::invalid_argument("baseline_eval: empty train or test split");
    }
    std::vector<std::vector<int>> token_seqs, label_seqs;
    for (const NerSentence& sent : data.train) {
        token_seqs.push_back(tokenizer.encode(sent.chars));
        label_seqs.push_back(sent.labels);
    }
    BaselineResult res;
    RunningStats stats;
    for (int r = 0; r < repetitions; ++r) {
        RngState seed = master.split("head/" + std::to_string(r));
        model::HeadTrainResult tr =
            model::train_head(weights, token_seqs, label_seqs, data.n_labels(), opts, seed);
        double f1 = evaluate_f1(weights, tokenizer, tr.head, data.test);
        res.run_f1.push_back(f1);
        stats.add(f1);
        if (r == 0) {
            res.first_head = std::move(tr.head);
            res.first_head_loss = tr.final_loss;
        }
    }
    res.mean_f1 = stats.mean;
    res.std_f1 = stats.stddev();
    return res;
}

std::vector<int> select_neurons(const analysis::SensitivityReport& report, int layer,
                                int bin_size) {
    const analysis::LayerSensitivity* ls = nullptr;
    for (const auto& l : report.layers) {
        if (l.layer == layer) {
            ls = &l;
            break;
        }
    }
    if (ls == nullptr) {
        throw std::invalid_argument("select_neurons: layer " + std::to_string(layer) +
                                    " absent from report");
    }
    if (bin_size < 0 || std::size_t(bin_size) > ls->neurons.size()) {
        throw std::invalid_argument("select_neurons: bin size " + std::to_string(bin_size) +
                                    " exceeds layer width " + std::to_string(ls->neurons.size()));
    }
    std::vector<analysis::NeuronStat> ranked = ls->neurons;
    std::sort(ranked.begin(), ranked.end(),
              [](const analysis::NeuronStat& a, const analysis::NeuronStat& b) {
                  if (a.consistency != b.consistency) return a.consistency > b.consistency;
                  if (a.mean_diff != b.mean_diff) return a.mean_diff > b.mean_diff;
                  return a.neuron < b.neuron;
              });
    std::vector<int> out;
    out.reserve(std::size_t(bin_size));
    for (int i = 0; i < bin_size; ++i) out.push_back(ranked[std::size_t(i)].neuron);
    return out;
}

std::vector<int> select_neurons_positional(int d_mlp, int bin_size) {
    if (bin_size < 0 || bin_size > d_mlp) {
        throw std::invalid_argument("select_neurons_positional: bin size out of range");
    }
    std::vector<int> out(std::size_t(bin_size), 0);
    for (int i = 0; i < bin_size; ++i) out[std::size_t(i)] = i;
    return out;
}

std::vector<int> SweepGrid::bin_sizes() const {
    std::vector<int> out;
    for (int b = bin_start; b <= bin_stop; b += bin_step) out.push_back(b);
    return out;
}

std::vector<int> SweepGrid::layer_list(int n_layers) const {
    if (!layers.empty()) return layers;
    std::vector<int> out(std::size_t(n_layers), 0);
    for (int l = 0; l < n_layers; ++l) out[std::size_t(l)] = l;
    return out;
}

void SweepGrid::validate(int n_layers, int d_mlp) const {
    if (bin_start < 1 || bin_step < 1 || bin_stop < bin_start) {
        throw std::invalid_argument("SweepGrid: invalid bin progression");
    }
    if (bin_stop > d_mlp) {
        throw std::invalid_argument("SweepGrid: bin stop " + std::to_string(bin_stop) +
                                    " exceeds d_mlp " + std::to_string(d_mlp));
    }
    for (int l : layers) {
        if (l < 0 || l >= n_layers) {
            throw std::invalid_argument("SweepGrid: layer " + std::to_string(l) +
                                        " out of range");
        }
    }
    if (alphas.empty()) throw std::invalid_argument("SweepGrid: no alphas");
    for (double a : alphas) {
        if (!(a > 0.0 && a <= 1.0)) {
            throw std::invalid_argument("SweepGrid: alpha must lie in (0, 1]");
        }
    }
}

double improvement_percent(double f1_neutralised, double f1_baseline) {
    return (f1_neutralised - f1_baseline) / f1_baseline * 100.0;
}

std::vector<ImprovementCell> run_sweep(const model::ModelWeights& weights,
                                       const model::CharTokenizer& tokenizer,
                                       const model::ClassifierHead& head,
                                       std::span<const NerSentence> test, const SweepGrid& grid,
                                       const analysis::SensitivityReport* report, int workers) {
    grid.validate(weights.config.n_layers, weights.config.d_mlp);
    if (test.empty()) throw std::invalid_argument("run_sweep: empty test split");

    const double f1_baseline = evaluate_f1(weights, tokenizer, head, test);

    struct CellSpec {
        int layer;  // -1 = every grid layer at once
        int bin;
        double alpha;
    };
    const std::vector<int> grid_layers = grid.layer_list(weights.config.n_layers);
    std::vector<CellSpec> specs;
    if (grid.multi_layer) {
        for (int bin : grid.bin_sizes()) {
            for (double alpha : grid.alphas) specs.push_back({-1, bin, alpha});
        }
    } else {
        for (int layer : grid_layers) {
            for (int bin : grid.bin_sizes()) {
                for (double alpha : grid.alphas) specs.push_back({layer, bin, alpha});
            }
        }
    }

    std::vector<ImprovementCell> cells(specs.size());
    parallel_chunks(specs.size(), 4, workers, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const CellSpec& sp = specs[i];
            model::AblationMask mask(weights.config.n_layers, weights.config.d_mlp);
            auto neutralize_layer = [&](int layer) {
                std::vector<int> chosen =
                    report ? select_neurons(*report, layer, sp.bin)
                           : select_neurons_positional(weights.config.d_mlp, sp.bin);
                mask.neutralize(layer, chosen, sp.alpha);
            };
            if (sp.layer < 0) {
                for (int layer : grid_layers) neutralize_layer(layer);
            } else {
                neutralize_layer(sp.layer);
            }
            double f1 = evaluate_f1(weights, tokenizer, head, test, &mask);
            cells[i] = {sp.layer, sp.bin, sp.alpha, f1, f1_baseline,
                        improvement_percent(f1, f1_baseline)};
        }
    });
    return cells;
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

std::string heatmap_csv(std::span<const ImprovementCell> cells, double alpha) {
    std::set<int> layer_set, bin_set;
    std::map<std::pair<int, int>, double> grid;  // (bin, layer) -> improvement
    for (const auto& c : cells) {
        if (c.alpha != alpha) continue;
        layer_set.insert(c.layer);
        bin_set.insert(c.bin_size);
        grid[{c.bin_size, c.layer}] = c.improvement_percent;
    }
    if (grid.empty()) {
        throw std::invalid_argument("heatmap_csv: no cells for alpha " + fmt6(alpha));
    }
    std::string missing;
    for (int bin : bin_set) {
        for (int layer : layer_set) {
            if (!grid.count({bin, layer})) {
                missing += " (layer=" + std::to_string(layer) + ",bin=" + std::to_string(bin) + ")";
            }
        }
    }
    if (!missing.empty()) {
        throw std::invalid_argument("heatmap_csv: incomplete grid for alpha " + fmt6(alpha) +
                                    ": missing" + missing);
    }
    std::string out = "bin_size";
    for (int layer : layer_set) out += "," + std::to_string(layer);
    out += '\n';
    for (int bin : bin_set) {
        out += std::to_string(bin);
        for (int layer : layer_set) out += "," + fmt6(grid.at({bin, layer}));
        out += '\n';
    }
    return out;
}

std::string cells_to_jsonl(std::span<const ImprovementCell> cells) {
    std::string out;
    for (const auto& c : cells) {
        nlohmann::ordered_json j;
        j["layer"] = c.layer;
        j["bin_size"] = c.bin_size;
        j["alpha"] = c.alpha;
        j["f1_neutralised"] = c.f1_neutralised;
        j["f1_baseline"] = c.f1_baseline;
        j["improvement_percent"] = c.improvement_percent;
        out += j.dump() + '\n';
    }
    return out;
}

std::vector<ImprovementCell> cells_from_jsonl(const std::string& text) {
    std::vector<ImprovementCell> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back({j.at("layer").get<int>(), j.at("bin_size").get<int>(),
                       j.at("alpha").get<double>(), j.at("f1_neutralised").get<double>(),
                       j.at("f1_baseline").get<double>(),
                       j.at("improvement_percent").get<double>()});
    }
    return out;
}

}  // namespace ocrsn::sweep
