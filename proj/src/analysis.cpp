#include "ocrsn/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "ocrsn/parallel.hpp"

namespace ocrsn::analysis {

namespace {

constexpr double kZeroNorm = 1e-30;

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

std::vector<double> column_means(const Matrix& m) {
    std::vector<double> mu(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c) mu[c] += row[c];
    }
    for (double& v : mu) v /= double(m.rows);
    return mu;
}

// Interpolated quantile (type 7) over a sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) return std::nan("");
    if (sorted.size() == 1) return sorted[0];
    double h = p * double(sorted.size() - 1);
    std::size_t lo = std::size_t(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = h - double(lo);
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace

CkaValue linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows != y.rows) {
        throw std::invalid_argument("linear_cka: row-count mismatch " + x.shape_str() + " vs " +
                                    y.shape_str());
    }
    if (x.rows < 2) throw std::invalid_argument("linear_cka: need at least 2 rows");

    const std::size_t n = x.rows;
    std::vector<double> mx = column_means(x);
    std::vector<double> my = column_means(y);

    auto centered = [](const Matrix& m, const std::vector<double>& mu, std::size_t i,
                       std::size_t c) { return m.at(i, c) - mu[c]; };

    // cross = ||Yc^T Xc||_F^2; the denominators are ||Xc^T Xc||_F, ||Yc^T Yc||_F.
    double cross = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) {
        for (std::size_t k = 0; k < x.cols; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += centered(y, my, i, j) * centered(x, mx, i, k);
            }
            cross += acc * acc;
        }
    }
    auto self_norm = [&](const Matrix& m, const std::vector<double>& mu) {
        double total = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) {
            for (std::size_t k = 0; k < m.cols; ++k) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += centered(m, mu, i, j) * centered(m, mu, i, k);
                }
                total += acc * acc;
            }
        }
        return std::sqrt(total);
    };
    double xn = self_norm(x, mx);
    double yn = self_norm(y, my);
    if (xn < kZeroNorm || yn < kZeroNorm) return {0.0, false};
    return {clamp01(cross / (xn * yn)), true};
}

CkaValue token_pair_cka(const model::ActivationTrace& correct,
                        const model::ActivationTrace& altered, int layer) {
    const Matrix& mc = correct.layer(layer);
    const Matrix& ma = altered.layer(layer);
    if (mc.cols != ma.cols) {
        throw std::invalid_argument("token_pair_cka: traces disagree on d_mlp");
    }
    std::vector<double> u = column_means(mc);
    std::vector<double> v = column_means(ma);

    double mu = 0.0, mv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        mu += u[i];
        mv += v[i];
    }
    mu /= double(u.size());
    mv /= double(v.size());
    double suu = 0.0, svv = 0.0, suv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        double du = u[i] - mu, dv = v[i] - mv;
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
    }
    if (suu < kZeroNorm || svv < kZeroNorm) return {0.0, false};
    return {clamp01((suv * suv) / (suu * svv)), true};
}

// ---------------------------------------------------------------------------
// Layer profile
// ---------------------------------------------------------------------------

LayerCkaProfile profile_layers(const model::ModelWeights& weights,
                               const model::CharTokenizer& tokenizer,
                               std::span<const noise::TokenPairRecord> dataset, int workers,
                               std::vector<PairCka>* pair_values) {
    if (dataset.empty()) throw std::invalid_argument("profile_layers: empty dataset");
    const int L = weights.config.n_layers;
    std::set<int> capture;
    for (int l = 0; l < L; ++l) capture.insert(l);

    struct CellAcc {
        std::vector<double> values;  // defined CKA values, pair order
        std::size_t n_pairs = 0;
        std::size_t n_undefined = 0;
    };
    const std::size_t n_levels = std::size(noise::kAllLevels);
    const std::size_t n_cells = std::size_t(L) * n_levels;
    const std::size_t chunk = 64;
    const std::size_t n_chunks = (dataset.size() + chunk - 1) / chunk;
    std::vector<std::vector<CellAcc>> partials(n_chunks, std::vector<CellAcc>(n_cells));
    std::vector<std::vector<PairCka>> pair_partials(pair_values ? n_chunks : 0);

    parallel_chunks(dataset.size(), chunk, workers,
                    [&](std::size_t ci, std::size_t b, std::size_t e) {
                        auto& local = partials[ci];
                        for (std::size_t i = b; i < e; ++i) {
                            const auto& rec = dataset[i];
                            auto ids_c = tokenizer.encode(rec.correct);
                            model::ForwardResult fc =
                                model::forward(weights, ids_c, nullptr, capture);
                            for (std::size_t li = 0; li < n_levels; ++li) {
                                const auto& variant = rec.variant(noise::kAllLevels[li]);
                                if (!variant) continue;
                                auto ids_a = tokenizer.encode(variant->text);
                                model::ForwardResult fa =
                                    model::forward(weights, ids_a, nullptr, capture);
                                for (int l = 0; l < L; ++l) {
                                    CellAcc& cell = local[std::size_t(l) * n_levels + li];
                                    cell.n_pairs++;
                                    CkaValue v = token_pair_cka(fc.trace, fa.trace, l);
                                    if (v.defined) {
                                        cell.values.push_back(v.value);
                                    } else {
                                        cell.n_undefined++;
                                    }
                                    if (pair_values) {
                                        pair_partials[ci].push_back(
                                            {i, l, noise::kAllLevels[li], v.defined, v.value});
                                    }
                                }
                            }
                        }
                    });

    std::vector<CellAcc> merged(n_cells);
    for (std::size_t ci = 0; ci < n_chunks; ++ci) {
        for (std::size_t c = 0; c < n_cells; ++c) {
            auto& dst = merged[c];
            auto& src = partials[ci][c];
            dst.n_pairs += src.n_pairs;
            dst.n_undefined += src.n_undefined;
            dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
        }
    }
    if (pair_values) {
        pair_values->clear();
        for (auto& part : pair_partials) {
            pair_values->insert(pair_values->end(), part.begin(), part.end());
        }
    }

    LayerCkaProfile profile;
    for (int l = 0; l < L; ++l) {
        for (std::size_t li = 0; li < n_levels; ++li) {
            CellAcc& acc = merged[std::size_t(l) * n_levels + li];
            ProfileCell cell;
            cell.layer = l;
            cell.level = noise::kAllLevels[li];
            cell.n_pairs = acc.n_pairs;
            cell.n_undefined = acc.n_undefined;
            if (!acc.values.empty()) {
                double sum = 0.0;
                for (double v : acc.values) sum += v;
                cell.mean = sum / double(acc.values.size());
                std::sort(acc.values.begin(), acc.values.end());
                cell.median = quantile_sorted(acc.values, 0.5);
                cell.q10 = quantile_sorted(acc.values, 0.1);
                cell.q90 = quantile_sorted(acc.values, 0.9);
            } else {
                cell.mean = cell.median = cell.q10 = cell.q90 = std::nan("");
            }
            profile.cells.push_back(cell);
        }
    }
    return profile;
}

// ---------------------------------------------------------------------------
// Neuron statistics
// ---------------------------------------------------------------------------

std::vector<double> neuron_pair_diff(const model::ActivationTrace& correct,
                                     const model::ActivationTrace& altered, int layer,
                                     bool activated_only) {
    const Matrix& mc = correct.layer(layer);
    const Matrix& ma = altered.layer(layer);
    if (mc.cols != ma.cols) {
        throw std::invalid_argument("neuron_pair_diff: traces disagree on d_mlp");
    }
    auto means = [activated_only](const Matrix& m) {
        if (!activated_only) return column_means(m);
        std::vector<double> mu(m.cols, 0.0);
        std::vector<std::size_t> cnt(m.cols, 0);
        for (std::size_t r = 0; r < m.rows; ++r) {
            const double* row = m.row(r);
            for (std::size_t c = 0; c < m.cols; ++c) {
                if (row[c] > 0.0) {
                    mu[c] += row[c];
                    cnt[c]++;
                }
            }
        }
        for (std::size_t c = 0; c < m.cols; ++c) mu[c] = cnt[c] ? mu[c] / double(cnt[c]) : 0.0;
        return mu;
    };
    std::vector<double> uc = means(mc);
    std::vector<double> ua = means(ma);
    std::vector<double> diff(uc.size());
    for (std::size_t i = 0; i < uc.size(); ++i) diff[i] = std::fabs(uc[i] - ua[i]);
    return diff;
}

std::vector<int> significant_neurons(std::span<const double> diff, bool leave_one_out) {
    const std::size_t n = diff.size();
    if (n < 2) throw std::invalid_argument("significant_neurons: need at least 2 neurons");
    double s1 = 0.0, s2 = 0.0;
    for (double d : diff) {
        s1 += d;
        s2 += d * d;
    }
    std::vector<int> out;
    if (!leave_one_out) {
        double mu = s1 / double(n);
        double var = s2 / double(n) - mu * mu;
        double sd = std::sqrt(var < 0.0 ? 0.0 : var);
        for (std::size_t i = 0; i < n; ++i) {
            if (diff[i] > mu + sd) out.push_back(int(i));
        }
        return out;
    }
    const double m = double(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = (s1 - diff[i]) / m;
        double ex2 = (s2 - diff[i] * diff[i]) / m;
        double var = ex2 - mu * mu;
        double sd = std::sqrt(var < 0.0 ? 0.0 : var);
        if (diff[i] > mu + sd) out.push_back(int(i));
    }
    return out;
}

SensitivityAccumulator::SensitivityAccumulator(int n_layers, int d_mlp, SensitivityOptions opts)
    : opts_(opts), n_layers_(n_layers), d_mlp_(d_mlp),
      hits_(std::size_t(n_layers), std::vector<std::int64_t>(std::size_t(d_mlp), 0)),
      diff_sum_(std::size_t(n_layers), std::vector<double>(std::size_t(d_mlp), 0.0)),
      correct_(std::size_t(n_layers), std::vector<RunningStats>(std::size_t(d_mlp))),
      altered_(std::size_t(n_layers), std::vector<RunningStats>(std::size_t(d_mlp))) {
    if (n_layers < 1 || d_mlp < 2) {
        throw std::invalid_argument("SensitivityAccumulator: bad dimensions");
    }
}

void SensitivityAccumulator::add_pair(const model::ActivationTrace& correct,
                                      const model::ActivationTrace& altered) {
    for (int l = 0; l < n_layers_; ++l) {
        std::vector<double> diff = neuron_pair_diff(correct, altered, l, opts_.activated_only);
        if (int(diff.size()) != d_mlp_) {
            throw std::invalid_argument("SensitivityAccumulator: trace width mismatch");
        }
        auto& sums = diff_sum_[std::size_t(l)];
        for (int j = 0; j < d_mlp_; ++j) sums[std::size_t(j)] += diff[std::size_t(j)];
        for (int j : significant_neurons(diff, opts_.leave_one_out)) {
            hits_[std::size_t(l)][std::size_t(j)]++;
        }
        auto stream = [this, l](const Matrix& m, std::vector<std::vector<RunningStats>>& side) {
            auto& row_stats = side[std::size_t(l)];
            for (std::size_t r = 0; r < m.rows; ++r) {
                const double* row = m.row(r);
                for (int j = 0; j < d_mlp_; ++j) row_stats[std::size_t(j)].add(row[j]);
            }
        };
        stream(correct.layer(l), correct_);
        stream(altered.layer(l), altered_);
    }
    ++n_pairs_;
}

void SensitivityAccumulator::merge(const SensitivityAccumulator& o) {
    if (o.n_pairs_ == 0) return;
    if (n_layers_ != o.n_layers_ || d_mlp_ != o.d_mlp_) {
        throw std::invalid_argument("SensitivityAccumulator::merge: dimension mismatch");
    }
    for (int l = 0; l < n_layers_; ++l) {
        for (int j = 0; j < d_mlp_; ++j) {
            hits_[std::size_t(l)][std::size_t(j)] += o.hits_[std::size_t(l)][std::size_t(j)];
            diff_sum_[std::size_t(l)][std::size_t(j)] +=
                o.diff_sum_[std::size_t(l)][std::size_t(j)];
            correct_[std::size_t(l)][std::size_t(j)].merge(o.correct_[std::size_t(l)][std::size_t(j)]);
            altered_[std::size_t(l)][std::size_t(j)].merge(o.altered_[std::size_t(l)][std::size_t(j)]);
        }
    }
    n_pairs_ += o.n_pairs_;
}

const RunningStats& SensitivityAccumulator::correct_activation_stats(int layer,
                                                                     int neuron) const {
    return correct_.at(std::size_t(layer)).at(std::size_t(neuron));
}

const RunningStats& SensitivityAccumulator::altered_activation_stats(int layer,
                                                                     int neuron) const {
    return altered_.at(std::size_t(layer)).at(std::size_t(neuron));
}

SensitivityReport SensitivityAccumulator::finalize(noise::Level level) const {
    SensitivityReport rep;
    rep.level = level;
    rep.threshold = opts_.threshold;
    rep.n_pairs = n_pairs_;
    for (int l = 0; l < n_layers_; ++l) {
        LayerSensitivity ls;
        ls.layer = l;
        for (int j = 0; j < d_mlp_; ++j) {
            NeuronStat st;
            st.neuron = j;
            st.consistency =
                n_pairs_ ? double(hits_[std::size_t(l)][std::size_t(j)]) / double(n_pairs_) : 0.0;
            st.mean_diff =
                n_pairs_ ? diff_sum_[std::size_t(l)][std::size_t(j)] / double(n_pairs_) : 0.0;
            if (st.consistency > opts_.threshold) ls.sensitive.push_back(j);
            ls.neurons.push_back(st);
        }
        rep.layers.push_back(std::move(ls));
    }
    return rep;
}

SensitivityReport sensitivity_report(const model::ModelWeights& weights,
                                     const model::CharTokenizer& tokenizer,
                                     std::span<const noise::TokenPairRecord> dataset,
                                     noise::Level level, const SensitivityOptions& opts,
                                     int workers) {
    if (dataset.empty()) throw std::invalid_argument("sensitivity_report: empty dataset");
    const int L = weights.config.n_layers;
    std::set<int> capture;
    for (int l = 0; l < L; ++l) capture.insert(l);

    const std::size_t chunk = 64;
    const std::size_t n_chunks = (dataset.size() + chunk - 1) / chunk;
    std::vector<SensitivityAccumulator> partials;
    partials.reserve(n_chunks);
    for (std::size_t i = 0; i < n_chunks; ++i) {
        partials.emplace_back(L, weights.config.d_mlp, opts);
    }

    parallel_chunks(dataset.size(), chunk, workers,
                    [&](std::size_t ci, std::size_t b, std::size_t e) {
                        for (std::size_t i = b; i < e; ++i) {
                            const auto& rec = dataset[i];
                            const auto& variant = rec.variant(level);
                            if (!variant) continue;
                            auto fc = model::forward(weights, tokenizer.encode(rec.correct),
                                                     nullptr, capture);
                            auto fa = model::forward(weights, tokenizer.encode(variant->text),
                                                     nullptr, capture);
                            partials[ci].add_pair(fc.trace, fa.trace);
                        }
                    });

    SensitivityAccumulator total(L, weights.config.d_mlp, opts);
    for (const auto& p : partials) total.merge(p);
    return total.finalize(level);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string profile_to_csv(const LayerCkaProfile& profile) {
    std::string out = "layer,level,mean,median,q10,q90,n_pairs,n_undefined\n";
    for (const auto& c : profile.cells) {
        out += std::to_string(c.layer);
        out += ',';
        out += noise::level_name(c.level);
        out += ',';
        out += fmt_double(c.mean) + ',' + fmt_double(c.median) + ',' + fmt_double(c.q10) + ',' +
               fmt_double(c.q90) + ',';
        out += std::to_string(c.n_pairs) + ',' + std::to_string(c.n_undefined) + '\n';
    }
    return out;
}

std::string pair_values_to_csv(std::span<const PairCka> pairs) {
    std::string out = "record,layer,level,cka\n";
    for (const auto& p : pairs) {
        out += std::to_string(p.record);
        out += ',';
        out += std::to_string(p.layer);
        out += ',';
        out += noise::level_name(p.level);
        out += ',';
        if (p.defined) out += fmt_double(p.value);
        out += '\n';
    }
    return out;
}

std::string report_to_json(const SensitivityReport& report, const std::string& config_hash) {
    nlohmann::ordered_json j;
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    j["level"] = noise::level_name(report.level);
    j["threshold"] = report.threshold;
    j["n_pairs"] = report.n_pairs;
    j["layers"] = nlohmann::ordered_json::array();
    for (const auto& ls : report.layers) {
        nlohmann::ordered_json jl;
        jl["layer"] = ls.layer;
        jl["sensitive_count"] = ls.sensitive.size();
        jl["sensitive"] = ls.sensitive;
        jl["neurons"] = nlohmann::ordered_json::array();
        for (const auto& st : ls.neurons) {
            jl["neurons"].push_back({{"neuron", st.neuron},
                                     {"consistency", st.consistency},
                                     {"mean_diff", st.mean_diff}});
        }
        j["layers"].push_back(std::move(jl));
    }
    return j.dump(2) + "\n";
}

SensitivityReport report_from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read sensitivity report: " + path);
    nlohmann::json j;
    in >> j;
    SensitivityReport rep;
    rep.level = noise::level_from_name(j.at("level").get<std::string>());
    rep.threshold = j.at("threshold").get<double>();
    rep.n_pairs = j.at("n_pairs").get<std::size_t>();
    for (const auto& jl : j.at("layers")) {
        LayerSensitivity ls;
        ls.layer = jl.at("layer").get<int>();
        ls.sensitive = jl.at("sensitive").get<std::vector<int>>();
        for (const auto& jn : jl.at("neurons")) {
            ls.neurons.push_back({jn.at("neuron").get<int>(),
                                  jn.at("consistency").get<double>(),
                                  jn.at("mean_diff").get<double>()});
        }
        rep.layers.push_back(std::move(ls));
    }
    return rep;
}

std::string sensitive_counts_csv(std::span<const SensitivityReport> reports) {
    std::string out = "layer,level,sensitive_count\n";
    for (const auto& rep : reports) {
        for (const auto& ls : rep.layers) {
            out += std::to_string(ls.layer);
            out += ',';
            out += noise::level_name(rep.level);
            out += ',';
            out += std::to_string(ls.sensitive.size()) + '\n';
        }
    }
    return out;
}

}  // namespace ocrsn::analysis
