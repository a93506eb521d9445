#include <doctest.h>

#include <stdexcept>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "ocrsn/analysis.hpp"
#include "ocrsn/model.hpp"
#include "ocrsn/noise.hpp"
#include "ocrsn/running_stats.hpp"
#include "ocrsn/utf8.hpp"

using namespace ocrsn;
using namespace ocrsn::analysis;

TEST_SUITE_BEGIN("analysis");

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, RngState& rng) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.next_gaussian();
    return m;
}

// Gram-Schmidt orthonormalization of a random square matrix.
Matrix random_orthogonal(std::size_t n, RngState& rng) {
    Matrix q = random_matrix(n, n, rng);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (std::size_t r = 0; r < n; ++r) dot += q.at(r, c) * q.at(r, p);
            for (std::size_t r = 0; r < n; ++r) q.at(r, c) -= dot * q.at(r, p);
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < n; ++r) norm += q.at(r, c) * q.at(r, c);
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < n; ++r) q.at(r, c) /= norm;
    }
    return q;
}

Matrix matprod(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            for (std::size_t j = 0; j < b.cols; ++j) {
                out.at(i, j) += a.at(i, k) * b.at(k, j);
            }
        }
    }
    return out;
}

// Independent oracle in the Gram-matrix route:
// CKA = HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L)) with K = X X^T, L = Y Y^T
// and HSIC(K, L) = tr(K H L H) / (n - 1)^2, H = I - 11^T / n.
double hsic_cka_oracle(const Matrix& x, const Matrix& y) {
    const std::size_t n = x.rows;
    auto gram = [n](const Matrix& m) {
        Matrix g(n, n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < m.cols; ++c) acc += m.at(i, c) * m.at(j, c);
                g.at(i, j) = acc;
            }
        }
        return g;
    };
    Matrix h(n, n, -1.0 / double(n));
    for (std::size_t i = 0; i < n; ++i) h.at(i, i) += 1.0;
    auto hsic = [&](const Matrix& k, const Matrix& l) {
        Matrix khlh = matprod(matprod(k, h), matprod(l, h));
        double tr = 0.0;
        for (std::size_t i = 0; i < n; ++i) tr += khlh.at(i, i);
        return tr / double((n - 1) * (n - 1));
    };
    Matrix kx = gram(x), ly = gram(y);
    return hsic(kx, ly) / std::sqrt(hsic(kx, kx) * hsic(ly, ly));
}

model::ActivationTrace trace_of(int layer, Matrix m) {
    model::ActivationTrace t;
    t.layers.emplace(layer, std::move(m));
    return t;
}

}  // namespace

TEST_CASE("linear_cka self similarity is 1") {
    RngState rng(1);
    Matrix x = random_matrix(10, 4, rng);
    CkaValue v = linear_cka(x, x);
    REQUIRE(v.defined);
    CHECK(v.value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("linear_cka orthogonal/scaling invariance and oracle agreement") {
    RngState rng(2);
    for (int it = 0; it < 100; ++it) {
        Matrix x = random_matrix(20, 8, rng);
        Matrix q = random_orthogonal(8, rng);
        double c = 0.0;
        while (std::fabs(c) < 0.1) c = rng.next_gaussian() * 2.0;
        Matrix y = matprod(x, q);
        for (double& v : y.data) v *= c;

        CkaValue inv = linear_cka(x, y);
        REQUIRE(inv.defined);
        CHECK(std::fabs(inv.value - 1.0) < 1e-10);

        Matrix z = random_matrix(20, 5, rng);
        CkaValue a = linear_cka(x, z);
        CkaValue b = linear_cka(z, x);
        REQUIRE(a.defined);
        REQUIRE(b.defined);
        CHECK(std::fabs(a.value - b.value) < 1e-12);
        CHECK(a.value >= 0.0);
        CHECK(a.value <= 1.0);
        CHECK(std::fabs(a.value - hsic_cka_oracle(x, z)) < 1e-10);
    }
}

TEST_CASE("linear_cka rejections and undefined cases") {
    Matrix x(4, 3), y(5, 3);
    CHECK_THROWS_AS(linear_cka(x, y), std::invalid_argument);
    Matrix one_row(1, 3);
    CHECK_THROWS_AS(linear_cka(one_row, one_row), std::invalid_argument);

    Matrix constant(6, 2, 3.14);  // zero centered norm
    RngState rng(3);
    Matrix ok = random_matrix(6, 2, rng);
    CkaValue u = linear_cka(constant, ok);
    CHECK(!u.defined);
}

TEST_CASE("token_pair_cka identity, affine relation, hand value") {
    Matrix a(2, 4);
    a.data = {1, 2, 3, 4, 1, 2, 3, 4};
    auto ta = trace_of(0, a);
    CkaValue self = token_pair_cka(ta, ta, 0);
    REQUIRE(self.defined);
    CHECK(self.value == doctest::Approx(1.0).epsilon(1e-12));

    // v = 2u + 3 pooled over a single row
    Matrix u(1, 4), v(1, 4);
    u.data = {1, 2, 3, 4};
    v.data = {5, 7, 9, 11};
    CkaValue affine = token_pair_cka(trace_of(0, u), trace_of(0, v), 0);
    REQUIRE(affine.defined);
    CHECK(affine.value == doctest::Approx(1.0).epsilon(1e-12));

    // hand Pearson oracle for u = [1,2,3,4], v = [1,2,3,8]:
    // cov = 2.75, var_u = 1.25, var_v = 7.25 -> corr^2 = 121/145
    Matrix w(1, 4);
    w.data = {1, 2, 3, 8};
    CkaValue hand = token_pair_cka(trace_of(0, u), trace_of(0, w), 0);
    REQUIRE(hand.defined);
    CHECK(hand.value == doctest::Approx(121.0 / 145.0).epsilon(1e-12));

    Matrix constant(1, 4, 2.0);
    CkaValue undef = token_pair_cka(trace_of(0, constant), trace_of(0, u), 0);
    CHECK(!undef.defined);

    CHECK_THROWS_AS(token_pair_cka(ta, trace_of(1, u), 0), std::invalid_argument);
}

TEST_CASE("token_pair_cka equals linear_cka on pooled columns") {
    RngState rng(4);
    for (int it = 0; it < 20; ++it) {
        Matrix mc = random_matrix(3, 7, rng);
        Matrix ma = random_matrix(5, 7, rng);
        CkaValue direct = token_pair_cka(trace_of(2, mc), trace_of(2, ma), 2);

        // pooled vectors arranged as d_mlp x 1 representations
        Matrix u(7, 1), v(7, 1);
        for (std::size_t c = 0; c < 7; ++c) {
            double su = 0.0, sv = 0.0;
            for (std::size_t r = 0; r < mc.rows; ++r) su += mc.at(r, c);
            for (std::size_t r = 0; r < ma.rows; ++r) sv += ma.at(r, c);
            u.at(c, 0) = su / double(mc.rows);
            v.at(c, 0) = sv / double(ma.rows);
        }
        CkaValue via_general = linear_cka(u, v);
        REQUIRE(direct.defined == via_general.defined);
        if (direct.defined) CHECK(std::fabs(direct.value - via_general.value) < 1e-12);
    }
}

TEST_CASE("neuron_pair_diff hand example and symmetry") {
    Matrix c(2, 2);
    c.data = {1, 0, 3, 0};
    Matrix a(1, 2);
    a.data = {2, 5};
    auto diff = neuron_pair_diff(trace_of(0, c), trace_of(0, a), 0);
    CHECK(diff[0] == 0.0);
    CHECK(diff[1] == 5.0);
    auto rev = neuron_pair_diff(trace_of(0, a), trace_of(0, c), 0);
    CHECK(diff == rev);

    auto zero = neuron_pair_diff(trace_of(0, c), trace_of(0, c), 0);
    for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("neuron_pair_diff activated-only filter") {
    Matrix c(2, 2);
    c.data = {2.0, -1.0, 4.0, -3.0};
    Matrix a(2, 2);
    a.data = {1.0, -1.0, 1.0, -1.0};
    // full means: c = [3, -2], a = [1, -1] -> diff = [2, 1]
    auto full = neuron_pair_diff(trace_of(0, c), trace_of(0, a), 0, false);
    CHECK(full[0] == doctest::Approx(2.0));
    CHECK(full[1] == doctest::Approx(1.0));
    // activated-only: neuron 1 never fires -> mean 0 on both sides
    auto act = neuron_pair_diff(trace_of(0, c), trace_of(0, a), 0, true);
    CHECK(act[0] == doctest::Approx(2.0));
    CHECK(act[1] == 0.0);
}

TEST_CASE("significant_neurons hand cases") {
    std::vector<double> constant(6, 1.5);
    CHECK(significant_neurons(constant).empty());

    std::vector<double> planted{0, 0, 0, 0, 10};
    auto sig = significant_neurons(planted);
    REQUIRE(sig.size() == 1);
    CHECK(sig[0] == 4);

    // idempotence: recomputing yields the same set
    CHECK(significant_neurons(planted) == sig);

    std::vector<double> one{1.0};
    CHECK_THROWS_AS(significant_neurons(one), std::invalid_argument);
}

TEST_CASE("significant_neurons leave-one-out differs from all-inclusive when it should") {
    // With all-inclusive statistics the outlier inflates its own threshold.
    std::vector<double> diff{0, 0, 0, 0, 0, 0, 0, 0, 2.0, 2.1};
    auto loo = significant_neurons(diff, true);
    auto all = significant_neurons(diff, false);
    CHECK(loo.size() >= all.size());
    CHECK(std::find(loo.begin(), loo.end(), 9) != loo.end());
}

TEST_CASE("sensitivity accumulator merge order independence of totals") {
    RngState rng(5);
    SensitivityOptions opts;
    SensitivityAccumulator whole(2, 6, opts);
    SensitivityAccumulator a(2, 6, opts), b(2, 6, opts);
    for (int i = 0; i < 40; ++i) {
        Matrix mc = random_matrix(3, 6, rng);
        Matrix ma = random_matrix(3, 6, rng);
        model::ActivationTrace tc, ta;
        tc.layers.emplace(0, mc);
        tc.layers.emplace(1, ma);
        ta.layers.emplace(0, ma);
        ta.layers.emplace(1, mc);
        whole.add_pair(tc, ta);
        (i < 17 ? a : b).add_pair(tc, ta);
    }
    a.merge(b);
    auto ra = a.finalize(noise::Level::low);
    auto rw = whole.finalize(noise::Level::low);
    REQUIRE(ra.layers.size() == rw.layers.size());
    for (std::size_t l = 0; l < ra.layers.size(); ++l) {
        for (std::size_t n = 0; n < ra.layers[l].neurons.size(); ++n) {
            CHECK(ra.layers[l].neurons[n].consistency == rw.layers[l].neurons[n].consistency);
            CHECK(ra.layers[l].neurons[n].mean_diff ==
                  doctest::Approx(rw.layers[l].neurons[n].mean_diff).epsilon(1e-15));
        }
    }
}

TEST_CASE("sensitivity report thresholds nest and single pair is 0/1") {
    RngState rng(6);
    SensitivityAccumulator acc(1, 8, {});
    Matrix mc = random_matrix(2, 8, rng);
    Matrix ma = random_matrix(2, 8, rng);
    acc.add_pair(trace_of(0, mc), trace_of(0, ma));
    auto rep = acc.finalize(noise::Level::high);
    CHECK(rep.n_pairs == 1);
    for (const auto& st : rep.layers[0].neurons) {
        CHECK((st.consistency == 0.0 || st.consistency == 1.0));
    }

    SensitivityOptions strict;
    strict.threshold = 1.0;
    SensitivityOptions loose;
    loose.threshold = 0.9;
    SensitivityAccumulator s(1, 8, strict), l(1, 8, loose);
    for (int i = 0; i < 30; ++i) {
        Matrix c2 = random_matrix(2, 8, rng);
        Matrix a2 = random_matrix(2, 8, rng);
        s.add_pair(trace_of(0, c2), trace_of(0, a2));
        l.add_pair(trace_of(0, c2), trace_of(0, a2));
    }
    auto rs = s.finalize(noise::Level::low);
    auto rl = l.finalize(noise::Level::low);
    for (int n : rs.layers[0].sensitive) {
        CHECK(std::find(rl.layers[0].sensitive.begin(), rl.layers[0].sensitive.end(), n) !=
              rl.layers[0].sensitive.end());
    }
}

TEST_CASE("planted neuron is flagged with high consistency and few false positives") {
    // Toy pipeline: traces from a seeded model, a constant shift injected
    // into one neuron of the altered traces only.
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_mlp = 40;
    cfg.n_heads = 2;
    cfg.vocab_size = 30;
    cfg.max_seq = 24;
    cfg.seed = 1234;
    model::ModelWeights w = model::init_model(cfg);
    model::CharTokenizer tok(utf8_decode("abcdefghijklmnopqrstuvwxyz01"));

    const int layer = 1;
    const int planted = 13;
    RngState rng(777);
    auto levels = noise::default_levels();
    auto table = noise::CharConfusionTable::defaults();
    std::set<int> capture{0, 1};

    // layer activation scale, for the shift magnitude
    RunningStats scale;
    std::vector<std::pair<model::ActivationTrace, model::ActivationTrace>> pairs;
    for (int i = 0; i < 150; ++i) {
        std::string tokstr;
        auto len = 6 + rng.next_below(5);
        for (std::size_t c = 0; c < len; ++c) tokstr.push_back(char('a' + rng.next_below(26)));
        RngState sub = rng.split("p/" + std::to_string(i));
        auto res = noise::corrupt(tokstr, noise::level_by_name(levels, noise::Level::average),
                                  table, sub);
        if (!res) continue;
        auto fc = model::forward(w, tok.encode(tokstr), nullptr, capture);
        auto fa = model::forward(w, tok.encode(res->variant.text), nullptr, capture);
        for (double v : fc.trace.layer(layer).data) scale.add(v);
        pairs.emplace_back(std::move(fc.trace), std::move(fa.trace));
    }
    REQUIRE(pairs.size() > 100);
    double delta = 10.0 * scale.stddev();

    SensitivityAccumulator acc(cfg.n_layers, cfg.d_mlp, {});
    for (auto& [tc, ta] : pairs) {
        Matrix bumped = ta.layer(layer);
        for (std::size_t r = 0; r < bumped.rows; ++r) {
            bumped.at(r, std::size_t(planted)) += delta;
        }
        model::ActivationTrace ta2;
        ta2.layers.emplace(0, ta.layer(0));
        ta2.layers.emplace(1, std::move(bumped));
        acc.add_pair(tc, ta2);
    }
    auto rep = acc.finalize(noise::Level::average);
    const auto& ls = rep.layers[std::size_t(layer)];
    CHECK(ls.neurons[std::size_t(planted)].consistency >= 0.9);
    bool found = std::find(ls.sensitive.begin(), ls.sensitive.end(), planted) != ls.sensitive.end();
    CHECK(found);
    std::size_t false_positives = ls.sensitive.size() - (found ? 1 : 0);
    CHECK(false_positives <= std::size_t(cfg.d_mlp / 100 + 1));
}

TEST_CASE("profile layers on a degenerate identical dataset gives mean 1") {
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_mlp = 12;
    cfg.n_heads = 2;
    cfg.vocab_size = 30;
    cfg.max_seq = 16;
    cfg.seed = 5;
    model::ModelWeights w = model::init_model(cfg);
    model::CharTokenizer tok(utf8_decode("abcdefghijklmnopqrstuvwxyz"));

    std::vector<noise::TokenPairRecord> dataset;
    for (const char* t : {"maison", "jardin", "fleuve"}) {
        noise::TokenPairRecord rec;
        rec.correct = t;
        noise::Variant v{t, 1.0, 0};
        rec.low = v;
        rec.average = v;
        rec.high = v;
        dataset.push_back(rec);
    }
    auto profile = profile_layers(w, tok, dataset, 1);
    CHECK(profile.cells.size() == 6);  // 2 layers x 3 levels
    for (const auto& cell : profile.cells) {
        CHECK(cell.n_pairs == 3);
        if (cell.n_pairs > cell.n_undefined) {
            CHECK(cell.mean == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("profile layers bookkeeping counts records with the variant") {
    model::ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.d_mlp = 12;
    cfg.n_heads = 2;
    cfg.vocab_size = 30;
    cfg.max_seq = 16;
    cfg.seed = 6;
    model::ModelWeights w = model::init_model(cfg);
    model::CharTokenizer tok(utf8_decode("abcdefghijklmnopqrstuvwxyz"));

    std::vector<noise::TokenPairRecord> dataset;
    noise::TokenPairRecord full;
    full.correct = "maison";
    full.low = noise::Variant{"mais0n", 1.0 - 1.0 / 6.0, 1};
    full.average = noise::Variant{"ma1s0n", 1.0 - 2.0 / 6.0, 2};
    full.high = noise::Variant{"m15on", 0.5, 3};
    dataset.push_back(full);
    noise::TokenPairRecord partial;
    partial.correct = "jardin";
    partial.low = noise::Variant{"jard1n", 1.0 - 1.0 / 6.0, 1};
    dataset.push_back(partial);

    auto profile = profile_layers(w, tok, dataset, 1);
    for (const auto& cell : profile.cells) {
        if (cell.level == noise::Level::low) {
            CHECK(cell.n_pairs == 2);
        } else {
            CHECK(cell.n_pairs == 1);
        }
    }
    CHECK_THROWS_AS(profile_layers(w, tok, {}, 1), std::invalid_argument);
}

TEST_CASE("accumulator activation stream stats match two-pass computation") {
    RngState rng(55);
    SensitivityAccumulator acc(1, 4, {});
    std::vector<double> all_correct[4], all_altered[4];
    for (int p = 0; p < 12; ++p) {
        Matrix mc = random_matrix(3, 4, rng);
        Matrix ma = random_matrix(2, 4, rng);
        for (std::size_t r = 0; r < mc.rows; ++r) {
            for (int j = 0; j < 4; ++j) all_correct[j].push_back(mc.at(r, std::size_t(j)));
        }
        for (std::size_t r = 0; r < ma.rows; ++r) {
            for (int j = 0; j < 4; ++j) all_altered[j].push_back(ma.at(r, std::size_t(j)));
        }
        acc.add_pair(trace_of(0, mc), trace_of(0, ma));
    }
    for (int j = 0; j < 4; ++j) {
        const RunningStats& sc = acc.correct_activation_stats(0, j);
        // counts consistent across neurons of the layer
        CHECK(sc.count == all_correct[0].size());
        CHECK(sc.variance() >= 0.0);
        double mean = 0.0;
        for (double v : all_correct[j]) mean += v;
        mean /= double(all_correct[j].size());
        double var = 0.0;
        for (double v : all_correct[j]) var += (v - mean) * (v - mean);
        var /= double(all_correct[j].size());
        CHECK(std::fabs(sc.mean - mean) < 1e-12);
        CHECK(std::fabs(sc.variance() - var) < 1e-12);
        const RunningStats& sa = acc.altered_activation_stats(0, j);
        CHECK(sa.count == all_altered[0].size());
    }
}

TEST_CASE("profile can also emit the raw per-pair observations") {
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.d_mlp = 12;
    cfg.n_heads = 2;
    cfg.vocab_size = 30;
    cfg.max_seq = 16;
    cfg.seed = 77;
    model::ModelWeights w = model::init_model(cfg);
    model::CharTokenizer tok(utf8_decode("abcdefghijklmnopqrstuvwxyz01"));

    std::vector<noise::TokenPairRecord> dataset;
    for (const char* t : {"maison", "jardin"}) {
        noise::TokenPairRecord rec;
        rec.correct = t;
        std::string altered = std::string(t).replace(2, 1, "1");
        noise::Variant v{altered, 1.0 - 1.0 / 6.0, 1};
        rec.low = v;
        rec.average = v;
        rec.high = v;
        dataset.push_back(rec);
    }
    std::vector<PairCka> pairs;
    auto profile = profile_layers(w, tok, dataset, 2, &pairs);
    CHECK(pairs.size() == 2 * 3 * 2);  // records x levels x layers
    // ordered (record, level, layer)
    CHECK(pairs[0].record == 0);
    CHECK(pairs[0].level == noise::Level::low);
    CHECK(pairs[0].layer == 0);
    CHECK(pairs[1].layer == 1);
    CHECK(pairs.back().record == 1);
    CHECK(pairs.back().level == noise::Level::high);

    // the csv has one row per observation plus a header
    std::string csv = pair_values_to_csv(pairs);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);

    // aggregates agree with the dumped values
    double sum = 0.0;
    int n = 0;
    for (const auto& p : pairs) {
        if (p.layer == 0 && p.level == noise::Level::low && p.defined) {
            sum += p.value;
            ++n;
        }
    }
    for (const auto& cell : profile.cells) {
        if (cell.layer == 0 && cell.level == noise::Level::low) {
            CHECK(cell.mean == doctest::Approx(sum / n).epsilon(1e-12));
        }
    }
}

TEST_CASE("report json round trip preserves the ranking fields") {
    RngState rng(8);
    SensitivityAccumulator acc(2, 5, {});
    for (int i = 0; i < 10; ++i) {
        Matrix mc = random_matrix(2, 5, rng);
        Matrix ma = random_matrix(2, 5, rng);
        model::ActivationTrace tc, ta;
        tc.layers.emplace(0, mc);
        tc.layers.emplace(1, ma);
        ta.layers.emplace(0, ma);
        ta.layers.emplace(1, mc);
        acc.add_pair(tc, ta);
    }
    auto rep = acc.finalize(noise::Level::high);
    std::string json = report_to_json(rep, "cafe");
    auto path = std::filesystem::temp_directory_path() / "ocrsn_report.json";
    {
        std::ofstream out(path, std::ios::binary);
        out << json;
    }
    auto back = report_from_json_file(path.string());
    CHECK(back.level == rep.level);
    CHECK(back.n_pairs == rep.n_pairs);
    REQUIRE(back.layers.size() == rep.layers.size());
    for (std::size_t l = 0; l < back.layers.size(); ++l) {
        CHECK(back.layers[l].sensitive == rep.layers[l].sensitive);
        for (std::size_t n = 0; n < back.layers[l].neurons.size(); ++n) {
            CHECK(back.layers[l].neurons[n].consistency ==
                  rep.layers[l].neurons[n].consistency);
            CHECK(back.layers[l].neurons[n].mean_diff == rep.layers[l].neurons[n].mean_diff);
        }
    }
    std::filesystem::remove(path);
}

TEST_SUITE_END();
