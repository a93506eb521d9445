#include "ocrsn/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "ocrsn/analysis.hpp"
#include "ocrsn/utf8.hpp"

namespace fs = std::filesystem;

namespace ocrsn::pipeline {

namespace {

constexpr const char* kArtifactVersion = "0.1.0";

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
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

void require_file(const std::string& path, const char* what) {
    if (path.empty()) {
        throw ConfigError(std::string(what) + " path is not configured");
    }
    if (!fs::exists(path)) {
        throw ConfigError(std::string(what) + " not found: " + path);
    }
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
    if (!out) throw std::runtime_error("failed writing file: " + path);
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

void ensure_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory: " + cfg.out_dir);
}

noise::CharConfusionTable load_table(const RunConfig& cfg) {
    if (cfg.confusion_table.empty()) return noise::CharConfusionTable::defaults();
    require_file(cfg.confusion_table, "confusion table");
    return noise::CharConfusionTable::from_json_file(cfg.confusion_table);
}

std::string fmt_alpha(double a) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", a);
    return buf;
}

nlohmann::json levels_to_json(const std::vector<noise::NoiseLevel>& levels) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& l : levels) {
        out[noise::level_name(l.name)] = {{"min_alterations", l.min_alterations},
                                          {"max_alterations", l.max_alterations},
                                          {"band", {l.band.lo, l.band.hi}},
                                          {"band_hi_inclusive", l.band.hi_inclusive}};
    }
    return out;
}

void levels_from_json(const nlohmann::json& j, std::vector<noise::NoiseLevel>& levels) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        noise::Level name = noise::level_from_name(it.key());
        for (auto& l : levels) {
            if (l.name != name) continue;
            const auto& v = it.value();
            if (v.contains("min_alterations")) l.min_alterations = v["min_alterations"].get<int>();
            if (v.contains("max_alterations")) l.max_alterations = v["max_alterations"].get<int>();
            if (v.contains("band")) {
                l.band.lo = v["band"][0].get<double>();
                l.band.hi = v["band"][1].get<double>();
            }
            if (v.contains("band_hi_inclusive")) {
                l.band.hi_inclusive = v["band_hi_inclusive"].get<bool>();
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    RunConfig cfg;
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("workers")) cfg.workers = j["workers"].get<int>();
    if (j.contains("corpus")) {
        if (j["corpus"].is_string()) {
            cfg.corpus = {j["corpus"].get<std::string>()};
        } else {
            cfg.corpus = j["corpus"].get<std::vector<std::string>>();
        }
    }
    if (j.contains("confusion_table")) cfg.confusion_table = j["confusion_table"].get<std::string>();
    if (j.contains("allowlist")) cfg.allowlist = j["allowlist"].get<std::string>();
    if (j.contains("ner_config")) cfg.ner_config = j["ner_config"].get<std::string>();
    if (j.contains("min_token_length")) cfg.min_token_length = j["min_token_length"].get<std::size_t>();
    if (j.contains("lowercase")) cfg.lowercase = j["lowercase"].get<bool>();
    if (j.contains("substitution_prob")) cfg.substitution_prob = j["substitution_prob"].get<double>();
    if (j.contains("max_retries")) cfg.max_retries = j["max_retries"].get<int>();
    if (j.contains("model")) {
        const auto& m = j["model"];
        if (m.contains("n_layers")) cfg.model.n_layers = m["n_layers"].get<int>();
        if (m.contains("d_model")) cfg.model.d_model = m["d_model"].get<int>();
        if (m.contains("d_mlp")) cfg.model.d_mlp = m["d_mlp"].get<int>();
        if (m.contains("n_heads")) cfg.model.n_heads = m["n_heads"].get<int>();
        if (m.contains("max_seq")) cfg.model.max_seq = m["max_seq"].get<int>();
    }
    if (j.contains("grid")) {
        const auto& g = j["grid"];
        if (g.contains("layers")) cfg.grid.layers = g["layers"].get<std::vector<int>>();
        if (g.contains("bin_start")) cfg.grid.bin_start = g["bin_start"].get<int>();
        if (g.contains("bin_step")) cfg.grid.bin_step = g["bin_step"].get<int>();
        if (g.contains("bin_stop")) cfg.grid.bin_stop = g["bin_stop"].get<int>();
        if (g.contains("alphas")) cfg.grid.alphas = g["alphas"].get<std::vector<double>>();
        if (g.contains("multi_layer")) cfg.grid.multi_layer = g["multi_layer"].get<bool>();
    }
    if (j.contains("profile_emit_pairs")) {
        cfg.profile_emit_pairs = j["profile_emit_pairs"].get<bool>();
    }
    if (j.contains("head")) {
        const auto& h = j["head"];
        if (h.contains("lr")) cfg.head.lr = h["lr"].get<double>();
        if (h.contains("epochs")) cfg.head.epochs = h["epochs"].get<int>();
    }
    if (j.contains("baseline_repetitions")) {
        cfg.baseline_repetitions = j["baseline_repetitions"].get<int>();
    }
    if (j.contains("selection_mode")) cfg.selection_mode = j["selection_mode"].get<std::string>();
    if (j.contains("sensitivity_level")) {
        cfg.sensitivity_level = j["sensitivity_level"].get<std::string>();
    }
    if (j.contains("sensitivity_threshold")) {
        cfg.sensitivity_threshold = j["sensitivity_threshold"].get<double>();
    }
    if (j.contains("sensitivity_leave_one_out")) {
        cfg.sensitivity_leave_one_out = j["sensitivity_leave_one_out"].get<bool>();
    }
    if (j.contains("sensitivity_activated_only")) {
        cfg.sensitivity_activated_only = j["sensitivity_activated_only"].get<bool>();
    }
    if (j.contains("levels")) levels_from_json(j["levels"], cfg.levels);

    if (cfg.selection_mode != "sensitivity-ranked" && cfg.selection_mode != "positional") {
        throw ConfigError("config: unknown selection_mode '" + cfg.selection_mode + "'");
    }
    noise::level_from_name(cfg.sensitivity_level);
    if (cfg.workers < 1) throw ConfigError("config: workers must be >= 1");
    return cfg;
}

noise::CorruptOptions RunConfig::corrupt_options() const {
    noise::CorruptOptions opts;
    opts.substitution_prob = substitution_prob;
    opts.max_retries = max_retries;
    opts.min_token_length = min_token_length;
    return opts;
}

noise::TokenFilter RunConfig::token_filter() const {
    noise::TokenFilter filter;
    filter.min_length = min_token_length;
    filter.lowercase = lowercase;
    if (!allowlist.empty()) {
        require_file(allowlist, "allowlist");
        std::ifstream in(allowlist, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read allowlist: " + allowlist);
        std::unordered_set<std::string> set;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
            if (!line.empty()) set.insert(line);
        }
        filter.allowlist = std::move(set);
    }
    return filter;
}

std::string RunConfig::config_hash() const {
    nlohmann::json j;  // sorted keys -> canonical dump
    j["seed"] = seed;
    j["corpus"] = corpus;
    j["confusion_table"] = confusion_table;
    j["allowlist"] = allowlist;
    j["ner_config"] = ner_config;
    j["min_token_length"] = min_token_length;
    j["lowercase"] = lowercase;
    j["substitution_prob"] = substitution_prob;
    j["max_retries"] = max_retries;
    j["model"] = {{"n_layers", model.n_layers}, {"d_model", model.d_model},
                  {"d_mlp", model.d_mlp},       {"n_heads", model.n_heads},
                  {"max_seq", model.max_seq}};
    j["grid"] = {{"layers", grid.layers},       {"bin_start", grid.bin_start},
                 {"bin_step", grid.bin_step},   {"bin_stop", grid.bin_stop},
                 {"alphas", grid.alphas},       {"multi_layer", grid.multi_layer}};
    j["head"] = {{"lr", head.lr}, {"epochs", head.epochs}};
    j["baseline_repetitions"] = baseline_repetitions;
    j["selection_mode"] = selection_mode;
    j["sensitivity_level"] = sensitivity_level;
    j["sensitivity_threshold"] = sensitivity_threshold;
    j["sensitivity_leave_one_out"] = sensitivity_leave_one_out;
    j["sensitivity_activated_only"] = sensitivity_activated_only;
    j["profile_emit_pairs"] = profile_emit_pairs;
    j["levels"] = levels_to_json(levels);
    return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_gen_dataset(const RunConfig& cfg) {
    if (cfg.corpus.empty()) throw ConfigError("gen-dataset: no corpus files configured");
    for (const auto& p : cfg.corpus) require_file(p, "corpus file");
    noise::CharConfusionTable table = load_table(cfg);

    std::vector<std::string> tokens = noise::ingest_corpus(cfg.corpus, cfg.token_filter());
    noise::Dataset ds =
        noise::build_dataset(tokens, cfg.levels, table, RngState(cfg.seed).split("dataset"),
                             cfg.corrupt_options(), cfg.workers);

    ensure_out_dir(cfg);
    noise::write_dataset_jsonl(out_path(cfg, "dataset.jsonl"), ds.records);

    nlohmann::ordered_json stats;
    stats["config_hash"] = cfg.config_hash();
    stats["tokens_in"] = ds.stats.tokens_in;
    stats["records_out"] = ds.stats.records_out;
    stats["dropped"] = ds.stats.dropped;
    for (noise::Level name : noise::kAllLevels) {
        const auto& ls = ds.stats.for_level(name);
        stats["levels"][noise::level_name(name)] = {
            {"unsatisfiable", ls.unsatisfiable}, {"mean_similarity", ls.mean_similarity}};
    }
    write_text_file(out_path(cfg, "dataset_stats.json"), stats.dump(2) + "\n");

    std::cout << "dataset: " << ds.stats.records_out << " records from " << ds.stats.tokens_in
              << " tokens (" << ds.stats.dropped << " dropped)\n";
    for (noise::Level name : noise::kAllLevels) {
        const auto& ls = ds.stats.for_level(name);
        std::cout << "  " << noise::level_name(name) << ": mean similarity "
                  << ls.mean_similarity << ", unsatisfiable " << ls.unsatisfiable << "\n";
    }
}

namespace {

// The model alphabet covers every character any stage can feed it: corpus
// tokens, confusion replacements, NER templates and gazetteers, plus a Latin
// base set. Unknown characters still encode (to unk), this just keeps them
// distinguishable.
std::u32string assemble_alphabet(const RunConfig& cfg, const noise::CharConfusionTable& table) {
    std::set<char32_t> chars;
    auto add_str = [&](const std::string& s) {
        for (char32_t cp : utf8_decode(s)) chars.insert(cp);
    };
    for (char c = 'a'; c <= 'z'; ++c) chars.insert(char32_t(c));
    for (char c = 'A'; c <= 'Z'; ++c) chars.insert(char32_t(c));
    for (char c = '0'; c <= '9'; ++c) chars.insert(char32_t(c));
    add_str(" .,;:!?'-àâäéèêëîïôö"
            "ùûüçœÀÂÉÈÊÎÔ"
            "ÙÛÇŒ");
    for (const auto& [from, reps] : table.entries()) {
        chars.insert(from);
        for (char32_t r : reps) chars.insert(r);
    }
    if (!cfg.corpus.empty()) {
        bool all_there = true;
        for (const auto& p : cfg.corpus) {
            if (!fs::exists(p)) all_there = false;
        }
        if (all_there) {
            for (const auto& tok : noise::ingest_corpus(cfg.corpus, cfg.token_filter())) {
                add_str(tok);
            }
        }
    }
    if (!cfg.ner_config.empty() && fs::exists(cfg.ner_config)) {
        sweep::SynthNerConfig ner = sweep::SynthNerConfig::from_json_file(cfg.ner_config);
        for (const auto& t : ner.templates) add_str(t);
        for (const auto& [key, entries] : ner.gazetteers) {
            add_str(key);
            for (const auto& e : entries) add_str(e);
        }
    }
    return std::u32string(chars.begin(), chars.end());
}

model::LoadedModel load_model(const RunConfig& cfg) {
    std::string path = out_path(cfg, "model.bin");
    require_file(path, "model file");
    return model::load_weights(path);
}

sweep::NerDataset make_ner_data(const RunConfig& cfg) {
    require_file(cfg.ner_config, "NER config");
    sweep::SynthNerConfig ner = sweep::SynthNerConfig::from_json_file(cfg.ner_config);
    noise::CharConfusionTable table = load_table(cfg);
    return sweep::generate_ner_data(ner, cfg.levels, table, RngState(cfg.seed).split("ner"),
                                    cfg.corrupt_options());
}

}  // namespace

void cmd_init_model(const RunConfig& cfg) {
    noise::CharConfusionTable table = load_table(cfg);
    model::CharTokenizer tokenizer(assemble_alphabet(cfg, table));

    model::ModelConfig mc = cfg.model;
    mc.vocab_size = tokenizer.vocab_size();
    mc.seed = RngState(cfg.seed).split("model-init").next_u64();
    model::ModelWeights weights = model::init_model(mc);

    ensure_out_dir(cfg);
    model::save_weights(weights, tokenizer, out_path(cfg, "model.bin"),
                        {{"config_hash", cfg.config_hash()}});
    std::cout << "model: " << mc.n_layers << " layers, d_model " << mc.d_model << ", d_mlp "
              << mc.d_mlp << ", vocab " << mc.vocab_size << "\n";
}

void cmd_train_head(const RunConfig& cfg) {
    model::LoadedModel lm = load_model(cfg);
    sweep::NerDataset data = make_ner_data(cfg);

    std::vector<std::vector<int>> token_seqs, label_seqs;
    for (const auto& sent : data.train) {
        token_seqs.push_back(lm.tokenizer.encode(sent.chars));
        label_seqs.push_back(sent.labels);
    }
    model::HeadTrainResult tr =
        model::train_head(lm.weights, token_seqs, label_seqs, data.n_labels(), cfg.head,
                          RngState(cfg.seed).split("head/0"));
    double test_f1 = sweep::evaluate_f1(lm.weights, lm.tokenizer, tr.head, data.test);

    ensure_out_dir(cfg);
    nlohmann::ordered_json j;
    j["config_hash"] = cfg.config_hash();
    j["n_labels"] = data.n_labels();
    j["label_names"] = data.label_names;
    j["lr"] = cfg.head.lr;
    j["epochs"] = cfg.head.epochs;
    j["final_loss"] = tr.final_loss;
    j["test_f1"] = test_f1;
    j["b"] = tr.head.b;
    j["w"] = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < tr.head.w.rows; ++r) {
        j["w"].push_back(std::vector<double>(tr.head.w.row(r), tr.head.w.row(r) + tr.head.w.cols));
    }
    write_text_file(out_path(cfg, "head.json"), j.dump(2) + "\n");
    std::cout << "head: final loss " << tr.final_loss << ", noisy-test F1 " << test_f1 << "\n";
}

void cmd_profile(const RunConfig& cfg) {
    model::LoadedModel lm = load_model(cfg);
    std::string dataset_path = out_path(cfg, "dataset.jsonl");
    require_file(dataset_path, "dataset");
    std::vector<noise::TokenPairRecord> records = noise::read_dataset_jsonl(dataset_path);
    if (records.empty()) throw std::runtime_error("profile: dataset is empty");

    std::vector<analysis::PairCka> pair_values;
    analysis::LayerCkaProfile profile =
        analysis::profile_layers(lm.weights, lm.tokenizer, records, cfg.workers,
                                 cfg.profile_emit_pairs ? &pair_values : nullptr);
    ensure_out_dir(cfg);
    write_text_file(out_path(cfg, "cka_profile.csv"), analysis::profile_to_csv(profile));
    if (cfg.profile_emit_pairs) {
        write_text_file(out_path(cfg, "cka_pairs.csv"),
                        analysis::pair_values_to_csv(pair_values));
    }

    analysis::SensitivityOptions opts;
    opts.threshold = cfg.sensitivity_threshold;
    opts.leave_one_out = cfg.sensitivity_leave_one_out;
    opts.activated_only = cfg.sensitivity_activated_only;
    std::vector<analysis::SensitivityReport> reports;
    for (noise::Level level : noise::kAllLevels) {
        analysis::SensitivityReport rep = analysis::sensitivity_report(
            lm.weights, lm.tokenizer, records, level, opts, cfg.workers);
        write_text_file(out_path(cfg, std::string("sensitivity_") + noise::level_name(level) +
                                          ".json"),
                        analysis::report_to_json(rep, cfg.config_hash()));
        reports.push_back(std::move(rep));
    }
    write_text_file(out_path(cfg, "sensitive_counts.csv"),
                    analysis::sensitive_counts_csv(reports));

    nlohmann::ordered_json manifest;
    manifest["config_hash"] = cfg.config_hash();
    manifest["artifact_version"] = kArtifactVersion;
    manifest["files"] = {"cka_profile.csv", "sensitivity_low.json", "sensitivity_average.json",
                         "sensitivity_high.json", "sensitive_counts.csv"};
    if (cfg.profile_emit_pairs) manifest["files"].push_back("cka_pairs.csv");
    write_text_file(out_path(cfg, "profile_manifest.json"), manifest.dump(2) + "\n");

    std::cout << "profile: " << profile.cells.size() << " cells over " << records.size()
              << " records\n";
    for (const auto& rep : reports) {
        std::size_t total = 0;
        for (const auto& ls : rep.layers) total += ls.sensitive.size();
        std::cout << "  " << noise::level_name(rep.level) << ": " << total
                  << " sensitive neurons across layers\n";
    }
}

void cmd_sweep(const RunConfig& cfg) {
    model::LoadedModel lm = load_model(cfg);
    sweep::NerDataset data = make_ner_data(cfg);

    analysis::SensitivityReport report;
    const analysis::SensitivityReport* report_ptr = nullptr;
    if (cfg.selection_mode == "sensitivity-ranked") {
        std::string rep_path =
            out_path(cfg, "sensitivity_" + cfg.sensitivity_level + ".json");
        if (!fs::exists(rep_path)) {
            throw ConfigError("sweep: " + rep_path +
                              " not found; run `profile` first or set selection_mode to "
                              "\"positional\"");
        }
        report = analysis::report_from_json_file(rep_path);
        report_ptr = &report;
    }

    sweep::BaselineResult baseline = sweep::baseline_eval(
        lm.weights, lm.tokenizer, data, cfg.head, cfg.baseline_repetitions, RngState(cfg.seed));

    std::vector<sweep::ImprovementCell> cells =
        sweep::run_sweep(lm.weights, lm.tokenizer, baseline.first_head, data.test, cfg.grid,
                         report_ptr, cfg.workers);

    ensure_out_dir(cfg);
    nlohmann::ordered_json bj;
    bj["config_hash"] = cfg.config_hash();
    bj["repetitions"] = cfg.baseline_repetitions;
    bj["mean_f1"] = baseline.mean_f1;
    bj["std_f1"] = baseline.std_f1;
    bj["run_f1"] = baseline.run_f1;
    bj["first_head_loss"] = baseline.first_head_loss;
    write_text_file(out_path(cfg, "baseline.json"), bj.dump(2) + "\n");

    std::vector<std::string> files = {"baseline.json", "cells.jsonl"};
    for (double alpha : cfg.grid.alphas) {
        std::string name = "heatmap_alpha_" + fmt_alpha(alpha) + ".csv";
        write_text_file(out_path(cfg, name), sweep::heatmap_csv(cells, alpha));
        files.push_back(name);
    }
    write_text_file(out_path(cfg, "cells.jsonl"), sweep::cells_to_jsonl(cells));

    nlohmann::ordered_json manifest;
    manifest["config_hash"] = cfg.config_hash();
    manifest["artifact_version"] = kArtifactVersion;
    manifest["seed"] = cfg.seed;
    manifest["selection_mode"] = cfg.selection_mode;
    manifest["sensitivity_level"] = cfg.sensitivity_level;
    manifest["layers"] = cfg.grid.layer_list(lm.weights.config.n_layers);
    manifest["bin_sizes"] = cfg.grid.bin_sizes();
    manifest["alphas"] = cfg.grid.alphas;
    manifest["multi_layer"] = cfg.grid.multi_layer;
    manifest["baseline_mean_f1"] = baseline.mean_f1;
    manifest["files"] = files;
    write_text_file(out_path(cfg, "sweep_manifest.json"), manifest.dump(2) + "\n");

    std::cout << "sweep: " << cells.size() << " cells; baseline F1 " << baseline.mean_f1
              << " +/- " << baseline.std_f1 << "\n";
}

int run_command(const std::string& name, const RunConfig& cfg) {
    try {
        if (name == "gen-dataset") {
            cmd_gen_dataset(cfg);
        } else if (name == "init-model") {
            cmd_init_model(cfg);
        } else if (name == "train-head") {
            cmd_train_head(cfg);
        } else if (name == "profile") {
            cmd_profile(cfg);
        } else if (name == "sweep") {
            cmd_sweep(cfg);
        } else {
            std::cerr << "error: unknown command '" << name << "'\n";
            return 2;
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace ocrsn::pipeline
