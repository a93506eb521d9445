#include <doctest.h>

#include <stdexcept>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ocrsn/pipeline.hpp"

using namespace ocrsn;
using namespace ocrsn::pipeline;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("pipeline");

namespace {

struct Workspace {
    fs::path root;

    explicit Workspace(const std::string& name) {
        root = fs::temp_directory_path() / ("ocrsn_" + name);
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }

    std::string file(const std::string& name, const std::string& content) const {
        fs::path p = root / name;
        std::ofstream out(p, std::ios::binary);
        out << content;
        return p.string();
    }
    std::string path(const std::string& name) const { return (root / name).string(); }
};

const char* kCorpus =
    "Le conseil municipal examine soigneusement chaque proposition nouvelle.\n"
    "Les journaux racontent des histoires anciennes, parfois surprenantes.\n"
    "Plusieurs habitants demandent des explications claires concernant les travaux.\n"
    "Cette assemblée discute longuement des finances communales ordinaires.\n"
    "Des marchands vendent leurs produits devant la gare centrale chaque matin.\n"
    "Un orchestre répète une symphonie moderne dans le théâtre voisin.\n"
    "Quelques étudiants préparent patiemment leurs examens difficiles.\n"
    "Le tribunal rend finalement son jugement après des semaines entières.\n";

const char* kNerConfig = R"({
  "gazetteers": {
    "PERSON": ["Dupont", "Martin", "Moreau", "Laurent"],
    "LOCATION": ["Paris", "Lyon", "Rouen", "Nantes"],
    "ORG": ["Tribunal", "Conseil", "Institut"]
  },
  "templates": [
    "M. {PERSON} arrive à {LOCATION}.",
    "Le {ORG} de {LOCATION} écoute {PERSON}.",
    "{PERSON} quitte {LOCATION} demain matin.",
    "Le {ORG} convoque {PERSON} mardi."
  ],
  "train_size": 12,
  "test_size": 8,
  "noise_level": "average"
})";

RunConfig make_config(const Workspace& ws) {
    std::string corpus = ws.file("corpus.txt", kCorpus);
    std::string ner = ws.file("ner.json", kNerConfig);
    std::ostringstream cfg;
    cfg << R"({
  "seed": 77,
  "workers": 1,
  "out_dir": ")" << ws.path("out") << R"(",
  "corpus": [")" << corpus << R"("],
  "ner_config": ")" << ner << R"(",
  "model": {"n_layers": 2, "d_model": 16, "d_mlp": 24, "n_heads": 2, "max_seq": 64},
  "grid": {"bin_start": 6, "bin_step": 6, "bin_stop": 12, "alphas": [1.0, 0.9]},
  "head": {"lr": 0.4, "epochs": 30},
  "baseline_repetitions": 2
})";
    std::string cfg_path = ws.file("config.json", cfg.str());
    return RunConfig::from_json_file(cfg_path);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) {
        if (c == '\n') ++n;
    }
    return n;
}

}  // namespace

TEST_CASE("gen-dataset writes records, stats and reruns byte-identically") {
    Workspace ws("gen");
    RunConfig cfg = make_config(ws);
    CHECK(run_command("gen-dataset", cfg) == 0);

    std::string ds = slurp(ws.path("out/dataset.jsonl"));
    std::size_t records = line_count(ds);
    CHECK(records > 10);
    CHECK(ds.find("\"low\"") != std::string::npos);
    CHECK(ds.find("\"average\"") != std::string::npos);
    CHECK(ds.find("\"high\"") != std::string::npos);

    std::string stats = slurp(ws.path("out/dataset_stats.json"));
    CHECK(stats.find("config_hash") != std::string::npos);

    CHECK(run_command("gen-dataset", cfg) == 0);
    CHECK(slurp(ws.path("out/dataset.jsonl")) == ds);
    CHECK(slurp(ws.path("out/dataset_stats.json")) == stats);
}

TEST_CASE("gen-dataset with a missing corpus exits with code 2") {
    Workspace ws("gen_missing");
    RunConfig cfg = make_config(ws);
    cfg.corpus = {ws.path("nope.txt")};
    CHECK(run_command("gen-dataset", cfg) == 2);
}

TEST_CASE("init-model and profile produce the expected shapes") {
    Workspace ws("profile");
    RunConfig cfg = make_config(ws);
    REQUIRE(run_command("gen-dataset", cfg) == 0);
    REQUIRE(run_command("init-model", cfg) == 0);
    REQUIRE(run_command("profile", cfg) == 0);

    std::string csv = slurp(ws.path("out/cka_profile.csv"));
    CHECK(line_count(csv) == 1 + 2 * 3);  // header + n_layers * levels

    std::string counts = slurp(ws.path("out/sensitive_counts.csv"));
    std::istringstream in(counts);
    std::string line;
    std::getline(in, line);
    CHECK(line == "layer,level,sensitive_count");
    int rows = 0;
    while (std::getline(in, line)) {
        auto last_comma = line.rfind(',');
        int count = std::stoi(line.substr(last_comma + 1));
        CHECK(count >= 0);
        CHECK(count <= 24);
        ++rows;
    }
    CHECK(rows == 2 * 3);

    for (const char* name :
         {"sensitivity_low.json", "sensitivity_average.json", "sensitivity_high.json"}) {
        CHECK(fs::exists(ws.path(std::string("out/") + name)));
    }

    // rerun determinism
    std::string before = slurp(ws.path("out/cka_profile.csv"));
    REQUIRE(run_command("profile", cfg) == 0);
    CHECK(slurp(ws.path("out/cka_profile.csv")) == before);
}

TEST_CASE("profile without a model exits with code 2") {
    Workspace ws("profile_missing");
    RunConfig cfg = make_config(ws);
    REQUIRE(run_command("gen-dataset", cfg) == 0);
    CHECK(run_command("profile", cfg) == 2);
}

TEST_CASE("train-head, sweep and the alpha=1 column") {
    Workspace ws("sweep");
    RunConfig cfg = make_config(ws);
    REQUIRE(run_command("gen-dataset", cfg) == 0);
    REQUIRE(run_command("init-model", cfg) == 0);
    REQUIRE(run_command("train-head", cfg) == 0);
    REQUIRE(run_command("profile", cfg) == 0);
    REQUIRE(run_command("sweep", cfg) == 0);

    CHECK(fs::exists(ws.path("out/baseline.json")));
    CHECK(fs::exists(ws.path("out/heatmap_alpha_1.csv")));
    CHECK(fs::exists(ws.path("out/heatmap_alpha_0.9.csv")));
    CHECK(fs::exists(ws.path("out/cells.jsonl")));

    // alpha = 1 column is exactly zero everywhere
    std::string ones = slurp(ws.path("out/heatmap_alpha_1.csv"));
    std::istringstream in(ones);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        while (std::getline(ls, cell, ',')) CHECK(std::stod(cell) == 0.0);
    }

    std::string manifest = slurp(ws.path("out/sweep_manifest.json"));
    CHECK(manifest.find("\"selection_mode\": \"sensitivity-ranked\"") != std::string::npos);

    std::string head = slurp(ws.path("out/head.json"));
    CHECK(head.find("final_loss") != std::string::npos);
}

TEST_CASE("sweep without profile outputs requires positional mode") {
    Workspace ws("sweep_fallback");
    RunConfig cfg = make_config(ws);
    REQUIRE(run_command("init-model", cfg) == 0);
    CHECK(run_command("sweep", cfg) == 2);

    cfg.selection_mode = "positional";
    CHECK(run_command("sweep", cfg) == 0);
    std::string manifest = slurp(ws.path("out/sweep_manifest.json"));
    CHECK(manifest.find("\"selection_mode\": \"positional\"") != std::string::npos);
}

TEST_CASE("config hash ignores out_dir and workers") {
    Workspace ws("hash");
    RunConfig cfg = make_config(ws);
    std::string h1 = cfg.config_hash();
    RunConfig other = cfg;
    other.out_dir = ws.path("elsewhere");
    other.workers = 4;
    CHECK(other.config_hash() == h1);
    other.seed = 78;
    CHECK(other.config_hash() != h1);
}

TEST_CASE("run_command rejects unknown commands") {
    Workspace ws("unknown");
    RunConfig cfg = make_config(ws);
    CHECK(run_command("frobnicate", cfg) == 2);
}

TEST_SUITE_END();
