#include "ocrsn/noise.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ocrsn/parallel.hpp"
#include "ocrsn/utf8.hpp"

namespace ocrsn::noise {

const char* level_name(Level level) {
    switch (level) {
        case Level::low: return "low";
        case Level::average: return "average";
        case Level::high: return "high";
    }
    return "?";
}

Level level_from_name(std::string_view name) {
    if (name == "low") return Level::low;
    if (name == "average") return Level::average;
    if (name == "high") return Level::high;
    throw std::invalid_argument("unknown noise level: " + std::string(name));
}

std::vector<NoiseLevel> default_levels() {
    return {
        {Level::low, 1, 1, {0.8, 1.0, true}},
        {Level::average, 2, 5, {0.6, 0.8, false}},
        {Level::high, 3, 10, {0.0, 0.6, false}},
    };
}

const NoiseLevel& level_by_name(const std::vector<NoiseLevel>& levels, Level name) {
    for (const auto& l : levels) {
        if (l.name == name) return l;
    }
    throw std::invalid_argument(std::string("no such noise level configured: ") +
                                level_name(name));
}

// ---------------------------------------------------------------------------
// Confusion table
// ---------------------------------------------------------------------------

void CharConfusionTable::set(char32_t from, std::vector<char32_t> to) {
    for (char32_t r : to) {
        if (r == from) {
            throw std::invalid_argument("confusion table: replacement equals source '" +
                                        utf8_encode(from) + "'");
        }
    }
    if (to.empty()) throw std::invalid_argument("confusion table: empty replacement list");
    map_[from] = std::move(to);
}

const std::vector<char32_t>* CharConfusionTable::lookup(char32_t c) const {
    auto it = map_.find(c);
    return it == map_.end() ? nullptr : &it->second;
}

CharConfusionTable CharConfusionTable::defaults() {
    CharConfusionTable t;
    auto set_str = [&](char32_t from, std::u32string_view reps) {
        t.set(from, std::vector<char32_t>(reps.begin(), reps.end()));
    };
    // Visually confusable groups.
    set_str(U'i', U"1l");
    set_str(U'l', U"1i");
    set_str(U'o', U"0c");
    set_str(U's', U"5");
    set_str(U'e', U"co");
    set_str(U'c', U"eo");
    set_str(U'a', U"ào");  // a -> à, o
    set_str(U'u', U"v");
    set_str(U'v', U"u");
    set_str(U'g', U"q");
    set_str(U'q', U"g");
    set_str(U'b', U"h");
    set_str(U'h', U"b");
    set_str(U't', U"f");
    set_str(U'f', U"t");
    set_str(U'm', U"n");
    set_str(U'n', U"mu");
    // Uppercase shapes that collide with digits.
    set_str(U'O', U"0Q");
    set_str(U'I', U"1l");
    set_str(U'S', U"5");
    set_str(U'B', U"8");
    set_str(U'G', U"6");
    set_str(U'Z', U"2");
    // Remaining letters fall back to keyboard row neighbours so the table is
    // total over [a-zA-Z].
    const char* rows[] = {"qwertyuiop", "asdfghjkl", "zxcvbnm"};
    auto neighbours = [&](char c) {
        std::vector<char32_t> out;
        for (const char* row : rows) {
            std::string_view r(row);
            auto p = r.find(c);
            if (p == std::string_view::npos) continue;
            if (p > 0) out.push_back(char32_t(r[p - 1]));
            if (p + 1 < r.size()) out.push_back(char32_t(r[p + 1]));
        }
        return out;
    };
    for (char c = 'a'; c <= 'z'; ++c) {
        if (!t.lookup(char32_t(c))) t.set(char32_t(c), neighbours(c));
    }
    for (char c = 'A'; c <= 'Z'; ++c) {
        if (t.lookup(char32_t(c))) continue;
        std::vector<char32_t> ups;
        for (char32_t n : neighbours(char(std::tolower(c)))) {
            ups.push_back(char32_t(std::toupper(int(n))));
        }
        t.set(char32_t(c), ups);
    }
    return t;
}

CharConfusionTable CharConfusionTable::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read confusion table: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("confusion table " + path + ": " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error("confusion table " + path + ": expected object");
    CharConfusionTable t;
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::u32string key = utf8_decode(it.key());
        if (key.size() != 1) {
            throw std::runtime_error("confusion table " + path + ": key '" + it.key() +
                                     "' is not a single character");
        }
        if (!it.value().is_array()) {
            throw std::runtime_error("confusion table " + path + ": value for '" + it.key() +
                                     "' is not an array");
        }
        std::vector<char32_t> reps;
        for (const auto& v : it.value()) {
            std::u32string r = utf8_decode(v.get<std::string>());
            if (r.size() != 1) {
                throw std::runtime_error("confusion table " + path +
                                         ": replacement is not a single character");
            }
            reps.push_back(r[0]);
        }
        t.set(key[0], std::move(reps));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Distance and similarity
// ---------------------------------------------------------------------------

std::size_t levenshtein_distance(std::u32string_view a, std::u32string_view b) {
    const std::size_t n = a.size(), m = b.size();
    if (n == 0) return m;
    if (m == 0) return n;
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

std::size_t levenshtein_distance(std::string_view a, std::string_view b) {
    return levenshtein_distance(utf8_decode(a), utf8_decode(b));
}

double similarity(std::u32string_view a, std::u32string_view b) {
    std::size_t mx = std::max(a.size(), b.size());
    if (mx == 0) throw std::invalid_argument("similarity: both strings empty");
    return 1.0 - double(levenshtein_distance(a, b)) / double(mx);
}

double similarity(std::string_view a, std::string_view b) {
    return similarity(utf8_decode(a), utf8_decode(b));
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

std::optional<CorruptResult> corrupt(std::u32string_view token, const NoiseLevel& level,
                                     const CharConfusionTable& table, RngState& rng,
                                     const CorruptOptions& opts) {
    if (token.size() < opts.min_token_length) {
        throw std::invalid_argument("corrupt: token '" + utf8_encode(token) +
                                    "' shorter than minimum length " +
                                    std::to_string(opts.min_token_length));
    }
    if (level.min_alterations < 1 || level.max_alterations < level.min_alterations) {
        throw std::invalid_argument("corrupt: invalid alteration range");
    }
    const std::size_t len = token.size();
    const std::u32string original(token);
    std::vector<std::size_t> idx(len);

    for (int attempt = 0; attempt < opts.max_retries; ++attempt) {
        auto drawn = rng.next_int(level.min_alterations, level.max_alterations);
        std::size_t k = std::min<std::size_t>(std::size_t(drawn), len);

        // k distinct positions via partial Fisher-Yates.
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t j = 0; j < k; ++j) {
            std::size_t swap_with = j + rng.next_below(len - j);
            std::swap(idx[j], idx[swap_with]);
        }
        std::vector<std::size_t> positions(idx.begin(), idx.begin() + k);
        std::sort(positions.rbegin(), positions.rend());  // apply high-to-low

        std::u32string result = original;
        std::vector<Edit> edits;
        edits.reserve(k);
        for (std::size_t pos : positions) {
            bool want_sub = rng.next_double() < opts.substitution_prob;
            const std::vector<char32_t>* reps =
                want_sub ? table.lookup(original[pos]) : nullptr;
            if (want_sub && reps != nullptr && !reps->empty()) {
                char32_t r = (*reps)[rng.next_below(reps->size())];
                result[pos] = r;
                edits.push_back({pos, true, r});
            } else {
                result.erase(result.begin() + std::ptrdiff_t(pos));
                edits.push_back({pos, false, 0});
            }
        }
        if (result.empty() || result == original) continue;
        double sim = similarity(original, result);
        if (!level.band.contains(sim)) continue;

        std::sort(edits.begin(), edits.end(),
                  [](const Edit& a, const Edit& b) { return a.pos < b.pos; });
        return CorruptResult{Variant{utf8_encode(result), sim, int(k)}, std::move(edits)};
    }
    return std::nullopt;
}

std::optional<CorruptResult> corrupt(std::string_view token, const NoiseLevel& level,
                                     const CharConfusionTable& table, RngState& rng,
                                     const CorruptOptions& opts) {
    return corrupt(utf8_decode(token), level, table, rng, opts);
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

bool is_letter(char32_t cp) {
    if ((cp >= U'a' && cp <= U'z') || (cp >= U'A' && cp <= U'Z')) return true;
    if (cp >= 0xC0 && cp <= 0xFF && cp != 0xD7 && cp != 0xF7) return true;  // Latin-1
    if (cp >= 0x100 && cp <= 0x17F) return true;                           // Latin Ext-A
    return false;
}

namespace {

bool is_separator_cp(char32_t cp) {
    switch (cp) {
        case U' ': case U'\t': case U'\n': case U'\r': case U'\f': case U'\v':
        case 0xA0: case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F:
        case 0x3000:
            return true;
        default:
            break;
    }
    if (cp >= 0x2000 && cp <= 0x200A) return true;
    if (cp < 0x80 && std::ispunct(int(cp))) return true;
    switch (cp) {
        case 0xAB: case 0xBB:              // « »
        case 0x2018: case 0x2019: case 0x201A: case 0x201C: case 0x201D: case 0x201E:
        case 0x2039: case 0x203A:
        case 0x2013: case 0x2014: case 0x2015:
        case 0x2026: case 0xB7: case 0x2022:
        case 0xA1: case 0xBF:
            return true;
        default:
            return false;
    }
}

char32_t lower_cp(char32_t cp) {
    if (cp >= U'A' && cp <= U'Z') return cp + 0x20;
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
    if (cp == 0x178) return 0xFF;  // Ÿ
    if (cp >= 0x100 && cp <= 0x177 && (cp % 2 == 0)) return cp + 1;
    if (cp >= 0x179 && cp <= 0x17D && (cp % 2 == 1)) return cp + 1;
    return cp;
}

}  // namespace

std::vector<std::string> ingest_corpus(const std::vector<std::string>& paths,
                                       const TokenFilter& filter) {
    if (paths.empty()) throw std::runtime_error("ingest_corpus: no corpus files given");
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;

    auto consider = [&](std::u32string& tok) {
        if (tok.empty()) return;
        std::u32string t;
        t.swap(tok);
        if (filter.lowercase) {
            for (char32_t& cp : t) cp = lower_cp(cp);
        }
        if (t.size() < filter.min_length) return;
        for (char32_t cp : t) {
            if (!is_letter(cp)) return;
        }
        std::string enc = utf8_encode(t);
        if (filter.allowlist && filter.allowlist->find(enc) == filter.allowlist->end()) return;
        if (seen.insert(enc).second) out.push_back(std::move(enc));
    };

    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read corpus file: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        std::u32string cps = utf8_decode(buf.str());
        std::u32string tok;
        for (char32_t cp : cps) {
            if (is_separator_cp(cp)) {
                consider(tok);
            } else {
                tok.push_back(cp);
            }
        }
        consider(tok);
    }
    if (out.empty()) throw std::runtime_error("ingest_corpus: no tokens survived filtering");
    return out;
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

const std::optional<Variant>& TokenPairRecord::variant(Level level) const {
    switch (level) {
        case Level::low: return low;
        case Level::average: return average;
        default: return high;
    }
}

std::optional<Variant>& TokenPairRecord::variant(Level level) {
    switch (level) {
        case Level::low: return low;
        case Level::average: return average;
        default: return high;
    }
}

LevelStats& DatasetStats::for_level(Level level) {
    switch (level) {
        case Level::low: return low;
        case Level::average: return average;
        default: return high;
    }
}

const LevelStats& DatasetStats::for_level(Level level) const {
    switch (level) {
        case Level::low: return low;
        case Level::average: return average;
        default: return high;
    }
}

Dataset build_dataset(const std::vector<std::string>& tokens,
                      const std::vector<NoiseLevel>& levels, const CharConfusionTable& table,
                      const RngState& rng, const CorruptOptions& opts, int workers) {
    if (tokens.empty()) throw std::invalid_argument("build_dataset: empty token set");
    for (Level name : kAllLevels) level_by_name(levels, name);  // all three required

    struct Slot {
        std::optional<Variant> v[3];
    };
    std::vector<Slot> slots(tokens.size());

    parallel_chunks(tokens.size(), 256, workers, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            std::u32string cps = utf8_decode(tokens[i]);
            RngState sub = rng.split("token/" + std::to_string(i));
            for (Level name : kAllLevels) {
                const NoiseLevel& level = level_by_name(levels, name);
                RngState lr = sub.split(level_name(name));
                auto res = corrupt(cps, level, table, lr, opts);
                if (res) slots[i].v[int(name)] = std::move(res->variant);
            }
        }
    });

    Dataset ds;
    ds.stats.tokens_in = tokens.size();
    double sim_sum[3] = {0, 0, 0};
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const Slot& s = slots[i];
        bool complete = s.v[0] && s.v[1] && s.v[2];
        for (Level name : kAllLevels) {
            if (!s.v[int(name)]) ds.stats.for_level(name).unsatisfiable++;
        }
        if (!complete) continue;
        TokenPairRecord rec;
        rec.correct = tokens[i];
        for (Level name : kAllLevels) {
            rec.variant(name) = s.v[int(name)];
            sim_sum[int(name)] += s.v[int(name)]->sim;
        }
        ds.records.push_back(std::move(rec));
    }
    ds.stats.records_out = ds.records.size();
    ds.stats.dropped = ds.stats.tokens_in - ds.stats.records_out;
    for (Level name : kAllLevels) {
        ds.stats.for_level(name).mean_similarity =
            ds.records.empty() ? 0.0 : sim_sum[int(name)] / double(ds.records.size());
    }
    return ds;
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

std::string record_to_json_line(const TokenPairRecord& rec) {
    nlohmann::ordered_json j;
    j["correct"] = rec.correct;
    for (Level name : kAllLevels) {
        const auto& v = rec.variant(name);
        if (v) {
            j[level_name(name)] = {{"text", v->text}, {"sim", v->sim}, {"k", v->k}};
        } else {
            j[level_name(name)] = nullptr;
        }
    }
    return j.dump();
}

TokenPairRecord record_from_json_line(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    TokenPairRecord rec;
    rec.correct = j.at("correct").get<std::string>();
    for (Level name : kAllLevels) {
        const char* key = level_name(name);
        if (!j.contains(key) || j[key].is_null()) continue;
        Variant v;
        v.text = j[key].at("text").get<std::string>();
        v.sim = j[key].at("sim").get<double>();
        v.k = j[key].at("k").get<int>();
        rec.variant(name) = std::move(v);
    }
    return rec;
}

void write_dataset_jsonl(const std::string& path, const std::vector<TokenPairRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path);
    for (const auto& rec : records) out << record_to_json_line(rec) << '\n';
}

std::vector<TokenPairRecord> read_dataset_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read dataset file: " + path);
    std::vector<TokenPairRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(record_from_json_line(line));
    }
    return out;
}

}  // namespace ocrsn::noise
