#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ocrsn/rng.hpp"

namespace ocrsn::noise {

enum class Level { low, average, high };

const char* level_name(Level level);
Level level_from_name(std::string_view name);
inline constexpr Level kAllLevels[] = {Level::low, Level::average, Level::high};

// [lo, hi) by default; hi_inclusive closes the upper end.
struct SimilarityBand {
    double lo = 0.0;
    double hi = 1.0;
    bool hi_inclusive = false;

    bool contains(double s) const { return s >= lo && (s < hi || (hi_inclusive && s == hi)); }
};

struct NoiseLevel {
    Level name = Level::low;
    int min_alterations = 1;
    int max_alterations = 1;
    SimilarityBand band;
};

// low: 1 alteration, [0.8, 1.0]; average: 2-5, [0.6, 0.8); high: 3-10, [0, 0.6).
std::vector<NoiseLevel> default_levels();
const NoiseLevel& level_by_name(const std::vector<NoiseLevel>& levels, Level name);

// Maps a character to visually confusable replacements. The built-in table is
// total over [a-zA-Z]; characters without an entry fall back to deletion when
// drawn for substitution.
class CharConfusionTable {
public:
    static CharConfusionTable defaults();
    static CharConfusionTable from_json_file(const std::string& path);

    void set(char32_t from, std::vector<char32_t> to);
    const std::vector<char32_t>* lookup(char32_t c) const;
    const std::map<char32_t, std::vector<char32_t>>& entries() const { return map_; }

private:
    std::map<char32_t, std::vector<char32_t>> map_;
};

struct Variant {
    std::string text;
    double sim = 0.0;
    int k = 0;  // alterations applied
};

struct TokenPairRecord {
    std::string correct;
    std::optional<Variant> low, average, high;

    const std::optional<Variant>& variant(Level level) const;
    std::optional<Variant>& variant(Level level);
};

// Minimal single-character edit count (insert/delete/substitute), computed
// over codepoints.
std::size_t levenshtein_distance(std::u32string_view a, std::u32string_view b);
std::size_t levenshtein_distance(std::string_view a, std::string_view b);

// 1 - distance / max(|a|, |b|), lengths in codepoints. Rejects two empties.
double similarity(std::u32string_view a, std::u32string_view b);
double similarity(std::string_view a, std::string_view b);

struct CorruptOptions {
    double substitution_prob = 0.7;  // remaining mass goes to deletion
    int max_retries = 50;
    std::size_t min_token_length = 4;  // codepoints
};

struct Edit {
    std::size_t pos = 0;           // index into the original codepoint sequence
    bool is_substitution = false;  // false = deletion
    char32_t replacement = 0;
};

struct CorruptResult {
    Variant variant;
    std::vector<Edit> edits;  // positions refer to the original token
};

// Draws an edit count from the level's range, applies the edits at distinct
// positions, and rejection-samples until the altered token lands in the
// level's similarity band. Empty optional when retries are exhausted.
std::optional<CorruptResult> corrupt(std::u32string_view token, const NoiseLevel& level,
                                     const CharConfusionTable& table, RngState& rng,
                                     const CorruptOptions& opts = {});
std::optional<CorruptResult> corrupt(std::string_view token, const NoiseLevel& level,
                                     const CharConfusionTable& table, RngState& rng,
                                     const CorruptOptions& opts = {});

struct TokenFilter {
    std::size_t min_length = 4;  // codepoints
    bool lowercase = false;
    std::optional<std::unordered_set<std::string>> allowlist;
};

// Whitespace/punctuation tokenization, first-seen-order dedup, then the
// filter (length, alphabetic-only, optional allowlist). Throws on unreadable
// files and on an empty result.
std::vector<std::string> ingest_corpus(const std::vector<std::string>& paths,
                                       const TokenFilter& filter);

// Latin letter (ASCII, Latin-1 or Latin Extended-A).
bool is_letter(char32_t cp);

struct LevelStats {
    std::size_t unsatisfiable = 0;   // tokens this level rejected
    double mean_similarity = 0.0;    // over kept records
};

struct DatasetStats {
    std::size_t tokens_in = 0;
    std::size_t records_out = 0;
    std::size_t dropped = 0;
    LevelStats low, average, high;

    LevelStats& for_level(Level level);
    const LevelStats& for_level(Level level) const;
};

struct Dataset {
    std::vector<TokenPairRecord> records;
    DatasetStats stats;
};

// One record per token carrying all three band-verified variants; tokens
// unsatisfiable at any level are dropped entirely and counted. Each token's
// draws come from an index-keyed substream, so output is identical for any
// worker count.
Dataset build_dataset(const std::vector<std::string>& tokens,
                      const std::vector<NoiseLevel>& levels, const CharConfusionTable& table,
                      const RngState& rng, const CorruptOptions& opts = {}, int workers = 1);

std::string record_to_json_line(const TokenPairRecord& rec);
TokenPairRecord record_from_json_line(const std::string& line);
void write_dataset_jsonl(const std::string& path, const std::vector<TokenPairRecord>& records);
std::vector<TokenPairRecord> read_dataset_jsonl(const std::string& path);

}  // namespace ocrsn::noise
