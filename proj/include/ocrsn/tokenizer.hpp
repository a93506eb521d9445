#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ocrsn::model {

// Character-level tokenizer: one id per codepoint, plus padding and unknown
// symbols. Encoding is total (unseen characters map to unk); decoding
// round-trips any in-alphabet string.
class CharTokenizer {
public:
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;

    CharTokenizer() = default;
    explicit CharTokenizer(std::u32string alphabet);  // dedups, keeps given order

    int vocab_size() const { return int(alphabet_.size()) + 2; }
    const std::u32string& alphabet() const { return alphabet_; }

    std::vector<int> encode(std::string_view utf8) const;
    std::vector<int> encode(std::u32string_view cps) const;
    std::string decode(std::span<const int> ids) const;

private:
    std::u32string alphabet_;
    std::unordered_map<char32_t, int> ids_;
};

}  // namespace ocrsn::model
