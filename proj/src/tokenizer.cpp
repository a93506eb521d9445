#include "ocrsn/tokenizer.hpp"

#include <stdexcept>

#include "ocrsn/utf8.hpp"

namespace ocrsn::model {

CharTokenizer::CharTokenizer(std::u32string alphabet) {
    alphabet_.reserve(alphabet.size());
    for (char32_t cp : alphabet) {
        if (ids_.count(cp)) continue;
        ids_[cp] = int(alphabet_.size()) + 2;
        alphabet_.push_back(cp);
    }
}

std::vector<int> CharTokenizer::encode(std::u32string_view cps) const {
    std::vector<int> out;
    out.reserve(cps.size());
    for (char32_t cp : cps) {
        auto it = ids_.find(cp);
        out.push_back(it == ids_.end() ? unk_id : it->second);
    }
    return out;
}

std::vector<int> CharTokenizer::encode(std::string_view utf8) const {
    return encode(utf8_decode(utf8));
}

std::string CharTokenizer::decode(std::span<const int> ids) const {
    std::u32string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id == pad_id) continue;
        if (id == unk_id) {
            out.push_back(0xFFFD);
            continue;
        }
        int pos = id - 2;
        if (pos < 0 || pos >= int(alphabet_.size())) {
            throw std::invalid_argument("CharTokenizer::decode: id out of range: " +
                                        std::to_string(id));
        }
        out.push_back(alphabet_[std::size_t(pos)]);
    }
    return utf8_encode(out);
}

}  // namespace ocrsn::model
