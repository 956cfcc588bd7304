#include "forge15/tokenizer.hpp"

namespace forge15 {

std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

std::string decode_bytes(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
    }
    return out;
}

std::string decode_for_scoring(const std::vector<int>& tokens,
                               std::string_view open_tag,
                               std::string_view close_tag) {
    std::string out;
    out.reserve(tokens.size() + open_tag.size() + close_tag.size());
    for (int t : tokens) {
        if (t >= 0 && t < 256) {
            out.push_back(static_cast<char>(t));
        } else if (t == tok::THINK_OPEN) {
            out.append(open_tag);
        } else if (t == tok::THINK_CLOSE) {
            out.append(close_tag);
        } else if (t == tok::EOS) {
            break;
        }
    }
    return out;
}

}  // namespace forge15
