#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace forge15 {

// Byte-level vocabulary: ids 0..255 are raw bytes, 256..263 are specials.
namespace tok {
constexpr int BOS = 256;
constexpr int EOS = 257;
constexpr int SYS = 258;
constexpr int USER = 259;
constexpr int ASST = 260;
constexpr int THINK_OPEN = 261;
constexpr int THINK_CLOSE = 262;
constexpr int PAD = 263;
constexpr int VOCAB = 264;
}  // namespace tok

// Raw bytes of `text`, no specials.
std::vector<int> encode_bytes(std::string_view text);

// Inverse of encode_bytes; ids >= 256 are skipped.
std::string decode_bytes(const std::vector<int>& tokens);

// Decode a sampled completion into scoring text: byte tokens verbatim,
// THINK_OPEN/THINK_CLOSE as the given tag strings, stop at EOS, other
// specials dropped.
std::string decode_for_scoring(const std::vector<int>& tokens,
                               std::string_view open_tag,
                               std::string_view close_tag);

}  // namespace forge15
