#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ssmrank/error.hpp"

namespace ssmrank {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three
/// special ids that never collide with them.
struct ByteTokenizer {
  static constexpr int kPad = 256;
  static constexpr int kEos = 257;
  static constexpr int kSep = 258;
  static constexpr int kVocabSize = 259;

  static std::vector<int> encode(std::string_view s) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(c);
    return ids;
  }

  /// Inverse of encode. Special ids are dropped when `skip_special`, otherwise
  /// they are an input error.
  static std::string decode(const std::vector<int>& ids, bool skip_special = false) {
    std::string s;
    s.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int id = ids[i];
      if (id >= 0 && id < 256) {
        s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
      } else if (is_special(id) && skip_special) {
        continue;
      } else {
        throw InputError("decode: id " + std::to_string(id) + " at position " + std::to_string(i) +
                         " is not a byte");
      }
    }
    return s;
  }

  static bool is_special(int id) { return id == kPad || id == kEos || id == kSep; }
};

}  // namespace ssmrank
