#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fin/detail/text.hpp"
#include "fin/errors.hpp"

namespace fin {

/// String key to contiguous id; id 0 is the out-of-vocabulary slot.
class vocab_map {
 public:
  static constexpr std::int32_t oov = 0;

  std::int32_t add(std::string_view key) {
    if (const auto it = ids_.find(std::string(key)); it != ids_.end()) return it->second;
    if (frozen_) throw data_error("vocabulary is frozen; cannot add '" + std::string(key) + "'");
    if (key.find_first_of("\t\n\r") != std::string_view::npos) {
      throw data_error("vocabulary keys may not contain tabs or newlines");
    }
    const auto id = static_cast<std::int32_t>(keys_.size() + 1);
    keys_.emplace_back(key);
    ids_.emplace(keys_.back(), id);
    return id;
  }

  std::int32_t lookup(std::string_view key) const {
    const auto it = ids_.find(std::string(key));
    return it == ids_.end() ? oov : it->second;
  }

  bool contains(std::string_view key) const { return ids_.count(std::string(key)) != 0; }

  const std::string& key(std::int32_t id) const {
    if (id <= 0 || static_cast<std::size_t>(id) > keys_.size()) throw data_error("vocabulary id out of range");
    return keys_[static_cast<std::size_t>(id) - 1];
  }

  /// Table rows needed to embed this vocabulary (keys + the OOV row).
  std::size_t size() const { return keys_.size() + 1; }
  std::size_t key_count() const { return keys_.size(); }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  bool operator==(const vocab_map& o) const { return keys_ == o.keys_ && frozen_ == o.frozen_; }

  void save(std::ostream& out) const {
    for (std::size_t i = 0; i < keys_.size(); ++i) out << keys_[i] << '\t' << (i + 1) << '\n';
  }

  /// Loads `key \t id` lines; ids must be 1..n in order. The result is frozen.
  static vocab_map load(std::istream& in) {
    vocab_map v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto s = detail::strip_cr(line);
      if (s.empty()) continue;
      const auto cols = detail::split(s, '\t');
      if (cols.size() != 2) throw format_error("vocab line " + std::to_string(line_no) + ": expected key<TAB>id");
      const auto id = detail::parse_number<std::int32_t>(cols[1], "id", line_no);
      if (static_cast<std::size_t>(id) != v.keys_.size() + 1) {
        throw format_error("vocab line " + std::to_string(line_no) + ": ids must be contiguous from 1");
      }
      if (v.contains(cols[0])) throw format_error("vocab line " + std::to_string(line_no) + ": duplicate key");
      v.add(cols[0]);
    }
    v.freeze();
    return v;
  }

 private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::int32_t> ids_;
  bool frozen_ = false;
};

}  // namespace fin
