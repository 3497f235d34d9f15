// Copyright 2026 The beamsplat Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "beamsplat/common.hpp"

#include <map>
#include <sstream>
#include <string>
#include <type_traits>

namespace beamsplat {

/// `key = value` lines, '#' comments. Unknown keys are left for the caller
/// to reject via `reject_unused()`.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  template <typename T>
  void get(const std::string& key, T& out) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    it->second.used = true;
    if constexpr (std::is_same_v<T, bool>) {
      const std::string& v = it->second.value;
      if (v == "1" || v == "true" || v == "on" || v == "yes") out = true;
      else if (v == "0" || v == "false" || v == "off" || v == "no") out = false;
      else throw ParseError("expected boolean for '" + key + "'", it->second.line);
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = it->second.value;
    } else {
      std::istringstream ss(it->second.value);
      T v{};
      if (!(ss >> v) || !(ss >> std::ws).eof()) {
        throw ParseError("bad value '" + it->second.value + "' for '" + key + "'", it->second.line);
      }
      out = v;
    }
  }

  /// Throws on the first key no getter consumed.
  void reject_unused() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool used = false;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace beamsplat
