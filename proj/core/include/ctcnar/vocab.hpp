// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace ctcnar {

inline constexpr int kPad = 0;
inline constexpr int kBlank = 1;
inline constexpr int kSos = 2;
inline constexpr int kEos = 3;
inline constexpr int kMask = 4;
inline constexpr int kFirstContentId = 5;

inline bool is_content(int id) { return id >= kFirstContentId; }

/// Token inventory: five reserved symbols followed by content tokens.
class Vocab {
 public:
  /// Content tokens are named a, b, c, ... then t26, t27, ...
  explicit Vocab(int content_tokens);
  explicit Vocab(std::vector<std::string> content_names);

  int size() const { return static_cast<int>(names_.size()); }
  int content_size() const { return size() - kFirstContentId; }
  const std::string& token(int id) const;
  int id(const std::string& token) const;

  std::string render(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace ctcnar
