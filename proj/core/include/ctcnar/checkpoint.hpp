// Copyright 2026 The ctcnar Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "ctcnar/model.hpp"

namespace ctcnar {

inline constexpr char kCheckpointMagic[4] = {'N', 'A', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Free-form string metadata stored next to the weights (training strategy, seed, ...).
using CheckpointMeta = std::map<std::string, std::string>;

struct Checkpoint {
  Model<float> model;
  CheckpointMeta meta;
};

/// Little-endian binary; layout documented in docs/checkpoint_format.md.
void save_checkpoint(std::ostream& out, const Model<float>& model, const CheckpointMeta& meta = {});
void save_checkpoint(const std::string& path, const Model<float>& model, const CheckpointMeta& meta = {});

/// Throws ContractViolation on bad magic, unsupported version, or missing/mis-shaped arrays.
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctcnar
