/* Copyright 2026 The disagsim Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace disagsim {

// Pipeline stages in dataflow order. Ordering is also the tie-break order
// wherever the code has to pick "the first" stage.
enum class Stage : uint8_t { kEncoder = 0, kTransformer = 1, kDecoder = 2 };

inline constexpr std::array<Stage, 3> kAllStages = {
    Stage::kEncoder, Stage::kTransformer, Stage::kDecoder};

template <typename T>
using PerStage = std::array<T, 3>;

constexpr size_t index_of(Stage s) { return static_cast<size_t>(s); }

std::string_view stage_name(Stage s);
char stage_letter(Stage s);
// Accepts "E"/"T"/"D", "encoder"/"transformer"/"decoder" (case-insensitive).
std::optional<Stage> parse_stage(std::string_view text);

// 128-bit request identifier, printed as 32 lowercase hex digits.
struct RequestId {
  uint64_t hi = 0;
  uint64_t lo = 0;

  std::string to_string() const;
  static std::optional<RequestId> parse(std::string_view hex);

  friend auto operator<=>(const RequestId&, const RequestId&) = default;
};

struct RequestIdHash {
  size_t operator()(const RequestId& id) const noexcept {
    return std::hash<uint64_t>{}(id.hi * 0x9e3779b97f4a7c15ULL ^ id.lo);
  }
};

// Error hierarchy. Each carries a category so the CLI can map to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvariantViolation : public Error {
 public:
  using Error::Error;
};

// splitmix64 step; used to expand one user seed into named sub-seeds.
uint64_t mix64(uint64_t x);
uint64_t derive_seed(uint64_t seed, std::string_view name);

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw. Portable
// across standard libraries, unlike std::uniform_real_distribution.
inline double unit_interval(uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

}  // namespace disagsim
