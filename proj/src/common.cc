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

#include "disagsim/common.h"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>

namespace disagsim {

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kEncoder:
      return "encoder";
    case Stage::kTransformer:
      return "transformer";
    case Stage::kDecoder:
      return "decoder";
  }
  return "unknown";
}

char stage_letter(Stage s) { return "ETD"[index_of(s)]; }

std::optional<Stage> parse_stage(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (lower == "e" || lower == "encoder") return Stage::kEncoder;
  if (lower == "t" || lower == "transformer" || lower == "dit") {
    return Stage::kTransformer;
  }
  if (lower == "d" || lower == "decoder") return Stage::kDecoder;
  return std::nullopt;
}

std::string RequestId::to_string() const {
  return fmt::format("{:016x}{:016x}", hi, lo);
}

std::optional<RequestId> RequestId::parse(std::string_view hex) {
  if (hex.size() != 32) return std::nullopt;
  RequestId id;
  for (size_t i = 0; i < 32; ++i) {
    char c = hex[i];
    uint64_t v;
    if (c >= '0' && c <= '9') {
      v = static_cast<uint64_t>(c - '0');
    } else if (c >= 'a' && c <= 'f') {
      v = static_cast<uint64_t>(c - 'a' + 10);
    } else if (c >= 'A' && c <= 'F') {
      v = static_cast<uint64_t>(c - 'A' + 10);
    } else {
      return std::nullopt;
    }
    uint64_t& word = i < 16 ? id.hi : id.lo;
    word = (word << 4) | v;
  }
  return id;
}

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, std::string_view name) {
  // FNV-1a over the name, folded into the seed.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(seed ^ mix64(h));
}

}  // namespace disagsim
