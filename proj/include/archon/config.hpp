#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "archon/model.hpp"
#include "archon/synthdata.hpp"
#include "archon/vocab.hpp"

#include "json.hpp"

namespace archon {

struct RvqKindConfig {
  std::uint32_t levels = 0;
  std::uint32_t codes = 0;
};

struct CodecsConfig {
  RvqKindConfig speech{4, 1024};
  RvqKindConfig shape{8, 512};
  RvqKindConfig expression{8, 2048};
  RvqKindConfig pose{6, 512};
  std::uint32_t semantic_codes = 1024;  // 2^10
  std::uint32_t image_bits = 10;        // 18 at reference scale
  std::uint32_t kmeans_iters = 12;
  std::uint64_t palette_seed = Palette::kDefaultSeed;
};

struct SamplerConfig {
  std::size_t budget = 8192;
  double weight_floor = 1e-6;
  std::uint32_t samples_per_task = 2;
  std::uint64_t seed = 0;
};

/// One JSON document driving the whole pipeline. Parsing is strict:
/// unknown keys are rejected by name.
struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  CodecsConfig codecs;
  ModelConfig model;  // vocab_size 0 means "derive from the layout"
  TrainConfig train;
  SamplerConfig sampler;

  /// Canonical layout entry order: script, description, then speech,
  /// shape, expression, pose level by level, then semantic and image.
  std::vector<LayoutEntry> layout_entries() const;
  VocabularyLayout layout() const;

  /// Model config with vocab_size resolved against the layout.
  ModelConfig resolved_model() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load_file(const std::filesystem::path& path);
  void save_file(const std::filesystem::path& path) const;

  /// A small configuration for laptop-scale runs.
  static RunConfig desk_default();
};

}  // namespace archon
