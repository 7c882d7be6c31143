#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "archon/config.hpp"
#include "archon/model.hpp"
#include "archon/sampler.hpp"
#include "archon/synthdata.hpp"
#include "archon/tasks.hpp"

#include "json.hpp"

namespace archon {

/// All trained codecs plus the palette, as one loadable bundle.
struct CodecSuite {
  RvqCodec speech;
  RvqCodec shape;
  RvqCodec expression;
  RvqCodec pose;
  NormalizationStats stats;
  SemanticCodec semantic;
  ImageCodec image;
  Palette palette;

  AnimationCodecs animation() const {
    return AnimationCodecs{shape, expression, pose, stats};
  }
};

struct CodecReport {
  // Per codec kind: residual distortion after each level and per-level
  // codebook utilization, measured on the training data.
  nlohmann::json to_json() const { return body; }
  nlohmann::json body;
};

/// Trains every codebook (animation x3, speech, semantic) from the record
/// set with seeds derived from the config.
CodecSuite train_codec_suite(const RunConfig& config,
                             std::span<const SampleRecord> records,
                             CodecReport* report = nullptr);

void save_codec_suite(const std::filesystem::path& dir, const CodecSuite& suite);
CodecSuite load_codec_suite(const std::filesystem::path& dir,
                            const RunConfig& config);

// ---------------------------------------------------------------------------
// Task materialization

/// Encodes one modality of a record into a globalized prompt segment. Past
/// states read from `past`; the two image-output rows that tag
/// expression/pose as time-invariant materialize as current-state
/// segments (the record has exactly one window of data).
Segment encode_modality(const ModalityRef& ref, const SampleRecord& current,
                        const SampleRecord& past, const CodecSuite& suite,
                        const VocabularyLayout& layout);

/// A full task instance for one registry spec, output payload included.
TaskInstance materialize(const TaskSpec& spec, const SampleRecord& current,
                         const SampleRecord& past, const CodecSuite& suite,
                         const VocabularyLayout& layout);

/// Decodes a generated payload back into record modalities (inverse of
/// encode_modality up to quantization). Writes the decoded modality into
/// the record slot it belongs to.
void decode_payload_into(SampleRecord& record, const Segment& segment,
                         const CodecSuite& suite, const VocabularyLayout& layout,
                         const WorldConfig& world);

// ---------------------------------------------------------------------------
// Window sampling and task perplexity

struct WindowBatch {
  std::vector<PackedWindow> windows;
  std::vector<std::size_t> oversize_specs;  // reported, not fatal
};

/// Samples task instances by weight and first-fit packs them; a window is
/// closed after two consecutive rejections, then padded.
WindowBatch sample_windows(const Registry& registry,
                           const SamplerWeights& weights,
                           std::span<const SampleRecord> records,
                           const AvatarWorld& world, const CodecSuite& suite,
                           const VocabularyLayout& layout, std::size_t budget,
                           std::size_t n_windows, std::uint64_t seed);

/// p_i for one registry spec: exp(mean target-token NLL) over n_samples
/// seeded record draws.
double estimate_task_perplexity(const Model& model, const TaskSpec& spec,
                                std::span<const SampleRecord> records,
                                const AvatarWorld& world,
                                const CodecSuite& suite,
                                const VocabularyLayout& layout,
                                std::size_t n_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset directory format

void save_dataset(const std::filesystem::path& dir,
                  std::span<const SampleRecord> records,
                  const RunConfig& config);
std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir);
std::filesystem::path record_dir(const std::filesystem::path& root,
                                 std::size_t index);

// ---------------------------------------------------------------------------
// Desk evaluation metrics

double semantic_label_accuracy(const SemanticVideo& reference,
                               const SemanticVideo& prediction);
double animation_mse(const AnimationParams& reference,
                     const AnimationParams& prediction);
bool script_exact_match(const std::string& reference,
                        const std::string& prediction);
double description_attribute_accuracy(const std::string& reference,
                                      const std::string& prediction);
double speech_spectral_correlation(const SpeechSignal& reference,
                                   const SpeechSignal& prediction);

}  // namespace archon
