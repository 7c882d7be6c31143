#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "archon/modality_codecs.hpp"

namespace archon {

struct WorldConfig {
  std::uint32_t identities = 4;
  std::uint32_t frames = 29;        // L, must be 1 mod 4
  std::uint32_t lexicon_size = 12;  // script words in play
  std::uint32_t words_per_window = 6;
  std::uint32_t sample_rate = 800;  // 25 fps -> 32-sample windows
  std::uint32_t height = 128, width = 128;
  std::uint32_t shape_dim = 16, expr_dim = 8, pose_dim = 6;
  // Identity carrier frequencies: freq_base + i * freq_step. Steps on the
  // 25 Hz frame-rate grid keep every window carrier-phase aligned; off-grid
  // steps spread windows over many phases instead.
  double freq_base_hz = 75.0;
  double freq_step_hz = 50.0;
  std::uint64_t seed = 0;
};

/// One synthetic record: mutually consistent description, script, speech,
/// animation, semantic video and reference image for a single identity.
struct SampleRecord {
  std::uint64_t seed = 0;
  std::uint32_t identity = 0;
  std::string description;
  std::string script;
  std::string past_script;
  SpeechSignal speech;
  AnimationParams animation;
  SemanticVideo semantic;
  RgbImage image;  // palette render of semantic frame 0
};

/// Deterministic identity tables: per identity one base frequency, one
/// attribute word per family, blob geometry and animation amplitudes.
class AvatarWorld {
 public:
  static AvatarWorld create(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  const Palette& palette() const { return palette_; }

  double base_frequency(std::uint32_t identity) const;
  const std::vector<std::string>& attribute_words(std::uint32_t identity) const;
  const std::vector<double>& shape_vector(std::uint32_t identity) const;

  /// Blob geometry per identity: face rx, face ry, eye radius, eye dx,
  /// mouth width (all as fractions of the frame side).
  const std::array<double, 5>& blob_geometry(std::uint32_t identity) const;

 private:
  WorldConfig config_;
  Palette palette_ = Palette::generate();
  std::vector<double> base_freq_;
  std::vector<std::vector<std::string>> words_;
  std::vector<std::vector<double>> shapes_;
  std::vector<std::array<double, 5>> blobs_;
};

/// Fully deterministic record generation; window_offset -1 yields the
/// temporally preceding window of the same record (for past-state inputs).
SampleRecord generate_record(const AvatarWorld& world, std::uint64_t record_seed,
                             std::uint32_t frames, std::int32_t window_offset = 0);

std::vector<SampleRecord> generate_dataset(const AvatarWorld& world,
                                           std::size_t n,
                                           std::uint64_t base_seed);

struct AmbiguousDataset {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> heldout;
};

/// Speech-to-semantic task data where the correct blob layout is a
/// function of identity and identity is recoverable from speech only
/// through the base frequency. Seeded, disjoint splits.
AmbiguousDataset ambiguous_task_dataset(const AvatarWorld& world, std::size_t n,
                                        std::uint64_t seed);

/// Index of the largest DFT magnitude over positive frequencies, as a
/// frequency in Hz (test oracle helper).
double dominant_frequency(const SpeechSignal& signal);

}  // namespace archon
