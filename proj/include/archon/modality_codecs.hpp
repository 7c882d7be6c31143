#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "archon/quantizers.hpp"
#include "archon/vocab.hpp"

namespace archon {

// ---------------------------------------------------------------------------
// Domain types

inline constexpr std::uint32_t kNumLabels = 21;
inline constexpr std::uint32_t kSemanticGrid = 8;   // 8x8 cells per latent frame
inline constexpr std::uint32_t kImageGrid = 16;     // 16x16 patch tokens
inline constexpr std::uint32_t kTextSentinel = 256;
inline constexpr std::uint32_t kTextVocabSize = 257;  // bytes + sentinel

/// Reference token count for 5 s of speech quoted by the source model's
/// accounting; our configuration-derived count differs (25 fps x 4 levels
/// x 5 s = 500) and is the one the pipeline uses. Kept as documentation.
inline constexpr std::uint32_t kReferenceSpeechTokens5s = 940;

/// 3DMM-style animation block: time-invariant shape plus per-frame
/// expression and pose trajectories.
struct AnimationParams {
  std::vector<double> shape;       // e_sh
  std::vector<double> expression;  // frames x e_exp, row-major
  std::vector<double> pose;        // frames x e_pose, row-major
  std::uint32_t frames = 0;
  std::uint32_t expr_dim = 0;
  std::uint32_t pose_dim = 0;
  double frame_rate = 25.0;
};

struct NormalizationStats {
  std::vector<double> shape_mean, shape_std;
  std::vector<double> expr_mean, expr_std;
  std::vector<double> pose_mean, pose_std;
};

/// Per-dimension mean/std over a dataset; zero-variance dimensions get
/// std = 1 so normalization stays invertible.
NormalizationStats compute_normalization(std::span<const AnimationParams> data);

AnimationParams normalize_animation(const AnimationParams& params,
                                    const NormalizationStats& stats);
AnimationParams denormalize_animation(const AnimationParams& params,
                                      const NormalizationStats& stats);

/// Per-pixel discrete labels in [0, kNumLabels).
struct SemanticVideo {
  std::uint32_t frames = 0, height = 0, width = 0;
  std::vector<std::uint8_t> labels;  // frames * height * width

  std::uint8_t& at(std::uint32_t t, std::uint32_t y, std::uint32_t x) {
    return labels[(std::size_t(t) * height + y) * width + x];
  }
  std::uint8_t at(std::uint32_t t, std::uint32_t y, std::uint32_t x) const {
    return labels[(std::size_t(t) * height + y) * width + x];
  }
};

struct RgbImage {
  std::uint32_t height = 0, width = 0;
  std::vector<double> rgb;  // height * width * 3, row-major

  double* pixel(std::uint32_t y, std::uint32_t x) {
    return rgb.data() + (std::size_t(y) * width + x) * 3;
  }
  const double* pixel(std::uint32_t y, std::uint32_t x) const {
    return rgb.data() + (std::size_t(y) * width + x) * 3;
  }
};

struct RgbVideo {
  std::uint32_t frames = 0, height = 0, width = 0;
  std::vector<double> rgb;  // frames * height * width * 3

  double* pixel(std::uint32_t t, std::uint32_t y, std::uint32_t x) {
    return rgb.data() + ((std::size_t(t) * height + y) * width + x) * 3;
  }
  const double* pixel(std::uint32_t t, std::uint32_t y, std::uint32_t x) const {
    return rgb.data() + ((std::size_t(t) * height + y) * width + x) * 3;
  }

  RgbImage frame(std::uint32_t t) const;
};

/// 21 distinct RGB colors in [0,1]^3, minimum pairwise L2 distance > 0.2.
class Palette {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x21c01055eedULL;

  /// Deterministic maximin pick from a seeded candidate pool.
  static Palette generate(std::uint64_t seed = kDefaultSeed);
  /// Explicit colors (tests); validates count and distinctness.
  static Palette from_colors(std::vector<std::array<double, 3>> colors);

  const std::array<double, 3>& color(std::uint32_t label) const;
  double min_pairwise_distance() const;

 private:
  Palette() = default;
  std::vector<std::array<double, 3>> colors_;
};

/// Fixed-rate windowed signal; sample count is frames x window exactly.
struct SpeechSignal {
  std::vector<double> samples;
  std::uint32_t sample_rate = 0;
  double frame_rate = 25.0;
  std::uint32_t window = 0;  // samples per frame

  std::uint32_t frames() const {
    return window == 0 ? 0 : static_cast<std::uint32_t>(samples.size() / window);
  }
};

/// Zero-pads the tail so the sample count becomes an exact multiple of the
/// per-frame window.
SpeechSignal make_speech_signal(std::vector<double> samples,
                                std::uint32_t sample_rate,
                                double frame_rate = 25.0);

// ---------------------------------------------------------------------------
// Temporal arithmetic

/// Latent frame count (L-1)/4 + 1 under causal grouping: frame 0 alone,
/// then non-overlapping groups of 4. Requires L % 4 == 1.
std::uint32_t latent_frames(std::uint32_t frames);

// ---------------------------------------------------------------------------
// Animation codec

struct AnimationCodecs {
  RvqCodec shape;       // one token group per clip
  RvqCodec expression;  // per latent frame
  RvqCodec pose;        // per latent frame
  NormalizationStats stats;
};

struct AnimationTokens {
  std::vector<std::uint32_t> shape;       // shape levels
  std::vector<std::uint32_t> expression;  // latents x expr levels, frame-major
  std::vector<std::uint32_t> pose;        // latents x pose levels, frame-major
};

AnimationTokens encode_animation(const AnimationParams& params,
                                 const AnimationCodecs& codecs);
AnimationParams decode_animation(const AnimationTokens& tokens,
                                 const AnimationCodecs& codecs,
                                 std::uint32_t frames, double frame_rate = 25.0);

// ---------------------------------------------------------------------------
// Speech codec

std::vector<std::uint32_t> encode_speech(const SpeechSignal& signal,
                                         const RvqCodec& codec);
SpeechSignal decode_speech(std::span<const std::uint32_t> tokens,
                           const RvqCodec& codec, std::uint32_t sample_rate,
                           double frame_rate = 25.0);

// ---------------------------------------------------------------------------
// Invertible color embedding and palette losses

RgbVideo color_embed(const SemanticVideo& labels, const Palette& palette);
RgbImage color_embed_frame(const SemanticVideo& labels, std::uint32_t frame,
                           const Palette& palette);
SemanticVideo color_unembed(const RgbVideo& rgb, const Palette& palette);
std::uint8_t nearest_palette_label(const double* rgb, const Palette& palette);

/// logit_c = -tau * ||rgb - palette_c||^2.
std::array<double, kNumLabels> palette_logits(const double* rgb,
                                              const Palette& palette,
                                              double tau = 10.0);

/// Mean over pixels of -log softmax(palette_logits)[true label].
double seg_cross_entropy(const RgbVideo& rgb, const SemanticVideo& labels,
                         const Palette& palette, double tau = 10.0);

/// L2 reconstruction against the color-embedded labels, plus weighted
/// commitment and segmentation terms. The adversarial term of the source
/// training recipe is out of scope here.
double composite_codec_loss(const RgbVideo& recon,
                            const SemanticVideo& target_labels,
                            const Palette& palette, double tau,
                            double lambda_seg, double lambda_commit,
                            double commit_term);

// ---------------------------------------------------------------------------
// Semantic video codec

/// Quantizes per-cell label histograms: one latent frame per causal group,
/// 8x8 cells per latent frame, cell feature = mean one-hot histogram over
/// the group's pixels.
class SemanticCodec {
 public:
  explicit SemanticCodec(Codebook codebook);  // dim must equal kNumLabels

  static SemanticCodec train(std::span<const SemanticVideo> videos,
                             std::uint32_t codes, std::uint32_t iters,
                             std::uint64_t seed);

  const Codebook& codebook() const { return codebook_; }

  std::vector<std::uint32_t> encode(const SemanticVideo& video) const;
  SemanticVideo decode(std::span<const std::uint32_t> tokens,
                       std::uint32_t frames, std::uint32_t height,
                       std::uint32_t width) const;

  /// Cell features for one video, latent-frame-major then row-major; the
  /// training set is the concatenation over videos.
  static std::vector<double> cell_features(const SemanticVideo& video);

 private:
  Codebook codebook_;
};

// ---------------------------------------------------------------------------
// Image codec

/// Patch LFQ over a fixed 16x16 token grid. Patches are centered to
/// [-0.5, 0.5] before projection so decode can re-center around mid-gray.
class ImageCodec {
 public:
  ImageCodec(std::uint32_t height, std::uint32_t width, std::uint32_t bits,
             std::uint64_t seed);

  std::uint32_t height() const { return height_; }
  std::uint32_t width() const { return width_; }
  std::uint32_t bits() const { return lfq_.bits(); }
  const LfqCodec& lfq() const { return lfq_; }

  std::vector<std::uint32_t> encode(const RgbImage& image) const;
  RgbImage decode(std::span<const std::uint32_t> tokens) const;

 private:
  std::uint32_t height_, width_;
  LfqCodec lfq_;
};

// ---------------------------------------------------------------------------
// Text codec

std::vector<std::uint32_t> encode_text(const std::string& text);
std::string decode_text(std::span<const std::uint32_t> tokens);

/// Text decode for model-generated payloads: reads bytes up to the first
/// sentinel (generated fixed-length text need not be sentinel-terminated).
std::string decode_text_lossy(std::span<const std::uint32_t> tokens);

// ---------------------------------------------------------------------------
// Token-budget arithmetic

/// Per-kind RVQ level counts used by the closed-form token arithmetic.
struct LevelConfig {
  std::uint32_t speech = 4;
  std::uint32_t shape = 8;
  std::uint32_t expression = 8;
  std::uint32_t pose = 6;

  static LevelConfig from_layout(const VocabularyLayout& layout);
};

/// Closed-form token counts. dims per kind:
///   description/script: {bytes}; speech: {frames}; shape: {};
///   expression/pose: {frames}; semantic: {frames, height, width};
///   image: {height, width}; video: {frames, height, width} under the
///   image-grid-per-latent-frame accounting.
std::uint64_t token_count(ModalityKind kind, std::span<const std::uint32_t> dims,
                          const LevelConfig& levels = LevelConfig{});

// ---------------------------------------------------------------------------
// Rendering (deterministic stand-in for the diffusion decoder)

/// Palette-renders labels; pixels whose label matches the unembedded
/// reference label copy the reference pixel instead (appearance transfer).
RgbVideo render_video(const SemanticVideo& semantic, const RgbImage& reference,
                      const Palette& palette);

// ---------------------------------------------------------------------------
// File formats

/// ARTK token file payload.
struct TokenFile {
  std::uint64_t layout_hash = 0;
  ModalityKind kind = ModalityKind::description;
  std::uint8_t level_count = 0;
  std::array<std::uint32_t, 4> dims{0, 0, 0, 0};
  std::vector<TokenId> tokens;
};

/// Tag used in ARTK files for serialized prompts that mix modalities.
inline constexpr std::uint8_t kMixedModalityTag = 255;

void write_tokens(std::ostream& os, const TokenFile& file,
                  bool mixed_prompt = false);
TokenFile read_tokens(std::istream& is, bool* mixed_prompt = nullptr);
void write_tokens_file(const std::filesystem::path& path, const TokenFile& file,
                       bool mixed_prompt = false);
TokenFile read_tokens_file(const std::filesystem::path& path,
                           bool* mixed_prompt = nullptr);

void write_labels(std::ostream& os, const SemanticVideo& video);
SemanticVideo read_labels(std::istream& is);
void write_labels_file(const std::filesystem::path& path,
                       const SemanticVideo& video);
SemanticVideo read_labels_file(const std::filesystem::path& path);

void write_signal(std::ostream& os, const SpeechSignal& signal);
SpeechSignal read_signal(std::istream& is);
void write_signal_file(const std::filesystem::path& path,
                       const SpeechSignal& signal);
SpeechSignal read_signal_file(const std::filesystem::path& path);

void write_image(std::ostream& os, const RgbImage& image);
RgbImage read_image(std::istream& is);
void write_image_file(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_image_file(const std::filesystem::path& path);

void write_animation(std::ostream& os, const AnimationParams& params);
AnimationParams read_animation(std::istream& is);
void write_animation_file(const std::filesystem::path& path,
                          const AnimationParams& params);
AnimationParams read_animation_file(const std::filesystem::path& path);

void write_video(std::ostream& os, const RgbVideo& video);
RgbVideo read_video(std::istream& is);
void write_video_file(const std::filesystem::path& path, const RgbVideo& video);
RgbVideo read_video_file(const std::filesystem::path& path);

}  // namespace archon
