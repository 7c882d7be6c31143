#include "archon/modality_codecs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "archon/bytes.hpp"
#include "archon/rng.hpp"

namespace archon {

namespace {

void stats_for(std::span<const double> data, std::size_t rows, std::size_t dim,
               std::vector<double>& mean, std::vector<double>& std_dev) {
  mean.assign(dim, 0.0);
  std_dev.assign(dim, 0.0);
  if (rows == 0) {
    std::fill(std_dev.begin(), std_dev.end(), 1.0);
    return;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < dim; ++d) mean[d] += data[r * dim + d];
  }
  for (double& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double t = data[r * dim + d] - mean[d];
      std_dev[d] += t * t;
    }
  }
  for (double& s : std_dev) {
    s = std::sqrt(s / static_cast<double>(rows));
    if (s == 0.0) s = 1.0;  // zero-variance dimensions stay invertible
  }
}

void apply_affine(std::span<const double> in, std::span<double> out,
                  std::size_t dim, const std::vector<double>& mean,
                  const std::vector<double>& std_dev, bool forward) {
  if (mean.size() != dim) {
    fail(ErrorCode::DimMismatch, "normalization stats dim mismatch");
  }
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t d = i % dim;
    out[i] = forward ? (in[i] - mean[d]) / std_dev[d]
                     : in[i] * std_dev[d] + mean[d];
  }
}

/// Causal group boundaries: group 0 is frame 0; group g >= 1 covers frames
/// [4(g-1)+1, 4g].
std::pair<std::uint32_t, std::uint32_t> group_range(std::uint32_t group) {
  if (group == 0) return {0u, 1u};
  return {4 * (group - 1) + 1, 4 * group + 1};
}

}  // namespace

std::uint32_t latent_frames(std::uint32_t frames) {
  if (frames == 0 || frames % 4 != 1) {
    fail(ErrorCode::BadTemporalLength,
         "frame count " + std::to_string(frames) + " is not 1 mod 4");
  }
  return (frames - 1) / 4 + 1;
}

NormalizationStats compute_normalization(std::span<const AnimationParams> data) {
  NormalizationStats stats;
  if (data.empty()) fail(ErrorCode::EmptyInput, "no animation samples");
  const std::size_t e_sh = data.front().shape.size();
  const std::size_t e_exp = data.front().expr_dim;
  const std::size_t e_pose = data.front().pose_dim;

  std::vector<double> shapes, exprs, poses;
  std::size_t expr_rows = 0, pose_rows = 0;
  for (const AnimationParams& p : data) {
    if (p.shape.size() != e_sh || p.expr_dim != e_exp || p.pose_dim != e_pose) {
      fail(ErrorCode::DimMismatch, "inconsistent animation dims in dataset");
    }
    shapes.insert(shapes.end(), p.shape.begin(), p.shape.end());
    exprs.insert(exprs.end(), p.expression.begin(), p.expression.end());
    poses.insert(poses.end(), p.pose.begin(), p.pose.end());
    expr_rows += p.frames;
    pose_rows += p.frames;
  }
  stats_for(shapes, data.size(), e_sh, stats.shape_mean, stats.shape_std);
  stats_for(exprs, expr_rows, e_exp, stats.expr_mean, stats.expr_std);
  stats_for(poses, pose_rows, e_pose, stats.pose_mean, stats.pose_std);
  return stats;
}

AnimationParams normalize_animation(const AnimationParams& params,
                                    const NormalizationStats& stats) {
  AnimationParams out = params;
  apply_affine(params.shape, out.shape, params.shape.size(), stats.shape_mean,
               stats.shape_std, true);
  apply_affine(params.expression, out.expression, params.expr_dim,
               stats.expr_mean, stats.expr_std, true);
  apply_affine(params.pose, out.pose, params.pose_dim, stats.pose_mean,
               stats.pose_std, true);
  return out;
}

AnimationParams denormalize_animation(const AnimationParams& params,
                                      const NormalizationStats& stats) {
  AnimationParams out = params;
  apply_affine(params.shape, out.shape, params.shape.size(), stats.shape_mean,
               stats.shape_std, false);
  apply_affine(params.expression, out.expression, params.expr_dim,
               stats.expr_mean, stats.expr_std, false);
  apply_affine(params.pose, out.pose, params.pose_dim, stats.pose_mean,
               stats.pose_std, false);
  return out;
}

namespace {

/// Mean-pools normalized per-frame rows into latent rows (frame 0 alone,
/// then groups of 4), RVQ-encodes each latent row, flattens frame-major
/// with levels low to high inside each frame.
std::vector<std::uint32_t> encode_trajectory(std::span<const double> rows,
                                             std::uint32_t frames,
                                             std::uint32_t dim,
                                             const RvqCodec& codec) {
  const std::uint32_t latents = latent_frames(frames);
  std::vector<std::uint32_t> tokens;
  tokens.reserve(std::size_t(latents) * codec.num_levels());
  std::vector<double> pooled(dim);
  for (std::uint32_t g = 0; g < latents; ++g) {
    const auto [begin, end] = group_range(g);
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (std::uint32_t t = begin; t < end; ++t) {
      for (std::uint32_t d = 0; d < dim; ++d) {
        pooled[d] += rows[std::size_t(t) * dim + d];
      }
    }
    for (double& v : pooled) v /= (end - begin);
    const auto ids = codec.encode(pooled);
    tokens.insert(tokens.end(), ids.begin(), ids.end());
  }
  return tokens;
}

/// Decode latent rows and upsample by repetition over each causal group.
std::vector<double> decode_trajectory(std::span<const std::uint32_t> tokens,
                                      std::uint32_t frames, std::uint32_t dim,
                                      const RvqCodec& codec) {
  const std::uint32_t latents = latent_frames(frames);
  const std::uint32_t levels = codec.num_levels();
  if (tokens.size() != std::size_t(latents) * levels) {
    fail(ErrorCode::TokenCountMismatch,
         "expected " + std::to_string(std::size_t(latents) * levels) +
             " trajectory tokens, got " + std::to_string(tokens.size()));
  }
  std::vector<double> rows(std::size_t(frames) * dim, 0.0);
  for (std::uint32_t g = 0; g < latents; ++g) {
    const auto latent =
        codec.decode(tokens.subspan(std::size_t(g) * levels, levels));
    const auto [begin, end] = group_range(g);
    for (std::uint32_t t = begin; t < end; ++t) {
      std::copy(latent.begin(), latent.end(),
                rows.begin() + std::size_t(t) * dim);
    }
  }
  return rows;
}

}  // namespace

AnimationTokens encode_animation(const AnimationParams& params,
                                 const AnimationCodecs& codecs) {
  if (params.frames == 0 || params.frames % 4 != 1) {
    fail(ErrorCode::BadTemporalLength,
         "animation frame count must be 1 mod 4, got " +
             std::to_string(params.frames));
  }
  const AnimationParams normed = normalize_animation(params, codecs.stats);
  AnimationTokens tokens;
  tokens.shape = codecs.shape.encode(normed.shape);
  tokens.expression = encode_trajectory(normed.expression, normed.frames,
                                        normed.expr_dim, codecs.expression);
  tokens.pose = encode_trajectory(normed.pose, normed.frames, normed.pose_dim,
                                  codecs.pose);
  return tokens;
}

AnimationParams decode_animation(const AnimationTokens& tokens,
                                 const AnimationCodecs& codecs,
                                 std::uint32_t frames, double frame_rate) {
  if (tokens.shape.size() != codecs.shape.num_levels()) {
    fail(ErrorCode::TokenCountMismatch, "bad shape token count");
  }
  AnimationParams out;
  out.frames = frames;
  out.frame_rate = frame_rate;
  out.expr_dim = codecs.expression.dim();
  out.pose_dim = codecs.pose.dim();
  out.shape = codecs.shape.decode(tokens.shape);
  out.expression = decode_trajectory(tokens.expression, frames, out.expr_dim,
                                     codecs.expression);
  out.pose = decode_trajectory(tokens.pose, frames, out.pose_dim, codecs.pose);
  return denormalize_animation(out, codecs.stats);
}

SpeechSignal make_speech_signal(std::vector<double> samples,
                                std::uint32_t sample_rate, double frame_rate) {
  if (sample_rate == 0 || frame_rate <= 0.0) {
    fail(ErrorCode::InvalidInput, "bad sample or frame rate");
  }
  SpeechSignal sig;
  sig.sample_rate = sample_rate;
  sig.frame_rate = frame_rate;
  const double w = sample_rate / frame_rate;
  sig.window = static_cast<std::uint32_t>(w);
  if (sig.window == 0 || std::abs(w - sig.window) > 1e-9) {
    fail(ErrorCode::InvalidInput, "sample rate must be a multiple of frame rate");
  }
  sig.samples = std::move(samples);
  const std::size_t rem = sig.samples.size() % sig.window;
  if (rem != 0) sig.samples.resize(sig.samples.size() + (sig.window - rem), 0.0);
  return sig;
}

std::vector<std::uint32_t> encode_speech(const SpeechSignal& signal,
                                         const RvqCodec& codec) {
  if (signal.samples.empty()) fail(ErrorCode::EmptyInput, "empty speech signal");
  if (signal.window != codec.dim()) {
    fail(ErrorCode::DimMismatch, "window " + std::to_string(signal.window) +
                                     " vs codec dim " +
                                     std::to_string(codec.dim()));
  }
  const std::uint32_t frames = signal.frames();
  std::vector<std::uint32_t> tokens;
  tokens.reserve(std::size_t(frames) * codec.num_levels());
  for (std::uint32_t f = 0; f < frames; ++f) {
    std::span<const double> win(
        signal.samples.data() + std::size_t(f) * signal.window, signal.window);
    const auto ids = codec.encode(win);
    tokens.insert(tokens.end(), ids.begin(), ids.end());
  }
  return tokens;
}

SpeechSignal decode_speech(std::span<const std::uint32_t> tokens,
                           const RvqCodec& codec, std::uint32_t sample_rate,
                           double frame_rate) {
  const std::uint32_t levels = codec.num_levels();
  if (tokens.empty() || tokens.size() % levels != 0) {
    fail(ErrorCode::TokenCountMismatch,
         "speech token count must be a positive multiple of " +
             std::to_string(levels));
  }
  const std::size_t frames = tokens.size() / levels;
  std::vector<double> samples;
  samples.reserve(frames * codec.dim());
  for (std::size_t f = 0; f < frames; ++f) {
    const auto win = codec.decode(tokens.subspan(f * levels, levels));
    samples.insert(samples.end(), win.begin(), win.end());
  }
  return make_speech_signal(std::move(samples), sample_rate, frame_rate);
}

RgbImage RgbVideo::frame(std::uint32_t t) const {
  RgbImage out;
  out.height = height;
  out.width = width;
  const std::size_t stride = std::size_t(height) * width * 3;
  out.rgb.assign(rgb.begin() + t * stride, rgb.begin() + (t + 1) * stride);
  return out;
}

Palette Palette::generate(std::uint64_t seed) {
  Rng rng(seed);
  constexpr int kPool = 4096;
  std::vector<std::array<double, 3>> pool(kPool);
  for (auto& c : pool) {
    for (double& v : c) v = rng.uniform(0.02, 0.98);
  }
  // Greedy maximin pick keeps the colors far apart.
  Palette p;
  p.colors_.push_back(pool[0]);
  std::vector<double> best(kPool, 1e300);
  while (p.colors_.size() < kNumLabels) {
    const auto& last = p.colors_.back();
    int far = 0;
    double far_d = -1.0;
    for (int i = 0; i < kPool; ++i) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double t = pool[i][c] - last[c];
        d += t * t;
      }
      best[i] = std::min(best[i], d);
      if (best[i] > far_d) {
        far_d = best[i];
        far = i;
      }
    }
    p.colors_.push_back(pool[far]);
  }
  if (p.min_pairwise_distance() <= 0.2) {
    fail(ErrorCode::InvalidInput, "palette seed produced crowded colors");
  }
  return p;
}

Palette Palette::from_colors(std::vector<std::array<double, 3>> colors) {
  if (colors.size() != kNumLabels) {
    fail(ErrorCode::InvalidInput, "palette needs exactly 21 colors");
  }
  for (const auto& c : colors) {
    for (double v : c) {
      if (!(v >= 0.0 && v <= 1.0)) {
        fail(ErrorCode::InvalidInput, "palette colors live in [0,1]^3");
      }
    }
  }
  Palette p;
  p.colors_ = std::move(colors);
  if (p.min_pairwise_distance() == 0.0) {
    fail(ErrorCode::InvalidInput, "palette colors must be pairwise distinct");
  }
  return p;
}

const std::array<double, 3>& Palette::color(std::uint32_t label) const {
  if (label >= kNumLabels) {
    fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(label));
  }
  return colors_[label];
}

double Palette::min_pairwise_distance() const {
  double best = 1e300;
  for (std::size_t i = 0; i < colors_.size(); ++i) {
    for (std::size_t j = i + 1; j < colors_.size(); ++j) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double t = colors_[i][c] - colors_[j][c];
        d += t * t;
      }
      best = std::min(best, std::sqrt(d));
    }
  }
  return best;
}

RgbVideo color_embed(const SemanticVideo& labels, const Palette& palette) {
  RgbVideo out;
  out.frames = labels.frames;
  out.height = labels.height;
  out.width = labels.width;
  out.rgb.resize(labels.labels.size() * 3);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const auto& c = palette.color(labels.labels[i]);
    out.rgb[i * 3] = c[0];
    out.rgb[i * 3 + 1] = c[1];
    out.rgb[i * 3 + 2] = c[2];
  }
  return out;
}

RgbImage color_embed_frame(const SemanticVideo& labels, std::uint32_t frame,
                           const Palette& palette) {
  RgbImage out;
  out.height = labels.height;
  out.width = labels.width;
  out.rgb.resize(std::size_t(labels.height) * labels.width * 3);
  for (std::uint32_t y = 0; y < labels.height; ++y) {
    for (std::uint32_t x = 0; x < labels.width; ++x) {
      const auto& c = palette.color(labels.at(frame, y, x));
      double* px = out.pixel(y, x);
      px[0] = c[0];
      px[1] = c[1];
      px[2] = c[2];
    }
  }
  return out;
}

std::uint8_t nearest_palette_label(const double* rgb, const Palette& palette) {
  std::uint8_t best = 0;
  double best_d = 1e300;
  for (std::uint32_t l = 0; l < kNumLabels; ++l) {
    const auto& c = palette.color(l);
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double t = rgb[k] - c[k];
      d += t * t;
    }
    if (d < best_d) {  // ties keep the lowest label
      best_d = d;
      best = static_cast<std::uint8_t>(l);
    }
  }
  return best;
}

SemanticVideo color_unembed(const RgbVideo& rgb, const Palette& palette) {
  SemanticVideo out;
  out.frames = rgb.frames;
  out.height = rgb.height;
  out.width = rgb.width;
  out.labels.resize(std::size_t(rgb.frames) * rgb.height * rgb.width);
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    out.labels[i] = nearest_palette_label(rgb.rgb.data() + i * 3, palette);
  }
  return out;
}

std::array<double, kNumLabels> palette_logits(const double* rgb,
                                              const Palette& palette,
                                              double tau) {
  if (tau <= 0.0) fail(ErrorCode::InvalidWeight, "tau must be positive");
  std::array<double, kNumLabels> logits;
  for (std::uint32_t l = 0; l < kNumLabels; ++l) {
    const auto& c = palette.color(l);
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double t = rgb[k] - c[k];
      d += t * t;
    }
    logits[l] = -tau * d;
  }
  return logits;
}

double seg_cross_entropy(const RgbVideo& rgb, const SemanticVideo& labels,
                         const Palette& palette, double tau) {
  if (rgb.frames != labels.frames || rgb.height != labels.height ||
      rgb.width != labels.width) {
    fail(ErrorCode::ShapeMismatch, "rgb/label shapes differ");
  }
  const std::size_t pixels = labels.labels.size();
  if (pixels == 0) fail(ErrorCode::EmptyInput, "empty video");
  double total = 0.0;
  for (std::size_t i = 0; i < pixels; ++i) {
    const auto logits = palette_logits(rgb.rgb.data() + i * 3, palette, tau);
    const std::uint8_t truth = labels.labels[i];
    if (truth >= kNumLabels) {
      fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(truth));
    }
    double max_logit = logits[0];
    for (double v : logits) max_logit = std::max(max_logit, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - max_logit);
    total += (max_logit + std::log(sum)) - logits[truth];
  }
  return total / static_cast<double>(pixels);
}

double composite_codec_loss(const RgbVideo& recon,
                            const SemanticVideo& target_labels,
                            const Palette& palette, double tau,
                            double lambda_seg, double lambda_commit,
                            double commit_term) {
  if (lambda_seg < 0.0 || lambda_commit < 0.0) {
    fail(ErrorCode::InvalidWeight, "loss weights must be non-negative");
  }
  const RgbVideo target = color_embed(target_labels, palette);
  if (target.rgb.size() != recon.rgb.size() || recon.frames != target.frames ||
      recon.height != target.height || recon.width != target.width) {
    fail(ErrorCode::ShapeMismatch, "recon/target shapes differ");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < recon.rgb.size(); ++i) {
    const double t = recon.rgb[i] - target.rgb[i];
    mse += t * t;
  }
  mse /= static_cast<double>(recon.rgb.size());
  double loss = mse + lambda_commit * commit_term;
  if (lambda_seg > 0.0) {
    loss += lambda_seg * seg_cross_entropy(recon, target_labels, palette, tau);
  }
  return loss;
}

SemanticCodec::SemanticCodec(Codebook codebook)
    : codebook_(std::move(codebook)) {
  if (codebook_.dim != kNumLabels) {
    fail(ErrorCode::DimMismatch, "semantic codebook dim must be 21");
  }
}

std::vector<double> SemanticCodec::cell_features(const SemanticVideo& video) {
  if (video.height % kSemanticGrid != 0 || video.width % kSemanticGrid != 0 ||
      video.height == 0 || video.width == 0) {
    fail(ErrorCode::ShapeMismatch, "semantic video sides must divide by 8");
  }
  const std::uint32_t latents = latent_frames(video.frames);
  const std::uint32_t cell_h = video.height / kSemanticGrid;
  const std::uint32_t cell_w = video.width / kSemanticGrid;
  std::vector<double> features(
      std::size_t(latents) * kSemanticGrid * kSemanticGrid * kNumLabels, 0.0);
  for (std::uint32_t g = 0; g < latents; ++g) {
    const auto [begin, end] = group_range(g);
    for (std::uint32_t cy = 0; cy < kSemanticGrid; ++cy) {
      for (std::uint32_t cx = 0; cx < kSemanticGrid; ++cx) {
        double* f =
            features.data() +
            ((std::size_t(g) * kSemanticGrid + cy) * kSemanticGrid + cx) *
                kNumLabels;
        for (std::uint32_t t = begin; t < end; ++t) {
          for (std::uint32_t y = cy * cell_h; y < (cy + 1) * cell_h; ++y) {
            for (std::uint32_t x = cx * cell_w; x < (cx + 1) * cell_w; ++x) {
              const std::uint8_t lbl = video.at(t, y, x);
              if (lbl >= kNumLabels) {
                fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(lbl));
              }
              f[lbl] += 1.0;
            }
          }
        }
        const double total = double(end - begin) * cell_h * cell_w;
        for (std::uint32_t l = 0; l < kNumLabels; ++l) f[l] /= total;
      }
    }
  }
  return features;
}

SemanticCodec SemanticCodec::train(std::span<const SemanticVideo> videos,
                                   std::uint32_t codes, std::uint32_t iters,
                                   std::uint64_t seed) {
  std::vector<double> features;
  for (const SemanticVideo& v : videos) {
    const auto f = cell_features(v);
    features.insert(features.end(), f.begin(), f.end());
  }
  const std::uint32_t n =
      static_cast<std::uint32_t>(features.size() / kNumLabels);
  return SemanticCodec(
      train_codebook(features, n, kNumLabels, codes, iters, seed));
}

std::vector<std::uint32_t> SemanticCodec::encode(
    const SemanticVideo& video) const {
  const std::vector<double> features = cell_features(video);
  const std::size_t cells = features.size() / kNumLabels;
  std::vector<std::uint32_t> tokens(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    tokens[i] = codebook_.nearest(
        std::span<const double>(features.data() + i * kNumLabels, kNumLabels));
  }
  return tokens;
}

SemanticVideo SemanticCodec::decode(std::span<const std::uint32_t> tokens,
                                    std::uint32_t frames, std::uint32_t height,
                                    std::uint32_t width) const {
  const std::uint32_t latents = latent_frames(frames);
  if (height % kSemanticGrid != 0 || width % kSemanticGrid != 0) {
    fail(ErrorCode::ShapeMismatch, "semantic video sides must divide by 8");
  }
  const std::size_t expected =
      std::size_t(latents) * kSemanticGrid * kSemanticGrid;
  if (tokens.size() != expected) {
    fail(ErrorCode::TokenCountMismatch,
         "expected " + std::to_string(expected) + " semantic tokens, got " +
             std::to_string(tokens.size()));
  }
  SemanticVideo out;
  out.frames = frames;
  out.height = height;
  out.width = width;
  out.labels.assign(std::size_t(frames) * height * width, 0);
  const std::uint32_t cell_h = height / kSemanticGrid;
  const std::uint32_t cell_w = width / kSemanticGrid;
  for (std::uint32_t g = 0; g < latents; ++g) {
    const auto [begin, end] = group_range(g);
    for (std::uint32_t cy = 0; cy < kSemanticGrid; ++cy) {
      for (std::uint32_t cx = 0; cx < kSemanticGrid; ++cx) {
        const std::uint32_t id =
            tokens[(std::size_t(g) * kSemanticGrid + cy) * kSemanticGrid + cx];
        if (id >= codebook_.count) {
          fail(ErrorCode::CodeOutOfRange, "semantic id " + std::to_string(id));
        }
        // The codeword is a label distribution; take its argmax label.
        const auto dist = codebook_.entry(id);
        std::uint8_t label = 0;
        double best = dist[0];
        for (std::uint32_t l = 1; l < kNumLabels; ++l) {
          if (dist[l] > best) {
            best = dist[l];
            label = static_cast<std::uint8_t>(l);
          }
        }
        for (std::uint32_t t = begin; t < end; ++t) {
          for (std::uint32_t y = cy * cell_h; y < (cy + 1) * cell_h; ++y) {
            for (std::uint32_t x = cx * cell_w; x < (cx + 1) * cell_w; ++x) {
              out.at(t, y, x) = label;
            }
          }
        }
      }
    }
  }
  return out;
}

ImageCodec::ImageCodec(std::uint32_t height, std::uint32_t width,
                       std::uint32_t bits, std::uint64_t seed)
    : height_(height),
      width_(width),
      lfq_((height / kImageGrid) * (width / kImageGrid) * 3, bits, seed) {
  if (height % kImageGrid != 0 || width % kImageGrid != 0 || height == 0) {
    fail(ErrorCode::ShapeMismatch, "image sides must divide by 16");
  }
}

std::vector<std::uint32_t> ImageCodec::encode(const RgbImage& image) const {
  if (image.height != height_ || image.width != width_) {
    fail(ErrorCode::ShapeMismatch, "image dims do not match codec");
  }
  const std::uint32_t ph = height_ / kImageGrid;
  const std::uint32_t pw = width_ / kImageGrid;
  std::vector<std::uint32_t> tokens;
  tokens.reserve(std::size_t(kImageGrid) * kImageGrid);
  std::vector<double> patch(std::size_t(ph) * pw * 3);
  for (std::uint32_t gy = 0; gy < kImageGrid; ++gy) {
    for (std::uint32_t gx = 0; gx < kImageGrid; ++gx) {
      std::size_t i = 0;
      for (std::uint32_t y = gy * ph; y < (gy + 1) * ph; ++y) {
        for (std::uint32_t x = gx * pw; x < (gx + 1) * pw; ++x) {
          const double* px = image.pixel(y, x);
          patch[i++] = px[0] - 0.5;
          patch[i++] = px[1] - 0.5;
          patch[i++] = px[2] - 0.5;
        }
      }
      tokens.push_back(lfq_.encode(patch));
    }
  }
  return tokens;
}

RgbImage ImageCodec::decode(std::span<const std::uint32_t> tokens) const {
  if (tokens.size() != std::size_t(kImageGrid) * kImageGrid) {
    fail(ErrorCode::TokenCountMismatch, "image token grid must be 16x16");
  }
  const std::uint32_t ph = height_ / kImageGrid;
  const std::uint32_t pw = width_ / kImageGrid;
  // Keeps pixels inside [0.1, 0.9] while preserving feature signs, so
  // re-encoding a decoded image reproduces the ids.
  const double scale = 0.4 / std::sqrt(static_cast<double>(lfq_.bits()));
  RgbImage out;
  out.height = height_;
  out.width = width_;
  out.rgb.assign(std::size_t(height_) * width_ * 3, 0.0);
  for (std::uint32_t gy = 0; gy < kImageGrid; ++gy) {
    for (std::uint32_t gx = 0; gx < kImageGrid; ++gx) {
      const auto patch = lfq_.preimage(tokens[gy * kImageGrid + gx]);
      std::size_t i = 0;
      for (std::uint32_t y = gy * ph; y < (gy + 1) * ph; ++y) {
        for (std::uint32_t x = gx * pw; x < (gx + 1) * pw; ++x) {
          double* px = out.pixel(y, x);
          px[0] = 0.5 + scale * patch[i++];
          px[1] = 0.5 + scale * patch[i++];
          px[2] = 0.5 + scale * patch[i++];
        }
      }
    }
  }
  return out;
}

std::vector<std::uint32_t> encode_text(const std::string& text) {
  std::vector<std::uint32_t> tokens;
  tokens.reserve(text.size() + 1);
  for (unsigned char c : text) tokens.push_back(c);
  tokens.push_back(kTextSentinel);
  return tokens;
}

std::string decode_text(std::span<const std::uint32_t> tokens) {
  if (tokens.empty() || tokens.back() != kTextSentinel) {
    fail(ErrorCode::InvalidInput, "text tokens must end with the sentinel");
  }
  std::string out;
  out.reserve(tokens.size() - 1);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] >= 256) {
      fail(ErrorCode::CodeOutOfRange, "byte token " + std::to_string(tokens[i]));
    }
    out.push_back(static_cast<char>(tokens[i]));
  }
  return out;
}

std::string decode_text_lossy(std::span<const std::uint32_t> tokens) {
  std::string out;
  for (std::uint32_t t : tokens) {
    if (t >= kTextSentinel) break;
    out.push_back(static_cast<char>(t));
  }
  return out;
}

LevelConfig LevelConfig::from_layout(const VocabularyLayout& layout) {
  LevelConfig cfg;
  cfg.speech = layout.level_count(ModalityKind::speech);
  cfg.shape = layout.level_count(ModalityKind::shape);
  cfg.expression = layout.level_count(ModalityKind::expression);
  cfg.pose = layout.level_count(ModalityKind::pose);
  return cfg;
}

std::uint64_t token_count(ModalityKind kind, std::span<const std::uint32_t> dims,
                          const LevelConfig& levels) {
  auto need = [&](std::size_t n) {
    if (dims.size() != n) {
      fail(ErrorCode::InvalidDims,
           std::string(kind_name(kind)) + " takes " + std::to_string(n) +
               " dims, got " + std::to_string(dims.size()));
    }
  };
  auto latents = [&](std::uint32_t frames) -> std::uint64_t {
    if (frames == 0 || frames % 4 != 1) {
      fail(ErrorCode::InvalidDims,
           "frame count " + std::to_string(frames) + " is not 1 mod 4");
    }
    return (frames - 1) / 4 + 1;
  };
  switch (kind) {
    case ModalityKind::description:
    case ModalityKind::script:
      need(1);
      return std::uint64_t(dims[0]) + 1;  // bytes + sentinel
    case ModalityKind::speech:
      need(1);
      if (dims[0] == 0) fail(ErrorCode::InvalidDims, "zero speech frames");
      if (levels.speech == 0) fail(ErrorCode::InvalidDims, "no speech levels");
      return std::uint64_t(dims[0]) * levels.speech;
    case ModalityKind::shape:
      need(0);
      if (levels.shape == 0) fail(ErrorCode::InvalidDims, "no shape levels");
      return levels.shape;
    case ModalityKind::expression:
      need(1);
      if (levels.expression == 0) fail(ErrorCode::InvalidDims, "no expr levels");
      return latents(dims[0]) * levels.expression;
    case ModalityKind::pose:
      need(1);
      if (levels.pose == 0) fail(ErrorCode::InvalidDims, "no pose levels");
      return latents(dims[0]) * levels.pose;
    case ModalityKind::semantic:
      need(3);
      if (dims[1] % kSemanticGrid != 0 || dims[2] % kSemanticGrid != 0 ||
          dims[1] == 0 || dims[2] == 0) {
        fail(ErrorCode::InvalidDims, "semantic sides must divide by 8");
      }
      return latents(dims[0]) * kSemanticGrid * kSemanticGrid;
    case ModalityKind::image:
      need(2);
      if (dims[0] % kImageGrid != 0 || dims[1] % kImageGrid != 0 ||
          dims[0] == 0 || dims[1] == 0) {
        fail(ErrorCode::InvalidDims, "image sides must divide by 16");
      }
      return std::uint64_t(kImageGrid) * kImageGrid;
    case ModalityKind::video:
      // Accounting for a video kept as one image token grid per latent
      // frame; the pipeline never predicts these tokens.
      need(3);
      if (dims[1] % kImageGrid != 0 || dims[2] % kImageGrid != 0 ||
          dims[1] == 0 || dims[2] == 0) {
        fail(ErrorCode::InvalidDims, "video sides must divide by 16");
      }
      return latents(dims[0]) * kImageGrid * kImageGrid;
  }
  fail(ErrorCode::InvalidDims, "unknown modality kind");
}

RgbVideo render_video(const SemanticVideo& semantic, const RgbImage& reference,
                      const Palette& palette) {
  if (reference.height != semantic.height || reference.width != semantic.width) {
    fail(ErrorCode::ShapeMismatch, "reference image dims differ from semantic");
  }
  // Unembed the reference once; pixels whose semantic label matches the
  // reference label take the reference appearance.
  std::vector<std::uint8_t> ref_labels(std::size_t(semantic.height) *
                                       semantic.width);
  for (std::uint32_t y = 0; y < semantic.height; ++y) {
    for (std::uint32_t x = 0; x < semantic.width; ++x) {
      ref_labels[std::size_t(y) * semantic.width + x] =
          nearest_palette_label(reference.pixel(y, x), palette);
    }
  }
  RgbVideo out;
  out.frames = semantic.frames;
  out.height = semantic.height;
  out.width = semantic.width;
  out.rgb.resize(std::size_t(semantic.frames) * semantic.height *
                 semantic.width * 3);
  for (std::uint32_t t = 0; t < semantic.frames; ++t) {
    for (std::uint32_t y = 0; y < semantic.height; ++y) {
      for (std::uint32_t x = 0; x < semantic.width; ++x) {
        const std::uint8_t lbl = semantic.at(t, y, x);
        double* px = out.pixel(t, y, x);
        if (ref_labels[std::size_t(y) * semantic.width + x] == lbl) {
          const double* ref = reference.pixel(y, x);
          px[0] = ref[0];
          px[1] = ref[1];
          px[2] = ref[2];
        } else {
          const auto& c = palette.color(lbl);
          px[0] = c[0];
          px[1] = c[1];
          px[2] = c[2];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

namespace {
constexpr char kArtkMagic[4] = {'A', 'R', 'T', 'K'};
constexpr std::uint16_t kArtkVersion = 1;
}  // namespace

void write_tokens(std::ostream& os, const TokenFile& file, bool mixed_prompt) {
  write_magic(os, kArtkMagic);
  write_le<std::uint16_t>(os, kArtkVersion);
  write_le<std::uint64_t>(os, file.layout_hash);
  write_le<std::uint8_t>(
      os, mixed_prompt ? kMixedModalityTag : static_cast<std::uint8_t>(file.kind));
  write_le<std::uint8_t>(os, file.level_count);
  for (std::uint32_t d : file.dims) write_le<std::uint32_t>(os, d);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.tokens.size()));
  for (TokenId t : file.tokens) write_le<std::uint32_t>(os, t);
}

TokenFile read_tokens(std::istream& is, bool* mixed_prompt) {
  expect_magic(is, kArtkMagic, "ARTK token file");
  const auto version = read_le<std::uint16_t>(is);
  if (version != kArtkVersion) {
    fail(ErrorCode::IoError,
         "unsupported ARTK version " + std::to_string(version));
  }
  TokenFile file;
  file.layout_hash = read_le<std::uint64_t>(is);
  const auto tag = read_le<std::uint8_t>(is);
  if (tag == kMixedModalityTag) {
    if (mixed_prompt) *mixed_prompt = true;
  } else {
    if (tag >= kNumModalityKinds) {
      fail(ErrorCode::IoError, "bad modality tag " + std::to_string(tag));
    }
    file.kind = static_cast<ModalityKind>(tag);
    if (mixed_prompt) *mixed_prompt = false;
  }
  file.level_count = read_le<std::uint8_t>(is);
  for (std::uint32_t& d : file.dims) d = read_le<std::uint32_t>(is);
  const auto count = read_le<std::uint32_t>(is);
  file.tokens.resize(count);
  for (TokenId& t : file.tokens) t = read_le<std::uint32_t>(is);
  return file;
}

void write_labels(std::ostream& os, const SemanticVideo& video) {
  write_le<std::uint32_t>(os, video.frames);
  write_le<std::uint32_t>(os, video.height);
  write_le<std::uint32_t>(os, video.width);
  write_le<std::uint32_t>(os, 0);  // reserved
  write_bytes(os, video.labels.data(), video.labels.size());
}

SemanticVideo read_labels(std::istream& is) {
  SemanticVideo video;
  video.frames = read_le<std::uint32_t>(is);
  video.height = read_le<std::uint32_t>(is);
  video.width = read_le<std::uint32_t>(is);
  (void)read_le<std::uint32_t>(is);
  video.labels.resize(std::size_t(video.frames) * video.height * video.width);
  read_bytes(is, video.labels.data(), video.labels.size());
  return video;
}

void write_signal(std::ostream& os, const SpeechSignal& signal) {
  write_le<std::uint32_t>(os, signal.sample_rate);
  write_le<std::uint32_t>(os, signal.window);
  write_le<std::uint64_t>(os, signal.samples.size());
  for (double v : signal.samples) write_le<double>(os, v);
}

SpeechSignal read_signal(std::istream& is) {
  SpeechSignal signal;
  signal.sample_rate = read_le<std::uint32_t>(is);
  signal.window = read_le<std::uint32_t>(is);
  signal.frame_rate =
      signal.window == 0
          ? 0.0
          : static_cast<double>(signal.sample_rate) / signal.window;
  const auto count = read_le<std::uint64_t>(is);
  signal.samples.resize(count);
  for (double& v : signal.samples) v = read_le<double>(is);
  return signal;
}

void write_image(std::ostream& os, const RgbImage& image) {
  write_le<std::uint32_t>(os, image.height);
  write_le<std::uint32_t>(os, image.width);
  write_le<std::uint32_t>(os, 3);
  write_le<std::uint32_t>(os, 0);
  for (double v : image.rgb) write_le<double>(os, v);
}

RgbImage read_image(std::istream& is) {
  RgbImage image;
  image.height = read_le<std::uint32_t>(is);
  image.width = read_le<std::uint32_t>(is);
  const auto channels = read_le<std::uint32_t>(is);
  (void)read_le<std::uint32_t>(is);
  if (channels != 3) fail(ErrorCode::IoError, "expected 3-channel image");
  image.rgb.resize(std::size_t(image.height) * image.width * 3);
  for (double& v : image.rgb) v = read_le<double>(is);
  return image;
}

void write_animation(std::ostream& os, const AnimationParams& params) {
  write_le<std::uint32_t>(os, params.frames);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.shape.size()));
  write_le<std::uint32_t>(os, params.expr_dim);
  write_le<std::uint32_t>(os, params.pose_dim);
  write_le<double>(os, params.frame_rate);
  for (double v : params.shape) write_le<double>(os, v);
  for (double v : params.expression) write_le<double>(os, v);
  for (double v : params.pose) write_le<double>(os, v);
}

AnimationParams read_animation(std::istream& is) {
  AnimationParams params;
  params.frames = read_le<std::uint32_t>(is);
  const auto e_sh = read_le<std::uint32_t>(is);
  params.expr_dim = read_le<std::uint32_t>(is);
  params.pose_dim = read_le<std::uint32_t>(is);
  params.frame_rate = read_le<double>(is);
  params.shape.resize(e_sh);
  params.expression.resize(std::size_t(params.frames) * params.expr_dim);
  params.pose.resize(std::size_t(params.frames) * params.pose_dim);
  for (double& v : params.shape) v = read_le<double>(is);
  for (double& v : params.expression) v = read_le<double>(is);
  for (double& v : params.pose) v = read_le<double>(is);
  return params;
}

namespace {

template <typename T, typename Fn>
void write_file_impl(const std::filesystem::path& path, const T& value, Fn fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string());
  fn(os, value);
}

template <typename Fn>
auto read_file_impl(const std::filesystem::path& path, Fn fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  return fn(is);
}

}  // namespace

void write_tokens_file(const std::filesystem::path& path, const TokenFile& file,
                       bool mixed_prompt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string());
  write_tokens(os, file, mixed_prompt);
}

TokenFile read_tokens_file(const std::filesystem::path& path,
                           bool* mixed_prompt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  return read_tokens(is, mixed_prompt);
}

void write_labels_file(const std::filesystem::path& path,
                       const SemanticVideo& video) {
  write_file_impl(path, video, [](std::ostream& os, const SemanticVideo& v) {
    write_labels(os, v);
  });
}

SemanticVideo read_labels_file(const std::filesystem::path& path) {
  return read_file_impl(path, [](std::istream& is) { return read_labels(is); });
}

void write_signal_file(const std::filesystem::path& path,
                       const SpeechSignal& signal) {
  write_file_impl(path, signal, [](std::ostream& os, const SpeechSignal& s) {
    write_signal(os, s);
  });
}

SpeechSignal read_signal_file(const std::filesystem::path& path) {
  return read_file_impl(path, [](std::istream& is) { return read_signal(is); });
}

void write_image_file(const std::filesystem::path& path, const RgbImage& image) {
  write_file_impl(path, image, [](std::ostream& os, const RgbImage& i) {
    write_image(os, i);
  });
}

RgbImage read_image_file(const std::filesystem::path& path) {
  return read_file_impl(path, [](std::istream& is) { return read_image(is); });
}

void write_animation_file(const std::filesystem::path& path,
                          const AnimationParams& params) {
  write_file_impl(path, params, [](std::ostream& os, const AnimationParams& p) {
    write_animation(os, p);
  });
}

AnimationParams read_animation_file(const std::filesystem::path& path) {
  return read_file_impl(path,
                        [](std::istream& is) { return read_animation(is); });
}

void write_video(std::ostream& os, const RgbVideo& video) {
  write_le<std::uint32_t>(os, video.frames);
  write_le<std::uint32_t>(os, video.height);
  write_le<std::uint32_t>(os, video.width);
  write_le<std::uint32_t>(os, 3);
  for (double v : video.rgb) write_le<double>(os, v);
}

RgbVideo read_video(std::istream& is) {
  RgbVideo video;
  video.frames = read_le<std::uint32_t>(is);
  video.height = read_le<std::uint32_t>(is);
  video.width = read_le<std::uint32_t>(is);
  const auto channels = read_le<std::uint32_t>(is);
  if (channels != 3) fail(ErrorCode::IoError, "expected 3-channel video");
  video.rgb.resize(std::size_t(video.frames) * video.height * video.width * 3);
  for (double& v : video.rgb) v = read_le<double>(is);
  return video;
}

void write_video_file(const std::filesystem::path& path, const RgbVideo& video) {
  write_file_impl(path, video, [](std::ostream& os, const RgbVideo& v) {
    write_video(os, v);
  });
}

RgbVideo read_video_file(const std::filesystem::path& path) {
  return read_file_impl(path, [](std::istream& is) { return read_video(is); });
}

}  // namespace archon
