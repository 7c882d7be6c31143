#include "archon/synthdata.hpp"

#include <cmath>
#include <numbers>

#include "archon/rng.hpp"

namespace archon {

namespace {

constexpr std::uint64_t kScriptSalt = 0x5c21b7u;
constexpr std::uint64_t kIdentitySalt = 0x1d5a1bu;

// Offset added to frame indices so that past windows keep positive
// absolute coordinates.
constexpr std::int64_t kFrameBase = std::int64_t(1) << 20;

const char* const kLexicon[16] = {
    "ash",  "bell", "cove", "dune", "elm",   "fern", "gale", "hill",
    "iris", "jade", "kelp", "loam", "mist",  "nook", "opal", "pine"};

const char* const kFaceWords[12] = {
    "round", "narrow", "broad",  "angular", "oval",   "square",
    "long",  "soft",   "sharp",  "wide",    "slender", "full"};
const char* const kHairWords[12] = {
    "amber", "black", "copper", "silver", "umber", "golden",
    "ashen", "russet", "sable",  "ivory",  "bronze", "slate"};
const char* const kClothWords[12] = {
    "tunic",  "jacket", "sweater", "cloak", "vest",  "scarf",
    "parka",  "poncho", "blazer",  "shawl", "frock", "smock"};

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

/// Word slot active at an absolute frame; slots tile time so that adjacent
/// windows continue the same word stream.
std::uint32_t word_at(const WorldConfig& cfg, std::uint64_t stream,
                      std::int64_t abs_frame) {
  const std::int64_t frames_per_word =
      std::max<std::int64_t>(1, cfg.frames / cfg.words_per_window);
  const std::int64_t slot = (kFrameBase + abs_frame) / frames_per_word;
  return static_cast<std::uint32_t>(splitmix64(stream ^ (0x9e37u + slot)) %
                                    cfg.lexicon_size);
}

/// Deterministic per-word expression target in [-0.8, 0.8].
double word_target(std::uint32_t word, std::uint32_t dim) {
  return 0.8 * std::sin(2.399963229728653 * (word + 1) * (dim + 1));
}

}  // namespace

AvatarWorld AvatarWorld::create(const WorldConfig& config) {
  if (config.identities < 1) fail(ErrorCode::InvalidInput, "no identities");
  if (config.identities > 12) {
    fail(ErrorCode::InvalidInput, "attribute tables support up to 12 identities");
  }
  if (config.lexicon_size < 1 || config.lexicon_size > 16) {
    fail(ErrorCode::InvalidInput, "lexicon size must be in [1, 16]");
  }
  if (config.frames == 0 || config.frames % 4 != 1) {
    fail(ErrorCode::BadTemporalLength, "frames must be 1 mod 4");
  }
  AvatarWorld world;
  world.config_ = config;
  Rng rng(splitmix64(config.seed ^ kIdentitySalt));
  if (config.freq_base_hz <= 0.0 || config.freq_step_hz <= 0.0) {
    fail(ErrorCode::InvalidInput, "identity frequencies must be positive");
  }
  for (std::uint32_t i = 0; i < config.identities; ++i) {
    world.base_freq_.push_back(config.freq_base_hz + config.freq_step_hz * i);
    world.words_.push_back({kFaceWords[i], kHairWords[i], kClothWords[i]});
    std::vector<double> shape(config.shape_dim);
    for (std::uint32_t d = 0; d < config.shape_dim; ++d) {
      // Well separated identity vectors with a small seeded ripple.
      shape[d] = 2.0 * std::sin(1.7 * (i + 1) + 0.9 * d) +
                 0.05 * std::sin(splitmix64(config.seed + i * 31 + d) % 1024);
    }
    world.shapes_.push_back(std::move(shape));
    world.blobs_.push_back({0.16 + 0.025 * i,      // face rx
                            0.22 + 0.02 * (i % 3),  // face ry
                            0.02 + 0.004 * i,       // eye radius
                            0.06 + 0.008 * (i % 4), // eye dx
                            0.10 + 0.012 * i});     // mouth half-width
    if (world.base_freq_.back() >= 0.45 * config.sample_rate) {
      fail(ErrorCode::InvalidInput, "identity frequency too close to Nyquist");
    }
    (void)rng;
  }
  return world;
}

double AvatarWorld::base_frequency(std::uint32_t identity) const {
  if (identity >= config_.identities) {
    fail(ErrorCode::InvalidInput, "identity out of range");
  }
  return base_freq_[identity];
}

const std::vector<std::string>& AvatarWorld::attribute_words(
    std::uint32_t identity) const {
  if (identity >= config_.identities) {
    fail(ErrorCode::InvalidInput, "identity out of range");
  }
  return words_[identity];
}

const std::vector<double>& AvatarWorld::shape_vector(
    std::uint32_t identity) const {
  if (identity >= config_.identities) {
    fail(ErrorCode::InvalidInput, "identity out of range");
  }
  return shapes_[identity];
}

const std::array<double, 5>& AvatarWorld::blob_geometry(
    std::uint32_t identity) const {
  if (identity >= config_.identities) {
    fail(ErrorCode::InvalidInput, "identity out of range");
  }
  return blobs_[identity];
}

namespace {

SemanticVideo make_semantic(const AvatarWorld& world, std::uint32_t identity,
                            std::uint32_t frames, std::int64_t frame0,
                            std::uint64_t script_stream) {
  const WorldConfig& cfg = world.config();
  const auto& geo = world.blob_geometry(identity);
  SemanticVideo video;
  video.frames = frames;
  video.height = cfg.height;
  video.width = cfg.width;
  video.labels.assign(std::size_t(frames) * cfg.height * cfg.width, 0);

  const double W = cfg.width, H = cfg.height;
  for (std::uint32_t t = 0; t < frames; ++t) {
    const std::int64_t a = frame0 + t;
    const double sway = 0.05 * std::sin(2.0 * std::numbers::pi * a / cfg.frames);
    const double cx = (0.5 + sway) * W;
    const double cy = 0.45 * H;
    const double rx = geo[0] * W, ry = geo[1] * H;
    const std::uint32_t word = word_at(cfg, script_stream, a);
    // Mouth opens with a per-word articulation rhythm.
    const double mouth_open =
        0.015 + 0.02 * std::abs(std::sin(2.0 * std::numbers::pi *
                                         (1.5 + 0.5 * word) * a / 25.0));

    for (std::uint32_t y = 0; y < cfg.height; ++y) {
      for (std::uint32_t x = 0; x < cfg.width; ++x) {
        const double dx = (x - cx), dy = (y - cy);
        std::uint8_t label = 0;
        if (y >= 0.82 * H) label = 11;  // clothes
        const double face_d = (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry);
        const double hair_d =
            (dx * dx) / (1.25 * rx * 1.25 * rx) +
            ((y - cy + 0.25 * ry) * (y - cy + 0.25 * ry)) / (1.3 * ry * 1.3 * ry);
        if (hair_d < 1.0 && y < cy) label = 2;  // hair cap
        if (face_d < 1.0) label = 1;            // face
        if (face_d < 1.0) {
          // Eyes.
          const double ex = geo[3] * W, er = geo[2] * W;
          const double eyl = (x - (cx - ex)) * (x - (cx - ex)) +
                             (y - (cy - 0.25 * ry)) * (y - (cy - 0.25 * ry));
          const double eyr = (x - (cx + ex)) * (x - (cx + ex)) +
                             (y - (cy - 0.25 * ry)) * (y - (cy - 0.25 * ry));
          if (eyl < er * er || eyr < er * er) label = 4;  // brows/eyes
          // Mouth bar.
          if (std::abs(x - cx) < geo[4] * W &&
              std::abs(y - (cy + 0.45 * ry)) < mouth_open * H) {
            label = 12;  // teeth band stands in for the open mouth
          }
        }
        video.at(t, y, x) = label;
      }
    }
  }
  return video;
}

}  // namespace

SampleRecord generate_record(const AvatarWorld& world, std::uint64_t record_seed,
                             std::uint32_t frames, std::int32_t window_offset) {
  const WorldConfig& cfg = world.config();
  if (frames == 0 || frames % 4 != 1) {
    fail(ErrorCode::BadTemporalLength, "frames must be 1 mod 4");
  }
  SampleRecord record;
  record.seed = record_seed;
  record.identity =
      static_cast<std::uint32_t>(splitmix64(record_seed) % cfg.identities);
  const std::uint64_t script_stream =
      splitmix64(record_seed ^ kScriptSalt ^ (cfg.seed << 1));
  const std::int64_t frame0 = std::int64_t(window_offset) * frames;

  // Script: the word stream covering this window, space-joined.
  auto window_text = [&](std::int64_t first_frame) {
    std::string text;
    std::uint32_t last_word = 0xffffffffu;
    for (std::uint32_t t = 0; t < frames; ++t) {
      const std::uint32_t w = word_at(cfg, script_stream, first_frame + t);
      if (w != last_word) {
        if (!text.empty()) text += ' ';
        text += kLexicon[w];
        last_word = w;
      }
    }
    return text;
  };
  record.script = window_text(frame0);
  record.past_script = window_text(frame0 - std::int64_t(frames));

  // Description from the identity attribute tables.
  const auto& words = world.attribute_words(record.identity);
  record.description = "a " + words[0] + " faced person with " + words[1] +
                       " hair wearing a " + words[2];

  // Speech: identity carrier with a word-driven amplitude envelope.
  const double f_id = world.base_frequency(record.identity);
  const std::uint32_t window = cfg.sample_rate / 25;
  std::vector<double> samples;
  samples.reserve(std::size_t(frames) * window);
  for (std::uint32_t t = 0; t < frames; ++t) {
    const std::int64_t a = frame0 + t;
    const std::uint32_t w = word_at(cfg, script_stream, a);
    const double g = 1.5 + 0.5 * w;  // envelope Hz, far below the carrier
    for (std::uint32_t s = 0; s < window; ++s) {
      const double tau =
          (static_cast<double>(a) * window + s) / cfg.sample_rate;
      samples.push_back(0.75 * std::sin(2.0 * std::numbers::pi * f_id * tau) *
                        (0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * g * tau)));
    }
  }
  record.speech = make_speech_signal(std::move(samples), cfg.sample_rate);

  // Animation: shape from the identity table; expression interpolates
  // between word targets; pose drifts slowly.
  record.animation.frames = frames;
  record.animation.frame_rate = 25.0;
  record.animation.expr_dim = cfg.expr_dim;
  record.animation.pose_dim = cfg.pose_dim;
  record.animation.shape = world.shape_vector(record.identity);
  record.animation.expression.resize(std::size_t(frames) * cfg.expr_dim);
  record.animation.pose.resize(std::size_t(frames) * cfg.pose_dim);
  const std::int64_t frames_per_word =
      std::max<std::int64_t>(1, cfg.frames / cfg.words_per_window);
  for (std::uint32_t t = 0; t < frames; ++t) {
    const std::int64_t a = frame0 + t;
    const std::uint32_t w_now = word_at(cfg, script_stream, a);
    const std::uint32_t w_next =
        word_at(cfg, script_stream, a + frames_per_word);
    const double phase =
        double((kFrameBase + a) % frames_per_word) / double(frames_per_word);
    const double blend = smoothstep(phase);
    for (std::uint32_t d = 0; d < cfg.expr_dim; ++d) {
      const double target = (1.0 - blend) * word_target(w_now, d) +
                            blend * word_target(w_next, d);
      const double amp = 0.5 + 0.1 * ((record.identity + d) % 3);
      record.animation.expression[std::size_t(t) * cfg.expr_dim + d] =
          amp * target;
    }
    for (std::uint32_t d = 0; d < cfg.pose_dim; ++d) {
      record.animation.pose[std::size_t(t) * cfg.pose_dim + d] =
          0.3 * std::sin(std::numbers::pi * a / frames + 0.7 * d +
                         0.4 * record.identity);
    }
  }

  record.semantic =
      make_semantic(world, record.identity, frames, frame0, script_stream);
  record.image = color_embed_frame(record.semantic, 0, world.palette());
  return record;
}

std::vector<SampleRecord> generate_dataset(const AvatarWorld& world,
                                           std::size_t n,
                                           std::uint64_t base_seed) {
  if (n < 1) fail(ErrorCode::InvalidInput, "need at least one record");
  std::vector<SampleRecord> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    records.push_back(
        generate_record(world, base_seed + i, world.config().frames));
  }
  return records;
}

AmbiguousDataset ambiguous_task_dataset(const AvatarWorld& world, std::size_t n,
                                        std::uint64_t seed) {
  if (world.config().identities < 2) {
    fail(ErrorCode::WorldTooSmall,
         "the ambiguous task needs at least two identities");
  }
  if (n < 4) fail(ErrorCode::InvalidInput, "need at least four records");
  AmbiguousDataset out;
  out.train = generate_dataset(world, n, seed);
  out.heldout = generate_dataset(world, std::max<std::size_t>(1, n / 4),
                                 seed + n);  // disjoint seed range
  return out;
}

double dominant_frequency(const SpeechSignal& signal) {
  const std::size_t n = signal.samples.size();
  if (n == 0) fail(ErrorCode::EmptyInput, "empty signal");
  double best_mag = -1.0;
  std::size_t best_bin = 0;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double angle = -2.0 * std::numbers::pi * double(k) * double(i) / n;
      re += signal.samples[i] * std::cos(angle);
      im += signal.samples[i] * std::sin(angle);
    }
    const double mag = re * re + im * im;
    if (mag > best_mag) {
      best_mag = mag;
      best_bin = k;
    }
  }
  return double(best_bin) * signal.sample_rate / double(n);
}

}  // namespace archon
