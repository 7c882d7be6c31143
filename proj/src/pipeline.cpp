#include "archon/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "archon/bytes.hpp"
#include "archon/rng.hpp"

namespace archon {

namespace {

std::vector<double> speech_windows(std::span<const SampleRecord> records,
                                   std::uint32_t window, std::uint32_t* rows) {
  std::vector<double> features;
  std::uint32_t n = 0;
  for (const SampleRecord& r : records) {
    if (r.speech.window != window) {
      fail(ErrorCode::DimMismatch, "record window does not match the config");
    }
    features.insert(features.end(), r.speech.samples.begin(),
                    r.speech.samples.end());
    n += r.speech.frames();
  }
  *rows = n;
  return features;
}

nlohmann::json codec_metrics(const RvqCodec& codec,
                             std::span<const double> vectors, std::uint32_t n) {
  std::vector<double> distortion;
  std::vector<double> utilization;
  std::vector<double> residual(vectors.begin(), vectors.end());
  const std::uint32_t dim = codec.dim();
  for (std::uint32_t l = 0; l < codec.num_levels(); ++l) {
    const Codebook& cb = codec.level(l);
    utilization.push_back(codebook_utilization(cb, residual, n));
    double total = 0.0;
    for (std::uint32_t i = 0; i < n; ++i) {
      double* r = residual.data() + std::size_t(i) * dim;
      const auto e = cb.entry(cb.nearest(std::span<const double>(r, dim)));
      double energy = 0.0;
      for (std::uint32_t d = 0; d < dim; ++d) {
        r[d] -= e[d];
        energy += r[d] * r[d];
      }
      total += energy;
    }
    distortion.push_back(total / n);
  }
  return {{"distortion_per_level", distortion},
          {"utilization_per_level", utilization}};
}

/// Latent trajectory rows pooled the same way the encoder pools them.
std::vector<double> latent_rows(std::span<const SampleRecord> records,
                                const NormalizationStats& stats, bool expr,
                                std::uint32_t dim, std::uint32_t* rows) {
  std::vector<double> out;
  std::uint32_t n = 0;
  for (const SampleRecord& r : records) {
    const AnimationParams normed = normalize_animation(r.animation, stats);
    const std::vector<double>& data = expr ? normed.expression : normed.pose;
    const std::uint32_t latents = latent_frames(normed.frames);
    for (std::uint32_t g = 0; g < latents; ++g) {
      const std::uint32_t begin = g == 0 ? 0 : 4 * (g - 1) + 1;
      const std::uint32_t end = g == 0 ? 1 : 4 * g + 1;
      for (std::uint32_t d = 0; d < dim; ++d) {
        double acc = 0.0;
        for (std::uint32_t t = begin; t < end; ++t) {
          acc += data[std::size_t(t) * dim + d];
        }
        out.push_back(acc / (end - begin));
      }
      ++n;
    }
  }
  *rows = n;
  return out;
}

}  // namespace

CodecSuite train_codec_suite(const RunConfig& config,
                             std::span<const SampleRecord> records,
                             CodecReport* report) {
  if (records.empty()) fail(ErrorCode::EmptyInput, "no training records");
  const std::uint32_t window = config.world.sample_rate / 25;

  std::vector<AnimationParams> anims;
  anims.reserve(records.size());
  for (const SampleRecord& r : records) anims.push_back(r.animation);
  NormalizationStats stats = compute_normalization(anims);

  // Shape vectors (one per record), normalized.
  std::vector<double> shape_rows;
  for (const AnimationParams& a : anims) {
    const AnimationParams n = normalize_animation(a, stats);
    shape_rows.insert(shape_rows.end(), n.shape.begin(), n.shape.end());
  }

  std::uint32_t expr_rows = 0, pose_rows = 0, speech_rows = 0;
  const std::vector<double> expr_data =
      latent_rows(records, stats, true, config.world.expr_dim, &expr_rows);
  const std::vector<double> pose_data =
      latent_rows(records, stats, false, config.world.pose_dim, &pose_rows);
  const std::vector<double> speech_data =
      speech_windows(records, window, &speech_rows);

  const std::uint64_t seed = splitmix64(config.seed ^ 0xc0dec5ULL);
  RvqCodec shape = RvqCodec::train(
      shape_rows, static_cast<std::uint32_t>(records.size()),
      config.world.shape_dim, config.codecs.shape.levels,
      config.codecs.shape.codes, config.codecs.kmeans_iters, seed + 1);
  RvqCodec expression = RvqCodec::train(
      expr_data, expr_rows, config.world.expr_dim,
      config.codecs.expression.levels, config.codecs.expression.codes,
      config.codecs.kmeans_iters, seed + 2);
  RvqCodec pose = RvqCodec::train(pose_data, pose_rows, config.world.pose_dim,
                                  config.codecs.pose.levels,
                                  config.codecs.pose.codes,
                                  config.codecs.kmeans_iters, seed + 3);
  RvqCodec speech = RvqCodec::train(speech_data, speech_rows, window,
                                    config.codecs.speech.levels,
                                    config.codecs.speech.codes,
                                    config.codecs.kmeans_iters, seed + 4);

  std::vector<SemanticVideo> videos;
  videos.reserve(records.size());
  for (const SampleRecord& r : records) videos.push_back(r.semantic);
  SemanticCodec semantic = SemanticCodec::train(
      videos, config.codecs.semantic_codes, config.codecs.kmeans_iters,
      seed + 5);

  if (report) {
    std::vector<double> sem_features;
    for (const SemanticVideo& v : videos) {
      const auto f = SemanticCodec::cell_features(v);
      sem_features.insert(sem_features.end(), f.begin(), f.end());
    }
    const std::uint32_t sem_rows =
        static_cast<std::uint32_t>(sem_features.size() / kNumLabels);
    report->body = {
        {"shape", codec_metrics(shape, shape_rows,
                                static_cast<std::uint32_t>(records.size()))},
        {"expression", codec_metrics(expression, expr_data, expr_rows)},
        {"pose", codec_metrics(pose, pose_data, pose_rows)},
        {"speech", codec_metrics(speech, speech_data, speech_rows)},
        {"semantic",
         {{"utilization",
           codebook_utilization(semantic.codebook(), sem_features, sem_rows)},
          {"distortion",
           codebook_distortion(semantic.codebook(), sem_features, sem_rows)}}},
    };
  }

  return CodecSuite{std::move(speech),
                    std::move(shape),
                    std::move(expression),
                    std::move(pose),
                    std::move(stats),
                    std::move(semantic),
                    ImageCodec(config.world.height, config.world.width,
                               config.codecs.image_bits,
                               splitmix64(config.seed ^ 0x1f9ULL)),
                    Palette::generate(config.codecs.palette_seed)};
}

namespace {

void write_stats(std::ostream& os, const NormalizationStats& stats) {
  auto dump = [&os](const std::vector<double>& v) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
    for (double x : v) write_le<double>(os, x);
  };
  dump(stats.shape_mean);
  dump(stats.shape_std);
  dump(stats.expr_mean);
  dump(stats.expr_std);
  dump(stats.pose_mean);
  dump(stats.pose_std);
}

NormalizationStats read_stats(std::istream& is) {
  auto slurp = [&is]() {
    std::vector<double> v(read_le<std::uint32_t>(is));
    for (double& x : v) x = read_le<double>(is);
    return v;
  };
  NormalizationStats stats;
  stats.shape_mean = slurp();
  stats.shape_std = slurp();
  stats.expr_mean = slurp();
  stats.expr_std = slurp();
  stats.pose_mean = slurp();
  stats.pose_std = slurp();
  return stats;
}

}  // namespace

void save_codec_suite(const std::filesystem::path& dir,
                      const CodecSuite& suite) {
  std::filesystem::create_directories(dir);
  suite.speech.save_file(dir / "speech.arcb");
  suite.shape.save_file(dir / "shape.arcb");
  suite.expression.save_file(dir / "expression.arcb");
  suite.pose.save_file(dir / "pose.arcb");
  RvqCodec(std::vector<Codebook>{suite.semantic.codebook()})
      .save_file(dir / "semantic.arcb");
  std::ofstream stats(dir / "normalization.bin", std::ios::binary);
  if (!stats) fail(ErrorCode::IoError, "cannot write normalization stats");
  write_stats(stats, suite.stats);
}

CodecSuite load_codec_suite(const std::filesystem::path& dir,
                            const RunConfig& config) {
  std::ifstream stats_file(dir / "normalization.bin", std::ios::binary);
  if (!stats_file) fail(ErrorCode::IoError, "cannot read normalization stats");
  RvqCodec semantic_raw = RvqCodec::load_file(dir / "semantic.arcb");
  return CodecSuite{RvqCodec::load_file(dir / "speech.arcb"),
                    RvqCodec::load_file(dir / "shape.arcb"),
                    RvqCodec::load_file(dir / "expression.arcb"),
                    RvqCodec::load_file(dir / "pose.arcb"),
                    read_stats(stats_file),
                    SemanticCodec(semantic_raw.level(0)),
                    ImageCodec(config.world.height, config.world.width,
                               config.codecs.image_bits,
                               splitmix64(config.seed ^ 0x1f9ULL)),
                    Palette::generate(config.codecs.palette_seed)};
}

Segment encode_modality(const ModalityRef& ref, const SampleRecord& current,
                        const SampleRecord& past, const CodecSuite& suite,
                        const VocabularyLayout& layout) {
  const bool use_past = ref.state == ModalityState::past;
  const SampleRecord& rec = use_past ? past : current;

  Segment seg;
  // Registry rows may tag expression/pose as time-invariant; the record
  // holds a single window, so those materialize as current-state segments.
  ModalityRef eff = ref;
  if ((ref.kind == ModalityKind::expression || ref.kind == ModalityKind::pose) &&
      ref.state == ModalityState::invariant) {
    eff.state = ModalityState::current;
  }
  seg.ref = eff;

  auto push_text = [&](const std::string& text, ModalityKind kind) {
    seg.dims = {static_cast<std::uint32_t>(text.size())};
    for (std::uint32_t t : encode_text(text)) {
      seg.payload.push_back(layout.globalize(kind, 0, t));
    }
  };
  auto push_levels = [&](const std::vector<std::uint32_t>& locals,
                         ModalityKind kind, std::uint32_t levels) {
    for (std::size_t i = 0; i < locals.size(); ++i) {
      seg.payload.push_back(layout.globalize(
          kind, static_cast<std::uint32_t>(i % levels), locals[i]));
    }
  };

  switch (eff.kind) {
    case ModalityKind::description:
      push_text(rec.description, ModalityKind::description);
      break;
    case ModalityKind::script:
      push_text(rec.script, ModalityKind::script);
      break;
    case ModalityKind::speech: {
      const auto locals = encode_speech(rec.speech, suite.speech);
      seg.dims = {rec.speech.frames()};
      push_levels(locals, ModalityKind::speech, suite.speech.num_levels());
      break;
    }
    case ModalityKind::shape: {
      const auto tokens = encode_animation(rec.animation, suite.animation());
      seg.dims = {};
      push_levels(tokens.shape, ModalityKind::shape, suite.shape.num_levels());
      break;
    }
    case ModalityKind::expression: {
      const auto tokens = encode_animation(rec.animation, suite.animation());
      seg.dims = {rec.animation.frames};
      push_levels(tokens.expression, ModalityKind::expression,
                  suite.expression.num_levels());
      break;
    }
    case ModalityKind::pose: {
      const auto tokens = encode_animation(rec.animation, suite.animation());
      seg.dims = {rec.animation.frames};
      push_levels(tokens.pose, ModalityKind::pose, suite.pose.num_levels());
      break;
    }
    case ModalityKind::semantic: {
      const auto locals = suite.semantic.encode(rec.semantic);
      seg.dims = {rec.semantic.frames, rec.semantic.height, rec.semantic.width};
      push_levels(locals, ModalityKind::semantic, 1);
      break;
    }
    case ModalityKind::image: {
      const auto locals = suite.image.encode(rec.image);
      seg.dims = {rec.image.height, rec.image.width};
      push_levels(locals, ModalityKind::image, 1);
      break;
    }
    case ModalityKind::video:
      fail(ErrorCode::InvalidInstance, "video never appears in a prompt");
  }
  return seg;
}

TaskInstance materialize(const TaskSpec& spec, const SampleRecord& current,
                         const SampleRecord& past, const CodecSuite& suite,
                         const VocabularyLayout& layout) {
  TaskInstance instance;
  for (const ModalityRef& in : spec.inputs) {
    instance.conditions.push_back(
        encode_modality(in, current, past, suite, layout));
  }
  Segment out = encode_modality(spec.output, current, past, suite, layout);
  instance.output_ref = out.ref;
  instance.output_dims = out.dims;
  instance.output_payload = out.payload;
  instance.expected_output_len = out.payload.size();
  return instance;
}

void decode_payload_into(SampleRecord& record, const Segment& segment,
                         const CodecSuite& suite, const VocabularyLayout& layout,
                         const WorldConfig& world) {
  std::vector<std::uint32_t> locals;
  locals.reserve(segment.payload.size());
  for (TokenId t : segment.payload) {
    const Localized loc = layout.localize(t);
    if (loc.kind != segment.ref.kind) {
      fail(ErrorCode::RangeViolation, "payload token of the wrong kind");
    }
    locals.push_back(loc.local_id);
  }
  switch (segment.ref.kind) {
    case ModalityKind::description:
      record.description = decode_text_lossy(locals);
      break;
    case ModalityKind::script:
      record.script = decode_text_lossy(locals);
      break;
    case ModalityKind::speech:
      record.speech = decode_speech(locals, suite.speech, world.sample_rate);
      break;
    case ModalityKind::shape: {
      record.animation.shape = suite.shape.decode(locals);
      // Undo normalization for the static component.
      for (std::size_t d = 0; d < record.animation.shape.size(); ++d) {
        record.animation.shape[d] =
            record.animation.shape[d] * suite.stats.shape_std[d] +
            suite.stats.shape_mean[d];
      }
      break;
    }
    case ModalityKind::expression:
    case ModalityKind::pose: {
      // Decode through the full animation path with neutral counterparts.
      const std::uint32_t frames = segment.dims.at(0);
      AnimationTokens tokens;
      tokens.shape.assign(suite.shape.num_levels(), 0);
      const std::uint32_t latents = latent_frames(frames);
      tokens.expression.assign(
          std::size_t(latents) * suite.expression.num_levels(), 0);
      tokens.pose.assign(std::size_t(latents) * suite.pose.num_levels(), 0);
      if (segment.ref.kind == ModalityKind::expression) {
        tokens.expression.assign(locals.begin(), locals.end());
      } else {
        tokens.pose.assign(locals.begin(), locals.end());
      }
      const AnimationParams decoded =
          decode_animation(tokens, suite.animation(), frames);
      record.animation.frames = frames;
      if (segment.ref.kind == ModalityKind::expression) {
        record.animation.expression = decoded.expression;
        record.animation.expr_dim = decoded.expr_dim;
      } else {
        record.animation.pose = decoded.pose;
        record.animation.pose_dim = decoded.pose_dim;
      }
      break;
    }
    case ModalityKind::semantic:
      record.semantic = suite.semantic.decode(locals, segment.dims.at(0),
                                              segment.dims.at(1),
                                              segment.dims.at(2));
      break;
    case ModalityKind::image:
      record.image = suite.image.decode(locals);
      break;
    case ModalityKind::video:
      fail(ErrorCode::InvalidInstance, "video payloads are never tokenized");
  }
}

WindowBatch sample_windows(const Registry& registry,
                           const SamplerWeights& weights,
                           std::span<const SampleRecord> records,
                           const AvatarWorld& world, const CodecSuite& suite,
                           const VocabularyLayout& layout, std::size_t budget,
                           std::size_t n_windows, std::uint64_t seed) {
  if (records.empty()) fail(ErrorCode::EmptyInput, "no records to pack");
  WindowBatch batch;
  Rng rng(seed);
  for (std::size_t w = 0; w < n_windows; ++w) {
    WindowBuilder builder(budget);
    int consecutive_rejects = 0;
    while (consecutive_rejects < 2) {
      const std::size_t spec_idx =
          sample_tasks(weights, 1, rng.next_u64())[0];
      const TaskSpec& spec = registry.specs()[spec_idx];
      const SampleRecord& current = records[rng.below(records.size())];
      const SampleRecord past = generate_record(
          world, current.seed, current.semantic.frames, -1);
      const TaskInstance instance =
          materialize(spec, current, past, suite, layout);
      const SerializedInstance ser = serialize(instance, layout);
      try {
        if (builder.try_add(ser)) {
          consecutive_rejects = 0;
        } else {
          ++consecutive_rejects;
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::InstanceTooLarge) throw;
        batch.oversize_specs.push_back(spec_idx);
        ++consecutive_rejects;
      }
    }
    batch.windows.push_back(builder.finish(layout.pad_id()));
  }
  return batch;
}

double estimate_task_perplexity(const Model& model, const TaskSpec& spec,
                                std::span<const SampleRecord> records,
                                const AvatarWorld& world,
                                const CodecSuite& suite,
                                const VocabularyLayout& layout,
                                std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) fail(ErrorCode::InvalidInput, "need n_samples >= 1");
  if (records.empty()) fail(ErrorCode::EmptyInput, "no records");
  Rng rng(seed);
  std::vector<SerializedInstance> instances;
  instances.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const SampleRecord& current = records[rng.below(records.size())];
    const SampleRecord past =
        generate_record(world, current.seed, current.semantic.frames, -1);
    instances.push_back(
        serialize(materialize(spec, current, past, suite, layout), layout));
  }
  return estimate_perplexity(model, instances);
}

// ---------------------------------------------------------------------------
// Dataset directory format

std::filesystem::path record_dir(const std::filesystem::path& root,
                                 std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof(name), "record_%05zu", index);
  return root / name;
}

void save_dataset(const std::filesystem::path& dir,
                  std::span<const SampleRecord> records,
                  const RunConfig& config) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = config.to_json();
  manifest["records"] = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const SampleRecord& r = records[i];
    const auto rdir = record_dir(dir, i);
    std::filesystem::create_directories(rdir);
    {
      std::ofstream os(rdir / "description.txt");
      os << r.description;
    }
    {
      std::ofstream os(rdir / "script.txt");
      os << r.script;
    }
    {
      std::ofstream os(rdir / "past_script.txt");
      os << r.past_script;
    }
    write_signal_file(rdir / "speech.sig", r.speech);
    write_animation_file(rdir / "animation.bin", r.animation);
    write_labels_file(rdir / "semantic.lbl", r.semantic);
    write_image_file(rdir / "image.bin", r.image);
    manifest["records"].push_back({{"index", i},
                                   {"seed", r.seed},
                                   {"identity", r.identity},
                                   {"frames", r.semantic.frames}});
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) fail(ErrorCode::IoError, "cannot write manifest");
  os << manifest.dump(2) << '\n';
}

std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) fail(ErrorCode::IoError, "no manifest in " + dir.string());
  nlohmann::json manifest;
  is >> manifest;
  std::vector<SampleRecord> records;
  for (const auto& row : manifest.at("records")) {
    const auto rdir = record_dir(dir, row.at("index").get<std::size_t>());
    SampleRecord r;
    r.seed = row.at("seed").get<std::uint64_t>();
    r.identity = row.at("identity").get<std::uint32_t>();
    auto read_text = [&](const char* name) {
      std::ifstream f(rdir / name);
      std::stringstream ss;
      ss << f.rdbuf();
      return ss.str();
    };
    r.description = read_text("description.txt");
    r.script = read_text("script.txt");
    r.past_script = read_text("past_script.txt");
    r.speech = read_signal_file(rdir / "speech.sig");
    r.animation = read_animation_file(rdir / "animation.bin");
    r.semantic = read_labels_file(rdir / "semantic.lbl");
    r.image = read_image_file(rdir / "image.bin");
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Metrics

double semantic_label_accuracy(const SemanticVideo& reference,
                               const SemanticVideo& prediction) {
  if (reference.labels.size() != prediction.labels.size()) {
    fail(ErrorCode::ShapeMismatch, "label grids differ in size");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < reference.labels.size(); ++i) {
    hits += reference.labels[i] == prediction.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / reference.labels.size();
}

double animation_mse(const AnimationParams& reference,
                     const AnimationParams& prediction) {
  if (reference.shape.size() != prediction.shape.size() ||
      reference.expression.size() != prediction.expression.size() ||
      reference.pose.size() != prediction.pose.size()) {
    fail(ErrorCode::ShapeMismatch, "animation dims differ");
  }
  double total = 0.0;
  std::size_t count = 0;
  auto add = [&](const std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double t = a[i] - b[i];
      total += t * t;
    }
    count += a.size();
  };
  add(reference.shape, prediction.shape);
  add(reference.expression, prediction.expression);
  add(reference.pose, prediction.pose);
  return count == 0 ? 0.0 : total / count;
}

bool script_exact_match(const std::string& reference,
                        const std::string& prediction) {
  return reference == prediction;
}

double description_attribute_accuracy(const std::string& reference,
                                      const std::string& prediction) {
  auto words = [](const std::string& s) {
    std::set<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.insert(w);
    return out;
  };
  const auto ref = words(reference);
  if (ref.empty()) return 1.0;
  const auto pred = words(prediction);
  std::size_t hits = 0;
  for (const std::string& w : ref) hits += pred.count(w);
  return static_cast<double>(hits) / ref.size();
}

double speech_spectral_correlation(const SpeechSignal& reference,
                                   const SpeechSignal& prediction) {
  if (reference.samples.size() != prediction.samples.size() ||
      reference.samples.empty()) {
    fail(ErrorCode::ShapeMismatch, "signals differ in length");
  }
  const std::size_t n = reference.samples.size();
  const std::size_t bins = n / 2;
  auto magnitudes = [n, bins](const std::vector<double>& x) {
    std::vector<double> mags(bins);
    for (std::size_t k = 1; k <= bins; ++k) {
      double re = 0.0, im = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double angle = -2.0 * std::numbers::pi * double(k) * double(i) / n;
        re += x[i] * std::cos(angle);
        im += x[i] * std::sin(angle);
      }
      mags[k - 1] = std::sqrt(re * re + im * im);
    }
    return mags;
  };
  const auto a = magnitudes(reference.samples);
  const auto b = magnitudes(prediction.samples);
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    ma += a[i] / bins;
    mb += b[i] / bins;
  }
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return da == db ? 1.0 : 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace archon
