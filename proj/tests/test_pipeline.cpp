#include "archon/pipeline.hpp"

#include <filesystem>

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

RunConfig tiny_config() {
  RunConfig cfg = RunConfig::desk_default();
  cfg.world.identities = 3;
  cfg.world.frames = 13;
  cfg.world.height = 32;
  cfg.world.width = 32;
  cfg.codecs.speech = {2, 16};
  cfg.codecs.shape = {2, 8};
  cfg.codecs.expression = {2, 16};
  cfg.codecs.pose = {2, 8};
  cfg.codecs.semantic_codes = 32;
  cfg.codecs.image_bits = 6;
  cfg.codecs.kmeans_iters = 6;
  cfg.model.embed_dim = 32;
  cfg.model.num_layers = 1;
  cfg.model.max_context = 1024;
  cfg.sampler.budget = 1024;
  return cfg;
}

struct Fixture {
  RunConfig cfg = tiny_config();
  AvatarWorld world = AvatarWorld::create(cfg.world);
  std::vector<SampleRecord> records = generate_dataset(world, 24, 50);
  CodecSuite suite = train_codec_suite(cfg, records);
  VocabularyLayout layout = cfg.layout();
};

}  // namespace

TEST_CASE("config json roundtrip preserves the layout hash") {
  const RunConfig cfg = tiny_config();
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.layout().hash() == cfg.layout().hash());
  CHECK(back.world.frames == cfg.world.frames);
  CHECK(back.codecs.expression.codes == cfg.codecs.expression.codes);
  CHECK(back.sampler.budget == cfg.sampler.budget);
}

TEST_CASE("unknown config keys are rejected by name") {
  nlohmann::json j = tiny_config().to_json();
  j["wrold"] = 1;
  CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("wrold"),
                       Error);
  j.erase("wrold");
  j["model"]["embd_dim"] = 8;
  CHECK_THROWS_WITH_AS(RunConfig::from_json(j),
                       doctest::Contains("model.embd_dim"), Error);
}

TEST_CASE("resolved model derives the vocabulary size from the layout") {
  RunConfig cfg = tiny_config();
  cfg.model.vocab_size = 0;
  CHECK(cfg.resolved_model().vocab_size == cfg.layout().total_size());
}

TEST_CASE_FIXTURE(Fixture, "codec suite roundtrips through its directory") {
  const auto dir =
      std::filesystem::temp_directory_path() / "archon_codec_suite_test";
  std::filesystem::remove_all(dir);
  save_codec_suite(dir, suite);
  const CodecSuite back = load_codec_suite(dir, cfg);
  CHECK(back.speech.level(0).entries == suite.speech.level(0).entries);
  CHECK(back.expression.level(1).entries == suite.expression.level(1).entries);
  CHECK(back.semantic.codebook().entries == suite.semantic.codebook().entries);
  CHECK(back.stats.expr_mean == suite.stats.expr_mean);
  std::filesystem::remove_all(dir);
}

TEST_CASE_FIXTURE(Fixture, "codec training is seed-deterministic") {
  const CodecSuite again = train_codec_suite(cfg, records);
  CHECK(again.speech.level(0).entries == suite.speech.level(0).entries);
  CHECK(again.semantic.codebook().entries == suite.semantic.codebook().entries);
}

TEST_CASE_FIXTURE(Fixture, "codec report distortion is non-increasing") {
  CodecReport report;
  (void)train_codec_suite(cfg, records, &report);
  for (const char* kind : {"shape", "expression", "pose", "speech"}) {
    const auto& distortion = report.body.at(kind).at("distortion_per_level");
    double prev = 1e300;
    for (double d : distortion) {
      CHECK(d <= prev + 1e-12);
      prev = d;
    }
    for (double u : report.body.at(kind).at("utilization_per_level")) {
      CHECK(u > 0.0);
      CHECK(u <= 1.0);
    }
  }
  const double sem_util = report.body.at("semantic").at("utilization");
  CHECK(sem_util > 0.0);
  CHECK(sem_util <= 1.0);
}

TEST_CASE_FIXTURE(Fixture, "every registry row materializes and roundtrips") {
  const Registry registry = Registry::default_table();
  const SampleRecord& current = records[0];
  const SampleRecord past =
      generate_record(world, current.seed, cfg.world.frames, -1);
  const LevelConfig levels = LevelConfig::from_layout(layout);
  for (const TaskSpec& spec : registry.specs()) {
    const TaskInstance instance =
        materialize(spec, current, past, suite, layout);
    // Payload sizes agree with the closed-form arithmetic.
    for (const Segment& seg : instance.conditions) {
      CHECK(seg.payload.size() == token_count(seg.ref.kind, seg.dims, levels));
    }
    CHECK(instance.output_payload.size() ==
          token_count(instance.output_ref.kind, instance.output_dims, levels));
    const SerializedInstance ser = serialize(instance, layout);
    const TaskInstance back = parse(ser.tokens, layout);
    CHECK(back.output_ref == instance.output_ref);
    CHECK(back.output_payload == instance.output_payload);
    CHECK(back.conditions.size() == instance.conditions.size());
  }
}

TEST_CASE_FIXTURE(Fixture, "decoded payloads land back in record slots") {
  const SampleRecord& current = records[1];
  const SampleRecord past =
      generate_record(world, current.seed, cfg.world.frames, -1);

  SampleRecord decoded;
  for (ModalityKind kind :
       {ModalityKind::description, ModalityKind::script, ModalityKind::speech,
        ModalityKind::shape, ModalityKind::expression, ModalityKind::pose,
        ModalityKind::semantic, ModalityKind::image}) {
    ModalityState state = ModalityState::current;
    if (kind == ModalityKind::description || kind == ModalityKind::shape ||
        kind == ModalityKind::image) {
      state = ModalityState::invariant;
    }
    const Segment seg =
        encode_modality({kind, state}, current, past, suite, layout);
    decode_payload_into(decoded, seg, suite, layout, cfg.world);
  }
  CHECK(decoded.description == current.description);
  CHECK(decoded.script == current.script);
  CHECK(decoded.semantic.labels.size() == current.semantic.labels.size());
  CHECK(decoded.speech.samples.size() == current.speech.samples.size());
  CHECK(decoded.animation.shape.size() == current.animation.shape.size());
  // Text roundtrips exactly; the rest only up to quantization.
  CHECK(semantic_label_accuracy(current.semantic, decoded.semantic) > 0.5);
}

TEST_CASE_FIXTURE(Fixture, "sampled windows respect the budget") {
  const Registry registry = Registry::default_table();
  TaskStats stats;
  stats.perplexity.assign(registry.size(), 2.0);
  for (const TaskSpec& spec : registry.specs()) {
    stats.tasks_per_output.push_back(static_cast<std::uint32_t>(
        registry.count_by_output_kind(spec.output.kind)));
  }
  const SamplerWeights weights = compute_weights(stats);
  const WindowBatch batch =
      sample_windows(registry, weights, records, world, suite, layout,
                     cfg.sampler.budget, 6, 99);
  CHECK(batch.windows.size() == 6);
  for (const PackedWindow& w : batch.windows) {
    CHECK(w.tokens.size() == cfg.sampler.budget);
    CHECK(w.used <= cfg.sampler.budget);
    CHECK(!w.spans.empty());
    for (const WindowSpan& s : w.spans) {
      CHECK(s.target_end <= w.used);
      CHECK(s.prefix_len >= s.begin);
    }
  }
  // Same seed reproduces the same windows.
  const WindowBatch again =
      sample_windows(registry, weights, records, world, suite, layout,
                     cfg.sampler.budget, 6, 99);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(again.windows[i].tokens == batch.windows[i].tokens);
  }
}

TEST_CASE_FIXTURE(Fixture, "uniform model task perplexity equals vocab size") {
  ModelConfig mc = cfg.resolved_model();
  mc.max_context = 2048;
  Model model(mc);
  auto out_w = model.tensor("out_w");
  auto out_b = model.tensor("out_b");
  std::fill(out_w.begin(), out_w.end(), 0.0);
  std::fill(out_b.begin(), out_b.end(), 0.0);
  const Registry registry = Registry::default_table();
  const double p = estimate_task_perplexity(model, registry.specs()[0], records,
                                            world, suite, layout, 2, 5);
  CHECK(p == doctest::Approx(double(layout.total_size())).epsilon(1e-6));
}

TEST_CASE_FIXTURE(Fixture, "datasets roundtrip through their directory") {
  const auto dir = std::filesystem::temp_directory_path() / "archon_ds_test";
  std::filesystem::remove_all(dir);
  std::vector<SampleRecord> subset(records.begin(), records.begin() + 3);
  save_dataset(dir, subset, cfg);
  const auto back = load_dataset(dir);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].description == subset[i].description);
    CHECK(back[i].script == subset[i].script);
    CHECK(back[i].speech.samples == subset[i].speech.samples);
    CHECK(back[i].animation.expression == subset[i].animation.expression);
    CHECK(back[i].semantic.labels == subset[i].semantic.labels);
    CHECK(back[i].image.rgb == subset[i].image.rgb);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE_FIXTURE(Fixture, "metrics are exact on self-comparison") {
  const SampleRecord& r = records[2];
  CHECK(semantic_label_accuracy(r.semantic, r.semantic) == 1.0);
  CHECK(animation_mse(r.animation, r.animation) == 0.0);
  CHECK(script_exact_match(r.script, r.script));
  CHECK(description_attribute_accuracy(r.description, r.description) == 1.0);
  CHECK(speech_spectral_correlation(r.speech, r.speech) ==
        doctest::Approx(1.0).epsilon(1e-9));

  // And do tell apart different records.
  const SampleRecord& other = records[5];
  if (other.identity != r.identity) {
    CHECK(semantic_label_accuracy(r.semantic, other.semantic) < 1.0);
  }
}

TEST_CASE_FIXTURE(Fixture, "identity is recoverable from speech tokens") {
  // Classifier oracle: decode the speech tokens and take the nearest
  // identity frequency to the DFT peak.
  for (int i = 0; i < 8; ++i) {
    const SampleRecord& r = records[i];
    const auto tokens = encode_speech(r.speech, suite.speech);
    const SpeechSignal decoded =
        decode_speech(tokens, suite.speech, cfg.world.sample_rate);
    const double peak = dominant_frequency(decoded);
    std::uint32_t best = 0;
    double best_d = 1e300;
    for (std::uint32_t id = 0; id < cfg.world.identities; ++id) {
      const double d = std::abs(world.base_frequency(id) - peak);
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    CHECK(best == r.identity);
  }
}
