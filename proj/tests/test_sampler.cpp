#include "archon/sampler.hpp"

#include <cmath>

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

SerializedInstance fake_instance(std::size_t len, std::size_t prefix,
                                 TokenId fill = 7) {
  SerializedInstance inst;
  inst.tokens.assign(len, fill);
  inst.prefix_len = prefix;
  return inst;
}

}  // namespace

TEST_CASE("the hand-computed weight example") {
  // Three tasks: (script out, p=e^2, N=2), (script, p=e, N=2),
  // (speech, p=e^3, N=1) give S = (1.0, 0.5, 3.0) -> probs (2/9, 1/9, 6/9).
  TaskStats stats;
  stats.perplexity = {std::exp(2.0), std::exp(1.0), std::exp(3.0)};
  stats.tasks_per_output = {2, 2, 1};
  const SamplerWeights w = compute_weights(stats);
  CHECK(w.raw[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.raw[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(w.raw[2] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(std::abs(w.probs[0] - 2.0 / 9.0) < 1e-12);
  CHECK(std::abs(w.probs[1] - 1.0 / 9.0) < 1e-12);
  CHECK(std::abs(w.probs[2] - 6.0 / 9.0) < 1e-12);

  double sum = 0.0;
  for (double p : w.probs) sum += p;
  CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("equal stats give uniform probabilities") {
  TaskStats stats;
  stats.perplexity.assign(8, 5.0);
  stats.tasks_per_output.assign(8, 3);
  const SamplerWeights w = compute_weights(stats);
  for (double p : w.probs) CHECK(p == doctest::Approx(1.0 / 8).epsilon(1e-12));
}

TEST_CASE("perplexity one hits the weight floor instead of starving") {
  TaskStats stats;
  stats.perplexity = {1.0, std::exp(1.0)};
  stats.tasks_per_output = {1, 1};
  const SamplerWeights w = compute_weights(stats);
  CHECK(w.raw[0] == kWeightFloor);
  CHECK(w.probs[0] > 0.0);
  CHECK(w.probs[0] == doctest::Approx(kWeightFloor / (kWeightFloor + 1.0)));

  TaskStats bad = stats;
  bad.perplexity[0] = 0.5;
  CHECK_THROWS_WITH_AS(compute_weights(bad),
                       doctest::Contains("InvalidPerplexity"), Error);
}

TEST_CASE("scaling every raw weight leaves probabilities unchanged") {
  TaskStats stats;
  stats.perplexity = {std::exp(0.4), std::exp(1.3), std::exp(2.2)};
  stats.tasks_per_output = {1, 2, 3};
  const SamplerWeights base = compute_weights(stats);
  // Scaling all S(i) by c means scaling every log(p_i) by c at fixed N.
  TaskStats scaled = stats;
  for (double& p : scaled.perplexity) p = std::exp(3.0 * std::log(p));
  const SamplerWeights w = compute_weights(scaled);
  for (std::size_t i = 0; i < base.probs.size(); ++i) {
    CHECK(w.probs[i] == doctest::Approx(base.probs[i]).epsilon(1e-12));
  }
}

TEST_CASE("degenerate weights sample one index forever") {
  TaskStats stats;
  stats.perplexity = {1.0, std::exp(50.0)};
  stats.tasks_per_output = {1, 1};
  const SamplerWeights w = compute_weights(stats);
  for (std::size_t i : sample_tasks(w, 200, 9)) CHECK(i == 1);
}

TEST_CASE("sampling frequencies converge to the probabilities") {
  TaskStats stats;
  stats.perplexity = {std::exp(2.0), std::exp(1.0), std::exp(3.0)};
  stats.tasks_per_output = {2, 2, 1};
  const SamplerWeights w = compute_weights(stats);
  const auto draws = sample_tasks(w, 100000, 1234);
  std::vector<double> freq(3, 0.0);
  for (std::size_t i : draws) freq[i] += 1.0 / draws.size();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(freq[i] - w.probs[i]) < 0.02);
  }

  // Determinism under the seed.
  CHECK(sample_tasks(w, 1000, 77) == sample_tasks(w, 1000, 77));
  CHECK(sample_tasks(w, 1000, 77) != sample_tasks(w, 1000, 78));
}

TEST_CASE("two 4000-token instances pack with 192 pad tokens") {
  std::vector<SerializedInstance> instances = {fake_instance(4000, 100),
                                               fake_instance(4000, 50)};
  const PackResult result = pack_window(instances, 8192, 0);
  CHECK(result.packed == std::vector<std::size_t>{0, 1});
  CHECK(result.window.used == 8000);
  CHECK(result.window.tokens.size() == 8192);
  std::size_t pads = 0;
  for (TokenId t : result.window.tokens) pads += t == 0 ? 1 : 0;
  CHECK(pads == 192);
  REQUIRE(result.window.spans.size() == 2);
  CHECK(result.window.spans[1].begin == 4000);
  CHECK(result.window.spans[1].prefix_len == 4050);
  CHECK(result.window.spans[1].target_end == 8000);
}

TEST_CASE("oversize instances are reported, not fatal") {
  std::vector<SerializedInstance> instances = {fake_instance(9000, 10),
                                               fake_instance(100, 10)};
  const PackResult result = pack_window(instances, 8192, 0);
  CHECK(result.oversize == std::vector<std::size_t>{0});
  CHECK(result.packed == std::vector<std::size_t>{1});
  CHECK(result.window.used == 100);
}

TEST_CASE("packing accounting holds under fuzzing") {
  Rng rng(21);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t budget = 64 + rng.below(512);
    std::vector<SerializedInstance> instances;
    const std::size_t n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = 1 + rng.below(budget + 64);
      instances.push_back(fake_instance(len, rng.below(len + 1)));
    }
    const PackResult result = pack_window(instances, budget, 0);
    CHECK(result.window.tokens.size() == budget);
    std::size_t packed_len = 0;
    for (std::size_t i : result.packed) packed_len += instances[i].tokens.size();
    CHECK(packed_len == result.window.used);
    CHECK(result.window.used <= budget);
    CHECK(result.packed.size() + result.skipped.size() +
              result.oversize.size() ==
          n);
    //

    // Spans are ordered and non-overlapping.
    std::size_t prev_end = 0;
    for (const WindowSpan& s : result.window.spans) {
      CHECK(s.begin >= prev_end);
      CHECK(s.end <= budget);
      prev_end = s.end;
    }
    // Packing is stable: same inputs, same layout.
    const PackResult again = pack_window(instances, budget, 0);
    CHECK(again.window.tokens == result.window.tokens);
  }
}

TEST_CASE("estimated perplexity of a uniform model equals the vocab size") {
  ModelConfig cfg;
  cfg.vocab_size = 19;
  cfg.embed_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 4;
  cfg.max_context = 32;
  cfg.seed = 3;
  Model model(cfg);
  auto out_w = model.tensor("out_w");
  auto out_b = model.tensor("out_b");
  std::fill(out_w.begin(), out_w.end(), 0.0);
  std::fill(out_b.begin(), out_b.end(), 0.0);

  Rng rng(5);
  std::vector<SerializedInstance> instances;
  for (int i = 0; i < 4; ++i) {
    SerializedInstance inst;
    const std::size_t len = 8 + rng.below(8);
    for (std::size_t t = 0; t < len; ++t) {
      inst.tokens.push_back(static_cast<TokenId>(rng.below(19)));
    }
    inst.prefix_len = 4;
    instances.push_back(std::move(inst));
  }
  CHECK(estimate_perplexity(model, instances) ==
        doctest::Approx(19.0).epsilon(1e-9));

  // Matches sequence_perplexity on a single-instance dataset.
  const std::vector<SerializedInstance> one = {instances[0]};
  const double direct = sequence_perplexity(
      model, one[0].tokens, one[0].prefix_len,
      {one[0].prefix_len, one[0].tokens.size()});
  CHECK(estimate_perplexity(model, one) == doctest::Approx(direct).epsilon(1e-12));
}
