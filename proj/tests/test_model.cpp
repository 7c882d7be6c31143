#include "archon/model.hpp"

#include <cmath>

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

ModelConfig tiny_config(std::uint32_t vocab = 23, std::uint32_t dim = 16,
                        std::uint32_t layers = 2, std::uint32_t heads = 4,
                        std::uint32_t ctx = 16, std::uint64_t seed = 5) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = dim;
  cfg.num_layers = layers;
  cfg.num_heads = heads;
  cfg.max_context = ctx;
  cfg.seed = seed;
  return cfg;
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::uint32_t vocab) {
  std::vector<TokenId> tokens(n);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.below(vocab));
  return tokens;
}

PackedWindow single_window(std::vector<TokenId> tokens, std::size_t prefix,
                           std::size_t target_begin, std::size_t target_end) {
  PackedWindow w;
  w.budget = tokens.size();
  w.used = tokens.size();
  w.spans.push_back(
      WindowSpan{0, tokens.size(), prefix, target_begin, target_end});
  w.tokens = std::move(tokens);
  return w;
}

}  // namespace

TEST_CASE("prefix mask matches its definition") {
  const PrefixMask m = prefix_mask(2, 4);
  // Rows 0,1 see {0,1}; row 2 sees {0,1,2}; row 3 sees everything.
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(m.allows(0, k) == (k < 2));
    CHECK(m.allows(1, k) == (k < 2));
    CHECK(m.allows(2, k) == (k <= 2));
    CHECK(m.allows(3, k) == true);
  }

  const PrefixMask causal = prefix_mask(0, 3);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(causal.allows(q, k) == (k <= q));
    }
  }

  const PrefixMask full = prefix_mask(3, 3);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t k = 0; k < 3; ++k) CHECK(full.allows(q, k));
  }

  CHECK_THROWS_WITH_AS(prefix_mask(5, 4), doctest::Contains("InvalidPrefix"),
                       Error);
}

TEST_CASE("prefix mask invariant holds exhaustively up to length 16") {
  for (std::size_t total = 1; total <= 16; ++total) {
    for (std::size_t prefix = 0; prefix <= total; ++prefix) {
      const PrefixMask m = prefix_mask(prefix, total);
      for (std::size_t q = 0; q < total; ++q) {
        for (std::size_t k = 0; k < total; ++k) {
          const bool expect = q < prefix ? (k < prefix) : (k <= q);
          CHECK(m.allows(q, k) == expect);
        }
      }
    }
  }
}

TEST_CASE("zeroed output projection gives uniform softmax everywhere") {
  Model model(tiny_config());
  auto out_w = model.tensor("out_w");
  auto out_b = model.tensor("out_b");
  std::fill(out_w.begin(), out_w.end(), 0.0);
  std::fill(out_b.begin(), out_b.end(), 0.0);

  Rng rng(3);
  const auto tokens = random_tokens(rng, 8, model.config().vocab_size);
  const Matrix logits = model.forward(tokens, prefix_mask(4, 8));
  for (std::size_t t = 0; t < logits.rows; ++t) {
    for (std::size_t v = 0; v < logits.cols; ++v) {
      CHECK(logits.at(t, v) == 0.0);
    }
  }
}

TEST_CASE("position embeddings make prefix order matter") {
  Model model(tiny_config());
  Rng rng(9);
  auto tokens = random_tokens(rng, 10, model.config().vocab_size);
  tokens[1] = 3;
  tokens[2] = 7;
  const Matrix before = model.forward(tokens, prefix_mask(5, 10));
  std::swap(tokens[1], tokens[2]);
  const Matrix after = model.forward(tokens, prefix_mask(5, 10));
  double diff = 0.0;
  for (std::size_t v = 0; v < before.cols; ++v) {
    diff += std::abs(before.at(9, v) - after.at(9, v));
  }
  CHECK(diff > 1e-9);
}

TEST_CASE("a never-attended key leaves other positions' logits untouched") {
  Model model(tiny_config());
  Rng rng(11);
  auto tokens = random_tokens(rng, 6, model.config().vocab_size - 1);
  tokens[5] = model.config().vocab_size - 1;  // unique id at the end
  const PrefixMask causal = prefix_mask(0, 6);
  const Matrix before = model.forward(tokens, causal);
  // Zero the last token's embedding: under a causal mask only row 5 may
  // change, because no other query attends to position 5.
  auto emb = model.tensor("tok_embed");
  const std::size_t d = model.config().embed_dim;
  std::fill(emb.begin() + std::size_t(tokens[5]) * d,
            emb.begin() + std::size_t(tokens[5] + 1) * d, 0.0);
  const Matrix after = model.forward(tokens, causal);
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    for (std::size_t v = 0; v < before.cols; ++v) {
      CHECK(before.at(t, v) == after.at(t, v));
    }
  }
}

TEST_CASE("attention rows and output softmax sum to one") {
  Model model(tiny_config());
  Rng rng(13);
  const auto tokens = random_tokens(rng, 12, model.config().vocab_size);
  ForwardTrace trace;
  const Matrix logits = model.forward(tokens, prefix_mask(5, 12), &trace);

  for (const Matrix& probs : trace.attn_probs) {
    for (std::size_t r = 0; r < probs.rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < probs.cols; ++c) sum += probs.at(r, c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  for (std::size_t t = 0; t < logits.rows; ++t) {
    double max_l = logits.at(t, 0);
    for (std::size_t v = 0; v < logits.cols; ++v) {
      max_l = std::max(max_l, logits.at(t, v));
    }
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) {
      z += std::exp(logits.at(t, v) - max_l);
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) {
      sum += std::exp(logits.at(t, v) - max_l) / z;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("loss closed forms: perfect and uniform logits") {
  const std::size_t V = 17;
  std::vector<TokenId> tokens = {1, 5, 9, 12, 2, 8};
  Matrix logits(6, V);
  // Perfect: a huge margin on the true next token.
  for (std::size_t t = 0; t + 1 < 6; ++t) logits.at(t, tokens[t + 1]) = 200.0;
  CHECK(loss_from_logits(logits, tokens, {2, 6}) ==
        doctest::Approx(0.0).epsilon(1e-12));

  Matrix uniform(6, V);
  CHECK(loss_from_logits(uniform, tokens, {2, 6}) ==
        doctest::Approx(std::log(double(V))).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(loss_from_logits(uniform, tokens, {3, 3}),
                       doctest::Contains("NoTargetTokens"), Error);
}

TEST_CASE("restricted-row loss equals the full-logits recomputation") {
  Model model(tiny_config());
  Rng rng(21);
  const auto tokens = random_tokens(rng, 12, model.config().vocab_size);
  const std::pair<std::size_t, std::size_t> span{6, 12};
  const double fused = model.sequence_nll(tokens, 6, span);
  const Matrix logits = model.forward(tokens, prefix_mask(6, 12));
  const double direct = loss_from_logits(logits, tokens, span);
  CHECK(fused == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("analytic gradient matches central finite differences") {
  Model model(tiny_config(19, 16, 2, 4, 12, 77));
  Rng rng(31);
  const auto tokens = random_tokens(rng, 10, model.config().vocab_size);
  const PackedWindow window = single_window(tokens, 5, 5, 10);

  std::vector<double> grad;
  model.window_nll(window, &grad);

  const double h = 1e-5;
  double max_rel = 0.0;
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = model.window_nll(window, nullptr);
    params[i] = keep - h;
    const double down = model.window_nll(window, nullptr);
    params[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double rel =
        std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), 1e-5});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  TrainConfig tc;
  tc.peak_lr = 0.0;
  tc.floor_lr = 0.0;
  tc.warmup_steps = 0;
  TrainState state(tiny_config(), tc);
  Rng rng(41);
  const auto tokens = random_tokens(rng, 10, state.model().config().vocab_size);
  const PackedWindow window = single_window(tokens, 4, 4, 10);
  const std::vector<double> before = state.model().params();
  state.train_step(window);
  state.train_step(window);
  CHECK(state.model().params() == before);
  CHECK(state.step() == 2);
}

TEST_CASE("loss on a fixed copy batch decreases over 50 steps") {
  TrainConfig tc;
  tc.warmup_steps = 10;
  tc.total_steps = 60;
  tc.peak_lr = 3e-3;
  tc.floor_lr = 1e-4;
  TrainState state(tiny_config(32, 32, 2, 4, 24, 1234), tc);

  // Copy task: [sep payload sep payload], loss on the second payload.
  Rng rng(55);
  std::vector<PackedWindow> windows;
  for (int i = 0; i < 4; ++i) {
    std::vector<TokenId> payload = random_tokens(rng, 8, 30);
    std::vector<TokenId> tokens;
    tokens.push_back(30);
    tokens.insert(tokens.end(), payload.begin(), payload.end());
    tokens.push_back(31);
    tokens.insert(tokens.end(), payload.begin(), payload.end());
    windows.push_back(single_window(std::move(tokens), 10, 10, 18));
  }

  std::vector<double> losses;
  for (int step = 0; step < 50; ++step) {
    losses.push_back(state.train_step(windows[step % windows.size()]));
  }
  CHECK(losses.back() < losses.front());
  CHECK(losses.back() < 0.5 * losses.front());
}

TEST_CASE("training is deterministic given the seeds") {
  TrainConfig tc;
  tc.warmup_steps = 5;
  tc.total_steps = 20;
  auto run = [&]() {
    TrainState state(tiny_config(29, 16, 2, 4, 16, 999), tc);
    Rng rng(7);
    std::vector<double> losses;
    for (int step = 0; step < 10; ++step) {
      const auto tokens = random_tokens(rng, 12, 29);
      losses.push_back(state.train_step(single_window(tokens, 6, 6, 12)));
    }
    return std::make_pair(losses, state.model().params());
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);    // bit-identical loss curve
  CHECK(a.second == b.second);  // bit-identical parameters
}

TEST_CASE("learning rate follows warmup then cosine decay") {
  TrainConfig tc;
  tc.warmup_steps = 10;
  tc.total_steps = 110;
  tc.peak_lr = 1e-3;
  tc.floor_lr = 5e-5;
  TrainState state(tiny_config(), tc);
  CHECK(state.learning_rate() == doctest::Approx(1e-4));  // first step
  // March the counter by training on a dummy window with lr effects ignored.
  Rng rng(3);
  const auto tokens = random_tokens(rng, 8, state.model().config().vocab_size);
  const PackedWindow w = single_window(tokens, 4, 4, 8);
  for (int i = 0; i < 9; ++i) state.train_step(w);
  CHECK(state.learning_rate() == doctest::Approx(1e-3));  // end of warmup
  for (int i = 0; i < 50; ++i) state.train_step(w);
  const double mid = state.learning_rate();
  CHECK(mid < 1e-3);
  CHECK(mid > 5e-5);
  for (int i = 0; i < 50; ++i) state.train_step(w);
  CHECK(state.learning_rate() == doctest::Approx(5e-5).epsilon(1e-6));
}

TEST_CASE("greedy generation is deterministic and respects ranges") {
  Model model(tiny_config(40, 16, 1, 4, 32, 2024));
  Rng rng(17);
  const auto prompt = random_tokens(rng, 6, 40);
  const std::vector<TokenRange> allowed = {{10, 20}, {30, 35}};
  const auto a = generate(model, prompt, 6, 8, allowed, 0.0, 1);
  const auto b = generate(model, prompt, 6, 8, allowed, 0.0, 2);
  CHECK(a == b);  // temperature 0 ignores the seed
  for (TokenId t : a) {
    CHECK(((t >= 10 && t < 20) || (t >= 30 && t < 35)));
  }
  CHECK(generate(model, prompt, 6, 0, allowed, 0.0, 1).empty());

  // Sampled generation is seed-deterministic.
  const auto s1 = generate(model, prompt, 6, 8, allowed, 0.8, 42);
  const auto s2 = generate(model, prompt, 6, 8, allowed, 0.8, 42);
  CHECK(s1 == s2);
  for (TokenId t : s1) {
    CHECK(((t >= 10 && t < 20) || (t >= 30 && t < 35)));
  }

  CHECK_THROWS_WITH_AS(generate(model, prompt, 6, 100, allowed, 0.0, 1),
                       doctest::Contains("ContextOverflow"), Error);
}

TEST_CASE("incremental decoding matches the full forward pass") {
  Model model(tiny_config(31, 16, 2, 4, 24, 404));
  Rng rng(23);
  std::vector<TokenId> prompt = random_tokens(rng, 7, 31);
  const std::vector<TokenRange> all = {{0, 31}};

  std::vector<TokenId> sequence = prompt;
  for (int step = 0; step < 5; ++step) {
    // Greedy next token from the full forward pass.
    const Matrix logits =
        model.forward(sequence, prefix_mask(7, sequence.size()));
    TokenId expect = 0;
    double best = -1e300;
    for (TokenId v = 0; v < 31; ++v) {
      if (logits.at(sequence.size() - 1, v) > best) {
        best = logits.at(sequence.size() - 1, v);
        expect = v;
      }
    }
    // Greedy next token via the KV-cache path.
    const auto got =
        generate(model, sequence, 7, 1, all, 0.0, 0);
    REQUIRE(got.size() == 1);
    CHECK(got[0] == expect);
    sequence.push_back(expect);
  }
}

TEST_CASE("perplexity closed forms") {
  Model model(tiny_config(26, 16, 1, 4, 16, 5));
  auto out_w = model.tensor("out_w");
  auto out_b = model.tensor("out_b");
  std::fill(out_w.begin(), out_w.end(), 0.0);
  std::fill(out_b.begin(), out_b.end(), 0.0);
  Rng rng(8);
  const auto tokens = random_tokens(rng, 10, 26);
  CHECK(sequence_perplexity(model, tokens, 5, {5, 10}) ==
        doctest::Approx(26.0).epsilon(1e-9));

  // A model that puts all probability on the true tokens scores 1: fake it
  // through the bias alone.
  for (std::size_t v = 0; v < 26; ++v) out_b[v] = -1e4;
  // Make every target token maximally likely via a shared bias spike; with
  // all targets distinct positions this needs per-position logits, so use a
  // single-token span instead.
  out_b[tokens[6]] = 1e4;
  CHECK(sequence_perplexity(model, tokens, 6, {6, 7}) ==
        doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("checkpoints roundtrip the full training state") {
  TrainConfig tc;
  tc.warmup_steps = 3;
  tc.total_steps = 12;
  TrainState state(tiny_config(21, 16, 1, 4, 16, 31), tc);
  Rng rng(12);
  for (int i = 0; i < 5; ++i) {
    const auto tokens = random_tokens(rng, 10, 21);
    state.train_step(single_window(tokens, 5, 5, 10));
  }
  const auto path = std::filesystem::temp_directory_path() / "archon_ckpt.bin";
  state.save(path);
  TrainState back = TrainState::load(path);
  CHECK(back.step() == state.step());
  CHECK(back.model().params() == state.model().params());

  // Continued training from the checkpoint is bit-identical.
  const auto tokens = random_tokens(rng, 10, 21);
  const PackedWindow w = single_window(tokens, 5, 5, 10);
  const double a = state.train_step(w);
  const double b = back.train_step(w);
  CHECK(a == b);
  CHECK(back.model().params() == state.model().params());
  std::filesystem::remove(path);
}

TEST_CASE("run_chain walks the plan and returns one payload per step") {
  const VocabularyLayout layout = VocabularyLayout::build({
      {ModalityKind::description, 0, kTextVocabSize},
      {ModalityKind::script, 0, kTextVocabSize},
      {ModalityKind::speech, 0, 24},
      {ModalityKind::speech, 1, 24},
      {ModalityKind::shape, 0, 12},
      {ModalityKind::shape, 1, 12},
      {ModalityKind::expression, 0, 20},
      {ModalityKind::expression, 1, 20},
      {ModalityKind::pose, 0, 12},
      {ModalityKind::semantic, 0, 32},
      {ModalityKind::image, 0, 64},
  });
  const Registry registry = Registry::default_table();
  Model model(tiny_config(layout.total_size(), 32, 1, 4, 512, 2));

  Rng rng(3);
  std::vector<Segment> conditions;
  {
    Segment speech;
    speech.ref = {ModalityKind::speech, ModalityState::current};
    speech.dims = {5};
    for (int f = 0; f < 5; ++f) {
      for (std::uint32_t l = 0; l < 2; ++l) {
        speech.payload.push_back(
            layout.globalize(ModalityKind::speech, l, rng.below(24)));
      }
    }
    conditions.push_back(speech);
    Segment image;
    image.ref = {ModalityKind::image, ModalityState::invariant};
    image.dims = {16, 16};
    for (int i = 0; i < 256; ++i) {
      image.payload.push_back(
          layout.globalize(ModalityKind::image, 0, rng.below(64)));
    }
    conditions.push_back(image);
  }

  const std::set<ModalityRef> cond_refs = {
      {ModalityKind::speech, ModalityState::current},
      {ModalityKind::image, ModalityState::invariant}};
  const ChainPlan plan =
      plan_chain(registry, cond_refs,
                 {ModalityKind::semantic, ModalityState::current},
                 ChainStrategy::canonical);

  ChainDims dims;
  dims.dims[ModalityKind::shape] = {};
  dims.dims[ModalityKind::expression] = {5};
  dims.dims[ModalityKind::semantic] = {1, 16, 16};

  const ChainResult result =
      run_chain(model, layout, registry, conditions, plan, dims, 0.0, 9);
  REQUIRE(result.generated.size() == 3);
  CHECK(result.generated[0].ref.kind == ModalityKind::shape);
  CHECK(result.generated[0].payload.size() == 2);
  CHECK(result.generated[1].ref.kind == ModalityKind::expression);
  CHECK(result.generated[1].payload.size() == 2 * 2);
  CHECK(result.generated[2].ref.kind == ModalityKind::semantic);
  CHECK(result.generated[2].payload.size() == 64);
  for (const Segment& seg : result.generated) {
    for (TokenId t : seg.payload) {
      CHECK(layout.localize(t).kind == seg.ref.kind);
    }
  }

  // Single-step plan is exactly one constrained generate call.
  const ChainPlan direct =
      plan_chain(registry, cond_refs,
                 {ModalityKind::semantic, ModalityState::current},
                 ChainStrategy::direct);
  const ChainResult one =
      run_chain(model, layout, registry, conditions, direct, dims, 0.0, 9);
  CHECK(one.generated.size() == 1);
  TaskInstance inst;
  inst.conditions = conditions;
  inst.output_ref = {ModalityKind::semantic, ModalityState::current};
  inst.output_dims = {1, 16, 16};
  const auto ser = serialize(inst, layout);
  const auto expect =
      generate(model, ser.tokens, ser.prefix_len, 64,
               ranges_for_kind(layout, ModalityKind::semantic), 0.0,
               splitmix64(9 + 0));
  CHECK(one.generated[0].payload == expect);
}
