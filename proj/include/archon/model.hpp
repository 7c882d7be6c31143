#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "archon/modality_codecs.hpp"
#include "archon/prompt.hpp"
#include "archon/tasks.hpp"
#include "archon/vocab.hpp"
#include "archon/window.hpp"

#include "json.hpp"

namespace archon {

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double* row(std::size_t r) { return a.data() + r * cols; }
  const double* row(std::size_t r) const { return a.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
};

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_layers = 2;
  std::uint32_t num_heads = 4;
  std::uint32_t max_context = 8192;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Bidirectional-prefix attendance: rows < prefix_len see exactly the
/// prefix columns; rows >= prefix_len see everything up to themselves.
struct PrefixMask {
  std::size_t total_len = 0;
  std::size_t prefix_len = 0;
  std::vector<std::uint8_t> allowed;  // total_len * total_len

  bool allows(std::size_t q, std::size_t k) const {
    return allowed[q * total_len + k] != 0;
  }
};

PrefixMask prefix_mask(std::size_t prefix_len, std::size_t total_len);

/// Attention trace for tests: per layer, heads*T x T attention rows.
struct ForwardTrace {
  std::vector<Matrix> attn_probs;
};

/// Prefix decoder-only transformer over the unified vocabulary. Parameters
/// live in one flat double vector (convenient for the optimizer and for
/// finite-difference checks); forward and generation are pure.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  /// Named view into the flat parameter vector ("tok_embed", "out_w",
  /// "L0.wq", ...).
  std::span<double> tensor(const std::string& name);
  std::span<const double> tensor(const std::string& name) const;
  /// True for 2-d tensors (these receive weight decay).
  bool tensor_is_matrix(std::size_t flat_index) const;

  /// Full per-position logits (T x vocab). Intended for tests and small
  /// inputs; training and scoring use span-restricted paths internally.
  Matrix forward(std::span<const TokenId> tokens, const PrefixMask& mask,
                 ForwardTrace* trace = nullptr) const;

  /// Mean next-token NLL over the half-open target span, with the window
  /// masked per spans (bidirectional inside each instance's prefix).
  double window_nll(const PackedWindow& window,
                    std::vector<double>* grad = nullptr) const;

  /// Same loss for a single serialized sequence with one prefix.
  double sequence_nll(std::span<const TokenId> tokens, std::size_t prefix_len,
                      std::pair<std::size_t, std::size_t> span) const;

 private:
  friend class TrainState;
  ModelConfig config_;
  std::vector<double> params_;

  struct TensorSpec {
    std::string name;
    std::size_t offset, rows, cols;
  };
  std::vector<TensorSpec> tensors_;
  std::map<std::string, std::size_t> tensor_index_;

  void register_tensor(const std::string& name, std::size_t rows,
                       std::size_t cols);
};

/// Mean cross-entropy of next-token prediction over the target span,
/// computed from explicit logits (the stateless loss form).
double loss_from_logits(const Matrix& logits, std::span<const TokenId> tokens,
                        std::pair<std::size_t, std::size_t> target_span);

/// exp(mean NLL) over the span; 1 for a perfect model, vocab_size for a
/// uniform one.
double sequence_perplexity(const Model& model, std::span<const TokenId> tokens,
                           std::size_t prefix_len,
                           std::pair<std::size_t, std::size_t> target_span);

struct TrainConfig {
  std::uint32_t warmup_steps = 100;
  std::uint32_t total_steps = 2000;
  double peak_lr = 1e-3;
  double floor_lr = 5e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Model parameters plus AdamW moments and the warmup/cosine schedule.
class TrainState {
 public:
  TrainState(const ModelConfig& model_config, const TrainConfig& train_config);

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const TrainConfig& train_config() const { return train_; }
  std::uint64_t step() const { return step_; }

  /// Linear warmup to peak_lr, then cosine decay to floor_lr.
  double learning_rate() const;

  /// One optimizer step on the summed span losses of the window. Returns
  /// the loss; throws DivergedTraining (state untouched) on non-finite
  /// gradients.
  double train_step(const PackedWindow& window);

  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);

 private:
  Model model_;
  TrainConfig train_;
  std::vector<double> m_, v_;
  std::uint64_t step_ = 0;
};

using TokenRange = std::pair<TokenId, TokenId>;  // half-open [start, end)

/// The id ranges a declared output modality may draw from.
std::vector<TokenRange> ranges_for_kind(const VocabularyLayout& layout,
                                        ModalityKind kind);

/// Fixed-length constrained decoding: exactly n_target tokens, logits
/// outside `allowed` masked to -inf, greedy at temperature 0 (ties to the
/// lowest id), seeded categorical sampling otherwise.
std::vector<TokenId> generate(const Model& model,
                              std::span<const TokenId> prompt_tokens,
                              std::size_t prefix_len, std::size_t n_target,
                              const std::vector<TokenRange>& allowed,
                              double temperature, std::uint64_t seed);

/// Per-kind output dims used when materializing chain steps.
struct ChainDims {
  std::map<ModalityKind, std::vector<std::uint32_t>> dims;

  const std::vector<std::uint32_t>& for_kind(ModalityKind kind) const;
};

/// Everything needed to finish a video-final chain with the deterministic
/// renderer.
struct ChainRenderContext {
  const SemanticCodec* semantic = nullptr;
  const Palette* palette = nullptr;
  RgbImage reference;
};

struct ChainResult {
  std::vector<Segment> generated;  // one per plan step, in order
  std::optional<RgbVideo> video;
};

/// Executes a chain plan: at step j the instance conditions on the initial
/// segments plus all previously generated ones, is serialized, generated
/// under range constraints, and parsed back. Errors are annotated with the
/// step index.
ChainResult run_chain(const Model& model, const VocabularyLayout& layout,
                      const Registry& registry,
                      const std::vector<Segment>& conditions,
                      const ChainPlan& plan, const ChainDims& dims,
                      double temperature, std::uint64_t seed,
                      const ChainRenderContext* render = nullptr);

}  // namespace archon
