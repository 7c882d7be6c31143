#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "archon/model.hpp"
#include "archon/prompt.hpp"
#include "archon/tasks.hpp"
#include "archon/window.hpp"

#include "json.hpp"

namespace archon {

/// Measured difficulty and output-modality population per registry spec.
struct TaskStats {
  std::vector<double> perplexity;            // p_i >= 1, one per spec
  std::vector<std::uint32_t> tasks_per_output;  // N_{m(i)}, one per spec

  static TaskStats from_registry(const Registry& registry,
                                 std::span<const double> perplexities);

  nlohmann::json to_json() const;
  static TaskStats from_json(const nlohmann::json& j);
};

struct SamplerWeights {
  std::vector<double> raw;    // S(i) = log(p_i)/N_{m(i)}, floored
  std::vector<double> probs;  // normalized

  nlohmann::json to_json() const;
};

inline constexpr double kWeightFloor = 1e-6;

/// S(i) = log(p_i)/N_{m(i)}, clamped below at kWeightFloor so no task
/// starves, then normalized to probabilities.
SamplerWeights compute_weights(const TaskStats& stats,
                               double floor = kWeightFloor);

/// n categorical draws with replacement, deterministic under the seed.
std::vector<std::size_t> sample_tasks(const SamplerWeights& weights,
                                      std::size_t n, std::uint64_t seed);

/// Incremental first-fit packing into one fixed-budget window.
class WindowBuilder {
 public:
  explicit WindowBuilder(std::size_t budget) : budget_(budget) {}

  std::size_t budget() const { return budget_; }
  std::size_t used() const { return used_; }

  /// True if the instance fit; instances longer than the whole budget
  /// raise InstanceTooLarge.
  bool try_add(const SerializedInstance& instance);

  /// Pads the remainder with pad_id and returns the window.
  PackedWindow finish(TokenId pad_id) const;

 private:
  std::size_t budget_;
  std::size_t used_ = 0;
  std::vector<TokenId> tokens_;
  std::vector<WindowSpan> spans_;
};

struct PackResult {
  PackedWindow window;
  std::vector<std::size_t> packed;    // indices that made it in
  std::vector<std::size_t> skipped;   // did not fit this window
  std::vector<std::size_t> oversize;  // longer than the budget outright
};

/// Greedy first-fit in the given order; instances that do not fit are
/// skipped, never truncated.
PackResult pack_window(std::span<const SerializedInstance> instances,
                       std::size_t budget, TokenId pad_id);

/// exp(mean per-token NLL over all target tokens of the sampled instances).
double estimate_perplexity(const Model& model,
                           std::span<const SerializedInstance> instances);

}  // namespace archon
