#include "archon/sampler.hpp"

#include <cmath>

#include "archon/rng.hpp"

namespace archon {

TaskStats TaskStats::from_registry(const Registry& registry,
                                   std::span<const double> perplexities) {
  if (perplexities.size() != registry.size()) {
    fail(ErrorCode::InvalidInput, "need one perplexity per registry spec");
  }
  TaskStats stats;
  stats.perplexity.assign(perplexities.begin(), perplexities.end());
  stats.tasks_per_output.reserve(registry.size());
  for (const TaskSpec& spec : registry.specs()) {
    stats.tasks_per_output.push_back(static_cast<std::uint32_t>(
        registry.count_by_output_kind(spec.output.kind)));
  }
  return stats;
}

nlohmann::json TaskStats::to_json() const {
  return {{"perplexity", perplexity}, {"tasks_per_output", tasks_per_output}};
}

TaskStats TaskStats::from_json(const nlohmann::json& j) {
  TaskStats stats;
  stats.perplexity = j.at("perplexity").get<std::vector<double>>();
  stats.tasks_per_output
      = j.at("tasks_per_output").get<std::vector<std::uint32_t>>();
  return stats;
}

nlohmann::json SamplerWeights::to_json() const {
  return {{"raw", raw}, {"probs", probs}};
}

SamplerWeights compute_weights(const TaskStats& stats, double floor) {
  if (stats.perplexity.size() != stats.tasks_per_output.size() ||
      stats.perplexity.empty()) {
    fail(ErrorCode::InvalidInput, "inconsistent task stats");
  }
  SamplerWeights w;
  w.raw.reserve(stats.perplexity.size());
  double total = 0.0;
  for (std::size_t i = 0; i < stats.perplexity.size(); ++i) {
    const double p = stats.perplexity[i];
    if (!(p >= 1.0)) {
      fail(ErrorCode::InvalidPerplexity,
           "task " + std::to_string(i) + " has perplexity " + std::to_string(p));
    }
    if (stats.tasks_per_output[i] == 0) {
      fail(ErrorCode::InvalidInput, "zero task count for task " +
                                        std::to_string(i));
    }
    double s = std::log(p) / stats.tasks_per_output[i];
    if (s < floor) s = floor;  // keep every task reachable
    w.raw.push_back(s);
    total += s;
  }
  w.probs.reserve(w.raw.size());
  for (double s : w.raw) w.probs.push_back(s / total);
  return w;
}

std::vector<std::size_t> sample_tasks(const SamplerWeights& weights,
                                      std::size_t n, std::uint64_t seed) {
  if (weights.probs.empty()) fail(ErrorCode::InvalidInput, "no weights");
  std::vector<double> cdf(weights.probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.probs.size(); ++i) {
    acc += weights.probs[i];
    cdf[i] = acc;
  }
  Rng rng(seed);
  std::vector<std::size_t> draws;
  draws.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    draws.push_back(std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1));
  }
  return draws;
}

bool WindowBuilder::try_add(const SerializedInstance& instance) {
  const std::size_t len = instance.tokens.size();
  if (len > budget_) {
    fail(ErrorCode::InstanceTooLarge,
         std::to_string(len) + " tokens against budget " +
             std::to_string(budget_));
  }
  if (instance.prefix_len > len) {
    fail(ErrorCode::InvalidInput, "prefix exceeds the instance");
  }
  if (used_ + len > budget_) return false;
  const std::size_t begin = used_;
  tokens_.insert(tokens_.end(), instance.tokens.begin(), instance.tokens.end());
  spans_.push_back(WindowSpan{begin, begin + len, begin + instance.prefix_len,
                              begin + instance.prefix_len, begin + len});
  used_ += len;
  return true;
}

PackedWindow WindowBuilder::finish(TokenId pad_id) const {
  PackedWindow window;
  window.budget = budget_;
  window.used = used_;
  window.tokens = tokens_;
  window.tokens.resize(budget_, pad_id);
  window.spans = spans_;
  return window;
}

PackResult pack_window(std::span<const SerializedInstance> instances,
                       std::size_t budget, TokenId pad_id) {
  PackResult result;
  WindowBuilder builder(budget);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    try {
      if (builder.try_add(instances[i])) {
        result.packed.push_back(i);
      } else {
        result.skipped.push_back(i);
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InstanceTooLarge) throw;
      result.oversize.push_back(i);
    }
  }
  result.window = builder.finish(pad_id);
  return result;
}

double estimate_perplexity(const Model& model,
                           std::span<const SerializedInstance> instances) {
  if (instances.empty()) fail(ErrorCode::InvalidInput, "no sampled instances");
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  for (const SerializedInstance& inst : instances) {
    const std::size_t len = inst.tokens.size();
    if (inst.prefix_len >= len) {
      fail(ErrorCode::NoTargetTokens, "instance has no output payload");
    }
    const std::size_t n = len - inst.prefix_len;
    const double nll =
        model.sequence_nll(inst.tokens, inst.prefix_len, {inst.prefix_len, len});
    total_nll += nll * static_cast<double>(n);
    total_tokens += n;
  }
  if (total_tokens == 0) fail(ErrorCode::NoTargetTokens, "no target tokens");
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

}  // namespace archon
