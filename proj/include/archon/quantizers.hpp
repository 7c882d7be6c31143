#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "archon/error.hpp"

namespace archon {

/// k x dim table of real codewords.
struct Codebook {
  std::uint32_t dim = 0;
  std::uint32_t count = 0;           // k
  std::vector<double> entries;       // count * dim, row-major

  std::span<const double> entry(std::uint32_t i) const {
    return std::span<const double>(entries.data() + std::size_t(i) * dim, dim);
  }

  /// Index of the nearest entry under squared L2, ties to the lowest index.
  std::uint32_t nearest(std::span<const double> x) const;
};

/// k-means with farthest-point seeding. Deterministic for fixed
/// (input, seed); empty clusters are re-seeded to the point farthest from
/// its assigned centroid.
Codebook train_codebook(std::span<const double> vectors, std::uint32_t n,
                        std::uint32_t dim, std::uint32_t k, std::uint32_t iters,
                        std::uint64_t seed);

/// Mean squared distance from each vector to its nearest codeword.
double codebook_distortion(const Codebook& cb, std::span<const double> vectors,
                           std::uint32_t n);

/// Fraction of codewords that win at least one vector.
double codebook_utilization(const Codebook& cb, std::span<const double> vectors,
                            std::uint32_t n);

/// Residual vector quantizer: levels ordered coarse to fine, decode is the
/// sum of the selected codewords. Immutable once constructed.
class RvqCodec {
 public:
  explicit RvqCodec(std::vector<Codebook> levels);

  /// Trains level l on the residuals left by levels 0..l-1.
  static RvqCodec train(std::span<const double> vectors, std::uint32_t n,
                        std::uint32_t dim, std::uint32_t num_levels,
                        std::uint32_t k, std::uint32_t iters,
                        std::uint64_t seed);

  std::uint32_t dim() const { return levels_.front().dim; }
  std::uint32_t num_levels() const {
    return static_cast<std::uint32_t>(levels_.size());
  }
  const Codebook& level(std::uint32_t l) const { return levels_.at(l); }

  std::vector<std::uint32_t> encode(std::span<const double> x) const;
  std::vector<double> decode(std::span<const std::uint32_t> ids) const;

  /// Squared residual norm after each level for one input (diagnostics and
  /// the monotonicity property).
  std::vector<double> residual_energies(std::span<const double> x) const;

  void save(std::ostream& os) const;
  void save_file(const std::filesystem::path& path) const;
  static RvqCodec load(std::istream& is);
  static RvqCodec load_file(const std::filesystem::path& path);

 private:
  std::vector<Codebook> levels_;
};

/// Lookup-free quantizer: id = sign pattern of x projected onto `bits`
/// fixed orthonormal directions. The implicit vocabulary is 2^bits.
class LfqCodec {
 public:
  LfqCodec(std::uint32_t dim, std::uint32_t bits, std::uint64_t seed);

  std::uint32_t dim() const { return dim_; }
  std::uint32_t bits() const { return bits_; }
  std::uint64_t vocab_size() const { return 1ULL << bits_; }

  /// f = x^T P; bit i set iff f_i > 0 (exact zero maps to 0), bit 0 least
  /// significant.
  std::uint32_t encode(std::span<const double> x) const;

  /// The +-1 sign vector for an id.
  std::vector<double> decode_signs(std::uint32_t id) const;

  /// Projected features f = x^T P.
  std::vector<double> project(std::span<const double> x) const;

  /// Minimal-norm preimage P * signs(id); its feature vector equals the
  /// sign pattern exactly, so re-encoding returns `id`.
  std::vector<double> preimage(std::uint32_t id) const;

  /// dim x bits, row-major, orthonormal columns.
  const std::vector<double>& projection() const { return proj_; }

 private:
  std::uint32_t dim_;
  std::uint32_t bits_;
  std::vector<double> proj_;
};

}  // namespace archon
