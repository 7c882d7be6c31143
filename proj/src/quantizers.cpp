#include "archon/quantizers.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "archon/bytes.hpp"
#include "archon/rng.hpp"

namespace archon {

namespace {

double sq_dist(std::span<const double> a, const double* b, std::uint32_t dim) {
  double d = 0.0;
  for (std::uint32_t i = 0; i < dim; ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

void check_finite(std::span<const double> vectors) {
  for (double v : vectors) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::InvalidInput, "non-finite value in training vectors");
    }
  }
}

}  // namespace

std::uint32_t Codebook::nearest(std::span<const double> x) const {
  if (x.size() != dim) {
    fail(ErrorCode::DimMismatch, "query dim " + std::to_string(x.size()) +
                                     " vs codebook dim " + std::to_string(dim));
  }
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::uint32_t i = 0; i < count; ++i) {
    const double d = sq_dist(x, entries.data() + std::size_t(i) * dim, dim);
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = i;
    }
  }
  return best;
}

Codebook train_codebook(std::span<const double> vectors, std::uint32_t n,
                        std::uint32_t dim, std::uint32_t k, std::uint32_t iters,
                        std::uint64_t seed) {
  if (k < 1 || dim < 1) fail(ErrorCode::InvalidInput, "k and dim must be >= 1");
  if (vectors.size() != std::size_t(n) * dim) {
    fail(ErrorCode::InvalidInput, "vector buffer size does not match n*dim");
  }
  if (n < k) {
    fail(ErrorCode::TooFewVectors, std::to_string(n) + " vectors for k=" +
                                       std::to_string(k));
  }
  if (iters < 1) fail(ErrorCode::InvalidInput, "iters must be >= 1");
  check_finite(vectors);

  auto row = [&](std::uint32_t i) {
    return std::span<const double>(vectors.data() + std::size_t(i) * dim, dim);
  };

  Codebook cb;
  cb.dim = dim;
  cb.count = k;
  cb.entries.assign(std::size_t(k) * dim, 0.0);

  // Farthest-point seeding.
  Rng rng(seed);
  std::uint32_t first = static_cast<std::uint32_t>(rng.below(n));
  std::copy(row(first).begin(), row(first).end(), cb.entries.begin());
  std::vector<double> dist(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    dist[i] = sq_dist(row(i), cb.entries.data(), dim);
  }
  for (std::uint32_t j = 1; j < k; ++j) {
    std::uint32_t far = 0;
    double far_d = -1.0;
    for (std::uint32_t i = 0; i < n; ++i) {
      if (dist[i] > far_d) {
        far_d = dist[i];
        far = i;
      }
    }
    double* cj = cb.entries.data() + std::size_t(j) * dim;
    std::copy(row(far).begin(), row(far).end(), cj);
    for (std::uint32_t i = 0; i < n; ++i) {
      const double d = sq_dist(row(i), cj, dim);
      if (d < dist[i]) dist[i] = d;
    }
  }

  // Lloyd iterations.
  std::vector<std::uint32_t> assign(n, 0);
  std::vector<std::uint32_t> counts(k, 0);
  for (std::uint32_t it = 0; it < iters; ++it) {
    for (std::uint32_t i = 0; i < n; ++i) assign[i] = cb.nearest(row(i));

    std::fill(counts.begin(), counts.end(), 0);
    for (std::uint32_t i = 0; i < n; ++i) ++counts[assign[i]];

    // Re-seed empty clusters to the point farthest from its own centroid.
    for (std::uint32_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::uint32_t far = 0;
      double far_d = -1.0;
      for (std::uint32_t i = 0; i < n; ++i) {
        const double d = sq_dist(
            row(i), cb.entries.data() + std::size_t(assign[i]) * dim, dim);
        if (d > far_d && counts[assign[i]] > 1) {
          far_d = d;
          far = i;
        }
      }
      if (far_d < 0.0) continue;  // every cluster is a singleton
      --counts[assign[far]];
      assign[far] = c;
      counts[c] = 1;
    }

    std::fill(cb.entries.begin(), cb.entries.end(), 0.0);
    for (std::uint32_t i = 0; i < n; ++i) {
      double* ca = cb.entries.data() + std::size_t(assign[i]) * dim;
      const auto xi = row(i);
      for (std::uint32_t d = 0; d < dim; ++d) ca[d] += xi[d];
    }
    for (std::uint32_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      double* cc = cb.entries.data() + std::size_t(c) * dim;
      for (std::uint32_t d = 0; d < dim; ++d) cc[d] /= counts[c];
    }
  }
  return cb;
}

double codebook_distortion(const Codebook& cb, std::span<const double> vectors,
                           std::uint32_t n) {
  if (n == 0) fail(ErrorCode::EmptyInput, "no vectors");
  double total = 0.0;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::span<const double> x(vectors.data() + std::size_t(i) * cb.dim, cb.dim);
    total += sq_dist(x, cb.entries.data() + std::size_t(cb.nearest(x)) * cb.dim,
                     cb.dim);
  }
  return total / n;
}

double codebook_utilization(const Codebook& cb, std::span<const double> vectors,
                            std::uint32_t n) {
  std::vector<bool> used(cb.count, false);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::span<const double> x(vectors.data() + std::size_t(i) * cb.dim, cb.dim);
    used[cb.nearest(x)] = true;
  }
  std::uint32_t hits = 0;
  for (bool u : used) hits += u ? 1 : 0;
  return static_cast<double>(hits) / cb.count;
}

RvqCodec::RvqCodec(std::vector<Codebook> levels) : levels_(std::move(levels)) {
  if (levels_.empty()) fail(ErrorCode::InvalidInput, "RVQ needs >= 1 level");
  for (const Codebook& cb : levels_) {
    if (cb.dim != levels_.front().dim) {
      fail(ErrorCode::DimMismatch, "RVQ levels must share one dim");
    }
    if (cb.count < 1) fail(ErrorCode::InvalidInput, "empty codebook level");
  }
}

RvqCodec RvqCodec::train(std::span<const double> vectors, std::uint32_t n,
                         std::uint32_t dim, std::uint32_t num_levels,
                         std::uint32_t k, std::uint32_t iters,
                         std::uint64_t seed) {
  std::vector<double> residual(vectors.begin(), vectors.end());
  std::vector<Codebook> levels;
  levels.reserve(num_levels);
  for (std::uint32_t l = 0; l < num_levels; ++l) {
    Codebook cb = train_codebook(residual, n, dim, k, iters,
                                 splitmix64(seed + l));
    if (l > 0) {
      // Pin the centroid nearest the origin to an exact zero codeword.
      // With a zero entry available at every refinement level the argmin
      // can never grow the residual, so per-level energies are
      // non-increasing for any input, not just training data.
      std::uint32_t zi = 0;
      double zbest = std::numeric_limits<double>::infinity();
      for (std::uint32_t c = 0; c < cb.count; ++c) {
        double norm = 0.0;
        const auto e = cb.entry(c);
        for (double v : e) norm += v * v;
        if (norm < zbest) {
          zbest = norm;
          zi = c;
        }
      }
      std::fill_n(cb.entries.begin() + std::size_t(zi) * dim, dim, 0.0);
    }
    for (std::uint32_t i = 0; i < n; ++i) {
      double* r = residual.data() + std::size_t(i) * dim;
      std::span<const double> x(r, dim);
      const auto e = cb.entry(cb.nearest(x));
      for (std::uint32_t d = 0; d < dim; ++d) r[d] -= e[d];
    }
    levels.push_back(std::move(cb));
  }
  return RvqCodec(std::move(levels));
}

std::vector<std::uint32_t> RvqCodec::encode(std::span<const double> x) const {
  if (x.size() != dim()) {
    fail(ErrorCode::DimMismatch, "input dim " + std::to_string(x.size()) +
                                     " vs codec dim " + std::to_string(dim()));
  }
  std::vector<double> residual(x.begin(), x.end());
  std::vector<std::uint32_t> ids;
  ids.reserve(levels_.size());
  for (const Codebook& cb : levels_) {
    const std::uint32_t id = cb.nearest(residual);
    const auto e = cb.entry(id);
    for (std::uint32_t d = 0; d < cb.dim; ++d) residual[d] -= e[d];
    ids.push_back(id);
  }
  return ids;
}

std::vector<double> RvqCodec::decode(std::span<const std::uint32_t> ids) const {
  if (ids.size() != levels_.size()) {
    fail(ErrorCode::CodeOutOfRange,
         "expected " + std::to_string(levels_.size()) + " ids, got " +
             std::to_string(ids.size()));
  }
  std::vector<double> out(dim(), 0.0);
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const Codebook& cb = levels_[l];
    if (ids[l] >= cb.count) {
      fail(ErrorCode::CodeOutOfRange,
           "id " + std::to_string(ids[l]) + " >= k " + std::to_string(cb.count) +
               " at level " + std::to_string(l));
    }
    const auto e = cb.entry(ids[l]);
    for (std::uint32_t d = 0; d < cb.dim; ++d) out[d] += e[d];
  }
  return out;
}

std::vector<double> RvqCodec::residual_energies(std::span<const double> x) const {
  if (x.size() != dim()) fail(ErrorCode::DimMismatch, "bad input dim");
  std::vector<double> residual(x.begin(), x.end());
  std::vector<double> energies;
  energies.reserve(levels_.size());
  for (const Codebook& cb : levels_) {
    const auto e = cb.entry(cb.nearest(residual));
    double energy = 0.0;
    for (std::uint32_t d = 0; d < cb.dim; ++d) {
      residual[d] -= e[d];
      energy += residual[d] * residual[d];
    }
    energies.push_back(energy);
  }
  return energies;
}

// ARCB: magic, version u16, dim u32, levels u32, then per level k u32
// followed by k*dim f64. Little-endian throughout.
namespace {
constexpr char kArcbMagic[4] = {'A', 'R', 'C', 'B'};
constexpr std::uint16_t kArcbVersion = 1;
}  // namespace

void RvqCodec::save(std::ostream& os) const {
  write_magic(os, kArcbMagic);
  write_le<std::uint16_t>(os, kArcbVersion);
  write_le<std::uint32_t>(os, dim());
  write_le<std::uint32_t>(os, num_levels());
  for (const Codebook& cb : levels_) {
    write_le<std::uint32_t>(os, cb.count);
    for (double v : cb.entries) write_le<double>(os, v);
  }
}

void RvqCodec::save_file(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string());
  save(os);
}

RvqCodec RvqCodec::load(std::istream& is) {
  expect_magic(is, kArcbMagic, "ARCB codec file");
  const auto version = read_le<std::uint16_t>(is);
  if (version != kArcbVersion) {
    fail(ErrorCode::IoError, "unsupported ARCB version " + std::to_string(version));
  }
  const auto dim = read_le<std::uint32_t>(is);
  const auto num_levels = read_le<std::uint32_t>(is);
  std::vector<Codebook> levels;
  levels.reserve(num_levels);
  for (std::uint32_t l = 0; l < num_levels; ++l) {
    Codebook cb;
    cb.dim = dim;
    cb.count = read_le<std::uint32_t>(is);
    cb.entries.resize(std::size_t(cb.count) * dim);
    for (double& v : cb.entries) v = read_le<double>(is);
    levels.push_back(std::move(cb));
  }
  return RvqCodec(std::move(levels));
}

RvqCodec RvqCodec::load_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  return load(is);
}

LfqCodec::LfqCodec(std::uint32_t dim, std::uint32_t bits, std::uint64_t seed)
    : dim_(dim), bits_(bits) {
  if (bits < 1 || bits > 31) fail(ErrorCode::InvalidInput, "bits must be in [1,31]");
  if (bits > dim) {
    fail(ErrorCode::InvalidInput,
         "cannot build full-rank projection with bits > dim");
  }
  // Seeded Gaussian matrix orthonormalized column by column (modified
  // Gram-Schmidt); full column rank holds for bits <= dim.
  Rng rng(seed);
  proj_.assign(std::size_t(dim_) * bits_, 0.0);
  for (std::uint32_t b = 0; b < bits_; ++b) {
    std::vector<double> col(dim_);
    double norm = 0.0;
    int attempts = 0;
    while (true) {
      for (std::uint32_t d = 0; d < dim_; ++d) col[d] = rng.gaussian();
      for (std::uint32_t p = 0; p < b; ++p) {
        double dot = 0.0;
        for (std::uint32_t d = 0; d < dim_; ++d) {
          dot += col[d] * proj_[std::size_t(d) * bits_ + p];
        }
        for (std::uint32_t d = 0; d < dim_; ++d) {
          col[d] -= dot * proj_[std::size_t(d) * bits_ + p];
        }
      }
      norm = 0.0;
      for (double v : col) norm += v * v;
      norm = std::sqrt(norm);
      if (norm > 1e-8 || ++attempts > 16) break;
    }
    if (norm <= 1e-8) fail(ErrorCode::InvalidInput, "degenerate projection");
    for (std::uint32_t d = 0; d < dim_; ++d) {
      proj_[std::size_t(d) * bits_ + b] = col[d] / norm;
    }
  }
}

std::vector<double> LfqCodec::project(std::span<const double> x) const {
  if (x.size() != dim_) {
    fail(ErrorCode::DimMismatch, "input dim " + std::to_string(x.size()) +
                                     " vs codec dim " + std::to_string(dim_));
  }
  std::vector<double> f(bits_, 0.0);
  for (std::uint32_t d = 0; d < dim_; ++d) {
    const double xd = x[d];
    const double* row = proj_.data() + std::size_t(d) * bits_;
    for (std::uint32_t b = 0; b < bits_; ++b) f[b] += xd * row[b];
  }
  return f;
}

std::uint32_t LfqCodec::encode(std::span<const double> x) const {
  const std::vector<double> f = project(x);
  std::uint32_t id = 0;
  for (std::uint32_t b = 0; b < bits_; ++b) {
    if (f[b] > 0.0) id |= (1u << b);
  }
  return id;
}

std::vector<double> LfqCodec::decode_signs(std::uint32_t id) const {
  if (static_cast<std::uint64_t>(id) >= vocab_size()) {
    fail(ErrorCode::CodeOutOfRange,
         "id " + std::to_string(id) + " >= 2^" + std::to_string(bits_));
  }
  std::vector<double> signs(bits_);
  for (std::uint32_t b = 0; b < bits_; ++b) {
    signs[b] = (id & (1u << b)) ? 1.0 : -1.0;
  }
  return signs;
}

std::vector<double> LfqCodec::preimage(std::uint32_t id) const {
  const std::vector<double> signs = decode_signs(id);
  std::vector<double> x(dim_, 0.0);
  for (std::uint32_t d = 0; d < dim_; ++d) {
    const double* row = proj_.data() + std::size_t(d) * bits_;
    double acc = 0.0;
    for (std::uint32_t b = 0; b < bits_; ++b) acc += row[b] * signs[b];
    x[d] = acc;
  }
  return x;
}

}  // namespace archon
