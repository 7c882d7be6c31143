#include "archon/quantizers.hpp"

#include <cmath>
#include <sstream>

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

std::vector<double> gaussian_blob(Rng& rng, std::size_t n, std::uint32_t dim,
                                  const std::vector<double>& center,
                                  double sigma) {
  std::vector<double> out;
  out.reserve(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::uint32_t d = 0; d < dim; ++d) {
      out.push_back(center[d] + sigma * rng.gaussian());
    }
  }
  return out;
}

}  // namespace

TEST_CASE("k distinct points with k clusters are covered exactly") {
  const std::vector<double> pts = {0, 0, 10, 0, 0, 10, 10, 10};
  Codebook cb = train_codebook(pts, 4, 2, 4, 5, 42);
  CHECK(codebook_distortion(cb, pts, 4) == 0.0);
  // Every point appears as a codeword.
  for (int p = 0; p < 4; ++p) {
    std::span<const double> x(pts.data() + p * 2, 2);
    const auto e = cb.entry(cb.nearest(x));
    CHECK(e[0] == pts[p * 2]);
    CHECK(e[1] == pts[p * 2 + 1]);
  }
}

TEST_CASE("two well-separated modes recover the mode means") {
  Rng rng(7);
  std::vector<double> a = gaussian_blob(rng, 500, 2, {-5.0, 0.0}, 0.3);
  std::vector<double> b = gaussian_blob(rng, 500, 2, {5.0, 1.0}, 0.3);
  // Oracle: average each true mode directly.
  std::vector<double> mean_a(2, 0.0), mean_b(2, 0.0);
  for (std::size_t i = 0; i < 500; ++i) {
    for (int d = 0; d < 2; ++d) {
      mean_a[d] += a[i * 2 + d] / 500.0;
      mean_b[d] += b[i * 2 + d] / 500.0;
    }
  }
  std::vector<double> all = a;
  all.insert(all.end(), b.begin(), b.end());
  Codebook cb = train_codebook(all, 1000, 2, 2, 25, 99);
  // Match each centroid to its closer oracle mean.
  for (int c = 0; c < 2; ++c) {
    const auto e = cb.entry(c);
    const double da = std::hypot(e[0] - mean_a[0], e[1] - mean_a[1]);
    const double db = std::hypot(e[0] - mean_b[0], e[1] - mean_b[1]);
    CHECK(std::min(da, db) < 0.1);
  }
}

TEST_CASE("training twice with the same input and seed is bit-identical") {
  Rng rng(11);
  std::vector<double> data = gaussian_blob(rng, 300, 3, {0, 0, 0}, 1.0);
  Codebook a = train_codebook(data, 300, 3, 8, 12, 1234);
  Codebook b = train_codebook(data, 300, 3, 8, 12, 1234);
  CHECK(a.entries == b.entries);
}

TEST_CASE("training rejects bad inputs") {
  std::vector<double> two = {0, 0, 1, 1};
  CHECK_THROWS_WITH_AS(train_codebook(two, 2, 2, 3, 4, 0),
                       doctest::Contains("TooFewVectors"), Error);
  std::vector<double> nan = {0.0, std::nan("")};
  CHECK_THROWS_WITH_AS(train_codebook(nan, 1, 2, 1, 1, 0),
                       doctest::Contains("InvalidInput"), Error);
}

TEST_CASE("growing k does not worsen training-set distortion") {
  Rng rng(5);
  std::vector<double> data = gaussian_blob(rng, 400, 2, {0, 0}, 2.0);
  double prev = 1e300;
  for (std::uint32_t k : {2u, 4u, 8u, 16u}) {
    Codebook cb = train_codebook(data, 400, 2, k, 30, 77);
    const double d = codebook_distortion(cb, data, 400);
    CHECK(d <= prev * 1.05);  // allow seeding noise only
    prev = d;
  }
}

TEST_CASE("rvq fixed point: encoding an exact codeword gives zero residual") {
  Codebook cb;
  cb.dim = 2;
  cb.count = 3;
  cb.entries = {1, 2, -4, 0, 3, 3};
  RvqCodec codec({cb});
  const std::vector<double> x = {-4, 0};
  auto ids = codec.encode(x);
  CHECK(ids == std::vector<std::uint32_t>{1});
  CHECK(codec.residual_energies(x)[0] == 0.0);
}

TEST_CASE("rvq residual energy is non-increasing level by level") {
  Rng rng(21);
  std::vector<double> data = gaussian_blob(rng, 600, 4, {0, 0, 0, 0}, 1.5);
  RvqCodec codec = RvqCodec::train(data, 600, 4, 4, 8, 15, 3);
  // Oracle: per-level argmin applied to explicitly tracked residuals.
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> x(4);
    for (auto& v : x) v = 2.0 * rng.gaussian();
    std::vector<double> residual = x;
    double prev = 1e300;
    for (std::uint32_t l = 0; l < codec.num_levels(); ++l) {
      const Codebook& level = codec.level(l);
      const auto e = level.entry(level.nearest(residual));
      double energy = 0.0;
      for (int d = 0; d < 4; ++d) {
        residual[d] -= e[d];
        energy += residual[d] * residual[d];
      }
      CHECK(energy <= prev + 1e-12);
      prev = energy;
    }
    const auto energies = codec.residual_energies(x);
    std::vector<double> expect_ids_resid(residual);
    CHECK(energies.back() == doctest::Approx(prev).epsilon(1e-12));
  }
}

TEST_CASE("four-level decode beats the one-level decode on reconstruction") {
  Rng rng(31);
  std::vector<double> data = gaussian_blob(rng, 500, 3, {0, 0, 0}, 1.0);
  RvqCodec deep = RvqCodec::train(data, 500, 3, 4, 6, 20, 8);
  RvqCodec shallow = RvqCodec::train(data, 500, 3, 1, 6, 20, 8);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> x(3);
    for (auto& v : x) v = rng.gaussian();
    auto err = [&](const RvqCodec& c) {
      auto back = c.decode(c.encode(x));
      double e = 0.0;
      for (int d = 0; d < 3; ++d) e += (x[d] - back[d]) * (x[d] - back[d]);
      return e;
    };
    CHECK(err(deep) <= err(shallow) + 1e-12);
  }
}

TEST_CASE("rvq decode sums codewords and validates ids") {
  Codebook l0;
  l0.dim = 2;
  l0.count = 2;
  l0.entries = {1, 1, 5, 5};
  Codebook l1 = l0;
  l1.entries = {0.5, -0.5, 2, 2};
  RvqCodec codec({l0, l1});
  auto out = codec.decode(std::vector<std::uint32_t>{0, 0});
  CHECK(out[0] == doctest::Approx(1.5));
  CHECK(out[1] == doctest::Approx(0.5));
  CHECK_THROWS_WITH_AS(codec.decode(std::vector<std::uint32_t>{0, 2}),
                       doctest::Contains("CodeOutOfRange"), Error);

  RvqCodec single({l0});
  auto one = single.decode(std::vector<std::uint32_t>{1});
  CHECK(one[0] == 5);
  CHECK(one[1] == 5);
}

TEST_CASE("re-encoding a decode is idempotent on the quantized lattice") {
  // Data with hierarchically separated scales, so each level's corrections
  // stay well below the previous level's codeword separation.
  Rng rng(17);
  auto sample = [&rng](std::vector<double>& x) {
    const int coarse = static_cast<int>(rng.below(4));
    const int medium = static_cast<int>(rng.below(4));
    for (int d = 0; d < 3; ++d) {
      x[d] = 20.0 * coarse * (d == 0 ? 1.0 : -0.5) +
             1.5 * medium * (d == 1 ? 1.0 : 0.25) + 0.02 * rng.gaussian();
    }
  };
  std::vector<double> data(1200 * 3);
  std::vector<double> x(3);
  for (int i = 0; i < 1200; ++i) {
    sample(x);
    std::copy(x.begin(), x.end(), data.begin() + i * 3);
  }
  RvqCodec codec = RvqCodec::train(data, 1200, 3, 3, 6, 25, 55);
  for (int i = 0; i < 1000; ++i) {
    sample(x);
    const auto ids = codec.encode(x);
    const auto again = codec.encode(codec.decode(ids));
    CHECK(ids == again);
  }
}

TEST_CASE("arcb files roundtrip bit-exactly") {
  Rng rng(3);
  std::vector<double> data = gaussian_blob(rng, 100, 2, {0, 0}, 1.0);
  RvqCodec codec = RvqCodec::train(data, 100, 2, 2, 4, 10, 9);
  std::stringstream ss;
  codec.save(ss);
  RvqCodec back = RvqCodec::load(ss);
  REQUIRE(back.num_levels() == codec.num_levels());
  for (std::uint32_t l = 0; l < codec.num_levels(); ++l) {
    CHECK(back.level(l).entries == codec.level(l).entries);
  }
}

TEST_CASE("lfq encodes the documented sign patterns") {
  // Construct inputs whose projected features are known by projecting the
  // codec's own column combinations.
  LfqCodec codec(6, 3, 2020);

  // f = (0.5, -2, 0.1) -> bits (1,0,1) -> id 5.
  std::vector<double> x(6, 0.0);
  const auto& P = codec.projection();
  const std::vector<double> f_target = {0.5, -2.0, 0.1};
  for (std::uint32_t d = 0; d < 6; ++d) {
    for (int b = 0; b < 3; ++b) x[d] += P[d * 3 + b] * f_target[b];
  }
  CHECK(codec.encode(x) == 5);

  // All-negative features give id 0.
  std::vector<double> neg(6, 0.0);
  for (std::uint32_t d = 0; d < 6; ++d) {
    for (int b = 0; b < 3; ++b) neg[d] -= P[d * 3 + b];
  }
  CHECK(codec.encode(neg) == 0);

  CHECK(codec.decode_signs(0) == std::vector<double>{-1, -1, -1});
  CHECK(codec.decode_signs(7) == std::vector<double>{1, 1, 1});
  CHECK_THROWS_WITH_AS(codec.decode_signs(8), doctest::Contains("CodeOutOfRange"),
                       Error);
}

TEST_CASE("lfq is a bijection over all ids at 10 bits") {
  LfqCodec codec(16, 10, 77);
  for (std::uint32_t id = 0; id < (1u << 10); ++id) {
    const auto signs = codec.decode_signs(id);
    const auto x = codec.preimage(id);
    const auto f = codec.project(x);
    for (std::uint32_t b = 0; b < 10; ++b) {
      CHECK(f[b] * signs[b] > 0.0);
    }
    CHECK(codec.encode(x) == id);
  }
}

TEST_CASE("lfq rejects dim mismatches and oversized bit counts") {
  LfqCodec codec(4, 2, 1);
  std::vector<double> bad(3, 0.0);
  CHECK_THROWS_WITH_AS(codec.encode(bad), doctest::Contains("DimMismatch"),
                       Error);
  CHECK_THROWS_AS(LfqCodec(2, 4, 1), Error);
}
