#include "archon/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "archon/bytes.hpp"
#include "archon/rng.hpp"

namespace archon {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
  const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

/// Per-query allowed key range [lo, hi). All masks in this project are
/// contiguous per row (bidirectional prefix blocks followed by causal
/// tails), which keeps the attention kernels simple.
struct AttnRanges {
  std::vector<std::size_t> lo, hi;

  static AttnRanges from_prefix(std::size_t prefix_len, std::size_t total) {
    AttnRanges r;
    r.lo.assign(total, 0);
    r.hi.resize(total);
    for (std::size_t q = 0; q < total; ++q) {
      r.hi[q] = q < prefix_len ? prefix_len : q + 1;
    }
    return r;
  }

  static AttnRanges from_mask(const PrefixMask& mask) {
    AttnRanges r;
    r.lo.resize(mask.total_len);
    r.hi.resize(mask.total_len);
    for (std::size_t q = 0; q < mask.total_len; ++q) {
      std::size_t lo = mask.total_len, hi = 0;
      for (std::size_t k = 0; k < mask.total_len; ++k) {
        if (mask.allows(q, k)) {
          lo = std::min(lo, k);
          hi = std::max(hi, k + 1);
        }
      }
      if (lo >= hi) {
        fail(ErrorCode::InvalidInput, "mask row " + std::to_string(q) +
                                          " attends to nothing");
      }
      for (std::size_t k = lo; k < hi; ++k) {
        if (!mask.allows(q, k)) {
          fail(ErrorCode::InvalidInput, "non-contiguous mask row");
        }
      }
      r.lo[q] = lo;
      r.hi[q] = hi;
    }
    return r;
  }

  /// Block-diagonal over packed instances: bidirectional inside each
  /// instance's prefix, causal over its target region, and padding
  /// positions attending only themselves.
  static AttnRanges from_spans(const std::vector<WindowSpan>& spans,
                               std::size_t total) {
    AttnRanges r;
    r.lo.resize(total);
    r.hi.resize(total);
    for (std::size_t q = 0; q < total; ++q) {  // padding default
      r.lo[q] = q;
      r.hi[q] = q + 1;
    }
    for (const WindowSpan& s : spans) {
      for (std::size_t q = s.begin; q < s.end; ++q) {
        r.lo[q] = s.begin;
        r.hi[q] = q < s.prefix_len ? s.prefix_len : q + 1;
      }
    }
    return r;
  }
};

/// Attention probabilities stored only over each query's allowed key range
/// (dense storage would be quadratic in the window length).
struct RaggedProbs {
  std::vector<double> data;
  std::vector<std::size_t> offset;  // per (head, query) row

  void init(std::size_t heads, const AttnRanges& ranges) {
    const std::size_t T = ranges.lo.size();
    offset.assign(heads * T + 1, 0);
    std::size_t total = 0;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t q = 0; q < T; ++q) {
        offset[h * T + q] = total;
        total += ranges.hi[q] - ranges.lo[q];
      }
    }
    offset[heads * T] = total;
    data.assign(total, 0.0);
  }

  double* row(std::size_t h, std::size_t T, std::size_t q) {
    return data.data() + offset[h * T + q];
  }
  const double* row(std::size_t h, std::size_t T, std::size_t q) const {
    return data.data() + offset[h * T + q];
  }
};

struct LayerCache {
  Matrix x_in;      // T x d
  Matrix ln1_hat;   // T x d
  std::vector<double> ln1_rstd;
  Matrix q, k, v;   // T x d
  RaggedProbs probs;
  Matrix att;       // T x d
  Matrix x_mid;     // T x d
  Matrix ln2_hat;   // T x d
  std::vector<double> ln2_rstd;
  Matrix f1;        // T x hidden (pre-activation)
  Matrix g;         // T x hidden
};

struct Workspace {
  std::vector<LayerCache> layers;
  Matrix x;        // running activation
  Matrix lnf_hat;  // T x d
  std::vector<double> lnf_rstd;
  Matrix y;        // final normalized output, T x d
};

/// y = gamma * (x - mean)/sqrt(var + eps) + beta, caching x_hat and rstd.
void layer_norm(const Matrix& x, std::span<const double> gamma,
                std::span<const double> beta, Matrix& x_hat,
                std::vector<double>& rstd, Matrix& out) {
  const std::size_t T = x.rows, d = x.cols;
  x_hat = Matrix(T, d);
  out = Matrix(T, d);
  rstd.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = x.row(t);
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= d;
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = row[i] - mean;
      var += c * c;
    }
    var /= d;
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd[t] = r;
    double* hat = x_hat.row(t);
    double* o = out.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      hat[i] = (row[i] - mean) * r;
      o[i] = gamma[i] * hat[i] + beta[i];
    }
  }
}

/// dx for y = gamma*x_hat + beta given dy; accumulates dgamma/dbeta.
void layer_norm_backward(const Matrix& dy, const Matrix& x_hat,
                         const std::vector<double>& rstd,
                         std::span<const double> gamma, Matrix& dx,
                         std::span<double> dgamma, std::span<double> dbeta) {
  const std::size_t T = dy.rows, d = dy.cols;
  dx = Matrix(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyr = dy.row(t);
    const double* hat = x_hat.row(t);
    double sum_dg = 0.0, sum_dgh = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dgh = dyr[i] * gamma[i];
      sum_dg += dgh;
      sum_dgh += dgh * hat[i];
      dgamma[i] += dyr[i] * hat[i];
      dbeta[i] += dyr[i];
    }
    const double inv_d = 1.0 / d;
    double* dxr = dx.row(t);
    for (std::size_t i = 0; i < d; ++i) {
      const double dgh = dyr[i] * gamma[i];
      dxr[i] = rstd[t] * (dgh - inv_d * sum_dg - hat[i] * inv_d * sum_dgh);
    }
  }
}

// out[MxN] = a[MxK] * b[KxN] (+= when accumulate)
void matmul(const double* a, const double* b, double* out, std::size_t M,
            std::size_t K, std::size_t N, bool accumulate) {
  if (!accumulate) std::fill(out, out + M * N, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    double* orow = out + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b + k * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += av * brow[n];
    }
  }
}

// out[MxK] += dC[MxN] * W[KxN]^T
void matmul_bt(const double* dc, const double* w, double* out, std::size_t M,
               std::size_t N, std::size_t K) {
  for (std::size_t m = 0; m < M; ++m) {
    const double* drow = dc + m * N;
    double* orow = out + m * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double* wrow = w + k * N;
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += drow[n] * wrow[n];
      orow[k] += acc;
    }
  }
}

// dW[KxN] += A[MxK]^T * dC[MxN]
void matmul_at(const double* a, const double* dc, double* dw, std::size_t M,
               std::size_t K, std::size_t N) {
  for (std::size_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    const double* drow = dc + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      double* wrow = dw + k * N;
      for (std::size_t n = 0; n < N; ++n) wrow[n] += av * drow[n];
    }
  }
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"embed_dim", embed_dim},
          {"num_layers", num_layers}, {"num_heads", num_heads},
          {"max_context", max_context}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::uint32_t>();
  c.embed_dim = j.at("embed_dim").get<std::uint32_t>();
  c.num_layers = j.at("num_layers").get<std::uint32_t>();
  c.num_heads = j.at("num_heads").get<std::uint32_t>();
  c.max_context = j.at("max_context").get<std::uint32_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

PrefixMask prefix_mask(std::size_t prefix_len, std::size_t total_len) {
  if (prefix_len > total_len) {
    fail(ErrorCode::InvalidPrefix,
         "prefix " + std::to_string(prefix_len) + " exceeds total " +
             std::to_string(total_len));
  }
  PrefixMask mask;
  mask.total_len = total_len;
  mask.prefix_len = prefix_len;
  mask.allowed.assign(total_len * total_len, 0);
  for (std::size_t q = 0; q < total_len; ++q) {
    const std::size_t hi = q < prefix_len ? prefix_len : q + 1;
    for (std::size_t k = 0; k < hi; ++k) mask.allowed[q * total_len + k] = 1;
  }
  return mask;
}

void Model::register_tensor(const std::string& name, std::size_t rows,
                            std::size_t cols) {
  tensor_index_[name] = tensors_.size();
  tensors_.push_back(TensorSpec{name, params_.size(), rows, cols});
  params_.resize(params_.size() + rows * cols, 0.0);
}

Model::Model(const ModelConfig& config) : config_(config) {
  if (config_.vocab_size == 0) fail(ErrorCode::InvalidInput, "empty vocabulary");
  if (config_.embed_dim % config_.num_heads != 0) {
    fail(ErrorCode::InvalidInput, "embed_dim must divide by num_heads");
  }
  const std::size_t d = config_.embed_dim;
  const std::size_t hidden = 4 * d;
  register_tensor("tok_embed", config_.vocab_size, d);
  register_tensor("pos_embed", config_.max_context, d);
  for (std::uint32_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "L" + std::to_string(l) + ".";
    register_tensor(p + "ln1_g", 1, d);
    register_tensor(p + "ln1_b", 1, d);
    register_tensor(p + "wq", d, d);
    register_tensor(p + "wk", d, d);
    register_tensor(p + "wv", d, d);
    register_tensor(p + "wo", d, d);
    register_tensor(p + "ln2_g", 1, d);
    register_tensor(p + "ln2_b", 1, d);
    register_tensor(p + "w1", d, hidden);
    register_tensor(p + "b1", 1, hidden);
    register_tensor(p + "w2", hidden, d);
    register_tensor(p + "b2", 1, d);
  }
  register_tensor("lnf_g", 1, d);
  register_tensor("lnf_b", 1, d);
  register_tensor("out_w", d, config_.vocab_size);
  register_tensor("out_b", 1, config_.vocab_size);

  Rng rng(config_.seed);
  for (const TensorSpec& spec : tensors_) {
    std::span<double> t(params_.data() + spec.offset, spec.rows * spec.cols);
    if (spec.name.ends_with("ln1_g") || spec.name.ends_with("ln2_g") ||
        spec.name == "lnf_g") {
      std::fill(t.begin(), t.end(), 1.0);
    } else if (spec.rows > 1 && spec.cols > 1) {
      for (double& v : t) v = 0.02 * rng.gaussian();
    }  // biases and ln offsets stay zero
  }
}

std::span<double> Model::tensor(const std::string& name) {
  const auto it = tensor_index_.find(name);
  if (it == tensor_index_.end()) {
    fail(ErrorCode::InvalidInput, "no tensor named " + name);
  }
  const TensorSpec& spec = tensors_[it->second];
  return std::span<double>(params_.data() + spec.offset, spec.rows * spec.cols);
}

std::span<const double> Model::tensor(const std::string& name) const {
  return const_cast<Model*>(this)->tensor(name);
}

bool Model::tensor_is_matrix(std::size_t flat_index) const {
  for (const TensorSpec& spec : tensors_) {
    if (flat_index >= spec.offset &&
        flat_index < spec.offset + spec.rows * spec.cols) {
      return spec.rows > 1 && spec.cols > 1;
    }
  }
  return false;
}

namespace {

/// Shared forward pass body; parameterized over the model internals via
/// explicit spans to keep a single numerical path.
struct ForwardCtx {
  const ModelConfig* cfg;
  const std::vector<double>* params;
  const Model* model;
};

}  // namespace

// Runs embedding + all transformer blocks + final LN, filling the caches.
// Defined as a member-adjacent helper through a lambda-friendly free
// function below.
namespace detail {

void run_forward(const Model& model, std::span<const TokenId> tokens,
                 const AttnRanges& ranges, Workspace& ws, ForwardTrace* trace) {
  const ModelConfig& cfg = model.config();
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t H = cfg.num_heads;
  const std::size_t dh = d / H;
  const std::size_t hidden = 4 * d;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (T == 0) fail(ErrorCode::EmptyInput, "empty token sequence");
  if (T > cfg.max_context) {
    fail(ErrorCode::ContextOverflow, std::to_string(T) + " tokens exceed " +
                                         std::to_string(cfg.max_context));
  }
  const auto tok = model.tensor("tok_embed");
  const auto pos = model.tensor("pos_embed");
  ws.x = Matrix(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t] >= cfg.vocab_size) {
      fail(ErrorCode::TokenOutOfVocab, "token " + std::to_string(tokens[t]));
    }
    const double* te = tok.data() + std::size_t(tokens[t]) * d;
    const double* pe = pos.data() + t * d;
    double* row = ws.x.row(t);
    for (std::size_t i = 0; i < d; ++i) row[i] = te[i] + pe[i];
  }

  ws.layers.assign(cfg.num_layers, LayerCache{});
  if (trace) trace->attn_probs.clear();
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    LayerCache& c = ws.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";
    c.x_in = ws.x;

    Matrix a;
    layer_norm(c.x_in, model.tensor(p + "ln1_g"), model.tensor(p + "ln1_b"),
               c.ln1_hat, c.ln1_rstd, a);

    c.q = Matrix(T, d);
    c.k = Matrix(T, d);
    c.v = Matrix(T, d);
    matmul(a.a.data(), model.tensor(p + "wq").data(), c.q.a.data(), T, d, d,
           false);
    matmul(a.a.data(), model.tensor(p + "wk").data(), c.k.a.data(), T, d, d,
           false);
    matmul(a.a.data(), model.tensor(p + "wv").data(), c.v.a.data(), T, d, d,
           false);

    c.probs.init(H, ranges);
    c.att = Matrix(T, d);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t qi = 0; qi < T; ++qi) {
        const std::size_t lo = ranges.lo[qi], hi = ranges.hi[qi];
        double* prow = c.probs.row(h, T, qi);
        const double* qrow = c.q.row(qi) + off;
        double max_s = -1e300;
        for (std::size_t kj = lo; kj < hi; ++kj) {
          const double* krow = c.k.row(kj) + off;
          double s = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s += qrow[i] * krow[i];
          s *= scale;
          prow[kj - lo] = s;
          max_s = std::max(max_s, s);
        }
        double z = 0.0;
        for (std::size_t kj = lo; kj < hi; ++kj) {
          prow[kj - lo] = std::exp(prow[kj - lo] - max_s);
          z += prow[kj - lo];
        }
        double* arow = c.att.row(qi) + off;
        for (std::size_t kj = lo; kj < hi; ++kj) {
          const double pr = prow[kj - lo] / z;
          prow[kj - lo] = pr;
          const double* vrow = c.v.row(kj) + off;
          for (std::size_t i = 0; i < dh; ++i) arow[i] += pr * vrow[i];
        }
      }
    }
    if (trace) {
      // Expand to a dense (H*T) x T matrix for inspection.
      Matrix dense(H * T, T);
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t qi = 0; qi < T; ++qi) {
          const double* prow = c.probs.row(h, T, qi);
          for (std::size_t kj = ranges.lo[qi]; kj < ranges.hi[qi]; ++kj) {
            dense.at(h * T + qi, kj) = prow[kj - ranges.lo[qi]];
          }
        }
      }
      trace->attn_probs.push_back(std::move(dense));
    }

    c.x_mid = c.x_in;
    matmul(c.att.a.data(), model.tensor(p + "wo").data(), c.x_mid.a.data(), T,
           d, d, true);

    Matrix b;
    layer_norm(c.x_mid, model.tensor(p + "ln2_g"), model.tensor(p + "ln2_b"),
               c.ln2_hat, c.ln2_rstd, b);

    c.f1 = Matrix(T, hidden);
    matmul(b.a.data(), model.tensor(p + "w1").data(), c.f1.a.data(), T, d,
           hidden, false);
    const auto b1 = model.tensor(p + "b1");
    c.g = Matrix(T, hidden);
    for (std::size_t t = 0; t < T; ++t) {
      double* f1r = c.f1.row(t);
      double* gr = c.g.row(t);
      for (std::size_t i = 0; i < hidden; ++i) {
        f1r[i] += b1[i];
        gr[i] = gelu(f1r[i]);
      }
    }

    ws.x = c.x_mid;
    matmul(c.g.a.data(), model.tensor(p + "w2").data(), ws.x.a.data(), T,
           hidden, d, true);
    const auto b2 = model.tensor(p + "b2");
    for (std::size_t t = 0; t < T; ++t) {
      double* row = ws.x.row(t);
      for (std::size_t i = 0; i < d; ++i) row[i] += b2[i];
    }
  }

  layer_norm(ws.x, model.tensor("lnf_g"), model.tensor("lnf_b"), ws.lnf_hat,
             ws.lnf_rstd, ws.y);
}

/// Backward from dY (gradient at the final normalized output) through all
/// layers into `grad` (flat, aligned with params). dY is consumed.
void run_backward(const Model& model, std::span<const TokenId> tokens,
                  const AttnRanges& ranges, const Workspace& ws, Matrix& dy,
                  std::vector<double>& grad) {
  const ModelConfig& cfg = model.config();
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t H = cfg.num_heads;
  const std::size_t dh = d / H;
  const std::size_t hidden = 4 * d;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto g = [&](const std::string& name) {
    const auto span = model.tensor(name);
    return std::span<double>(grad.data() + (span.data() - model.params().data()),
                             span.size());
  };

  Matrix dx;
  layer_norm_backward(dy, ws.lnf_hat, ws.lnf_rstd, model.tensor("lnf_g"), dx,
                      g("lnf_g"), g("lnf_b"));

  for (std::int64_t l = cfg.num_layers - 1; l >= 0; --l) {
    const LayerCache& c = ws.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";

    // Feed-forward sublayer: x_out = x_mid + g(bW1+b1)W2 + b2.
    Matrix dg(T, hidden);
    matmul_bt(dx.a.data(), model.tensor(p + "w2").data(), dg.a.data(), T, d,
              hidden);
    matmul_at(c.g.a.data(), dx.a.data(), g(p + "w2").data(), T, hidden, d);
    {
      auto db2 = g(p + "b2");
      for (std::size_t t = 0; t < T; ++t) {
        const double* row = dx.row(t);
        for (std::size_t i = 0; i < d; ++i) db2[i] += row[i];
      }
    }
    Matrix df1(T, hidden);
    for (std::size_t t = 0; t < T; ++t) {
      const double* dgr = dg.row(t);
      const double* f1r = c.f1.row(t);
      double* dfr = df1.row(t);
      for (std::size_t i = 0; i < hidden; ++i) {
        dfr[i] = dgr[i] * gelu_grad(f1r[i]);
      }
    }
    {
      auto db1 = g(p + "b1");
      for (std::size_t t = 0; t < T; ++t) {
        const double* dfr = df1.row(t);
        for (std::size_t i = 0; i < hidden; ++i) db1[i] += dfr[i];
      }
    }
    // Rebuild the ln2 output (b) for the W1 weight gradient.
    Matrix b_out(T, d);
    {
      const auto g2 = model.tensor(p + "ln2_g");
      const auto be = model.tensor(p + "ln2_b");
      for (std::size_t t = 0; t < T; ++t) {
        const double* hat = c.ln2_hat.row(t);
        double* row = b_out.row(t);
        for (std::size_t i = 0; i < d; ++i) row[i] = g2[i] * hat[i] + be[i];
      }
    }
    matmul_at(b_out.a.data(), df1.a.data(), g(p + "w1").data(), T, d, hidden);
    Matrix db(T, d);
    matmul_bt(df1.a.data(), model.tensor(p + "w1").data(), db.a.data(), T,
              hidden, d);
    Matrix dx_mid;
    layer_norm_backward(db, c.ln2_hat, c.ln2_rstd, model.tensor(p + "ln2_g"),
                        dx_mid, g(p + "ln2_g"), g(p + "ln2_b"));
    for (std::size_t i = 0; i < dx_mid.a.size(); ++i) dx_mid.a[i] += dx.a[i];

    // Attention sublayer: x_mid = x_in + att * Wo.
    Matrix datt(T, d);
    matmul_bt(dx_mid.a.data(), model.tensor(p + "wo").data(), datt.a.data(), T,
              d, d);
    matmul_at(c.att.a.data(), dx_mid.a.data(), g(p + "wo").data(), T, d, d);

    Matrix dq(T, d), dk(T, d), dv(T, d);
    std::vector<double> dprobs;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t qi = 0; qi < T; ++qi) {
        const std::size_t lo = ranges.lo[qi], hi = ranges.hi[qi];
        const double* prow = c.probs.row(h, T, qi);
        const double* datt_row = datt.row(qi) + off;
        dprobs.assign(hi - lo, 0.0);
        double dot = 0.0;  // sum_j dprobs_j * probs_j for softmax backward
        for (std::size_t kj = lo; kj < hi; ++kj) {
          const double* vrow = c.v.row(kj) + off;
          double dp = 0.0;
          for (std::size_t i = 0; i < dh; ++i) dp += datt_row[i] * vrow[i];
          dprobs[kj - lo] = dp;
          dot += dp * prow[kj - lo];
          double* dvrow = dv.row(kj) + off;
          const double pr = prow[kj - lo];
          for (std::size_t i = 0; i < dh; ++i) dvrow[i] += pr * datt_row[i];
        }
        const double* qrow = c.q.row(qi) + off;
        double* dqrow = dq.row(qi) + off;
        for (std::size_t kj = lo; kj < hi; ++kj) {
          const double ds = prow[kj - lo] * (dprobs[kj - lo] - dot) * scale;
          if (ds == 0.0) continue;
          const double* krow = c.k.row(kj) + off;
          double* dkrow = dk.row(kj) + off;
          for (std::size_t i = 0; i < dh; ++i) {
            dqrow[i] += ds * krow[i];
            dkrow[i] += ds * qrow[i];
          }
        }
      }
    }

    // Back through the q/k/v projections into the ln1 output.
    Matrix a_out(T, d);
    {
      const auto g1 = model.tensor(p + "ln1_g");
      const auto be = model.tensor(p + "ln1_b");
      for (std::size_t t = 0; t < T; ++t) {
        const double* hat = c.ln1_hat.row(t);
        double* row = a_out.row(t);
        for (std::size_t i = 0; i < d; ++i) row[i] = g1[i] * hat[i] + be[i];
      }
    }
    Matrix da(T, d);
    matmul_bt(dq.a.data(), model.tensor(p + "wq").data(), da.a.data(), T, d, d);
    matmul_bt(dk.a.data(), model.tensor(p + "wk").data(), da.a.data(), T, d, d);
    matmul_bt(dv.a.data(), model.tensor(p + "wv").data(), da.a.data(), T, d, d);
    matmul_at(a_out.a.data(), dq.a.data(), g(p + "wq").data(), T, d, d);
    matmul_at(a_out.a.data(), dk.a.data(), g(p + "wk").data(), T, d, d);
    matmul_at(a_out.a.data(), dv.a.data(), g(p + "wv").data(), T, d, d);

    Matrix dx_in;
    layer_norm_backward(da, c.ln1_hat, c.ln1_rstd, model.tensor(p + "ln1_g"),
                        dx_in, g(p + "ln1_g"), g(p + "ln1_b"));
    for (std::size_t i = 0; i < dx_in.a.size(); ++i) {
      dx_in.a[i] += dx_mid.a[i];
    }
    dx = std::move(dx_in);
  }

  // Embedding gradients.
  auto dtok = g("tok_embed");
  auto dpos = g("pos_embed");
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = dx.row(t);
    double* te = dtok.data() + std::size_t(tokens[t]) * d;
    double* pe = dpos.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += row[i];
      pe[i] += row[i];
    }
  }
}

/// Loss over the given spans plus, optionally, dY for the backward pass.
/// Logits are only materialized at predictor rows.
double span_loss(const Model& model, std::span<const TokenId> tokens,
                 const Workspace& ws,
                 const std::vector<std::pair<std::size_t, std::size_t>>& spans,
                 Matrix* dy, std::vector<double>* grad) {
  const ModelConfig& cfg = model.config();
  const std::size_t d = cfg.embed_dim;
  const std::size_t V = cfg.vocab_size;
  const auto out_w = model.tensor("out_w");
  const auto out_b = model.tensor("out_b");

  std::size_t total_targets = 0;
  for (const auto& [begin, end] : spans) {
    if (begin >= end) continue;
    if (begin == 0) {
      fail(ErrorCode::InvalidInput, "target span cannot start at position 0");
    }
    if (end > tokens.size()) {
      fail(ErrorCode::InvalidInput, "target span exceeds the sequence");
    }
    total_targets += end - begin;
  }
  if (total_targets == 0) fail(ErrorCode::NoTargetTokens, "no target tokens");

  double total_loss = 0.0;
  std::vector<double> logits(V);
  std::vector<double> dlogit(grad ? V : 0);
  for (const auto& [begin, end] : spans) {
    if (begin >= end) continue;
    const double span_inv = 1.0 / static_cast<double>(end - begin);
    for (std::size_t t = begin; t < end; ++t) {
      const std::size_t r = t - 1;  // predictor row
      const double* yrow = ws.y.row(r);
      for (std::size_t jv = 0; jv < V; ++jv) logits[jv] = out_b[jv];
      for (std::size_t i = 0; i < d; ++i) {
        const double yi = yrow[i];
        if (yi == 0.0) continue;
        const double* wrow = out_w.data() + i * V;
        for (std::size_t jv = 0; jv < V; ++jv) logits[jv] += yi * wrow[jv];
      }
      double max_l = logits[0];
      for (double v : logits) max_l = std::max(max_l, v);
      double z = 0.0;
      for (double v : logits) z += std::exp(v - max_l);
      const TokenId target = tokens[t];
      const double log_p = logits[target] - max_l - std::log(z);
      total_loss -= log_p * span_inv;

      if (grad) {
        for (std::size_t jv = 0; jv < V; ++jv) {
          dlogit[jv] = std::exp(logits[jv] - max_l) / z * span_inv;
        }
        dlogit[target] -= span_inv;
        // dout_b, dout_w, and dy for this row.
        auto gb = std::span<double>(
            grad->data() + (out_b.data() - model.params().data()), V);
        for (std::size_t jv = 0; jv < V; ++jv) gb[jv] += dlogit[jv];
        auto gw = std::span<double>(
            grad->data() + (out_w.data() - model.params().data()), d * V);
        double* dyrow = dy->row(r);
        for (std::size_t i = 0; i < d; ++i) {
          const double yi = yrow[i];
          const double* wrow = out_w.data() + i * V;
          double* gwrow = gw.data() + i * V;
          double acc = 0.0;
          for (std::size_t jv = 0; jv < V; ++jv) {
            gwrow[jv] += yi * dlogit[jv];
            acc += wrow[jv] * dlogit[jv];
          }
          dyrow[i] += acc;
        }
      }
    }
  }
  return total_loss;
}

}  // namespace detail

Matrix Model::forward(std::span<const TokenId> tokens, const PrefixMask& mask,
                      ForwardTrace* trace) const {
  if (mask.total_len != tokens.size()) {
    fail(ErrorCode::InvalidInput, "mask size does not match the sequence");
  }
  const AttnRanges ranges = AttnRanges::from_mask(mask);
  Workspace ws;
  detail::run_forward(*this, tokens, ranges, ws, trace);

  const std::size_t T = tokens.size();
  const std::size_t d = config_.embed_dim;
  const std::size_t V = config_.vocab_size;
  const auto out_w = tensor("out_w");
  const auto out_b = tensor("out_b");
  Matrix logits(T, V);
  for (std::size_t t = 0; t < T; ++t) {
    double* row = logits.row(t);
    for (std::size_t jv = 0; jv < V; ++jv) row[jv] = out_b[jv];
  }
  matmul(ws.y.a.data(), out_w.data(), logits.a.data(), T, d, V, true);
  return logits;
}

double Model::window_nll(const PackedWindow& window,
                         std::vector<double>* grad) const {
  // Trailing padding never carries loss and its positions attend only to
  // themselves, so the forward pass can stop at the last instance end.
  std::size_t effective = window.spans.empty() ? window.tokens.size() : 0;
  for (const WindowSpan& s : window.spans) {
    effective = std::max(effective, s.end);
  }
  effective = std::min(effective, window.tokens.size());
  const std::span<const TokenId> tokens(window.tokens.data(), effective);

  const AttnRanges ranges = AttnRanges::from_spans(window.spans, effective);
  Workspace ws;
  detail::run_forward(*this, tokens, ranges, ws, nullptr);
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const WindowSpan& s : window.spans) {
    spans.emplace_back(s.target_begin, s.target_end);
  }
  if (!grad) {
    return detail::span_loss(*this, tokens, ws, spans, nullptr, nullptr);
  }
  grad->assign(params_.size(), 0.0);
  Matrix dy(effective, config_.embed_dim);
  const double loss = detail::span_loss(*this, tokens, ws, spans, &dy, grad);
  detail::run_backward(*this, tokens, ranges, ws, dy, *grad);
  return loss;
}

double Model::sequence_nll(std::span<const TokenId> tokens,
                           std::size_t prefix_len,
                           std::pair<std::size_t, std::size_t> span) const {
  PackedWindow window;
  window.tokens.assign(tokens.begin(), tokens.end());
  window.budget = tokens.size();
  window.used = tokens.size();
  window.spans.push_back(
      WindowSpan{0, tokens.size(), prefix_len, span.first, span.second});
  return window_nll(window, nullptr);
}

double loss_from_logits(const Matrix& logits, std::span<const TokenId> tokens,
                        std::pair<std::size_t, std::size_t> target_span) {
  const auto [begin, end] = target_span;
  if (begin >= end) fail(ErrorCode::NoTargetTokens, "empty target span");
  if (begin == 0) fail(ErrorCode::InvalidInput, "span cannot start at 0");
  if (end > tokens.size() || logits.rows < tokens.size()) {
    fail(ErrorCode::InvalidInput, "span exceeds the sequence");
  }
  double total = 0.0;
  for (std::size_t t = begin; t < end; ++t) {
    const double* row = logits.row(t - 1);
    double max_l = row[0];
    for (std::size_t jv = 0; jv < logits.cols; ++jv) {
      max_l = std::max(max_l, row[jv]);
    }
    double z = 0.0;
    for (std::size_t jv = 0; jv < logits.cols; ++jv) {
      z += std::exp(row[jv] - max_l);
    }
    total -= row[tokens[t]] - max_l - std::log(z);
  }
  return total / static_cast<double>(end - begin);
}

double sequence_perplexity(const Model& model, std::span<const TokenId> tokens,
                           std::size_t prefix_len,
                           std::pair<std::size_t, std::size_t> target_span) {
  return std::exp(model.sequence_nll(tokens, prefix_len, target_span));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"warmup_steps", warmup_steps}, {"total_steps", total_steps},
          {"peak_lr", peak_lr},           {"floor_lr", floor_lr},
          {"weight_decay", weight_decay}, {"beta1", beta1},
          {"beta2", beta2},               {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.warmup_steps = j.at("warmup_steps").get<std::uint32_t>();
  c.total_steps = j.at("total_steps").get<std::uint32_t>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.floor_lr = j.at("floor_lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  return c;
}

TrainState::TrainState(const ModelConfig& model_config,
                       const TrainConfig& train_config)
    : model_(model_config), train_(train_config) {
  m_.assign(model_.param_count(), 0.0);
  v_.assign(model_.param_count(), 0.0);
}

double TrainState::learning_rate() const {
  const double s = static_cast<double>(step_);
  if (train_.warmup_steps > 0 && s < train_.warmup_steps) {
    return train_.peak_lr * (s + 1.0) / train_.warmup_steps;
  }
  const double span = std::max<double>(1.0, double(train_.total_steps) -
                                                double(train_.warmup_steps));
  const double progress =
      std::min(1.0, (s - double(train_.warmup_steps)) / span);
  return train_.floor_lr + 0.5 * (train_.peak_lr - train_.floor_lr) *
                               (1.0 + std::cos(3.141592653589793 * progress));
}

double TrainState::train_step(const PackedWindow& window) {
  std::vector<double> grad;
  const double loss = model_.window_nll(window, &grad);
  for (double gv : grad) {
    if (!std::isfinite(gv)) {
      fail(ErrorCode::DivergedTraining, "non-finite gradient");
    }
  }
  if (!std::isfinite(loss)) {
    fail(ErrorCode::DivergedTraining, "non-finite loss");
  }

  const double lr = learning_rate();
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(train_.beta1, t);
  const double bc2 = 1.0 - std::pow(train_.beta2, t);
  auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = train_.beta1 * m_[i] + (1.0 - train_.beta1) * grad[i];
    v_[i] = train_.beta2 * v_[i] + (1.0 - train_.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    double update = mhat / (std::sqrt(vhat) + train_.adam_eps);
    if (model_.tensor_is_matrix(i)) {
      update += train_.weight_decay * params[i];
    }
    params[i] -= lr * update;
  }
  ++step_;
  return loss;
}

namespace {
constexpr char kCkptMagic[4] = {'A', 'R', 'C', 'P'};
constexpr std::uint16_t kCkptVersion = 1;
}  // namespace

void TrainState::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string());
  write_magic(os, kCkptMagic);
  write_le<std::uint16_t>(os, kCkptVersion);
  const std::string header = nlohmann::json{{"model", model_.config().to_json()},
                                            {"train", train_.to_json()},
                                            {"step", step_}}
                                 .dump();
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  write_bytes(os, header.data(), header.size());
  for (double p : model_.params()) write_le<double>(os, p);
  for (double x : m_) write_le<double>(os, x);
  for (double x : v_) write_le<double>(os, x);
}

TrainState TrainState::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  expect_magic(is, kCkptMagic, "checkpoint");
  const auto version = read_le<std::uint16_t>(is);
  if (version != kCkptVersion) {
    fail(ErrorCode::IoError, "unsupported checkpoint version");
  }
  const auto header_len = read_le<std::uint32_t>(is);
  std::string header(header_len, '\0');
  read_bytes(is, header.data(), header_len);
  const auto j = nlohmann::json::parse(header);
  TrainState state(ModelConfig::from_json(j.at("model")),
                   TrainConfig::from_json(j.at("train")));
  state.step_ = j.at("step").get<std::uint64_t>();
  for (double& p : state.model_.params()) p = read_le<double>(is);
  for (double& x : state.m_) x = read_le<double>(is);
  for (double& x : state.v_) x = read_le<double>(is);
  return state;
}

std::vector<TokenRange> ranges_for_kind(const VocabularyLayout& layout,
                                        ModalityKind kind) {
  std::vector<TokenRange> out;
  for (const RangeSpec& r : layout.ranges()) {
    if (r.kind == kind) out.emplace_back(r.start, r.start + r.size);
  }
  if (out.empty()) {
    fail(ErrorCode::NoSuchRange, std::string("no ranges for ") + kind_name(kind));
  }
  return out;
}

namespace {

/// Incremental decoding state: cached keys/values per layer plus the code
/// to extend it one position at a time. The prefill path mirrors
/// run_forward exactly (prefix-bidirectional attention); decode steps
/// attend causally to everything cached.
struct KvCache {
  std::vector<Matrix> k, v;  // per layer, capacity x d
  std::size_t len = 0;
};

class IncrementalDecoder {
 public:
  IncrementalDecoder(const Model& model, std::size_t capacity)
      : model_(model), capacity_(capacity) {
    const auto& cfg = model.config();
    cache_.k.assign(cfg.num_layers, Matrix(capacity, cfg.embed_dim));
    cache_.v.assign(cfg.num_layers, Matrix(capacity, cfg.embed_dim));
  }

  /// Appends tokens whose attention follows a bidirectional prefix of
  /// length prefix_len over the whole cached sequence; returns the hidden
  /// output (final LN) of the last appended position.
  std::vector<double> append(std::span<const TokenId> tokens,
                             std::size_t prefix_len) {
    const auto& cfg = model_.config();
    const std::size_t d = cfg.embed_dim;
    const std::size_t H = cfg.num_heads;
    const std::size_t dh = d / H;
    const std::size_t hidden = 4 * d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto tok = model_.tensor("tok_embed");
    const auto pos = model_.tensor("pos_embed");

    std::vector<double> y;
    const std::size_t T_new = tokens.size();
    // Process the new tokens as one block; queries may attend to all
    // cached positions plus the allowed part of the block itself.
    const std::size_t base = cache_.len;
    Matrix x(T_new, d);
    for (std::size_t t = 0; t < T_new; ++t) {
      if (tokens[t] >= cfg.vocab_size) {
        fail(ErrorCode::TokenOutOfVocab, "token " + std::to_string(tokens[t]));
      }
      const double* te = tok.data() + std::size_t(tokens[t]) * d;
      const double* pe = pos.data() + (base + t) * d;
      double* row = x.row(t);
      for (std::size_t i = 0; i < d; ++i) row[i] = te[i] + pe[i];
    }

    auto allowed_hi = [&](std::size_t abs_q) {
      return abs_q < prefix_len ? prefix_len : abs_q + 1;
    };

    for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "L" + std::to_string(l) + ".";
      Matrix a(T_new, d);
      {
        Matrix hat;
        std::vector<double> rstd;
        layer_norm(x, model_.tensor(p + "ln1_g"), model_.tensor(p + "ln1_b"),
                   hat, rstd, a);
      }
      Matrix q(T_new, d);
      Matrix& kc = cache_.k[l];
      Matrix& vc = cache_.v[l];
      matmul(a.a.data(), model_.tensor(p + "wq").data(), q.a.data(), T_new, d,
             d, false);
      // New keys/values are appended into the cache at [base, base+T_new).
      Matrix k_new(T_new, d), v_new(T_new, d);
      matmul(a.a.data(), model_.tensor(p + "wk").data(), k_new.a.data(), T_new,
             d, d, false);
      matmul(a.a.data(), model_.tensor(p + "wv").data(), v_new.a.data(), T_new,
             d, d, false);
      for (std::size_t t = 0; t < T_new; ++t) {
        std::copy(k_new.row(t), k_new.row(t) + d, kc.row(base + t));
        std::copy(v_new.row(t), v_new.row(t) + d, vc.row(base + t));
      }

      Matrix att(T_new, d);
      std::vector<double> scores;
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t t = 0; t < T_new; ++t) {
          const std::size_t abs_q = base + t;
          const std::size_t hi = allowed_hi(abs_q);
          scores.assign(hi, 0.0);
          const double* qrow = q.row(t) + off;
          double max_s = -1e300;
          for (std::size_t kj = 0; kj < hi; ++kj) {
            const double* krow = kc.row(kj) + off;
            double s = 0.0;
            for (std::size_t i = 0; i < dh; ++i) s += qrow[i] * krow[i];
            s *= scale;
            scores[kj] = s;
            max_s = std::max(max_s, s);
          }
          double z = 0.0;
          for (std::size_t kj = 0; kj < hi; ++kj) {
            scores[kj] = std::exp(scores[kj] - max_s);
            z += scores[kj];
          }
          double* arow = att.row(t) + off;
          for (std::size_t kj = 0; kj < hi; ++kj) {
            const double pr = scores[kj] / z;
            const double* vrow = vc.row(kj) + off;
            for (std::size_t i = 0; i < dh; ++i) arow[i] += pr * vrow[i];
          }
        }
      }
      matmul(att.a.data(), model_.tensor(p + "wo").data(), x.a.data(), T_new, d,
             d, true);

      Matrix b(T_new, d);
      {
        Matrix hat;
        std::vector<double> rstd;
        layer_norm(x, model_.tensor(p + "ln2_g"), model_.tensor(p + "ln2_b"),
                   hat, rstd, b);
      }
      Matrix f1(T_new, hidden);
      matmul(b.a.data(), model_.tensor(p + "w1").data(), f1.a.data(), T_new, d,
             hidden, false);
      const auto b1 = model_.tensor(p + "b1");
      for (std::size_t t = 0; t < T_new; ++t) {
        double* row = f1.row(t);
        for (std::size_t i = 0; i < hidden; ++i) row[i] = gelu(row[i] + b1[i]);
      }
      matmul(f1.a.data(), model_.tensor(p + "w2").data(), x.a.data(), T_new,
             hidden, d, true);
      const auto b2 = model_.tensor(p + "b2");
      for (std::size_t t = 0; t < T_new; ++t) {
        double* row = x.row(t);
        for (std::size_t i = 0; i < d; ++i) row[i] += b2[i];
      }
    }

    cache_.len += T_new;
    Matrix hat, out;
    std::vector<double> rstd;
    layer_norm(x, model_.tensor("lnf_g"), model_.tensor("lnf_b"), hat, rstd,
               out);
    y.assign(out.row(T_new - 1), out.row(T_new - 1) + d);
    return y;
  }

 private:
  const Model& model_;
  std::size_t capacity_;
  KvCache cache_;
};

}  // namespace

std::vector<TokenId> generate(const Model& model,
                              std::span<const TokenId> prompt_tokens,
                              std::size_t prefix_len, std::size_t n_target,
                              const std::vector<TokenRange>& allowed,
                              double temperature, std::uint64_t seed) {
  if (temperature < 0.0) fail(ErrorCode::InvalidInput, "negative temperature");
  if (prompt_tokens.empty()) fail(ErrorCode::EmptyInput, "empty prompt");
  if (prefix_len > prompt_tokens.size()) {
    fail(ErrorCode::InvalidPrefix, "prefix exceeds the prompt");
  }
  const std::size_t total = prompt_tokens.size() + n_target;
  if (total > model.config().max_context) {
    fail(ErrorCode::ContextOverflow,
         std::to_string(total) + " tokens exceed context " +
             std::to_string(model.config().max_context));
  }
  if (n_target == 0) return {};

  const auto out_w = model.tensor("out_w");
  const auto out_b = model.tensor("out_b");
  const std::size_t d = model.config().embed_dim;
  const std::size_t V = model.config().vocab_size;

  IncrementalDecoder decoder(model, total);
  std::vector<double> hidden = decoder.append(prompt_tokens, prefix_len);

  Rng rng(seed);
  std::vector<TokenId> out;
  out.reserve(n_target);
  std::vector<double> logits;
  for (std::size_t step = 0; step < n_target; ++step) {
    logits.assign(V, 0.0);
    for (std::size_t jv = 0; jv < V; ++jv) logits[jv] = out_b[jv];
    for (std::size_t i = 0; i < d; ++i) {
      const double hi = hidden[i];
      const double* wrow = out_w.data() + i * V;
      for (std::size_t jv = 0; jv < V; ++jv) logits[jv] += hi * wrow[jv];
    }

    TokenId next = 0;
    if (temperature == 0.0) {
      double best = -1e300;
      bool any = false;
      for (const auto& [lo, hi_r] : allowed) {
        for (TokenId id = lo; id < hi_r; ++id) {
          if (logits[id] > best) {  // strict: ties keep the lowest id
            best = logits[id];
            next = id;
            any = true;
          }
        }
      }
      if (!any) fail(ErrorCode::InvalidInput, "empty allowed range set");
    } else {
      double max_l = -1e300;
      for (const auto& [lo, hi_r] : allowed) {
        for (TokenId id = lo; id < hi_r; ++id) {
          max_l = std::max(max_l, logits[id] / temperature);
        }
      }
      double z = 0.0;
      for (const auto& [lo, hi_r] : allowed) {
        for (TokenId id = lo; id < hi_r; ++id) {
          z += std::exp(logits[id] / temperature - max_l);
        }
      }
      const double u = rng.uniform() * z;
      double acc = 0.0;
      next = allowed.front().first;
      bool chosen = false;
      for (const auto& [lo, hi_r] : allowed) {
        if (chosen) break;
        for (TokenId id = lo; id < hi_r; ++id) {
          acc += std::exp(logits[id] / temperature - max_l);
          if (acc >= u) {
            next = id;
            chosen = true;
            break;
          }
        }
      }
      if (!chosen) {  // numerical tail: take the last allowed id
        next = allowed.back().second - 1;
      }
    }

    out.push_back(next);
    const TokenId one[1] = {next};
    hidden = decoder.append(std::span<const TokenId>(one, 1), prefix_len);
  }
  return out;
}

const std::vector<std::uint32_t>& ChainDims::for_kind(ModalityKind kind) const {
  const auto it = dims.find(kind);
  if (it == dims.end()) {
    fail(ErrorCode::InvalidDims,
         std::string("no dims configured for ") + kind_name(kind));
  }
  return it->second;
}

ChainResult run_chain(const Model& model, const VocabularyLayout& layout,
                      const Registry& registry,
                      const std::vector<Segment>& conditions,
                      const ChainPlan& plan, const ChainDims& dims,
                      double temperature, std::uint64_t seed,
                      const ChainRenderContext* render) {
  // Plan validity per the recurrent decomposition.
  decompose(registry, plan.conditions, plan.steps);
  {
    std::set<ModalityRef> given;
    for (const Segment& seg : conditions) given.insert(seg.ref);
    if (given != plan.conditions) {
      fail(ErrorCode::InvalidInput,
           "condition payloads do not match the plan's condition set");
    }
  }

  ChainResult result;
  std::vector<Segment> available = conditions;
  const LevelConfig levels = LevelConfig::from_layout(layout);
  for (std::size_t j = 0; j < plan.steps.size(); ++j) {
    const ModalityRef step = plan.steps[j];
    try {
      TaskInstance instance;
      instance.conditions = available;
      instance.output_ref = step;
      instance.output_dims = dims.for_kind(step.kind);
      instance.expected_output_len =
          token_count(step.kind, instance.output_dims, levels);
      const SerializedInstance ser = serialize(instance, layout);
      const auto payload = generate(
          model, ser.tokens, ser.prefix_len, instance.expected_output_len,
          ranges_for_kind(layout, step.kind), temperature, splitmix64(seed + j));
      std::vector<TokenId> full = ser.tokens;
      full.insert(full.end(), payload.begin(), payload.end());
      const TaskInstance parsed = parse(full, layout);

      Segment generated;
      generated.ref = step;
      generated.dims = instance.output_dims;
      generated.payload = parsed.output_payload;
      result.generated.push_back(generated);
      available.push_back(std::move(generated));
    } catch (const Error& e) {
      fail(e.code(), "chain step " + std::to_string(j) + " (" +
                         ref_name(step) + "): " + e.what());
    }
  }

  if (plan.needs_render && render) {
    const std::vector<std::uint32_t>& sd = dims.for_kind(ModalityKind::semantic);
    const Segment* semantic_seg = nullptr;
    for (const Segment& seg : available) {
      if (seg.ref.kind == ModalityKind::semantic) semantic_seg = &seg;
    }
    if (!semantic_seg) {
      fail(ErrorCode::NoPlan, "video rendering needs a semantic payload");
    }
    std::vector<std::uint32_t> locals;
    locals.reserve(semantic_seg->payload.size());
    for (TokenId t : semantic_seg->payload) {
      locals.push_back(layout.localize(t).local_id);
    }
    const SemanticVideo sem =
        render->semantic->decode(locals, sd[0], sd[1], sd[2]);
    result.video = render_video(sem, render->reference, *render->palette);
  }
  return result;
}

}  // namespace archon
