#pragma once

// Next-scale autoregressive transformer.
//
// Sequence layout: one position per token of the full multi-scale sequence.
// Positions of block 0 hold the class embedding and predict r_1; positions of
// block k >= 1 hold the embedded upsampled codebook map of r_k (zero-based
// scale k-1) and predict the tokens of scale k. Attention is block-causal: a
// block sees every earlier block and itself, so a forward pass can run block
// by block with cached keys/values and still match the teacher-forced pass
// bit for bit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "scalegrpo/error.hpp"
#include "scalegrpo/msvq.hpp"
#include "scalegrpo/rng.hpp"

namespace scalegrpo {

struct PolicyConfig {
  ScaleSchedule schedule = ScaleSchedule::square({1, 2, 4, 8});
  int vocab_size = 16;
  int latent_dim = 3;
  int d_model = 64;
  int n_layers = 3;
  int n_heads = 4;
  int n_classes = 8;

  int null_class() const noexcept { return n_classes; }
  int seq_len() const noexcept { return schedule.total_tokens(); }

  void validate() const {
    if (schedule.num_scales() < 1) throw InvalidArgument("policy needs a non-empty scale schedule");
    if (vocab_size < 2) throw InvalidArgument("vocab_size must be >= 2");
    if (latent_dim < 1) throw InvalidArgument("latent_dim must be >= 1");
    if (d_model < 1 || n_layers < 1 || n_heads < 1)
      throw InvalidArgument("d_model, n_layers and n_heads must be positive");
    if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
    if (n_classes < 1) throw InvalidArgument("n_classes must be >= 1");
  }
};

enum class InitKind { kEmbedding, kFanIn, kResidual, kZero, kOne };

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  InitKind init = InitKind::kZero;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * cols; }
};

/// Offsets of every named weight tensor inside the flat parameter vector.
class ParamLayout {
 public:
  struct Layer {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  explicit ParamLayout(const PolicyConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    class_emb = add("class_emb", cfg.n_classes + 1, d, InitKind::kEmbedding);
    in_w = add("in_proj_w", cfg.latent_dim, d, InitKind::kEmbedding);
    in_b = add("in_proj_b", 1, d, InitKind::kZero);
    scale_emb = add("scale_emb", cfg.schedule.num_scales(), d, InitKind::kEmbedding);
    pos_emb = add("pos_emb", cfg.seq_len(), d, InitKind::kEmbedding);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1_g", 1, d, InitKind::kOne);
      L.ln1_b = add(p + "ln1_b", 1, d, InitKind::kZero);
      L.qkv_w = add(p + "qkv_w", d, 3 * d, InitKind::kFanIn);
      L.qkv_b = add(p + "qkv_b", 1, 3 * d, InitKind::kZero);
      L.out_w = add(p + "out_w", d, d, InitKind::kResidual);
      L.out_b = add(p + "out_b", 1, d, InitKind::kZero);
      L.ln2_g = add(p + "ln2_g", 1, d, InitKind::kOne);
      L.ln2_b = add(p + "ln2_b", 1, d, InitKind::kZero);
      L.fc1_w = add(p + "fc1_w", d, 4 * d, InitKind::kFanIn);
      L.fc1_b = add(p + "fc1_b", 1, 4 * d, InitKind::kZero);
      L.fc2_w = add(p + "fc2_w", 4 * d, d, InitKind::kResidual);
      L.fc2_b = add(p + "fc2_b", 1, d, InitKind::kZero);
      layers.push_back(L);
    }
    lnf_g = add("lnf_g", 1, d, InitKind::kOne);
    lnf_b = add("lnf_b", 1, d, InitKind::kZero);
    head_w = add("head_w", d, cfg.vocab_size, InitKind::kEmbedding);
    head_b = add("head_b", 1, cfg.vocab_size, InitKind::kZero);
  }

  std::size_t size() const noexcept { return total_; }
  const std::vector<TensorSlot>& slots() const noexcept { return slots_; }

  std::size_t class_emb{}, in_w{}, in_b{}, scale_emb{}, pos_emb{};
  std::vector<Layer> layers;
  std::size_t lnf_g{}, lnf_b{}, head_w{}, head_b{};

 private:
  std::size_t add(std::string name, int rows, int cols, InitKind init) {
    const std::size_t off = total_;
    slots_.push_back({std::move(name), off, rows, cols, init});
    total_ += static_cast<std::size_t>(rows) * cols;
    return off;
  }

  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
};

/// Flat learnable weights. Stored as float so checkpoints round-trip exactly;
/// arithmetic happens in the network's scalar type.
struct PolicyParams {
  std::vector<float> values;

  std::size_t param_count() const noexcept { return values.size(); }
  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

/// Architecture bound to its frozen codebook. Immutable; shared by every
/// parameter set (theta, theta_old, theta_ref) of one model.
class Architecture {
 public:
  Architecture(PolicyConfig cfg, Codebook codebook)
      : cfg_(std::move(cfg)), codebook_(std::move(codebook)), layout_(cfg_) {
    if (codebook_.vocab_size() != cfg_.vocab_size)
      throw InvalidArgument("codebook size does not match the policy vocabulary");
    if (codebook_.dim() != cfg_.latent_dim)
      throw InvalidArgument("codebook dimension does not match the policy latent_dim");
    block_of_.resize(static_cast<std::size_t>(cfg_.seq_len()));
    for (int k = 0; k < cfg_.schedule.num_scales(); ++k)
      for (int p = cfg_.schedule.offset(k); p < cfg_.schedule.offset(k + 1); ++p)
        block_of_[static_cast<std::size_t>(p)] = k;
  }

  const PolicyConfig& config() const noexcept { return cfg_; }
  const Codebook& codebook() const noexcept { return codebook_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t param_count() const noexcept { return layout_.size(); }
  int block_of(int position) const { return block_of_.at(static_cast<std::size_t>(position)); }

  void check_label(int label, bool allow_null = true) const {
    if (label == cfg_.null_class() && allow_null) return;
    if (label < 0 || label >= cfg_.n_classes)
      throw InvalidArgument("class label " + std::to_string(label) + " outside [0, " +
                            std::to_string(cfg_.n_classes) + ")");
  }

  void check_params(const PolicyParams& p) const {
    if (p.values.size() != param_count())
      throw InvalidArgument("parameter vector has " + std::to_string(p.values.size()) +
                            " entries, architecture expects " + std::to_string(param_count()));
  }

 private:
  PolicyConfig cfg_;
  Codebook codebook_;
  ParamLayout layout_;
  std::vector<int> block_of_;
};

inline PolicyParams init_params(const Architecture& arch, std::uint64_t seed) {
  const auto& cfg = arch.config();
  const double fan_in_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double resid_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model) * cfg.n_layers);
  Rng rng(hash_seed(seed, 0x1417));
  PolicyParams p;
  p.values.resize(arch.param_count());
  for (const auto& slot : arch.layout().slots()) {
    double stddev = 0.0;
    switch (slot.init) {
      case InitKind::kEmbedding: stddev = 0.02; break;
      case InitKind::kFanIn: stddev = fan_in_std; break;
      case InitKind::kResidual: stddev = resid_std; break;
      case InitKind::kZero:
      case InitKind::kOne: break;
    }
    for (std::size_t n = 0; n < slot.size(); ++n) {
      float v = 0.0f;
      if (slot.init == InitKind::kOne) v = 1.0f;
      else if (stddev > 0.0) v = static_cast<float>(stddev * rng.normal());
      p.values[slot.offset + n] = v;
    }
  }
  return p;
}

// Numerically stable log-softmax of logits / tau.
inline void log_softmax(std::span<const double> logits, double tau, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double z : logits) m = std::max(m, z / tau);
  double s = 0.0;
  for (double z : logits) s += std::exp(z / tau - m);
  const double lse = m + std::log(s);
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] / tau - lse;
}

// Per-token log-probabilities, flat in the token order of MultiScaleTokens.
using TokenLogProbs = std::vector<double>;

/// Activations of one sequence; filled block by block, read by backward.
template <typename Scalar>
struct Trace {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct LayerActs {
    Mat x_in, ln1, qkv, attn, x_mid, ln2, fc1, act;
    Vec ln1_rstd, ln2_rstd;
    std::vector<Mat> probs;  // [block * n_heads + head]: n_block x keys
  };

  int label = 0;
  int blocks_done = 0;
  Mat upsampled;  // T x latent: embedded input map for positions of blocks >= 1
  std::vector<LayerActs> layers;
  Mat x_final, lnf;
  Vec lnf_rstd;
  Mat logits;  // T x V
};

namespace detail {

// Row-wise layer norm of rows [r0, r1) in place into `out`; keeps 1/sigma for backward.
template <typename Mat, typename Vec, typename Row>
void layer_norm_rows(const Mat& x, int r0, int r1, const Row& gain, const Row& bias, Mat& out, Vec& rstd) {
  using Scalar = typename Mat::Scalar;
  const auto n = static_cast<Scalar>(x.cols());
  for (int r = r0; r < r1; ++r) {
    const Scalar mean = x.row(r).sum() / n;
    const Scalar var = (x.row(r).array() - mean).square().sum() / n;
    const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(1e-5));
    rstd(r) = inv;
    out.row(r) = (((x.row(r).array() - mean) * inv) * gain.array() + bias.array()).matrix();
  }
}

template <typename Scalar>
Scalar gelu(Scalar a) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  return Scalar(0.5) * a * (Scalar(1) + std::tanh(k * (a + Scalar(0.044715) * a * a * a)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar a) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar t = std::tanh(k * (a + Scalar(0.044715) * a * a * a));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * a * (Scalar(1) - t * t) * k * (Scalar(1) + Scalar(3 * 0.044715) * a * a);
}

}  // namespace detail

/// The transformer evaluated with a fixed parameter vector in arithmetic type Scalar.
template <typename Scalar>
class Network {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  using MapM = Eigen::Map<const Mat>;
  using MapR = Eigen::Map<const Row>;
  using GradM = Eigen::Map<Mat>;
  using GradR = Eigen::Map<Row>;

  template <typename T>
  Network(const Architecture& arch, std::span<const T> params) : arch_(&arch) {
    if (params.size() != arch.param_count())
      throw InvalidArgument("parameter vector size does not match the architecture");
    w_.resize(params.size());
    for (std::size_t n = 0; n < params.size(); ++n) w_[n] = static_cast<Scalar>(params[n]);
  }
  Network(const Architecture& arch, const PolicyParams& params)
      : Network(arch, std::span<const float>(params.values)) {}

  const Architecture& arch() const noexcept { return *arch_; }
  std::size_t param_count() const noexcept { return w_.size(); }

  Trace<Scalar> start(int label) const {
    arch_->check_label(label);
    const auto& cfg = arch_->config();
    const int T = cfg.seq_len();
    const int d = cfg.d_model;
    Trace<Scalar> tr;
    tr.label = label;
    tr.upsampled = Mat::Zero(T, cfg.latent_dim);
    tr.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& L : tr.layers) {
      L.x_in.resize(T, d);
      L.ln1.resize(T, d);
      L.qkv.resize(T, 3 * d);
      L.attn.resize(T, d);
      L.x_mid.resize(T, d);
      L.ln2.resize(T, d);
      L.fc1.resize(T, 4 * d);
      L.act.resize(T, 4 * d);
      L.ln1_rstd.resize(T);
      L.ln2_rstd.resize(T);
      L.probs.resize(static_cast<std::size_t>(cfg.schedule.num_scales() * cfg.n_heads));
    }
    tr.x_final.resize(T, d);
    tr.lnf.resize(T, d);
    tr.lnf_rstd.resize(T);
    tr.logits.resize(T, cfg.vocab_size);
    return tr;
  }

  // Computes every layer for the positions of block b. Requires blocks < b done
  // and, for b >= 1, tokens of scale b-1 present in `tokens`.
  void run_block(Trace<Scalar>& tr, int b, const MultiScaleTokens& tokens) const {
    const auto& cfg = arch_->config();
    const auto& lay = arch_->layout();
    if (b != tr.blocks_done) throw InvalidState("blocks must be run in order");
    const int d = cfg.d_model;
    const int r0 = cfg.schedule.offset(b);
    const int r1 = cfg.schedule.offset(b + 1);
    const int n = r1 - r0;

    // Input embedding.
    Mat x(n, d);
    const MapR scale_row(&w_[lay.scale_emb + static_cast<std::size_t>(b) * d], d);
    if (b == 0) {
      const MapR cls(&w_[lay.class_emb + static_cast<std::size_t>(tr.label) * d], d);
      for (int r = 0; r < n; ++r) x.row(r) = cls + scale_row;
    } else {
      const Scale s = cfg.schedule[b];
      FeatureGrid src(cfg.schedule[b - 1].h, cfg.schedule[b - 1].w, cfg.latent_dim);
      const auto grid = tokens.grid(b - 1);
      for (std::size_t t = 0; t < grid.size(); ++t) {
        const auto e = arch_->codebook().entry(grid[t]);
        for (int c = 0; c < cfg.latent_dim; ++c)
          src.data[t * static_cast<std::size_t>(cfg.latent_dim) + static_cast<std::size_t>(c)] = e[static_cast<std::size_t>(c)];
      }
      const FeatureGrid up = upsample(src, s.h, s.w);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < cfg.latent_dim; ++c)
          tr.upsampled(r0 + r, c) = static_cast<Scalar>(up.data[static_cast<std::size_t>(r * cfg.latent_dim + c)]);
      const MapM in_w(&w_[lay.in_w], cfg.latent_dim, d);
      const MapR in_b(&w_[lay.in_b], d);
      x.noalias() = tr.upsampled.middleRows(r0, n) * in_w;
      x.rowwise() += in_b + scale_row;
    }
    x += MapM(&w_[lay.pos_emb + static_cast<std::size_t>(r0) * d], n, d);

    const int H = cfg.n_heads;
    const int hd = d / H;
    const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& P = lay.layers[static_cast<std::size_t>(l)];
      auto& A = tr.layers[static_cast<std::size_t>(l)];
      A.x_in.middleRows(r0, n) = x;
      detail::layer_norm_rows(A.x_in, r0, r1, MapR(&w_[P.ln1_g], d), MapR(&w_[P.ln1_b], d), A.ln1, A.ln1_rstd);
      A.qkv.middleRows(r0, n).noalias() = A.ln1.middleRows(r0, n) * MapM(&w_[P.qkv_w], d, 3 * d);
      A.qkv.middleRows(r0, n).rowwise() += MapR(&w_[P.qkv_b], 3 * d);
      for (int h = 0; h < H; ++h) {
        const auto q = A.qkv.block(r0, h * hd, n, hd);
        const auto k = A.qkv.block(0, d + h * hd, r1, hd);
        const auto v = A.qkv.block(0, 2 * d + h * hd, r1, hd);
        Mat& pr = A.probs[static_cast<std::size_t>(b * H + h)];
        pr.noalias() = (q * k.transpose()) * att_scale;
        for (int r = 0; r < n; ++r) {
          const Scalar m = pr.row(r).maxCoeff();
          pr.row(r) = (pr.row(r).array() - m).exp().matrix();
          pr.row(r) /= pr.row(r).sum();
        }
        A.attn.block(r0, h * hd, n, hd).noalias() = pr * v;
      }
      x.noalias() += A.attn.middleRows(r0, n) * MapM(&w_[P.out_w], d, d);
      x.rowwise() += MapR(&w_[P.out_b], d);
      A.x_mid.middleRows(r0, n) = x;
      detail::layer_norm_rows(A.x_mid, r0, r1, MapR(&w_[P.ln2_g], d), MapR(&w_[P.ln2_b], d), A.ln2, A.ln2_rstd);
      A.fc1.middleRows(r0, n).noalias() = A.ln2.middleRows(r0, n) * MapM(&w_[P.fc1_w], d, 4 * d);
      A.fc1.middleRows(r0, n).rowwise() += MapR(&w_[P.fc1_b], 4 * d);
      A.act.middleRows(r0, n) = A.fc1.middleRows(r0, n).unaryExpr([](Scalar a) { return detail::gelu(a); });
      x.noalias() += A.act.middleRows(r0, n) * MapM(&w_[P.fc2_w], 4 * d, d);
      x.rowwise() += MapR(&w_[P.fc2_b], d);
    }
    tr.x_final.middleRows(r0, n) = x;
    detail::layer_norm_rows(tr.x_final, r0, r1, MapR(&w_[lay.lnf_g], d), MapR(&w_[lay.lnf_b], d), tr.lnf, tr.lnf_rstd);
    tr.logits.middleRows(r0, n).noalias() = tr.lnf.middleRows(r0, n) * MapM(&w_[lay.head_w], d, cfg.vocab_size);
    tr.logits.middleRows(r0, n).rowwise() += MapR(&w_[lay.head_b], cfg.vocab_size);
    tr.blocks_done = b + 1;
  }

  // Teacher-forced pass over all blocks.
  Trace<Scalar> forward(int label, const MultiScaleTokens& tokens) const {
    if (!(tokens.schedule() == arch_->config().schedule))
      throw InvalidArgument("tokens do not match the policy's scale schedule");
    tokens.validate(arch_->config().vocab_size);
    Trace<Scalar> tr = start(label);
    for (int b = 0; b < arch_->config().schedule.num_scales(); ++b) run_block(tr, b, tokens);
    return tr;
  }

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(logits).
  void backward(const Trace<Scalar>& tr, const Mat& dlogits, std::span<Scalar> grad) const {
    const auto& cfg = arch_->config();
    const auto& lay = arch_->layout();
    if (grad.size() != w_.size()) throw InvalidArgument("gradient buffer has the wrong size");
    if (tr.blocks_done != cfg.schedule.num_scales()) throw InvalidState("backward needs a complete forward trace");
    const int T = cfg.seq_len();
    const int d = cfg.d_model;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = d / H;
    const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    auto gm = [&](std::size_t off, int r, int c) { return GradM(grad.data() + off, r, c); };
    auto gr = [&](std::size_t off, int c) { return GradR(grad.data() + off, c); };

    gm(lay.head_w, d, V).noalias() += tr.lnf.transpose() * dlogits;
    gr(lay.head_b, V) += dlogits.colwise().sum();
    Mat dx = dlogits * MapM(&w_[lay.head_w], d, V).transpose();
    dx = ln_backward(tr.x_final, tr.lnf_rstd, dx, lay.lnf_g, lay.lnf_b, grad);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      const auto& P = lay.layers[static_cast<std::size_t>(l)];
      const auto& A = tr.layers[static_cast<std::size_t>(l)];
      // MLP branch.
      gm(P.fc2_w, 4 * d, d).noalias() += A.act.transpose() * dx;
      gr(P.fc2_b, d) += dx.colwise().sum();
      Mat dact = dx * MapM(&w_[P.fc2_w], 4 * d, d).transpose();
      dact.array() *= A.fc1.unaryExpr([](Scalar a) { return detail::gelu_grad(a); }).array();
      gm(P.fc1_w, d, 4 * d).noalias() += A.ln2.transpose() * dact;
      gr(P.fc1_b, 4 * d) += dact.colwise().sum();
      Mat dln2 = dact * MapM(&w_[P.fc1_w], d, 4 * d).transpose();
      dx += ln_backward(A.x_mid, A.ln2_rstd, dln2, P.ln2_g, P.ln2_b, grad);

      // Attention branch.
      gm(P.out_w, d, d).noalias() += A.attn.transpose() * dx;
      gr(P.out_b, d) += dx.colwise().sum();
      const Mat dattn = dx * MapM(&w_[P.out_w], d, d).transpose();
      Mat dqkv = Mat::Zero(T, 3 * d);
      for (int b = 0; b < cfg.schedule.num_scales(); ++b) {
        const int r0 = cfg.schedule.offset(b);
        const int r1 = cfg.schedule.offset(b + 1);
        const int n = r1 - r0;
        for (int h = 0; h < H; ++h) {
          const Mat& pr = A.probs[static_cast<std::size_t>(b * H + h)];
          const auto q = A.qkv.block(r0, h * hd, n, hd);
          const auto k = A.qkv.block(0, d + h * hd, r1, hd);
          const auto v = A.qkv.block(0, 2 * d + h * hd, r1, hd);
          const auto dout = dattn.block(r0, h * hd, n, hd);
          dqkv.block(0, 2 * d + h * hd, r1, hd).noalias() += pr.transpose() * dout;
          Mat dp = dout * v.transpose();
          const Vec rowdot = (dp.array() * pr.array()).rowwise().sum();
          Mat ds = (pr.array() * (dp.colwise() - rowdot).array()).matrix() * att_scale;
          dqkv.block(r0, h * hd, n, hd).noalias() += ds * k;
          dqkv.block(0, d + h * hd, r1, hd).noalias() += ds.transpose() * q;
        }
      }
      gm(P.qkv_w, d, 3 * d).noalias() += A.ln1.transpose() * dqkv;
      gr(P.qkv_b, 3 * d) += dqkv.colwise().sum();
      Mat dln1 = dqkv * MapM(&w_[P.qkv_w], d, 3 * d).transpose();
      dx += ln_backward(A.x_in, A.ln1_rstd, dln1, P.ln1_g, P.ln1_b, grad);
    }

    // Input embeddings.
    gm(lay.pos_emb, T, d) += dx;
    for (int b = 0; b < cfg.schedule.num_scales(); ++b) {
      const int r0 = cfg.schedule.offset(b);
      const int n = cfg.schedule.offset(b + 1) - r0;
      const Row block_sum = dx.middleRows(r0, n).colwise().sum();
      gr(lay.scale_emb + static_cast<std::size_t>(b) * d, d) += block_sum;
      if (b == 0) {
        gr(lay.class_emb + static_cast<std::size_t>(tr.label) * d, d) += block_sum;
      } else {
        gm(lay.in_w, cfg.latent_dim, d).noalias() += tr.upsampled.middleRows(r0, n).transpose() * dx.middleRows(r0, n);
        gr(lay.in_b, d) += block_sum;
      }
    }
  }

 private:
  // Backward of y = LN(x) * g + b, given the pre-norm input x and 1/sigma.
  Mat ln_backward(const Mat& x, const Vec& rstd, const Mat& dy, std::size_t g_off, std::size_t b_off,
                  std::span<Scalar> grad) const {
    const int T = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    const MapR gain(&w_[g_off], d);
    GradR dg(grad.data() + g_off, d);
    GradR db(grad.data() + b_off, d);
    Mat dx(T, d);
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(d);
    for (int r = 0; r < T; ++r) {
      const Scalar mean = x.row(r).sum() * inv_n;
      const Row xhat = ((x.row(r).array() - mean) * rstd(r)).matrix();
      dg += (dy.row(r).array() * xhat.array()).matrix();
      db += dy.row(r);
      const Row dxhat = (dy.row(r).array() * gain.array()).matrix();
      const Scalar m1 = dxhat.sum() * inv_n;
      const Scalar m2 = (dxhat.array() * xhat.array()).sum() * inv_n;
      dx.row(r) = ((dxhat.array() - m1 - xhat.array() * m2) * rstd(r)).matrix();
    }
    return dx;
  }

  const Architecture* arch_;
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> w_;
};

/// Per-scale logits of one teacher-forced pass: scale k is an h_k x w_k x V grid.
struct LogitsBundle {
  ScaleSchedule schedule;
  int vocab_size = 0;
  std::vector<double> values;  // T x V, token-major

  std::span<const double> at(int flat_token) const {
    return {values.data() + static_cast<std::size_t>(flat_token) * vocab_size, static_cast<std::size_t>(vocab_size)};
  }
  std::span<const double> at(int k, int i, int j) const {
    return at(schedule.offset(k) + i * schedule[k].w + j);
  }
};

template <typename Scalar = float>
LogitsBundle forward(const Architecture& arch, const PolicyParams& params, int label,
                     const MultiScaleTokens& tokens) {
  arch.check_params(params);
  const Network<Scalar> net(arch, params);
  const auto tr = net.forward(label, tokens);
  LogitsBundle out{arch.config().schedule, arch.config().vocab_size, {}};
  out.values.resize(static_cast<std::size_t>(tr.logits.size()));
  for (Eigen::Index r = 0; r < tr.logits.rows(); ++r)
    for (Eigen::Index c = 0; c < tr.logits.cols(); ++c)
      out.values[static_cast<std::size_t>(r * tr.logits.cols() + c)] = static_cast<double>(tr.logits(r, c));
  for (double v : out.values)
    if (!std::isfinite(v)) throw NumericError("forward produced a non-finite logit");
  return out;
}

// Log-probability of every realized token under softmax(logits / tau).
template <typename Mat>
TokenLogProbs token_log_probs(const Mat& logits, const MultiScaleTokens& tokens, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  const auto flat = tokens.flat();
  const int V = static_cast<int>(logits.cols());
  TokenLogProbs out(flat.size());
  std::vector<double> row(static_cast<std::size_t>(V)), lp(static_cast<std::size_t>(V));
  for (std::size_t t = 0; t < flat.size(); ++t) {
    for (int j = 0; j < V; ++j) row[static_cast<std::size_t>(j)] = static_cast<double>(logits(static_cast<Eigen::Index>(t), j));
    log_softmax(row, tau, lp);
    out[t] = lp[static_cast<std::size_t>(flat[t])];
  }
  return out;
}

template <typename Scalar = float>
TokenLogProbs log_prob(const Architecture& arch, const PolicyParams& params, int label,
                       const MultiScaleTokens& tokens, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  arch.check_params(params);
  const Network<Scalar> net(arch, params);
  return token_log_probs(net.forward(label, tokens).logits, tokens, tau);
}

inline double sequence_log_prob(const TokenLogProbs& lp) {
  double s = 0.0;
  for (double v : lp) s += v;
  return s;
}

// ---------------------------------------------------------------------------
// Losses.

struct LabeledTokens {
  int label = 0;
  const MultiScaleTokens* tokens = nullptr;
};

/// Mean per-token cross-entropy (temperature 1) over a teacher-forced batch.
struct CrossEntropyLoss {
  std::vector<LabeledTokens> batch;
};

/// Objective expressed on per-token log-probs at temperature tau. For
/// sequence `index`, `fn(index, logp, dlogp)` returns the sequence's loss
/// contribution and writes d(loss)/d(logp) for every token.
struct TokenObjectiveLoss {
  std::vector<LabeledTokens> batch;
  double tau = 1.0;
  std::function<double(std::size_t, std::span<const double>, std::span<double>)> fn;
};

/// sum_i theta_i^2; used to validate the gradient plumbing.
struct SquaredNormLoss {};

using LossSpec = std::variant<CrossEntropyLoss, TokenObjectiveLoss, SquaredNormLoss>;

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

namespace detail {

template <typename Scalar, typename P>
LossAndGrad token_objective_grad(const Architecture& arch, std::span<const P> params,
                                 const std::vector<LabeledTokens>& batch, double tau,
                                 const std::function<double(std::size_t, std::span<const double>, std::span<double>)>& fn) {
  using Mat = typename Network<Scalar>::Mat;
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  const Network<Scalar> net(arch, params);
  const int V = arch.config().vocab_size;
  LossAndGrad out;
  out.grad.assign(params.size(), 0.0);
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> g(params.size());
  std::vector<double> row(static_cast<std::size_t>(V)), lp(static_cast<std::size_t>(V));
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& item = batch[s];
    const auto tr = net.forward(item.label, *item.tokens);
    const auto flat = item.tokens->flat();
    const int T = static_cast<int>(flat.size());
    std::vector<double> logp(flat.size()), dlogp(flat.size(), 0.0);
    std::vector<double> probs(static_cast<std::size_t>(T) * V);
    for (int t = 0; t < T; ++t) {
      for (int j = 0; j < V; ++j) row[static_cast<std::size_t>(j)] = static_cast<double>(tr.logits(t, j));
      log_softmax(row, tau, lp);
      logp[static_cast<std::size_t>(t)] = lp[static_cast<std::size_t>(flat[static_cast<std::size_t>(t)])];
      for (int j = 0; j < V; ++j) probs[static_cast<std::size_t>(t * V + j)] = std::exp(lp[static_cast<std::size_t>(j)]);
    }
    const double contrib = fn(s, logp, dlogp);
    if (!std::isfinite(contrib))
      throw NumericError("non-finite loss contribution from sequence " + std::to_string(s) +
                         " (label " + std::to_string(item.label) + ")");
    out.loss += contrib;
    // d logp_t / d z_tj = (onehot_j - p_tj) / tau
    Mat dlogits(T, V);
    bool any = false;
    for (int t = 0; t < T; ++t) {
      const double gt = dlogp[static_cast<std::size_t>(t)];
      any = any || gt != 0.0;
      for (int j = 0; j < V; ++j) {
        const double onehot = j == flat[static_cast<std::size_t>(t)] ? 1.0 : 0.0;
        dlogits(t, j) = static_cast<Scalar>(gt * (onehot - probs[static_cast<std::size_t>(t * V + j)]) / tau);
      }
    }
    if (!any) continue;
    std::fill(g.begin(), g.end(), Scalar(0));
    net.backward(tr, dlogits, g);
    for (std::size_t n = 0; n < g.size(); ++n) out.grad[n] += static_cast<double>(g[n]);
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

}  // namespace detail

/// Scalar loss and its exact gradient with respect to every parameter.
template <typename Scalar = float, typename T = float>
LossAndGrad loss_and_grad(const Architecture& arch, std::span<const T> params, const LossSpec& spec) {
  if (params.size() != arch.param_count()) throw InvalidArgument("parameter vector size does not match the architecture");
  if (const auto* ce = std::get_if<CrossEntropyLoss>(&spec)) {
    if (ce->batch.empty()) throw InvalidArgument("cross-entropy loss over an empty batch");
    double n_tok = 0.0;
    for (const auto& item : ce->batch) n_tok += item.tokens->size();
    const double inv = 1.0 / n_tok;
    return detail::token_objective_grad<Scalar>(
        arch, params, ce->batch, 1.0,
        [inv](std::size_t, std::span<const double> logp, std::span<double> dlogp) {
          double l = 0.0;
          for (std::size_t t = 0; t < logp.size(); ++t) {
            l -= logp[t] * inv;
            dlogp[t] = -inv;
          }
          return l;
        });
  }
  if (const auto* obj = std::get_if<TokenObjectiveLoss>(&spec)) {
    if (!obj->fn) throw InvalidArgument("token objective without a loss function");
    return detail::token_objective_grad<Scalar>(arch, params, obj->batch, obj->tau, obj->fn);
  }
  LossAndGrad out;
  out.grad.resize(params.size());
  for (std::size_t n = 0; n < params.size(); ++n) {
    const double v = static_cast<double>(params[n]);
    out.loss += v * v;
    out.grad[n] = 2.0 * v;
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite squared-norm loss");
  return out;
}

template <typename Scalar = float>
LossAndGrad loss_and_grad(const Architecture& arch, const PolicyParams& params, const LossSpec& spec) {
  arch.check_params(params);
  return loss_and_grad<Scalar, float>(arch, std::span<const float>(params.values), spec);
}

}  // namespace scalegrpo
