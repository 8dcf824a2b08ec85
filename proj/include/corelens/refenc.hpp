#pragma once

// A small deterministic text encoder used as a frozen, differentiable
// stand-in for a CLIP-style text tower.
//
//   ids --token table--> E (L x 32)
//   h = E + positional
//   2 pre-norm blocks: h += Attn(LN(h)) (single head, causal), h += MLP(LN(h)) (tanh)
//   v_eot = W_out * LN(h)[eot_index]
//
// encode_backward returns the exact gradient of v_eot (contracted with an
// upstream gradient) with respect to E. Weights never receive gradients.

#include <Eigen/Dense>

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corelens/error.hpp"
#include "corelens/rng.hpp"
#include "json.hpp"

namespace corelens::refenc {

inline constexpr int kVocab = 40;
inline constexpr int kContext = 16;
inline constexpr int kWidth = 32;
inline constexpr int kHidden = 64;
inline constexpr int kBlocks = 2;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

inline constexpr int kPad = 0;
inline constexpr int kSot = 1;
inline constexpr int kEot = 2;
inline constexpr int kFirstLetter = 3;
inline constexpr int kSpace = 29;
inline constexpr int kFirstDigit = 30;

using TokenIds = std::array<int, kContext>;

// ---------------------------------------------------------------------------
// Tokenizer: one id per character.

inline int char_to_id(char ch) {
  const auto c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (c >= 'a' && c <= 'z') return kFirstLetter + (c - 'a');
  if (c >= '0' && c <= '9') return kFirstDigit + (c - '0');
  if (c == ' ') return kSpace;
  return -1;
}

/// [sot, chars..., eot, pad...], always kContext long.
inline TokenIds tokenize(std::string_view text) {
  // Multi-byte UTF-8 is rejected byte-wise by char_to_id.
  require(text.size() <= static_cast<std::size_t>(kContext - 2), ErrorKind::Data,
          "text of " + std::to_string(text.size()) + " characters exceeds " + std::to_string(kContext - 2));
  TokenIds ids{};
  ids.fill(kPad);
  ids[0] = kSot;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int id = char_to_id(text[i]);
    require(id >= 0, ErrorKind::Data, "unmappable character at position " + std::to_string(i), i);
    ids[i + 1] = id;
  }
  ids[text.size() + 1] = kEot;
  return ids;
}

/// Position of the first eot token, or -1.
inline int eot_position(std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kEot) return static_cast<int>(i);
  }
  return -1;
}

/// Characters from the first sot up to the next eot; pad/sot render empty.
inline std::string detokenize(std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < kVocab, ErrorKind::Data, "token id " + std::to_string(ids[i]) + " out of range", i);
  }
  std::size_t start = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kSot) {
      start = i + 1;
      break;
    }
  }
  std::string out;
  for (std::size_t i = start; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id == kEot) break;
    if (id == kPad || id == kSot) continue;
    if (id == kSpace) {
      out.push_back(' ');
    } else if (id >= kFirstDigit) {
      out.push_back(static_cast<char>('0' + (id - kFirstDigit)));
    } else {
      out.push_back(static_cast<char>('a' + (id - kFirstLetter)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weights

struct LayerNormParams {
  Eigen::RowVectorXd gamma = Eigen::RowVectorXd::Ones(kWidth);
  Eigen::RowVectorXd beta = Eigen::RowVectorXd::Zero(kWidth);

  bool operator==(const LayerNormParams&) const = default;
};

/// Matrices act on row vectors: y = x W.
struct BlockWeights {
  LayerNormParams ln_attn;
  Eigen::MatrixXd w_q, w_k, w_v, w_o;  // 32 x 32
  LayerNormParams ln_mlp;
  Eigen::MatrixXd w_1;  // 32 x 64
  Eigen::RowVectorXd b_1 = Eigen::RowVectorXd::Zero(kHidden);
  Eigen::MatrixXd w_2;  // 64 x 32
  Eigen::RowVectorXd b_2 = Eigen::RowVectorXd::Zero(kWidth);

  bool operator==(const BlockWeights&) const = default;
};

struct EncoderWeights {
  std::uint64_t seed = 0;
  Eigen::MatrixXd token_table;  // 40 x 32
  Eigen::MatrixXd positional;   // 16 x 32
  std::array<BlockWeights, kBlocks> blocks;
  LayerNormParams ln_final;
  Eigen::MatrixXd w_out;  // 32 x 32, v_eot = w_out * column

  bool operator==(const EncoderWeights&) const = default;
};

namespace detail {

inline Eigen::MatrixXd gaussian(Rng& rng, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = kInitStd * rng.normal();
  }
  return m;
}

}  // namespace detail

/// All matrices N(0, 0.02^2) in a fixed draw order; gammas 1, betas and biases 0.
inline EncoderWeights init_encoder(std::uint64_t seed) {
  Rng rng(seed);
  EncoderWeights w;
  w.seed = seed;
  w.token_table = detail::gaussian(rng, kVocab, kWidth);
  w.positional = detail::gaussian(rng, kContext, kWidth);
  for (auto& b : w.blocks) {
    b.w_q = detail::gaussian(rng, kWidth, kWidth);
    b.w_k = detail::gaussian(rng, kWidth, kWidth);
    b.w_v = detail::gaussian(rng, kWidth, kWidth);
    b.w_o = detail::gaussian(rng, kWidth, kWidth);
    b.w_1 = detail::gaussian(rng, kWidth, kHidden);
    b.w_2 = detail::gaussian(rng, kHidden, kWidth);
  }
  w.w_out = detail::gaussian(rng, kWidth, kWidth);
  return w;
}

inline Eigen::MatrixXd embed_tokens(const EncoderWeights& w, std::span<const int> ids) {
  Eigen::MatrixXd e(static_cast<Eigen::Index>(ids.size()), kWidth);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < kVocab, ErrorKind::Data, "token id " + std::to_string(ids[i]) + " out of range", i);
    e.row(static_cast<Eigen::Index>(i)) = w.token_table.row(ids[i]);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerNormCache {
  Eigen::MatrixXd xhat;  // normalized rows, before gamma/beta
  Eigen::VectorXd rstd;
};

struct BlockCache {
  LayerNormCache ln_attn;
  Eigen::MatrixXd q, k, v;
  Eigen::MatrixXd attn;  // row-stochastic, zero above the diagonal
  LayerNormCache ln_mlp;
  Eigen::MatrixXd tanh_out;  // L x 64
};

struct ForwardCache {
  int eot_index = 0;
  std::array<BlockCache, kBlocks> blocks;
  LayerNormCache ln_final;
};

struct EncodeOutput {
  Eigen::VectorXd v_eot;
  int eot_index = 0;
  ForwardCache cache;
};

namespace detail {

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const LayerNormParams& p, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const auto width = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / width;
    const Eigen::RowVectorXd centered = x.row(i).array() - mean;
    const double var = centered.squaredNorm() / width;
    cache.rstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.xhat.row(i) = centered * cache.rstd[i];
  }
  Eigen::MatrixXd y = cache.xhat.array().rowwise() * p.gamma.array();
  y.rowwise() += p.beta;
  return y;
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LayerNormParams& p,
                                           const LayerNormCache& cache) {
  const auto width = static_cast<double>(dy.cols());
  const Eigen::MatrixXd dxhat = dy.array().rowwise() * p.gamma.array();
  Eigen::MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_d = dxhat.row(i).sum() / width;
    const double mean_dx = dxhat.row(i).dot(cache.xhat.row(i)) / width;
    dx.row(i) = cache.rstd[i] * (dxhat.row(i).array() - mean_d - cache.xhat.row(i).array() * mean_dx);
  }
  return dx;
}

inline Eigen::MatrixXd block_forward(const Eigen::MatrixXd& x, const BlockWeights& w, BlockCache& c) {
  const Eigen::Index n = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(kWidth));
  const Eigen::MatrixXd a = layer_norm(x, w.ln_attn, c.ln_attn);
  c.q = a * w.w_q;
  c.k = a * w.w_k;
  c.v = a * w.w_v;
  c.attn = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd s = (c.q.row(i) * c.k.topRows(i + 1).transpose()) * scale;
    s.array() = (s.array() - s.maxCoeff()).exp();
    c.attn.row(i).head(i + 1) = s / s.sum();
  }
  const Eigen::MatrixXd h1 = x + (c.attn * c.v) * w.w_o;
  const Eigen::MatrixXd m = layer_norm(h1, w.ln_mlp, c.ln_mlp);
  Eigen::MatrixXd z = m * w.w_1;
  z.rowwise() += w.b_1;
  c.tanh_out = z.array().tanh();
  Eigen::MatrixXd out = c.tanh_out * w.w_2;
  out.rowwise() += w.b_2;
  return h1 + out;
}

inline Eigen::MatrixXd block_backward(const Eigen::MatrixXd& dout, const BlockWeights& w, const BlockCache& c) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(kWidth));
  // MLP branch
  const Eigen::MatrixXd dt = dout * w.w_2.transpose();
  const Eigen::MatrixXd dz = dt.array() * (1.0 - c.tanh_out.array().square());
  Eigen::MatrixXd dh1 = dout + layer_norm_backward(dz * w.w_1.transpose(), w.ln_mlp, c.ln_mlp);
  // Attention branch
  const Eigen::MatrixXd dctx = dh1 * w.w_o.transpose();
  const Eigen::MatrixXd dattn = dctx * c.v.transpose();
  const Eigen::MatrixXd dv = c.attn.transpose() * dctx;
  Eigen::MatrixXd dscore = Eigen::MatrixXd::Zero(c.attn.rows(), c.attn.cols());
  for (Eigen::Index i = 0; i < c.attn.rows(); ++i) {
    const double inner = c.attn.row(i).dot(dattn.row(i));
    dscore.row(i) = c.attn.row(i).array() * (dattn.row(i).array() - inner);
  }
  dscore *= scale;
  const Eigen::MatrixXd dq = dscore * c.k;
  const Eigen::MatrixXd dk = dscore.transpose() * c.q;
  const Eigen::MatrixXd da = dq * w.w_q.transpose() + dk * w.w_k.transpose() + dv * w.w_v.transpose();
  return dh1 + layer_norm_backward(da, w.ln_attn, c.ln_attn);
}

}  // namespace detail

inline EncodeOutput encode_forward(const EncoderWeights& w, const Eigen::MatrixXd& e, int eot_index) {
  require(e.rows() == kContext && e.cols() == kWidth, ErrorKind::Dimension,
          "token embedding matrix must be " + std::to_string(kContext) + " x " + std::to_string(kWidth));
  require(eot_index >= 0 && eot_index < kContext, ErrorKind::Data,
          "eot_index " + std::to_string(eot_index) + " outside [0, " + std::to_string(kContext) + ")");
  EncodeOutput out;
  out.eot_index = eot_index;
  out.cache.eot_index = eot_index;
  Eigen::MatrixXd h = e + w.positional;
  for (int b = 0; b < kBlocks; ++b) h = detail::block_forward(h, w.blocks[b], out.cache.blocks[b]);
  const Eigen::MatrixXd f = detail::layer_norm(h, w.ln_final, out.cache.ln_final);
  out.v_eot = w.w_out * f.row(eot_index).transpose();
  return out;
}

/// Gradient with respect to E of <grad_v_eot, v_eot>.
inline Eigen::MatrixXd encode_backward(const EncoderWeights& w, const ForwardCache& cache,
                                       const Eigen::VectorXd& grad_v_eot) {
  require(grad_v_eot.size() == kWidth, ErrorKind::Dimension, "upstream gradient must have the output width");
  require(cache.ln_final.xhat.rows() == kContext && cache.eot_index >= 0 && cache.eot_index < kContext,
          ErrorKind::Consistency, "cache does not come from encode_forward");
  Eigen::MatrixXd df = Eigen::MatrixXd::Zero(kContext, kWidth);
  df.row(cache.eot_index) = (w.w_out.transpose() * grad_v_eot).transpose();
  Eigen::MatrixXd dh = detail::layer_norm_backward(df, w.ln_final, cache.ln_final);
  for (int b = kBlocks - 1; b >= 0; --b) dh = detail::block_backward(dh, w.blocks[b], cache.blocks[b]);
  return dh;
}

inline Eigen::VectorXd encode_text(const EncoderWeights& w, std::string_view text) {
  const auto ids = tokenize(text);
  return encode_forward(w, embed_tokens(w, ids), eot_position(ids)).v_eot;
}

// ---------------------------------------------------------------------------
// Serialization: seed and shape suffice to rebuild; the full dump is for
// debugging.

inline nlohmann::json to_json(const EncoderWeights& w, bool full_dump = false) {
  nlohmann::json j = {{"seed", w.seed},
                      {"vocab", kVocab},
                      {"context_length", kContext},
                      {"width", kWidth},
                      {"hidden", kHidden},
                      {"blocks", kBlocks}};
  if (full_dump) {
    auto mat = [](const Eigen::MatrixXd& m) {
      std::vector<std::vector<double>> rows(static_cast<std::size_t>(m.rows()));
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index k = 0; k < m.cols(); ++k) rows[static_cast<std::size_t>(i)].push_back(m(i, k));
      }
      return rows;
    };
    j["token_table"] = mat(w.token_table);
    j["positional"] = mat(w.positional);
    j["w_out"] = mat(w.w_out);
    for (const auto& b : w.blocks) {
      j["block_weights"].push_back({{"w_q", mat(b.w_q)},
                                    {"w_k", mat(b.w_k)},
                                    {"w_v", mat(b.w_v)},
                                    {"w_o", mat(b.w_o)},
                                    {"w_1", mat(b.w_1)},
                                    {"w_2", mat(b.w_2)}});
    }
  }
  return j;
}

inline EncoderWeights encoder_from_json(const nlohmann::json& j) {
  try {
    require(j.at("vocab").get<int>() == kVocab && j.at("context_length").get<int>() == kContext &&
                j.at("width").get<int>() == kWidth && j.at("hidden").get<int>() == kHidden &&
                j.at("blocks").get<int>() == kBlocks,
            ErrorKind::Consistency, "encoder JSON describes a different architecture");
    return init_encoder(j.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("encoder JSON: ") + e.what());
  }
}

}  // namespace corelens::refenc
