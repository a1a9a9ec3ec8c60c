#pragma once

// Plain-loop double-precision forward pass of the captioner, written without
// the tensor library, used as an independent reference.

#include <cmath>
#include <string>
#include <vector>

#include "cappa/model.hpp"

namespace cappa::testing {

using Mat = std::vector<std::vector<double>>;  // rows

inline Mat to_mat(const Tensor& t) {
  const auto r = t.size(0), c = t.size(1);
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
  return m;
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat add_row(Mat a, const std::vector<double>& r) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += r[j];
  return a;
}

class ScalarCaptioner {
 public:
  ScalarCaptioner(const model::ModelConfig& cfg, const model::ParamStore& p) : cfg_(cfg), p_(p) {}

  /// Encoder output after the final norm, [M][D].
  Mat encode(const Tensor& image) const {
    const auto patches = to_mat(model::patchify(image, cfg_.patch_size));
    auto x = add(add_row(matmul(patches, W("enc.patch.w")), V("enc.patch.b")), W("enc.pos"));
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
      const auto blk = "enc.block" + std::to_string(l);
      auto h = norm(blk + ".ln1", x);
      x = add(x, attend(blk + ".attn", h, h, false));
      x = add(x, mlp(blk + ".mlp", norm(blk + ".ln2", x)));
    }
    return norm("enc.ln", x);
  }

  /// Logits [L][V] for decoder inputs `ids`.
  Mat decode(const Mat& enc, const std::vector<std::int32_t>& ids, bool causal) const {
    const auto E = W("dec.embed"), P = W("dec.pos");
    Mat x;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::vector<double> row(cfg_.width);
      for (std::size_t d = 0; d < cfg_.width; ++d) row[d] = E[static_cast<std::size_t>(ids[i])][d] + P[i][d];
      x.push_back(row);
    }
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      const auto blk = "dec.block" + std::to_string(l);
      auto h = norm(blk + ".ln1", x);
      x = add(x, attend(blk + ".self", h, h, causal));
      h = norm(blk + ".ln2", x);
      x = add(x, attend(blk + ".xattn", h, enc, false));
      x = add(x, mlp(blk + ".mlp", norm(blk + ".ln3", x)));
    }
    x = norm("dec.ln", x);
    Mat head;
    if (cfg_.share_dec_embeddings) {
      head.assign(cfg_.width, std::vector<double>(cfg_.vocab));
      for (std::size_t v = 0; v < cfg_.vocab; ++v)
        for (std::size_t d = 0; d < cfg_.width; ++d) head[d][v] = E[v][d];
    } else {
      head = W("dec.head.w");
    }
    auto logits = matmul(x, head);
    if (p_.contains("dec.head.b")) logits = add_row(logits, V("dec.head.b"));
    return logits;
  }

  static std::vector<double> log_softmax(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double s = 0;
    for (double v : z) s += std::exp(v - m);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - m - std::log(s);
    return out;
  }

 private:
  Mat W(const std::string& name) const { return to_mat(p_.get(name)); }
  std::vector<double> V(const std::string& name) const { return to_vec(p_.get(name)); }
  bool has(const std::string& name) const { return p_.contains(name); }

  Mat linear(const std::string& prefix, const Mat& x) const {
    auto y = matmul(x, W(prefix + ".w"));
    if (has(prefix + ".b")) y = add_row(y, V(prefix + ".b"));
    return y;
  }

  Mat norm(const std::string& prefix, const Mat& x) const {
    const auto g = V(prefix + ".scale");
    const bool bias = has(prefix + ".bias");
    const auto b = bias ? V(prefix + ".bias") : std::vector<double>{};
    Mat out = x;
    for (auto& row : out) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j) {
        row[j] = (row[j] - mean) / std::sqrt(var + 1e-6) * g[j] + (bias ? b[j] : 0.0);
      }
    }
    return out;
  }

  Mat mlp(const std::string& prefix, const Mat& x) const {
    auto h = linear(prefix + ".fc1", x);
    for (auto& row : h)
      for (auto& v : row) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    return linear(prefix + ".fc2", h);
  }

  Mat attend(const std::string& prefix, const Mat& xq, const Mat& xkv, bool causal) const {
    const auto q = linear(prefix + ".q", xq), k = linear(prefix + ".k", xkv), v = linear(prefix + ".v", xkv);
    const std::size_t H = cfg_.heads, dh = cfg_.width / H;
    Mat o(xq.size(), std::vector<double>(cfg_.width, 0.0));
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < xq.size(); ++i) {
        std::vector<double> s(xkv.size());
        for (std::size_t j = 0; j < xkv.size(); ++j) {
          double dot = 0;
          for (std::size_t d = 0; d < dh; ++d) dot += q[i][h * dh + d] * k[j][h * dh + d];
          s[j] = dot / std::sqrt(static_cast<double>(dh)) + (causal && j > i ? -1e9 : 0.0);
        }
        const auto ls = log_softmax(s);
        for (std::size_t j = 0; j < xkv.size(); ++j)
          for (std::size_t d = 0; d < dh; ++d) o[i][h * dh + d] += std::exp(ls[j]) * v[j][h * dh + d];
      }
    return linear(prefix + ".o", o);
  }

  model::ModelConfig cfg_;
  const model::ParamStore& p_;
};

}  // namespace cappa::testing
