#include <cmath>

#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"

namespace cappa::eval {
namespace {

std::vector<double> normalized_rows(const Tensor& x) {
  const auto K = x.size(0), D = x.size(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < K; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < D; ++d) s += out[i * D + d] * out[i * D + d];
    const double inv = 1.0 / std::sqrt(s + 1e-12);
    for (std::size_t d = 0; d < D; ++d) out[i * D + d] *= inv;
  }
  return out;
}

}  // namespace

RetrievalResult retrieval_eval(const Tensor& image_emb, const Tensor& text_emb) {
  if (image_emb.dim() != 2 || text_emb.dim() != 2 || image_emb.size(1) != text_emb.size(1)) {
    throw ShapeError("retrieval: embeddings must be [K,D] with equal D");
  }
  if (image_emb.size(0) != text_emb.size(0)) {
    throw ShapeError("retrieval: " + std::to_string(image_emb.size(0)) + " images but " +
                     std::to_string(text_emb.size(0)) + " texts");
  }
  const auto K = image_emb.size(0), D = image_emb.size(1);
  if (K == 0) throw ShapeError("retrieval: no pairs");
  const auto a = normalized_rows(image_emb);
  const auto b = normalized_rows(text_emb);
  std::vector<double> sim(K * K, 0.0);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < D; ++d) s += a[i * D + d] * b[j * D + d];
      sim[i * K + j] = s;
    }
  std::size_t i2t = 0, t2i = 0;
  for (std::size_t i = 0; i < K; ++i) {
    bool row_ok = true, col_ok = true;
    for (std::size_t j = 0; j < K; ++j) {
      if (j == i) continue;
      row_ok = row_ok && sim[i * K + i] > sim[i * K + j];
      col_ok = col_ok && sim[i * K + i] > sim[j * K + i];
    }
    i2t += row_ok ? 1 : 0;
    t2i += col_ok ? 1 : 0;
  }
  return {static_cast<double>(i2t) / static_cast<double>(K), static_cast<double>(t2i) / static_cast<double>(K)};
}

}  // namespace cappa::eval
