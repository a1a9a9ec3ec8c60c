#include <algorithm>

#include "cappa/errors.hpp"
#include "cappa/evalsuite.hpp"
#include "cappa/objective.hpp"

namespace cappa::eval {
namespace {

constexpr std::size_t kChunk = 64;

// Runs `fn` on consecutive image chunks and concatenates the row blocks.
template <typename Fn>
Tensor chunked(const Tensor& images, Fn fn) {
  if (images.dim() != 4) throw ShapeError("features: expected [K,3,R,R], got " + shape_string(images.shape()));
  NoGradScope<float> guard;
  const auto K = images.size(0), per = images.numel() / std::max<std::size_t>(K, 1);
  std::vector<float> out;
  Shape row_shape;
  for (std::size_t s = 0; s < K; s += kChunk) {
    const auto n = std::min(kChunk, K - s);
    Shape cs = images.shape();
    cs[0] = n;
    Tensor chunk(cs, std::vector<float>(images.data().begin() + static_cast<std::ptrdiff_t>(s * per),
                                        images.data().begin() + static_cast<std::ptrdiff_t>((s + n) * per)));
    const auto r = fn(chunk);
    row_shape.assign(r.shape().begin() + 1, r.shape().end());
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  Shape shape{K};
  shape.insert(shape.end(), row_shape.begin(), row_shape.end());
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace

std::string_view feature_mode_name(FeatureMode m) { return m == FeatureMode::kGap ? "gap" : "prelogits"; }

std::optional<FeatureMode> parse_feature_mode(std::string_view name) {
  if (name == "gap") return FeatureMode::kGap;
  if (name == "prelogits") return FeatureMode::kPrelogits;
  return std::nullopt;
}

Tensor extract_sequences(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& images) {
  return chunked(images, [&](const Tensor& c) { return model::encode_images(cfg, params, c); });
}

Tensor extract_features(const model::ModelConfig& cfg, const model::ParamStore& params, const Tensor& images,
                        FeatureMode mode) {
  if (mode == FeatureMode::kPrelogits && cfg.objective != model::Objective::kClip) {
    throw ConfigError("prelogits features exist only for the contrastive objective; use gap");
  }
  return chunked(images, [&](const Tensor& c) {
    const auto enc = model::encode_images(cfg, params, c);
    return mode == FeatureMode::kGap ? model::pool_gap(enc) : model::image_embedding(cfg, params, enc);
  });
}

Tensor images_of(std::span<const data::Example> examples) {
  std::vector<Tensor> imgs;
  imgs.reserve(examples.size());
  for (const auto& e : examples) imgs.push_back(e.image);
  return objective::stack_images(imgs);
}

std::vector<int> first_object_labels(std::span<const data::Example> examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    if (e.scene.objects.empty()) throw ShapeError("labels: example without objects");
    out.push_back(data::class_label(e.scene.objects.front()));
  }
  return out;
}

}  // namespace cappa::eval
