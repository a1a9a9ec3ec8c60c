#include <algorithm>

#include "cappa/errors.hpp"
#include "cappa/model.hpp"

namespace cappa::model {
namespace {

template <typename T>
struct AttnWeights {
  BasicTensor<T> wq, wk, wv, wo;
  BasicTensor<T> bq, bk, bv, bo;  // undefined when bias-free
};

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b = {}) {
  auto y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t heads) {
  const auto B = x.size(0), N = x.size(1), D = x.size(2);
  return transpose(reshape(x, {B, N, heads, D / heads}), 1, 2);
}

template <typename T>
BasicTensor<T> mha(const BasicTensor<T>& xq, const BasicTensor<T>& xkv, const AttnWeights<T>& w, std::size_t heads,
                   const BasicTensor<T>& mask) {
  if (xq.dim() != 3 || xkv.dim() != 3 || xq.size(0) != xkv.size(0) || xq.size(2) != xkv.size(2)) {
    throw ShapeError("multihead attention: incompatible inputs " + shape_string(xq.shape()) + " and " +
                     shape_string(xkv.shape()));
  }
  const auto B = xq.size(0), N = xq.size(1), D = xq.size(2);
  if (heads == 0 || D % heads != 0) throw ShapeError("multihead attention: width not divisible by heads");
  auto q = split_heads(linear(xq, w.wq, w.bq), heads);
  auto k = split_heads(linear(xkv, w.wk, w.bk), heads);
  auto v = split_heads(linear(xkv, w.wv, w.bv), heads);
  auto o = attention(q, k, v, mask);
  auto merged = reshape(transpose(o, 1, 2), {B, N, D});
  return linear(merged, w.wo, w.bo);
}

AttnWeights<float> attn_weights(const ParamStore& p, const std::string& prefix) {
  AttnWeights<float> w;
  w.wq = p.get(prefix + ".q.w");
  w.wk = p.get(prefix + ".k.w");
  w.wv = p.get(prefix + ".v.w");
  w.wo = p.get(prefix + ".o.w");
  w.bq = p.find(prefix + ".q.b");
  w.bk = p.find(prefix + ".k.b");
  w.bv = p.find(prefix + ".v.b");
  w.bo = p.find(prefix + ".o.b");
  return w;
}

Tensor norm(const ParamStore& p, const std::string& prefix, const Tensor& x) {
  auto y = layer_norm(x, p.get(prefix + ".scale"));
  if (auto b = p.find(prefix + ".bias"); b.defined()) y = add(y, b);
  return y;
}

Tensor mlp(const ParamStore& p, const std::string& prefix, const Tensor& x) {
  auto h = gelu(linear(x, p.get(prefix + ".fc1.w"), p.find(prefix + ".fc1.b")));
  return linear(h, p.get(prefix + ".fc2.w"), p.find(prefix + ".fc2.b"));
}

// Pre-norm encoder block: x + attn(ln(x)), then x + mlp(ln(x)).
Tensor encoder_block(const ParamStore& p, const std::string& blk, std::size_t heads, const Tensor& x,
                     const Tensor& mask) {
  auto h = norm(p, blk + ".ln1", x);
  auto y = add(x, mha(h, h, attn_weights(p, blk + ".attn"), heads, mask));
  return add(y, mlp(p, blk + ".mlp", norm(p, blk + ".ln2", y)));
}

Tensor decoder_block(const ParamStore& p, const std::string& blk, std::size_t heads, const Tensor& x,
                     const Tensor& enc, const Tensor& self_mask) {
  auto h = norm(p, blk + ".ln1", x);
  auto y = add(x, mha(h, h, attn_weights(p, blk + ".self"), heads, self_mask));
  h = norm(p, blk + ".ln2", y);
  y = add(y, mha(h, enc, attn_weights(p, blk + ".xattn"), heads, Tensor{}));
  return add(y, mlp(p, blk + ".mlp", norm(p, blk + ".ln3", y)));
}

void check_image(const ModelConfig& cfg, const Shape& s, std::size_t offset) {
  if (s.size() != offset + 3 || s[offset] != 3 || s[offset + 1] != cfg.image_res || s[offset + 2] != cfg.image_res) {
    throw ShapeError("image shape " + shape_string(s) + " does not match resolution " +
                     std::to_string(cfg.image_res));
  }
}

void patchify_into(std::span<const float> img, std::size_t R, std::size_t p, std::span<float> out) {
  const std::size_t G = R / p, P = 3 * p * p;
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx) {
      float* row = out.data() + (gy * G + gx) * P;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            *row++ = img[(c * R + gy * p + dy) * R + gx * p + dx];
    }
}

}  // namespace

Tensor patchify(const Tensor& image, std::size_t patch) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] != s[2]) throw ShapeError("patchify: expected [3,R,R], got " + shape_string(s));
  if (patch == 0 || s[1] % patch != 0) {
    throw ShapeError("patchify: resolution " + std::to_string(s[1]) + " not divisible by patch " + std::to_string(patch));
  }
  const auto R = s[1], G = R / patch;
  std::vector<float> out(image.numel());
  patchify_into(image.data(), R, patch, out);
  return Tensor({G * G, 3 * patch * patch}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t patch, std::size_t resolution) {
  if (patch == 0 || resolution % patch != 0) throw ShapeError("unpatchify: resolution not divisible by patch");
  const auto G = resolution / patch, P = 3 * patch * patch;
  if (patches.shape() != Shape{G * G, P}) {
    throw ShapeError("unpatchify: expected [" + std::to_string(G * G) + "," + std::to_string(P) + "], got " +
                     shape_string(patches.shape()));
  }
  std::vector<float> img(3 * resolution * resolution);
  const auto src = patches.data();
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx) {
      const float* row = src.data() + (gy * G + gx) * P;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            img[(c * resolution + gy * patch + dy) * resolution + gx * patch + dx] = *row++;
    }
  return Tensor({3, resolution, resolution}, std::move(img));
}

Tensor patchify_batch(const Tensor& images, std::size_t patch) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3]) {
    throw ShapeError("patchify: expected [B,3,R,R], got " + shape_string(s));
  }
  if (patch == 0 || s[2] % patch != 0) throw ShapeError("patchify: resolution not divisible by patch");
  const auto B = s[0], R = s[2], G = R / patch, per = 3 * R * R;
  std::vector<float> out(images.numel());
  const auto src = images.data();
  for (std::size_t b = 0; b < B; ++b) {
    patchify_into(src.subspan(b * per, per), R, patch, std::span<float>(out).subspan(b * per, per));
  }
  return Tensor({B, G * G, 3 * patch * patch}, std::move(out));
}

Tensor encode_images(const ModelConfig& cfg, const ParamStore& params, const Tensor& images) {
  check_image(cfg, images.shape(), 1);
  auto x = linear(patchify_batch(images, cfg.patch_size), params.get("enc.patch.w"), params.get("enc.patch.b"));
  x = add(x, params.get("enc.pos"));
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    x = encoder_block(params, "enc.block" + std::to_string(i), cfg.heads, x, Tensor{});
  }
  return norm(params, "enc.ln", x);
}

EncoderOut encode_image(const ModelConfig& cfg, const ParamStore& params, const Tensor& image) {
  check_image(cfg, image.shape(), 0);
  Tensor batch({1, 3, cfg.image_res, cfg.image_res}, std::vector<float>(image.data().begin(), image.data().end()));
  auto seq = encode_images(cfg, params, batch);
  return EncoderOut{reshape(seq, {cfg.num_patches(), cfg.width})};
}

Tensor self_attention_mask(std::span<const DecodeMode> modes, std::size_t length) {
  const bool any_causal = std::any_of(modes.begin(), modes.end(), [](DecodeMode m) { return m == DecodeMode::kCausal; });
  const bool any_parallel =
      std::any_of(modes.begin(), modes.end(), [](DecodeMode m) { return m == DecodeMode::kParallel; });
  if (!any_causal) return {};
  const auto L = length;
  std::vector<float> tri(L * L, 0.0f);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = i + 1; j < L; ++j) tri[i * L + j] = static_cast<float>(kMaskedOut);
  if (!any_parallel) return Tensor({L, L}, std::move(tri));
  std::vector<float> m(modes.size() * L * L, 0.0f);
  for (std::size_t b = 0; b < modes.size(); ++b) {
    if (modes[b] == DecodeMode::kCausal) std::copy(tri.begin(), tri.end(), m.begin() + static_cast<std::ptrdiff_t>(b * L * L));
  }
  return Tensor({modes.size(), L, L}, std::move(m));
}

Tensor decode_batch(const ModelConfig& cfg, const ParamStore& params, const Tensor& enc,
                    std::span<const std::int32_t> ids, std::size_t length, const Tensor& self_mask) {
  if (length == 0 || length > cfg.max_len || ids.size() % length != 0) {
    throw ShapeError("decode: sequence length " + std::to_string(length) + " invalid for max_len " +
                     std::to_string(cfg.max_len));
  }
  const auto B = ids.size() / length;
  if (enc.dim() != 3 || enc.size(0) != B || enc.size(2) != cfg.width) {
    throw ShapeError("decode: encoder output " + shape_string(enc.shape()) + " does not match batch " +
                     std::to_string(B));
  }
  const auto& embed = params.get("dec.embed");
  auto x = add(embedding(embed, ids, {B, length}), slice(params.get("dec.pos"), 0, 0, length));
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    x = decoder_block(params, "dec.block" + std::to_string(i), cfg.heads, x, enc, self_mask);
  }
  x = norm(params, "dec.ln", x);
  const auto head = cfg.share_dec_embeddings ? transpose(embed, 0, 1) : params.get("dec.head.w");
  return linear(x, head, params.find("dec.head.b"));
}

Tensor decode_text(const ModelConfig& cfg, const ParamStore& params, const EncoderOut& enc, const tok::TokenSeq& inputs,
                   DecodeMode mode) {
  const auto& s = enc.seq.shape();
  if (s.size() != 2 || s[1] != cfg.width) throw ShapeError("decode: encoder output must be [M,D], got " + shape_string(s));
  const auto L = inputs.size();
  const DecodeMode modes[] = {mode};
  auto logits = decode_batch(cfg, params, reshape(enc.seq, {1, s[0], s[1]}), inputs.ids, L,
                             self_attention_mask(modes, L));
  return reshape(logits, {L, cfg.vocab});
}

Tensor encode_text_tower(const ModelConfig& cfg, const ParamStore& params, std::span<const std::int32_t> ids,
                         std::span<const std::uint8_t> valid, std::size_t length, const std::string& prefix) {
  if (length == 0 || length > cfg.max_len || ids.size() % length != 0 || valid.size() != ids.size()) {
    throw ShapeError("text tower: inconsistent token batch");
  }
  const auto B = ids.size() / length, L = length;
  std::vector<float> key_mask(B * L * L, 0.0f);
  std::vector<float> pool(B * L, 0.0f);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < L; ++j) count += valid[b * L + j] ? 1 : 0;
    if (count == 0) throw ShapeError("text tower: sequence without valid tokens");
    for (std::size_t j = 0; j < L; ++j) {
      if (valid[b * L + j]) {
        pool[b * L + j] = 1.0f / static_cast<float>(count);
      } else {
        for (std::size_t i = 0; i < L; ++i) key_mask[(b * L + i) * L + j] = static_cast<float>(kMaskedOut);
      }
    }
  }
  Tensor mask({B, L, L}, std::move(key_mask));
  auto x = add(embedding(params.get(prefix + "embed"), ids, {B, L}), slice(params.get(prefix + "pos"), 0, 0, L));
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    x = encoder_block(params, prefix + "block" + std::to_string(i), cfg.heads, x, mask);
  }
  x = norm(params, prefix + "ln", x);
  auto pooled = reshape(matmul(Tensor({B, 1, L}, std::move(pool)), x), {B, cfg.width});
  return matmul(pooled, params.get(prefix + "proj.w"));
}

Tensor encode_text_tower(const ModelConfig& cfg, const ParamStore& params, const tok::TokenSeq& seq) {
  return reshape(encode_text_tower(cfg, params, seq.ids, seq.valid, seq.size()), {cfg.width});
}

Tensor image_embedding(const ModelConfig& cfg, const ParamStore& params, const Tensor& enc) {
  (void)cfg;
  return matmul(pool_gap(enc), params.get("img.proj.w"));
}

Tensor pool_gap(const Tensor& enc) {
  if (enc.dim() != 2 && enc.dim() != 3) throw ShapeError("pool_gap: expected [M,D] or [B,M,D]");
  return mean_axis(enc, -2);
}

MapHead<float> map_head_view(const ParamStore& store, const std::string& prefix, std::size_t heads) {
  MapHead<float> h;
  h.query = store.get(prefix + "query");
  h.wq = store.get(prefix + "attn.q.w");
  h.wk = store.get(prefix + "attn.k.w");
  h.wv = store.get(prefix + "attn.v.w");
  h.wo = store.get(prefix + "attn.o.w");
  h.proj = store.get(prefix + "proj.w");
  h.heads = heads;
  return h;
}

template <typename T>
BasicTensor<T> multihead_attention(const BasicTensor<T>& xq, const BasicTensor<T>& xkv, const BasicTensor<T>& wq,
                                   const BasicTensor<T>& wk, const BasicTensor<T>& wv, const BasicTensor<T>& wo,
                                   std::size_t heads, const BasicTensor<T>& mask) {
  return mha(xq, xkv, AttnWeights<T>{wq, wk, wv, wo, {}, {}, {}, {}}, heads, mask);
}

template <typename T>
BasicTensor<T> pool_map(const MapHead<T>& head, const BasicTensor<T>& enc) {
  const bool single = enc.dim() == 2;
  if (!single && enc.dim() != 3) throw ShapeError("pool_map: expected [M,D] or [B,M,D], got " + shape_string(enc.shape()));
  const auto D = enc.size(-1);
  if (head.query.shape() != Shape{1, D}) throw ShapeError("pool_map: query must be [1,D]");
  const auto seq = single ? reshape(enc, {1, enc.size(0), D}) : enc;
  const auto B = seq.size(0);
  const auto q1 = reshape(head.query, {1, 1, D});
  const auto q = B == 1 ? q1 : concat(std::vector<BasicTensor<T>>(B, q1), 0);
  auto pooled = reshape(multihead_attention(q, seq, head.wq, head.wk, head.wv, head.wo, head.heads, BasicTensor<T>{}),
                        {B, D});
  auto out = matmul(pooled, head.proj);
  return single ? reshape(out, {D}) : out;
}

template BasicTensor<float> multihead_attention(const Tensor&, const Tensor&, const Tensor&, const Tensor&,
                                                const Tensor&, const Tensor&, std::size_t, const Tensor&);
template BasicTensor<double> multihead_attention(const TensorD&, const TensorD&, const TensorD&, const TensorD&,
                                                 const TensorD&, const TensorD&, std::size_t, const TensorD&);
template BasicTensor<float> pool_map(const MapHead<float>&, const Tensor&);
template BasicTensor<double> pool_map(const MapHead<double>&, const TensorD&);

}  // namespace cappa::model
