#include "cappa/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "cappa/errors.hpp"
#include "cappa/rng.hpp"
#include "cappa/tok.hpp"

namespace cappa::data {
namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"circle", "square", "triangle", "cross"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<std::array<float, 3>, kNumColors> kColorRgb{{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
}};

int row_of(int cell) { return cell / 2; }
int col_of(int cell) { return cell % 2; }

// Portable draws: mt19937_64 output is fully specified, modulo keeps it so.
std::uint64_t draw_below(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

template <typename It>
void portable_shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1),
                                                        first + static_cast<std::ptrdiff_t>(draw_below(rng, i)));
}

struct Mention {
  Color color;
  ShapeKind shape;
  bool operator==(const Mention&) const = default;
};

struct ParsedCaption {
  std::vector<Mention> objects;
  std::vector<Relation> relations;  // relations[i] relates objects[i] to objects[i+1]
};

template <typename Array>
std::optional<std::size_t> index_in(const Array& names, std::string_view word) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == word) return i;
  return std::nullopt;
}

std::optional<ParsedCaption> parse_caption(std::string_view caption) {
  const auto words = tok::split_words(caption);
  ParsedCaption out;
  std::size_t i = 0;
  auto read_object = [&]() -> bool {
    if (i + 2 > words.size()) return false;
    const auto c = index_in(kColorNames, words[i]);
    const auto s = index_in(kShapeNames, words[i + 1]);
    if (!c || !s) return false;
    out.objects.push_back({static_cast<Color>(*c), static_cast<ShapeKind>(*s)});
    i += 2;
    return true;
  };
  if (!read_object()) return std::nullopt;
  while (i < words.size()) {
    Relation r;
    if (words[i] == "above") {
      r = Relation::kAbove;
      i += 1;
    } else if (words[i] == "below") {
      r = Relation::kBelow;
      i += 1;
    } else if ((words[i] == "left" || words[i] == "right") && i + 1 < words.size() && words[i + 1] == "of") {
      r = words[i] == "left" ? Relation::kLeftOf : Relation::kRightOf;
      i += 2;
    } else {
      return std::nullopt;
    }
    out.relations.push_back(r);
    if (!read_object()) return std::nullopt;
  }
  return out;
}

std::string render_caption(const ParsedCaption& p) {
  std::string out;
  for (std::size_t i = 0; i < p.objects.size(); ++i) {
    if (i) {
      out += ' ';
      out += relation_phrase(p.relations[i - 1]);
      out += ' ';
    }
    out += color_name(p.objects[i].color);
    out += ' ';
    out += shape_name(p.objects[i].shape);
  }
  return out;
}

// Shape coverage test in cell-local continuous coordinates.
bool covers(ShapeKind shape, double x, double y, double cell) {
  const double c = cell / 2.0;
  const double margin = cell / 8.0;
  const double half = c - margin;
  const double dx = x - c, dy = y - c;
  switch (shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= half * half;
    case ShapeKind::kSquare:
      return std::abs(dx) <= 0.75 * half && std::abs(dy) <= 0.75 * half;
    case ShapeKind::kTriangle: {
      if (y < margin || y > cell - margin) return false;
      const double t = (y - margin) / (cell - 2.0 * margin);
      return std::abs(dx) <= t * half;
    }
    case ShapeKind::kCross: {
      const double w = cell / 8.0;
      return (std::abs(dx) <= w && std::abs(dy) <= half) || (std::abs(dy) <= w && std::abs(dx) <= half);
    }
  }
  return false;
}

void paint(std::span<float> img, std::size_t R, const SceneObject& o) {
  const std::size_t cell = R / 2;
  const std::size_t oy = static_cast<std::size_t>(row_of(o.cell)) * cell;
  const std::size_t ox = static_cast<std::size_t>(col_of(o.cell)) * cell;
  const auto& rgb = kColorRgb[static_cast<std::size_t>(o.color)];
  for (std::size_t v = 0; v < cell; ++v)
    for (std::size_t u = 0; u < cell; ++u) {
      if (!covers(o.shape, static_cast<double>(u) + 0.5, static_cast<double>(v) + 0.5, static_cast<double>(cell))) {
        continue;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * R + oy + v) * R + ox + u] = rgb[ch];
    }
}

}  // namespace

bool operator==(const Example& a, const Example& b) {
  if (a.caption != b.caption || !(a.scene == b.scene)) return false;
  if (a.image.defined() != b.image.defined()) return false;
  if (!a.image.defined()) return true;
  if (a.image.shape() != b.image.shape()) return false;
  const auto x = a.image.data();
  const auto y = b.image.data();
  return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
}

std::string_view shape_name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

std::string_view relation_phrase(Relation r) {
  switch (r) {
    case Relation::kLeftOf:
      return "left of";
    case Relation::kRightOf:
      return "right of";
    case Relation::kAbove:
      return "above";
    case Relation::kBelow:
      return "below";
  }
  return "";
}

Relation opposite(Relation r) {
  switch (r) {
    case Relation::kLeftOf:
      return Relation::kRightOf;
    case Relation::kRightOf:
      return Relation::kLeftOf;
    case Relation::kAbove:
      return Relation::kBelow;
    case Relation::kBelow:
      return Relation::kAbove;
  }
  return r;
}

Relation describe_relation(const SceneObject& a, const SceneObject& b) {
  if (row_of(a.cell) != row_of(b.cell)) return row_of(a.cell) < row_of(b.cell) ? Relation::kAbove : Relation::kBelow;
  return col_of(a.cell) < col_of(b.cell) ? Relation::kLeftOf : Relation::kRightOf;
}

bool relation_holds(Relation r, const SceneObject& a, const SceneObject& b) {
  switch (r) {
    case Relation::kLeftOf:
      return col_of(a.cell) < col_of(b.cell);
    case Relation::kRightOf:
      return col_of(a.cell) > col_of(b.cell);
    case Relation::kAbove:
      return row_of(a.cell) < row_of(b.cell);
    case Relation::kBelow:
      return row_of(a.cell) > row_of(b.cell);
  }
  return false;
}

std::string object_phrase(const SceneObject& o) {
  return std::string(color_name(o.color)) + " " + std::string(shape_name(o.shape));
}

std::string caption_for(const Scene& scene) {
  ParsedCaption p;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    p.objects.push_back({scene.objects[i].color, scene.objects[i].shape});
    if (i) p.relations.push_back(describe_relation(scene.objects[i - 1], scene.objects[i]));
  }
  return render_caption(p);
}

int class_label(const SceneObject& o) {
  return static_cast<int>(o.color) * kNumShapes + static_cast<int>(o.shape);
}

std::string class_name(int label) {
  if (label < 0 || label >= kNumClasses) throw ConfigError("class label out of range: " + std::to_string(label));
  return std::string(kColorNames[static_cast<std::size_t>(label / kNumShapes)]) + " " +
         std::string(kShapeNames[static_cast<std::size_t>(label % kNumShapes)]);
}

std::string class_text(int label) { return std::string(kClassPrefix) + " " + class_name(label); }

std::optional<int> parse_class_text(std::string_view text) {
  const auto words = tok::split_words(text);
  if (words.size() != 3 || words[0] != kClassPrefix) return std::nullopt;
  const auto c = index_in(kColorNames, words[1]);
  const auto s = index_in(kShapeNames, words[2]);
  if (!c || !s) return std::nullopt;
  return static_cast<int>(*c) * kNumShapes + static_cast<int>(*s);
}

std::vector<std::string> grammar_terminals() {
  std::vector<std::string> out;
  for (auto c : kColorNames) out.emplace_back(c);
  for (auto s : kShapeNames) out.emplace_back(s);
  for (auto w : {"left", "right", "of", "above", "below"}) out.emplace_back(w);
  out.emplace_back(kClassPrefix);
  return out;
}

std::vector<std::string> grammar_corpus() {
  std::vector<std::string> corpus;
  for (int r = 0; r < 4; ++r) {
    corpus.push_back("red circle " + std::string(relation_phrase(static_cast<Relation>(r))) + " blue square");
  }
  for (int label = 0; label < kNumClasses; ++label) corpus.push_back(class_text(label));
  corpus.push_back("green triangle above yellow cross");
  return corpus;
}

Scene random_scene(std::uint64_t seed, std::uint64_t index, const GenOptions& options) {
  if (options.min_objects < 1 || options.max_objects > 3 || options.min_objects > options.max_objects) {
    throw ConfigError("random_scene: object count range must lie within [1,3]");
  }
  std::mt19937_64 rng(derive_seed(seed, {index}));
  const auto span = static_cast<std::uint64_t>(options.max_objects - options.min_objects + 1);
  const int count = options.min_objects + static_cast<int>(draw_below(rng, span));
  std::array<int, kGridCells> cells{0, 1, 2, 3};
  portable_shuffle(cells.begin(), cells.end(), rng);
  Scene scene;
  for (int i = 0; i < count; ++i) {
    const auto shape = static_cast<ShapeKind>(draw_below(rng, kNumShapes));
    const auto color = static_cast<Color>(draw_below(rng, kNumColors));
    scene.objects.push_back({shape, color, cells[static_cast<std::size_t>(i)]});
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

Tensor render(const Scene& scene, std::size_t resolution) {
  if (resolution < 2 || resolution % 2 != 0) throw ShapeError("render: resolution must be even");
  Tensor image = Tensor::full({3, resolution, resolution}, kBackground);
  for (const auto& o : scene.objects) paint(image.mutable_data(), resolution, o);
  return image;
}

Scene infer_scene(const Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3 || image.size(1) != image.size(2)) {
    throw ShapeError("infer_scene: image must be [3,R,R]");
  }
  const std::size_t R = image.size(1);
  const std::size_t cell = R / 2;
  const auto px = image.data();
  Scene scene;
  std::vector<float> tmpl(3 * R * R);
  for (int c = 0; c < kGridCells; ++c) {
    const std::size_t oy = static_cast<std::size_t>(row_of(c)) * cell;
    const std::size_t ox = static_cast<std::size_t>(col_of(c)) * cell;
    auto distance = [&](std::span<const float> t) {
      double d = 0;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t v = 0; v < cell; ++v)
          for (std::size_t u = 0; u < cell; ++u) {
            const auto idx = (ch * R + oy + v) * R + ox + u;
            const double e = static_cast<double>(px[idx]) - static_cast<double>(t[idx]);
            d += e * e;
          }
      return d;
    };
    std::fill(tmpl.begin(), tmpl.end(), kBackground);
    double best = distance(tmpl);
    std::optional<SceneObject> best_obj;
    for (int label = 0; label < kNumClasses; ++label) {
      SceneObject o{static_cast<ShapeKind>(label % kNumShapes), static_cast<Color>(label / kNumShapes), c};
      std::fill(tmpl.begin(), tmpl.end(), kBackground);
      paint(tmpl, R, o);
      const double d = distance(tmpl);
      if (d < best) {
        best = d;
        best_obj = o;
      }
    }
    if (best_obj) scene.objects.push_back(*best_obj);
  }
  return scene;
}

std::vector<Example> gen_dataset(std::size_t n, std::uint64_t seed, std::size_t resolution, const GenOptions& options) {
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Scene scene = random_scene(seed, i, options);
    Tensor image = render(scene, resolution);
    if (options.noise > 0.0) {
      std::mt19937_64 rng(derive_seed(seed, {i, 0x6e6f697365ULL}));
      for (auto& v : image.mutable_data()) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        v = static_cast<float>(std::clamp(v + options.noise * (2.0 * u - 1.0), 0.0, 1.0));
      }
    }
    std::string caption = caption_for(scene);
    out.push_back(Example{std::move(image), std::move(caption), std::move(scene)});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view kind_name(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::kOrderSwap:
      return "order-swap";
    case PerturbKind::kAttributeSwap:
      return "attribute-swap";
    case PerturbKind::kRelationSwap:
      return "relation-swap";
    case PerturbKind::kObjectReplace:
      return "object-replace";
    case PerturbKind::kAddAttribute:
      return "add-attribute";
    case PerturbKind::kWordShuffle:
      return "word-shuffle";
  }
  return "";
}

std::optional<PerturbKind> parse_kind(std::string_view name) {
  for (auto k : all_kinds())
    if (kind_name(k) == name) return k;
  return std::nullopt;
}

const std::vector<PerturbKind>& all_kinds() {
  static const std::vector<PerturbKind> kinds{PerturbKind::kOrderSwap,     PerturbKind::kAttributeSwap,
                                              PerturbKind::kRelationSwap,  PerturbKind::kObjectReplace,
                                              PerturbKind::kAddAttribute,  PerturbKind::kWordShuffle};
  return kinds;
}

PerturbedPair perturb(const Example& ex, PerturbKind kind, std::uint64_t seed) {
  const auto parsed = parse_caption(ex.caption);
  if (!parsed) throw PerturbError("perturb: caption does not follow the grammar: '" + ex.caption + "'");
  const std::string& positive = ex.caption;
  std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(kind)}));
  const std::size_t n = parsed->objects.size();
  const auto name = std::string(kind_name(kind));

  auto accept = [&](const std::string& negative) {
    return negative != positive && !scene_satisfies(ex.scene, negative);
  };
  auto finish = [&](std::string negative) -> PerturbedPair {
    if (!accept(negative)) throw PerturbError("perturb: " + name + " yields no false caption for '" + positive + "'");
    return PerturbedPair{positive, std::move(negative), kind};
  };

  switch (kind) {
    case PerturbKind::kOrderSwap: {
      if (n < 2) throw PerturbError("perturb: order-swap needs two objects");
      ParsedCaption neg = *parsed;
      std::swap(neg.objects[0], neg.objects[1]);
      return finish(render_caption(neg));
    }
    case PerturbKind::kAttributeSwap: {
      if (n < 2) throw PerturbError("perturb: attribute-swap needs two objects");
      constexpr std::array<std::pair<std::size_t, std::size_t>, 3> pairs{{{0, 1}, {0, 2}, {1, 2}}};
      for (auto [i, j] : pairs) {
        if (j >= n || parsed->objects[i].color == parsed->objects[j].color) continue;
        ParsedCaption neg = *parsed;
        std::swap(neg.objects[i].color, neg.objects[j].color);
        auto text = render_caption(neg);
        if (accept(text)) return PerturbedPair{positive, std::move(text), kind};
      }
      throw PerturbError("perturb: attribute-swap needs two objects of different colors");
    }
    case PerturbKind::kRelationSwap: {
      if (n < 2) throw PerturbError("perturb: relation-swap needs two objects");
      ParsedCaption neg = *parsed;
      const auto r = draw_below(rng, neg.relations.size());
      neg.relations[r] = opposite(neg.relations[r]);
      return finish(render_caption(neg));
    }
    case PerturbKind::kObjectReplace: {
      std::vector<std::pair<std::size_t, int>> options;
      for (std::size_t i = 0; i < n; ++i)
        for (int s = 0; s < kNumShapes; ++s)
          if (static_cast<int>(parsed->objects[i].shape) != s) options.emplace_back(i, s);
      portable_shuffle(options.begin(), options.end(), rng);
      for (auto [i, s] : options) {
        ParsedCaption neg = *parsed;
        neg.objects[i].shape = static_cast<ShapeKind>(s);
        auto text = render_caption(neg);
        if (accept(text)) return PerturbedPair{positive, std::move(text), kind};
      }
      throw PerturbError("perturb: object-replace found no false caption");
    }
    case PerturbKind::kAddAttribute: {
      ParsedCaption neg = *parsed;
      neg.relations.push_back(static_cast<Relation>(draw_below(rng, 4)));
      neg.objects.push_back({static_cast<Color>(draw_below(rng, kNumColors)),
                             static_cast<ShapeKind>(draw_below(rng, kNumShapes))});
      return finish(render_caption(neg));
    }
    case PerturbKind::kWordShuffle: {
      auto words = tok::split_words(positive);
      for (int attempt = 0; attempt < 64; ++attempt) {
        portable_shuffle(words.begin(), words.end(), rng);
        std::string text;
        for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
        if (accept(text) && !parse_caption(text)) return PerturbedPair{positive, std::move(text), kind};
      }
      throw PerturbError("perturb: word-shuffle found no ungrammatical permutation");
    }
  }
  throw PerturbError("perturb: unknown kind");
}

bool scene_satisfies(const Scene& scene, std::string_view caption) {
  const auto parsed = parse_caption(caption);
  if (!parsed) return false;
  const std::size_t n = parsed->objects.size();
  if (n != scene.objects.size()) return false;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  do {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      const auto& o = scene.objects[perm[i]];
      ok = o.color == parsed->objects[i].color && o.shape == parsed->objects[i].shape;
    }
    for (std::size_t i = 0; i + 1 < n && ok; ++i) {
      ok = relation_holds(parsed->relations[i], scene.objects[perm[i]], scene.objects[perm[i + 1]]);
    }
    if (ok) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

}  // namespace cappa::data
