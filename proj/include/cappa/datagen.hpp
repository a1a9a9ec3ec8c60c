#pragma once

// Synthetic compositional image/caption data.
//
// Scenes hold one to three flat-colored shapes on a 2x2 grid. Captions are
// produced by a fixed grammar,
//
//   caption  := object (relation object)*
//   object   := color shape
//   relation := "left of" | "right of" | "above" | "below"
//
// with objects listed in row-major cell order and each relation describing
// an object relative to the next one. The generator only emits "left of" and
// "above"; the other two relations appear in perturbed negatives.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cappa/tensor.hpp"

namespace cappa::data {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle, kCross };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow };
enum class Relation : std::uint8_t { kLeftOf, kRightOf, kAbove, kBelow };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kNumClasses = kNumShapes * kNumColors;
inline constexpr int kGridCells = 4;
inline constexpr std::size_t kDefaultResolution = 32;
inline constexpr float kBackground = 0.0f;

/// Prefix used when a class label is rendered as text ("class: red circle").
inline constexpr std::string_view kClassPrefix = "class:";

struct SceneObject {
  ShapeKind shape;
  Color color;
  int cell;  // 0..3, row-major on the 2x2 grid

  bool operator==(const SceneObject&) const = default;
};

/// Objects are kept sorted by cell; no two share a cell.
struct Scene {
  std::vector<SceneObject> objects;

  bool operator==(const Scene&) const = default;
};

struct Example {
  Tensor image;  // [3,R,R], values in [0,1]
  std::string caption;
  Scene scene;
};

bool operator==(const Example& a, const Example& b);

std::string_view shape_name(ShapeKind s);
std::string_view color_name(Color c);
std::string_view relation_phrase(Relation r);
Relation opposite(Relation r);

/// Relation that the generator uses to describe `a` relative to `b`.
Relation describe_relation(const SceneObject& a, const SceneObject& b);
/// Whether `r` holds for `a` relative to `b` (column/row comparison).
bool relation_holds(Relation r, const SceneObject& a, const SceneObject& b);

std::string object_phrase(const SceneObject& o);
std::string caption_for(const Scene& scene);

/// Shape x color class id in [0,16): color * 4 + shape.
int class_label(const SceneObject& o);
/// "red circle" for the class id.
std::string class_name(int label);
/// "class: red circle".
std::string class_text(int label);
/// Inverse of class_text; nullopt when the text is not a class rendering.
std::optional<int> parse_class_text(std::string_view text);

/// Every word the grammar and the task formats can produce.
std::vector<std::string> grammar_terminals();
/// A corpus covering all terminals, for building the model vocabulary.
std::vector<std::string> grammar_corpus();

struct GenOptions {
  int min_objects = 1;
  int max_objects = 3;
  /// Amplitude of seeded uniform pixel noise; 0 disables it.
  double noise = 0.0;
};

Scene random_scene(std::uint64_t seed, std::uint64_t index, const GenOptions& options = {});
Tensor render(const Scene& scene, std::size_t resolution);
/// Per-cell template matching against the renderer; exact for noise-free images.
Scene infer_scene(const Tensor& image);

/// Deterministic in (n, seed, resolution, options); example i depends only on
/// (seed, i).
std::vector<Example> gen_dataset(std::size_t n, std::uint64_t seed, std::size_t resolution = kDefaultResolution,
                                 const GenOptions& options = {});

// ---------------------------------------------------------------------------
// Perturbations

enum class PerturbKind : std::uint8_t {
  kOrderSwap,
  kAttributeSwap,
  kRelationSwap,
  kObjectReplace,
  kAddAttribute,
  kWordShuffle,
};

std::string_view kind_name(PerturbKind kind);
std::optional<PerturbKind> parse_kind(std::string_view name);
const std::vector<PerturbKind>& all_kinds();

struct PerturbedPair {
  std::string positive;
  std::string negative;
  PerturbKind kind;
};

/// Builds a caption that is false for ex.scene. Throws PerturbError when the
/// kind does not apply (e.g. order/relation kinds on one-object scenes).
PerturbedPair perturb(const Example& ex, PerturbKind kind, std::uint64_t seed);

/// Parses `caption` with the grammar and checks it against the scene: every
/// mentioned object must match a distinct scene object, every scene object
/// must be mentioned, and each relation must hold. Unparseable text is false.
bool scene_satisfies(const Scene& scene, std::string_view caption);

// ---------------------------------------------------------------------------
// "CAPD" dataset files: magic, version u32, count u32, then per example
// R u32, 3*R*R f32 image, caption byte length u32, UTF-8 caption. All
// little-endian.

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> read_dataset(const std::filesystem::path& path);

std::string encode_dataset(std::span<const Example> examples);
std::vector<Example> decode_dataset(std::string_view bytes);

}  // namespace cappa::data
