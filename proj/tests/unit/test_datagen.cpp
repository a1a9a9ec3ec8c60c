#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "cappa/datagen.hpp"
#include "cappa/tok.hpp"

using namespace cappa;
using namespace cappa::data;

namespace {

Scene two_objects(SceneObject a, SceneObject b) { return Scene{{a, b}}; }

}  // namespace

TEST(Caption, GrammarAndRowMajorOrder) {
  // Cells: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
  const SceneObject a{ShapeKind::kCircle, Color::kRed, 0};
  const SceneObject b{ShapeKind::kSquare, Color::kBlue, 1};
  const SceneObject c{ShapeKind::kCross, Color::kYellow, 3};
  EXPECT_EQ(caption_for(Scene{{a}}), "red circle");
  EXPECT_EQ(caption_for(two_objects(a, b)), "red circle left of blue square");
  EXPECT_EQ(caption_for(Scene{{a, b, c}}), "red circle left of blue square above yellow cross");
}

TEST(Relations, DescribeAndHoldAgree) {
  for (int i = 0; i < kGridCells; ++i)
    for (int j = 0; j < kGridCells; ++j) {
      if (i == j) continue;
      const SceneObject a{ShapeKind::kCircle, Color::kRed, i}, b{ShapeKind::kCircle, Color::kRed, j};
      const auto r = describe_relation(a, b);
      EXPECT_TRUE(relation_holds(r, a, b));
      EXPECT_FALSE(relation_holds(opposite(r), a, b));
      EXPECT_TRUE(relation_holds(opposite(r), b, a));
    }
}

TEST(Classes, SixteenDistinctLabelsAndTextRoundTrip) {
  std::set<std::string> names;
  for (int l = 0; l < kNumClasses; ++l) {
    names.insert(class_name(l));
    EXPECT_EQ(parse_class_text(class_text(l)), l);
  }
  EXPECT_EQ(names.size(), 16u);
  EXPECT_EQ(class_text(0), "class: red circle");
  EXPECT_FALSE(parse_class_text("class: red"));
  EXPECT_THROW(class_name(16), ConfigError);
}

TEST(Generator, DeterministicAndPrefixStable) {
  const auto a = gen_dataset(40, 7);
  const auto b = gen_dataset(40, 7);
  const auto c = gen_dataset(10, 7);
  EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_TRUE(a[i] == c[i]);
  EXPECT_NE(encode_dataset(gen_dataset(40, 8)), encode_dataset(a));
}

TEST(Generator, CaptionsDescribeTheirScenes) {
  const auto vocab = tok::build_vocab(grammar_corpus());
  for (const auto& ex : gen_dataset(200, 3)) {
    EXPECT_TRUE(scene_satisfies(ex.scene, ex.caption)) << ex.caption;
    EXPECT_EQ(ex.caption, caption_for(ex.scene));
    EXPECT_EQ(ex.image.shape(), (Shape{3, kDefaultResolution, kDefaultResolution}));
    EXPECT_NO_THROW(tok::encode(ex.caption, vocab, 16));
    EXPECT_GE(ex.scene.objects.size(), 1u);
    EXPECT_LE(ex.scene.objects.size(), 3u);
  }
}

TEST(Generator, RespectsObjectCountBounds) {
  GenOptions o;
  o.min_objects = 2;
  o.max_objects = 2;
  for (const auto& ex : gen_dataset(30, 1, 32, o)) EXPECT_EQ(ex.scene.objects.size(), 2u);
  o.min_objects = 3;
  o.max_objects = 2;
  EXPECT_THROW(gen_dataset(1, 1, 32, o), ConfigError);
}

TEST(Render, InferSceneInvertsRender) {
  for (const auto& ex : gen_dataset(100, 11)) EXPECT_TRUE(infer_scene(ex.image) == ex.scene) << ex.caption;
}

TEST(Render, OtherResolutions) {
  const Scene s{{{ShapeKind::kTriangle, Color::kGreen, 2}}};
  const auto img = render(s, 64);
  EXPECT_EQ(img.shape(), (Shape{3, 64, 64}));
  EXPECT_TRUE(infer_scene(img) == s);
}

TEST(Render, NoiseIsSeededAndBounded) {
  GenOptions o;
  o.noise = 0.05;
  const auto a = gen_dataset(5, 2, 32, o);
  const auto b = gen_dataset(5, 2, 32, o);
  const auto clean = gen_dataset(5, 2);
  EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  bool differs = false;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t p = 0; p < a[i].image.numel(); ++p) {
      const float d = a[i].image.data()[p] - clean[i].image.data()[p];
      EXPECT_LE(std::abs(d), 0.05f + 1e-6f);
      differs = differs || d != 0.0f;
    }
  EXPECT_TRUE(differs);
}

TEST(SceneSatisfies, RejectsWrongContent) {
  const SceneObject a{ShapeKind::kCircle, Color::kRed, 0};
  const SceneObject b{ShapeKind::kSquare, Color::kBlue, 1};
  const auto s = two_objects(a, b);
  EXPECT_TRUE(scene_satisfies(s, "red circle left of blue square"));
  EXPECT_TRUE(scene_satisfies(s, "blue square right of red circle"));
  EXPECT_FALSE(scene_satisfies(s, "blue square left of red circle"));
  EXPECT_FALSE(scene_satisfies(s, "red circle"));  // object missing
  EXPECT_FALSE(scene_satisfies(s, "red square left of blue circle"));
  EXPECT_FALSE(scene_satisfies(s, "circle red left of blue square"));
  EXPECT_FALSE(scene_satisfies(s, "red circle above blue square"));
}

class PerturbProperty : public ::testing::TestWithParam<PerturbKind> {};

TEST_P(PerturbProperty, NegativesAreFalseAndPositivesTrue) {
  const auto kind = GetParam();
  std::size_t applied = 0;
  const auto data = gen_dataset(300, 21);
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      const auto p = perturb(data[i], kind, i);
      ++applied;
      EXPECT_EQ(p.positive, data[i].caption);
      EXPECT_NE(p.negative, p.positive);
      EXPECT_FALSE(scene_satisfies(data[i].scene, p.negative)) << p.negative;
      EXPECT_EQ(p.kind, kind);
      EXPECT_EQ(perturb(data[i], kind, i).negative, p.negative);
    } catch (const PerturbError&) {
    }
  }
  EXPECT_GT(applied, 50u) << kind_name(kind);
}

INSTANTIATE_TEST_SUITE_P(AllKinds, PerturbProperty, ::testing::ValuesIn(all_kinds()),
                         [](const auto& info) {
                           auto n = std::string(kind_name(info.param));
                           std::erase(n, '-');
                           return n;
                         });

TEST(Perturb, OrderSwapKeepsWordsAndSwapsObjects) {
  const SceneObject a{ShapeKind::kCircle, Color::kRed, 0};
  const SceneObject b{ShapeKind::kSquare, Color::kBlue, 1};
  const Example ex{render(two_objects(a, b), 32), "red circle left of blue square", two_objects(a, b)};
  const auto p = perturb(ex, PerturbKind::kOrderSwap, 0);
  EXPECT_EQ(p.negative, "blue square left of red circle");
  EXPECT_EQ(perturb(ex, PerturbKind::kRelationSwap, 0).negative, "red circle right of blue square");
  EXPECT_EQ(perturb(ex, PerturbKind::kAttributeSwap, 0).negative, "blue circle left of red square");
}

TEST(Perturb, OrderKindsNeedTwoObjects) {
  const Scene s{{{ShapeKind::kCircle, Color::kRed, 0}}};
  const Example ex{render(s, 32), "red circle", s};
  EXPECT_THROW(perturb(ex, PerturbKind::kOrderSwap, 0), PerturbError);
  EXPECT_THROW(perturb(ex, PerturbKind::kRelationSwap, 0), PerturbError);
  EXPECT_NO_THROW(perturb(ex, PerturbKind::kObjectReplace, 0));
}

TEST(Perturb, KindNamesRoundTrip) {
  for (auto k : all_kinds()) EXPECT_EQ(parse_kind(kind_name(k)), k);
  EXPECT_FALSE(parse_kind("nonsense"));
}

TEST(DatasetFile, RoundTripIsBitwise) {
  const auto data = gen_dataset(20, 5);
  const auto bytes = encode_dataset(data);
  const auto back = decode_dataset(bytes);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_TRUE(back[i] == data[i]);
  }
  EXPECT_EQ(encode_dataset(back), bytes);
  const auto path = std::filesystem::temp_directory_path() / "cappa_datagen_test.capd";
  write_dataset(path, data);
  EXPECT_EQ(encode_dataset(read_dataset(path)), bytes);
  std::filesystem::remove(path);
}

TEST(DatasetFile, RejectsCorruptInput) {
  auto bytes = encode_dataset(gen_dataset(2, 5));
  EXPECT_THROW(decode_dataset(bytes.substr(0, bytes.size() - 3)), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_dataset(bad_version), VersionError);
  EXPECT_THROW(read_dataset("/nonexistent/cappa.capd"), IoError);
}
