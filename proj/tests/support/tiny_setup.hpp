#pragma once

// Small configs and data shared by the training-level tests.

#include "cappa/datagen.hpp"
#include "cappa/model.hpp"
#include "cappa/tok.hpp"
#include "cappa/train.hpp"

namespace cappa::testing {

inline model::ModelConfig tiny_config(model::Objective obj) {
  auto c = model::desk_config(obj, 18);
  c.patch_size = 8;
  c.width = 32;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.heads = 2;
  c.mlp_dim = 64;
  return c;
}

inline train::TrainConfig tiny_train(std::size_t steps) {
  train::TrainConfig t;
  t.steps = steps;
  t.batch = 4;
  t.base_lr = 1e-3;
  t.seed = 5;
  return t;
}

inline train::TrainData tiny_data(std::size_t n, std::uint64_t seed = 9) {
  return {data::gen_dataset(n, seed), tok::build_vocab(data::grammar_corpus())};
}

}  // namespace cappa::testing
