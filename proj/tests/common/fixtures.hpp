#pragma once

#include <cstdint>

#include "protofed/data.hpp"
#include "protofed/fed.hpp"
#include "protofed/model.hpp"
#include "protofed/random.hpp"

namespace fixtures {

// 32x32 single-channel images, two conv blocks of 4 and 8 channels.
inline protofed::ImageSpec toy_image() {
  protofed::ImageSpec image;
  image.height = 32;
  image.width = 32;
  image.glyph_size = 8;
  return image;
}

inline protofed::ModelConfig toy_model() {
  protofed::ModelConfig m;
  const auto image = toy_image();
  m.backbone.input_height = image.height;
  m.backbone.input_width = image.width;
  m.backbone.channels = {4, 8};
  m.backbone.freeze_mode = protofed::FreezeMode::FrozenRandom;
  m.prototypes_per_class = 2;
  return m;
}

// `clients` small sites plus a small test site.
inline protofed::TaskConfig toy_task(std::size_t clients, std::uint64_t seed,
                                     std::size_t samples = 30) {
  protofed::TaskConfig task;
  task.image = toy_image();
  for (std::size_t i = 0; i < clients; ++i) {
    const int id = static_cast<int>(i) + 1;
    task.sites.push_back({id, samples + 10 * i, 0.6, 0.05 * double(i), 1.0, 0.03,
                          protofed::derive_seed(seed, {100 + std::uint64_t(id)})});
  }
  const int test_id = static_cast<int>(clients) + 1;
  task.test = {test_id, 24, 0.5, 0.0, 1.0, 0.03, protofed::derive_seed(seed, {100 + std::uint64_t(test_id)})};
  return task;
}

inline protofed::FedConfig toy_fed(std::size_t clients, std::size_t rounds) {
  protofed::FedConfig fed;
  fed.num_clients = clients;
  fed.rounds = rounds;
  fed.batch_size = 8;
  fed.learning_rate = 1e-2;
  return fed;
}

}  // namespace fixtures
