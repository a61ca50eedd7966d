#pragma once

#include <cstddef>

#include <nlohmann/json.hpp>

#include "lpm/maskgen/masks.hpp"

namespace lpm::dit {

struct ModelConfig {
    std::size_t n_layers = 4;  // even: half speak layers, half listen layers
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t tokens_per_chunk = 8;
    std::size_t d_cond = 32;
    std::size_t d_time = 32;  // sinusoidal timestep features
    std::size_t ffn_mult = 2;
    mask::AudioWindowSpec audio;
    double audio_fps = 8.0;        // encoded audio frames per second
    double audio_history_s = 2.0;  // audio window starts this far before the chunk
    double rope_base = 10000.0;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace lpm::dit
