#include "lpm/toydit/config.hpp"

#include "lpm/latcore/errors.hpp"

namespace lpm::dit {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_layers % 2 != 0) throw ConfigError("model: n_layers must be even and positive");
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("model: head_dim must be even for rotary embedding");
    if (tokens_per_chunk == 0) throw ConfigError("model: tokens_per_chunk must be positive");
    if (d_cond == 0 || d_time == 0 || d_time % 2 != 0) throw ConfigError("model: bad d_cond/d_time");
    if (ffn_mult == 0) throw ConfigError("model: ffn_mult must be positive");
    if (!(audio_fps > 0.0) || audio_history_s < 0.0) throw ConfigError("model: bad audio timing");
    audio.validate();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"n_layers", c.n_layers},
         {"d_model", c.d_model},
         {"n_heads", c.n_heads},
         {"tokens_per_chunk", c.tokens_per_chunk},
         {"d_cond", c.d_cond},
         {"d_time", c.d_time},
         {"ffn_mult", c.ffn_mult},
         {"speak_window", c.audio.speak_window},
         {"listen_window", c.audio.listen_window},
         {"audio_fps", c.audio_fps},
         {"audio_history_s", c.audio_history_s},
         {"rope_base", c.rope_base}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.n_layers = j.value("n_layers", d.n_layers);
    c.d_model = j.value("d_model", d.d_model);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.tokens_per_chunk = j.value("tokens_per_chunk", d.tokens_per_chunk);
    c.d_cond = j.value("d_cond", d.d_cond);
    c.d_time = j.value("d_time", d.d_time);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.audio.speak_window = j.value("speak_window", d.audio.speak_window);
    c.audio.listen_window = j.value("listen_window", d.audio.listen_window);
    c.audio_fps = j.value("audio_fps", d.audio_fps);
    c.audio_history_s = j.value("audio_history_s", d.audio_history_s);
    c.rope_base = j.value("rope_base", d.rope_base);
}

}  // namespace lpm::dit
