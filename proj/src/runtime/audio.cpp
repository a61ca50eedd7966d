#include "lpm/runtime/audio.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "lpm/latcore/errors.hpp"
#include "lpm/latcore/latent.hpp"

namespace lpm::runtime {

void AudioBuffer::write_block(std::int64_t k, std::span<const float> samples) {
    if (k < 0) throw ContractError("audio: negative step");
    const std::int64_t first = k * static_cast<std::int64_t>(sr_);
    const std::int64_t last = first + static_cast<std::int64_t>(samples.size());
    if (last <= base_) return;  // entirely before what we keep
    if (last > end_sample()) data_.resize(static_cast<std::size_t>(last - base_), 0.0f);
    for (std::int64_t i = std::max(first, base_); i < last; ++i) {
        data_[static_cast<std::size_t>(i - base_)] = samples[static_cast<std::size_t>(i - first)];
    }
}

float AudioBuffer::at(std::int64_t i) const {
    if (i < base_ || i >= end_sample()) return 0.0f;
    return data_[static_cast<std::size_t>(i - base_)];
}

void AudioBuffer::trim_before(std::int64_t i) {
    if (i <= base_) return;
    const auto drop = std::min<std::int64_t>(i - base_, static_cast<std::int64_t>(data_.size()));
    data_.erase(data_.begin(), data_.begin() + drop);
    base_ += drop;
}

AudioWindow chunk_audio_padded(const AudioBuffer& buffer, std::int64_t k) {
    if (k < 0) throw ContractError("chunk_audio: negative step");
    const auto sr = static_cast<std::int64_t>(buffer.sample_rate());
    AudioWindow w;
    w.k = k;
    w.sample_rate = buffer.sample_rate();
    w.first_sample = (k - kHistorySeconds) * sr;
    w.samples.resize(static_cast<std::size_t>(3 * sr));
    for (std::int64_t i = 0; i < 3 * sr; ++i) w.samples[static_cast<std::size_t>(i)] = buffer.at(w.first_sample + i);
    return w;
}

AudioWindow chunk_audio(const AudioBuffer& buffer, std::int64_t k) {
    const auto need = (k + 1) * static_cast<std::int64_t>(buffer.sample_rate());
    if (buffer.end_sample() < need) {
        throw UnderrunError("audio underrun: second " + std::to_string(k) + " has " +
                            std::to_string(std::max<std::int64_t>(0, buffer.end_sample() - k * static_cast<std::int64_t>(buffer.sample_rate()))) +
                            " of " + std::to_string(buffer.sample_rate()) + " samples");
    }
    return chunk_audio_padded(buffer, k);
}

AudioEncoder::AudioEncoder(std::size_t d_cond, double frames_per_second, std::uint64_t seed, std::size_t sub_bins)
    : d_cond_(d_cond), fps_(frames_per_second), sub_bins_(sub_bins), projection_(2 * sub_bins, d_cond) {
    if (!(fps_ > 0.0) || sub_bins_ == 0) throw ConfigError("audio encoder: bad frame rate or bins");
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const float s = 4.0f / std::sqrt(static_cast<float>(2 * sub_bins));
    for (float& v : projection_.values()) v = s * normal(rng);
}

Tensor2D AudioEncoder::encode(const AudioWindow& w) const {
    const double seconds = static_cast<double>(w.samples.size()) / static_cast<double>(w.sample_rate);
    const auto n_frames = static_cast<std::size_t>(std::llround(seconds * fps_));
    const std::size_t frame_len = w.samples.size() / n_frames;
    const std::size_t bin_len = std::max<std::size_t>(1, frame_len / sub_bins_);
    Tensor2D feats(n_frames, 2 * sub_bins_);
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t b = 0; b < sub_bins_; ++b) {
            double sum = 0.0;
            double sq = 0.0;
            const std::size_t begin = f * frame_len + b * bin_len;
            for (std::size_t i = begin; i < begin + bin_len && i < w.samples.size(); ++i) {
                sum += w.samples[i];
                sq += static_cast<double>(w.samples[i]) * w.samples[i];
            }
            feats(f, b) = static_cast<float>(sum / static_cast<double>(bin_len));
            feats(f, sub_bins_ + b) = static_cast<float>(std::sqrt(sq / static_cast<double>(bin_len)));
        }
    }
    Tensor2D out(n_frames, d_cond_);
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t c = 0; c < d_cond_; ++c) {
            float acc = 0.0f;
            for (std::size_t i = 0; i < 2 * sub_bins_; ++i) acc += feats(f, i) * projection_(i, c);
            out(f, c) = std::tanh(acc);
        }
    }
    return out;
}

Tensor2D encode_text(const std::string& prompt, std::size_t d_cond, std::size_t max_tokens) {
    std::istringstream in(prompt);
    std::vector<std::string> words;
    for (std::string w; in >> w && words.size() < max_tokens;) words.push_back(w);
    Tensor2D out(words.size(), d_cond);
    for (std::size_t i = 0; i < words.size(); ++i) {
        std::mt19937_64 rng(hash_bytes(words[i], 0x7465787400ull + i));
        std::normal_distribution<float> normal(0.0f, 1.0f);
        for (float& v : out.row(i)) v = normal(rng);
    }
    return out;
}

std::vector<float> tone(std::size_t n_samples, std::size_t sr, double freq, double amp, std::int64_t phase_origin) {
    std::vector<float> out(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        const double t = static_cast<double>(phase_origin + static_cast<std::int64_t>(i)) / static_cast<double>(sr);
        out[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * t));
    }
    return out;
}

}  // namespace lpm::runtime
