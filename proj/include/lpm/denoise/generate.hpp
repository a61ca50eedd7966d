#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/kvcache/cache.hpp"
#include "lpm/latcore/latent.hpp"
#include "lpm/ropekit/rope.hpp"
#include "lpm/toydit/model.hpp"

namespace lpm::denoise {

// Noise levels T0 > T1 > T2 > 0. The backbone runs at T0 and T1, the refiner at T2.
struct TimestepSchedule {
    float t0 = 1.0f;
    float t1 = 0.5f;
    float t2 = 0.3f;

    void validate() const;  // ConfigError unless 1 >= t0 > t1 > t2 > 0
    std::vector<float> levels() const { return {t0, t1, t2, 0.0f}; }
};

// Per-chunk timesteps for one backbone call.
struct ChunkTimestepVector {
    std::vector<float> t;

    // ContractError unless non-decreasing and every value is T0 or T1.
    void validate_backbone(const TimestepSchedule& sched) const;
};

// Seeded standard-normal stream. Same seed, same stream.
class NoiseSource {
public:
    explicit NoiseSource(std::uint64_t seed) : seed_(seed), rng_(seed) {}

    // Independent stream for (chunk, purpose); lets overlapped stages draw
    // noise without sharing a generator.
    static NoiseSource for_chunk(std::uint64_t seed, std::int64_t chunk, std::uint32_t purpose);

    std::uint64_t seed() const { return seed_; }
    float next() { return normal_(rng_); }
    Tensor2D sample(std::size_t rows, std::size_t cols);

private:
    std::uint64_t seed_;
    std::mt19937_64 rng_;
    std::normal_distribution<float> normal_{0.0f, 1.0f};
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// x_t = (1 - t) x0 + t eps. ContractError for t outside [0, 1].
Tensor2D renoise(const Tensor2D& x0, float t, const Tensor2D& eps);

// Uncached prediction over a chunk sequence (chunk-causal mask). Used as the
// reference path; the streaming path goes through ChunkGenerator.
std::vector<Tensor2D> backbone_predict(const dit::ToyDit& backbone, std::span<const Tensor2D> x_t,
                                       const ChunkTimestepVector& t_vec, std::span<const dit::CondBundle> conds,
                                       const dit::ReferenceContext* refs, const TimestepSchedule& sched);
// Every input must sit at T2.
std::vector<Tensor2D> refiner_predict(const dit::ToyDit& refiner, std::span<const Tensor2D> x_t2,
                                      const ChunkTimestepVector& t_vec, std::span<const dit::CondBundle> conds,
                                      const dit::ReferenceContext* refs, const TimestepSchedule& sched);

struct NfeCount {
    int backbone = 0;
    int refiner = 0;
    int total() const { return backbone + refiner; }
};

struct GenerationConfig {
    TimestepSchedule schedule;
    kv::RetentionPolicy retention;
    rope::SegmentOffsets offsets = rope::SegmentOffsets::defaults();
    std::uint64_t seed = 0;
    bool reuse_noise = false;  // second backbone pass re-noises with the chunk's initial eps

    void validate() const;
};

// Reference tokens every session carries: two expression, one view, one sink-ref.
dit::ReferenceSet make_reference_set(const dit::ModelConfig& cfg, std::uint64_t seed);

// Reference positions use a constant video length equal to the window span,
// so they never collide with window-local video positions.
std::int64_t reference_video_len(const kv::RetentionPolicy& policy, std::size_t tokens_per_chunk);

struct BackboneResult {
    std::int64_t index = 0;
    Tensor2D x_init;        // x at T0
    Tensor2D x0_first;      // prediction of the T0 pass
    Tensor2D x0_backbone;   // prediction of the T1 pass
    dit::CondBundle cond;   // frozen snapshot the refiner reuses
    NfeCount nfe;
    std::vector<std::int64_t> retained;
};

struct GeneratedChunk {
    LatentChunk chunk;
    Tensor2D x0_backbone;
    NfeCount nfe;
    std::uint64_t cond_hash = 0;
    std::uint64_t latent_hash = 0;
    std::vector<std::int64_t> retained;
    std::vector<float> t_vec;  // levels visited, T0 T1 T2
};

// Streaming generator for one session: backbone with a noisy-history cache,
// refiner with a clean-history cache. backbone_phase and refine_phase touch
// disjoint caches, so one thread may run each.
class ChunkGenerator {
public:
    ChunkGenerator(const dit::ToyDit& backbone, const dit::ToyDit& refiner, GenerationConfig cfg,
                   const dit::ReferenceSet* refs = nullptr);

    BackboneResult backbone_phase(std::int64_t index, const dit::CondBundle& cond);
    GeneratedChunk refine_phase(const BackboneResult& b);
    GeneratedChunk generate_chunk(std::int64_t index, const dit::CondBundle& cond);

    const kv::KvCache& noisy_cache() const { return noisy_; }
    const kv::KvCache& clean_cache() const { return clean_; }
    const GenerationConfig& config() const { return cfg_; }
    std::int64_t next_backbone() const { return next_backbone_; }
    std::int64_t next_refine() const { return next_refine_; }

private:
    const dit::ToyDit& backbone_;
    const dit::ToyDit& refiner_;
    GenerationConfig cfg_;
    kv::KvCache noisy_;
    kv::KvCache clean_;
    std::int64_t next_backbone_ = 0;
    std::int64_t next_refine_ = 0;
};

struct RolloutOptions {
    std::ostream* trace = nullptr;  // NDJSON, one line per chunk
    bool wall_timings = false;      // include measured ms in the trace (breaks byte equality)
};

struct RolloutResult {
    std::vector<GeneratedChunk> chunks;
    std::size_t noisy_peak_floats = 0;
    std::size_t clean_peak_floats = 0;
};

// Sequential generation with the same conditioning for every chunk.
RolloutResult rollout(ChunkGenerator& gen, std::size_t n_chunks, const dit::CondBundle& cond,
                      const RolloutOptions& opts = {});

nlohmann::json trace_record(const GeneratedChunk& c);

}  // namespace lpm::denoise
