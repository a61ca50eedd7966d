#include "lpm/denoise/generate.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "lpm/latcore/errors.hpp"
#include "lpm/maskgen/masks.hpp"

namespace lpm::denoise {

namespace {

// Noise purposes per chunk.
constexpr std::uint32_t kNoiseInit = 0;
constexpr std::uint32_t kNoiseT1 = 1;
constexpr std::uint32_t kNoiseT2 = 2;

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

bool same_level(float a, float b) { return a == b; }

}  // namespace

void TimestepSchedule::validate() const {
    if (!(t0 <= 1.0f && t0 > t1 && t1 > t2 && t2 > 0.0f)) {
        throw ConfigError("schedule: need 1 >= T0 > T1 > T2 > 0");
    }
}

void ChunkTimestepVector::validate_backbone(const TimestepSchedule& sched) const {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!same_level(t[i], sched.t0) && !same_level(t[i], sched.t1)) {
            throw ContractError("backbone: chunk " + std::to_string(i) + " timestep " + std::to_string(t[i]) +
                                " is neither T0 nor T1");
        }
        // Non-decreasing in chunk order: later chunks are at least as noisy.
        if (i > 0 && t[i] < t[i - 1]) throw ContractError("backbone: timestep vector decreases at chunk " + std::to_string(i));
    }
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a combined word
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

NoiseSource NoiseSource::for_chunk(std::uint64_t seed, std::int64_t chunk, std::uint32_t purpose) {
    return NoiseSource(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(chunk)), purpose));
}

Tensor2D NoiseSource::sample(std::size_t rows, std::size_t cols) {
    Tensor2D out(rows, cols);
    for (float& v : out.values()) v = next();
    return out;
}

Tensor2D renoise(const Tensor2D& x0, float t, const Tensor2D& eps) {
    if (!(t >= 0.0f && t <= 1.0f)) throw ContractError("renoise: t outside [0, 1]");
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ShapeError("renoise: x0 and eps differ in shape");
    Tensor2D out(x0.rows(), x0.cols());
    auto o = out.values();
    auto a = x0.values();
    auto e = eps.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = (1.0f - t) * a[i] + t * e[i];
    return out;
}

namespace {

std::vector<Tensor2D> split_chunks(const Tensor2D& out, std::size_t n, std::size_t tpc) {
    std::vector<Tensor2D> res;
    for (std::size_t c = 0; c < n; ++c) res.push_back(out.slice_rows(c * tpc, tpc));
    return res;
}

}  // namespace

std::vector<Tensor2D> backbone_predict(const dit::ToyDit& backbone, std::span<const Tensor2D> x_t,
                                       const ChunkTimestepVector& t_vec, std::span<const dit::CondBundle> conds,
                                       const dit::ReferenceContext* refs, const TimestepSchedule& sched) {
    sched.validate();
    t_vec.validate_backbone(sched);
    const auto res = backbone.forward_full(x_t, t_vec.t, conds, refs);
    return split_chunks(res.out, x_t.size(), backbone.config().tokens_per_chunk);
}

std::vector<Tensor2D> refiner_predict(const dit::ToyDit& refiner, std::span<const Tensor2D> x_t2,
                                      const ChunkTimestepVector& t_vec, std::span<const dit::CondBundle> conds,
                                      const dit::ReferenceContext* refs, const TimestepSchedule& sched) {
    sched.validate();
    for (float t : t_vec.t) {
        if (!same_level(t, sched.t2)) throw ContractError("refiner: input timestep must be T2");
    }
    const auto res = refiner.forward_full(x_t2, t_vec.t, conds, refs);
    return split_chunks(res.out, x_t2.size(), refiner.config().tokens_per_chunk);
}

void GenerationConfig::validate() const {
    schedule.validate();
    retention.validate();
}

dit::ReferenceSet make_reference_set(const dit::ModelConfig& cfg, std::uint64_t seed) {
    dit::ReferenceSet refs;
    refs.slots = {{rope::RefType::Expression, 1, 0, 0},
                  {rope::RefType::Expression, 2, 0, 0},
                  {rope::RefType::View, 1, 0, 0},
                  {rope::RefType::SinkRef, 1, 0, 0}};
    NoiseSource src(mix_seed(seed, 0x5265667300ull));
    refs.tokens = src.sample(refs.slots.size(), cfg.d_model);
    return refs;
}

std::int64_t reference_video_len(const kv::RetentionPolicy& policy, std::size_t tokens_per_chunk) {
    return static_cast<std::int64_t>(policy.window_chunks() * tokens_per_chunk);
}

ChunkGenerator::ChunkGenerator(const dit::ToyDit& backbone, const dit::ToyDit& refiner, GenerationConfig cfg,
                               const dit::ReferenceSet* refs)
    : backbone_(backbone),
      refiner_(refiner),
      cfg_(std::move(cfg)),
      noisy_(kv::KvVariant::Noisy, backbone.config().n_layers, backbone.config().tokens_per_chunk),
      clean_(kv::KvVariant::Clean, refiner.config().n_layers, refiner.config().tokens_per_chunk) {
    cfg_.validate();
    const auto& bc = backbone.config();
    const auto& rc = refiner.config();
    if (bc.n_layers != rc.n_layers || bc.d_model != rc.d_model || bc.tokens_per_chunk != rc.tokens_per_chunk) {
        throw ConfigError("generator: backbone and refiner shapes differ");
    }
    const std::int64_t t_len = reference_video_len(cfg_.retention, bc.tokens_per_chunk);
    cfg_.offsets.validate(t_len);
    if (refs != nullptr && refs->size() > 0) {
        const auto positions = dit::reference_positions(*refs, t_len, cfg_.offsets);
        auto install = [&](const dit::ToyDit& model, kv::KvCache& cache) {
            const auto ctx = model.reference_context(*refs, positions);
            std::vector<kv::KvEntry> entries;
            for (std::size_t l = 0; l < model.config().n_layers; ++l) {
                entries.push_back({-1, l, cache.variant(), ctx.forward.k_pre[l], ctx.forward.v_pre[l], SpanKind::Reference});
            }
            cache.set_references(std::move(entries), positions);
        };
        install(backbone_, noisy_);
        install(refiner_, clean_);
    }
}

BackboneResult ChunkGenerator::backbone_phase(std::int64_t index, const dit::CondBundle& cond) {
    if (index != next_backbone_) {
        throw ContractError("backbone: expected chunk " + std::to_string(next_backbone_) + ", got " + std::to_string(index));
    }
    const auto& mc = backbone_.config();
    const auto& s = cfg_.schedule;
    BackboneResult r;
    r.index = index;
    r.cond = cond;

    const auto window = noisy_.assemble_window(index, cfg_.retention, backbone_.rope_params());
    r.retained = window.retained;

    auto init_src = NoiseSource::for_chunk(cfg_.seed, index, kNoiseInit);
    const Tensor2D eps0 = init_src.sample(mc.tokens_per_chunk, mc.d_model);
    // x at T0; with T0 = 1 this is pure noise.
    r.x_init = renoise(Tensor2D(mc.tokens_per_chunk, mc.d_model), s.t0, eps0);

    r.x0_first = backbone_.forward_cached(r.x_init, s.t0, r.cond, window).out;
    ++r.nfe.backbone;

    Tensor2D eps1;
    if (cfg_.reuse_noise) {
        eps1 = eps0;
    } else {
        auto src = NoiseSource::for_chunk(cfg_.seed, index, kNoiseT1);
        eps1 = src.sample(mc.tokens_per_chunk, mc.d_model);
    }
    const Tensor2D x_t1 = renoise(r.x0_first, s.t1, eps1);
    const auto second = backbone_.forward_cached(x_t1, s.t1, r.cond, window);
    ++r.nfe.backbone;
    r.x0_backbone = second.out;

    for (auto& e : dit::export_kv(second, index, kv::KvVariant::Noisy, 0, mc.tokens_per_chunk)) noisy_.insert(std::move(e));
    noisy_.evict_for(index + 1, cfg_.retention);
    ++next_backbone_;
    return r;
}

GeneratedChunk ChunkGenerator::refine_phase(const BackboneResult& b) {
    if (b.index != next_refine_) {
        throw ContractError("refiner: expected chunk " + std::to_string(next_refine_) + ", got " + std::to_string(b.index));
    }
    const auto& mc = refiner_.config();
    const auto window = clean_.assemble_window(b.index, cfg_.retention, refiner_.rope_params());

    auto src = NoiseSource::for_chunk(cfg_.seed, b.index, kNoiseT2);
    const Tensor2D x_t2 = renoise(b.x0_backbone, cfg_.schedule.t2, src.sample(mc.tokens_per_chunk, mc.d_model));
    const auto res = refiner_.forward_cached(x_t2, cfg_.schedule.t2, b.cond, window);

    GeneratedChunk g;
    g.chunk = {b.index, res.out, 0.0f};
    g.x0_backbone = b.x0_backbone;
    g.nfe = b.nfe;
    ++g.nfe.refiner;
    g.cond_hash = b.cond.hash();
    g.latent_hash = hash_tensor(res.out);
    g.retained = b.retained;
    g.t_vec = {cfg_.schedule.t0, cfg_.schedule.t1, cfg_.schedule.t2};

    for (auto& e : dit::export_kv(res, b.index, kv::KvVariant::Clean, 0, mc.tokens_per_chunk)) clean_.insert(std::move(e));
    clean_.evict_for(b.index + 1, cfg_.retention);
    ++next_refine_;
    return g;
}

GeneratedChunk ChunkGenerator::generate_chunk(std::int64_t index, const dit::CondBundle& cond) {
    return refine_phase(backbone_phase(index, cond));
}

nlohmann::json trace_record(const GeneratedChunk& c) {
    return {{"index", c.chunk.chunk_index},
            {"t_vec", c.t_vec},
            {"nfe", {{"backbone", c.nfe.backbone}, {"refiner", c.nfe.refiner}}},
            {"latent_hash", hex64(c.latent_hash)},
            {"cond_hash", hex64(c.cond_hash)},
            {"retained", c.retained}};
}

RolloutResult rollout(ChunkGenerator& gen, std::size_t n_chunks, const dit::CondBundle& cond, const RolloutOptions& opts) {
    if (n_chunks == 0) throw ContractError("rollout: n_chunks must be >= 1");
    using clock = std::chrono::steady_clock;
    RolloutResult out;
    for (std::size_t k = 0; k < n_chunks; ++k) {
        const auto index = gen.next_backbone();
        const auto t0 = clock::now();
        auto b = gen.backbone_phase(index, cond);
        const auto t1 = clock::now();
        auto g = gen.refine_phase(b);
        const auto t2 = clock::now();
        if (opts.trace != nullptr) {
            auto rec = trace_record(g);
            if (opts.wall_timings) {
                rec["timings"] = {{"backbone_ms", std::chrono::duration<double, std::milli>(t1 - t0).count()},
                                  {"refiner_ms", std::chrono::duration<double, std::milli>(t2 - t1).count()}};
            }
            *opts.trace << rec.dump() << '\n';
        }
        out.chunks.push_back(std::move(g));
    }
    out.noisy_peak_floats = gen.noisy_cache().stats().peak_floats;
    out.clean_peak_floats = gen.clean_cache().stats().peak_floats;
    return out;
}

}  // namespace lpm::denoise
