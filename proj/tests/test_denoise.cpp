#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lpm/denoise/generate.hpp"
#include "lpm/latcore/errors.hpp"
#include "support.hpp"

using namespace lpm;
using namespace lpm::denoise;
using lpm::testing::gaussian;
using lpm::testing::random_cond;
using lpm::testing::tiny_config;

TEST_CASE("renoise endpoints and errors") {
    std::mt19937_64 rng(1);
    const auto x0 = gaussian(3, 5, rng);
    const auto eps = gaussian(3, 5, rng);
    CHECK(renoise(x0, 0.0f, eps) == x0);
    CHECK(renoise(x0, 1.0f, eps) == eps);
    CHECK_THROWS_AS(renoise(x0, 1.5f, eps), ContractError);
    CHECK_THROWS_AS(renoise(x0, -0.1f, eps), ContractError);
}

TEST_CASE("renoise mean over many draws") {
    const Tensor2D x0 = Tensor2D::from_rows({{1.5f, -2.0f, 0.25f}});
    for (float t : {0.3f, 0.5f, 0.9f}) {
        NoiseSource src(42);
        std::vector<double> mean(3, 0.0);
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            const auto xt = renoise(x0, t, src.sample(1, 3));
            for (int c = 0; c < 3; ++c) mean[c] += xt(0, c) / n;
        }
        // x_t has standard deviation t around (1 - t) x0.
        for (int c = 0; c < 3; ++c) CHECK(std::abs(mean[c] - (1.0 - t) * x0(0, c)) < 3.0 * t / 100.0);
    }
}

TEST_CASE("renoise difference identity") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = gaussian(2, 6, rng), y = gaussian(2, 6, rng), e = gaussian(2, 6, rng);
        const float t = 0.05f * float(trial);
        const auto lhs = sub(renoise(x, t, e), renoise(y, t, e));
        const auto rhs = scale(sub(x, y), 1.0f - t);
        CHECK(max_abs_diff(lhs, rhs) < 1e-5f);
    }
}

TEST_CASE("schedule and timestep vector validation") {
    TimestepSchedule s;
    CHECK(s.levels() == std::vector<float>{1.0f, 0.5f, 0.3f, 0.0f});
    CHECK_NOTHROW(s.validate());
    s.t1 = 0.2f;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    const TimestepSchedule d;
    CHECK_NOTHROW((ChunkTimestepVector{{d.t1, d.t1, d.t0}}.validate_backbone(d)));
    CHECK_THROWS_AS((ChunkTimestepVector{{d.t0, d.t1}}.validate_backbone(d)), ContractError);
    CHECK_THROWS_AS((ChunkTimestepVector{{d.t2}}.validate_backbone(d)), ContractError);
}

TEST_CASE("noise streams are seeded") {
    auto a = NoiseSource::for_chunk(7, 3, 1), b = NoiseSource::for_chunk(7, 3, 1), c = NoiseSource::for_chunk(7, 3, 2);
    const auto x = a.sample(4, 4);
    CHECK(x == b.sample(4, 4));
    CHECK(x != c.sample(4, 4));
}

TEST_CASE("each chunk costs two backbone and one refiner evaluation") {
    std::mt19937_64 rng(3);
    const auto cfg = tiny_config();
    const auto bb = dit::ToyDit::random(cfg, 1, 0.5f);
    const auto rf = dit::ToyDit::random(cfg, 2, 0.5f);
    ChunkGenerator gen(bb, rf, {});
    const auto res = rollout(gen, 6, random_cond(cfg, rng));
    for (const auto& c : res.chunks) {
        CHECK(c.nfe.backbone == 2);
        CHECK(c.nfe.refiner == 1);
        CHECK(c.nfe.total() == 3);
        CHECK(c.t_vec == std::vector<float>{1.0f, 0.5f, 0.3f});
    }
}

TEST_CASE("zero models: the chunk is the renoising chain of the seeded noise") {
    std::mt19937_64 rng(4);
    const auto cfg = tiny_config();
    const dit::ToyDit zero(cfg);
    GenerationConfig gc;
    gc.seed = 99;
    ChunkGenerator gen(zero, zero, gc);
    const auto cond = random_cond(cfg, rng);
    for (std::int64_t k = 0; k < 3; ++k) {
        const auto g = gen.generate_chunk(k, cond);
        auto e0 = NoiseSource::for_chunk(99, k, 0), e1 = NoiseSource::for_chunk(99, k, 1),
             e2 = NoiseSource::for_chunk(99, k, 2);
        const auto x_init = e0.sample(4, 16);
        const auto x_t1 = renoise(x_init, 0.5f, e1.sample(4, 16));
        CHECK(g.x0_backbone == x_t1);
        CHECK(g.chunk.tokens == renoise(x_t1, 0.3f, e2.sample(4, 16)));
    }

    // With reuse the second pass sees the chunk's initial noise again.
    gc.reuse_noise = true;
    ChunkGenerator reuse(zero, zero, gc);
    const auto g = reuse.generate_chunk(0, cond);
    auto e0 = NoiseSource::for_chunk(99, 0, 0);
    const auto x_init = e0.sample(4, 16);
    CHECK(g.x0_backbone == renoise(x_init, 0.5f, x_init));
}

TEST_CASE("rollouts are deterministic and prefix stable") {
    std::mt19937_64 rng(5);
    const auto cfg = tiny_config();
    const auto bb = dit::ToyDit::random(cfg, 3, 0.5f);
    const auto rf = dit::ToyDit::random(cfg, 4, 0.5f);
    const auto refs = make_reference_set(cfg, 5);
    const auto cond = random_cond(cfg, rng);
    GenerationConfig gc;
    gc.seed = 17;

    auto run = [&](std::size_t n, std::string* trace) {
        ChunkGenerator gen(bb, rf, gc, &refs);
        std::ostringstream os;
        RolloutOptions o;
        o.trace = &os;
        auto r = rollout(gen, n, cond, o);
        if (trace) *trace = os.str();
        return r;
    };
    std::string t1, t2;
    const auto a = run(12, &t1);
    const auto b = run(12, &t2);
    CHECK(t1 == t2);
    const auto p = run(5, nullptr);
    for (std::size_t k = 0; k < 5; ++k) CHECK(p.chunks[k].chunk.tokens == a.chunks[k].chunk.tokens);
    for (std::size_t k = 0; k < 12; ++k) CHECK(a.chunks[k].latent_hash == b.chunks[k].latent_hash);

    ChunkGenerator single(bb, rf, gc, &refs);
    CHECK(single.generate_chunk(0, cond).chunk.tokens == a.chunks[0].chunk.tokens);
}

TEST_CASE("memory high water does not grow with rollout length") {
    std::mt19937_64 rng(6);
    const auto cfg = tiny_config();
    const auto bb = dit::ToyDit::random(cfg, 7, 0.5f);
    const auto cond = random_cond(cfg, rng);
    std::size_t peaks[2][2];
    int i = 0;
    for (std::size_t n : {10u, 50u}) {
        ChunkGenerator gen(bb, bb, {});
        const auto r = rollout(gen, n, cond);
        peaks[i][0] = r.noisy_peak_floats;
        peaks[i][1] = r.clean_peak_floats;
        ++i;
    }
    CHECK(peaks[0][0] == peaks[1][0]);
    CHECK(peaks[0][1] == peaks[1][1]);
}

TEST_CASE("stage ordering is enforced") {
    std::mt19937_64 rng(7);
    const auto cfg = tiny_config();
    const dit::ToyDit zero(cfg);
    ChunkGenerator gen(zero, zero, {});
    const auto cond = random_cond(cfg, rng);
    CHECK_THROWS_AS(gen.backbone_phase(1, cond), ContractError);
    const auto b0 = gen.backbone_phase(0, cond);
    const auto b1 = gen.backbone_phase(1, cond);
    CHECK_THROWS_AS(gen.refine_phase(b1), ContractError);
    CHECK_NOTHROW(gen.refine_phase(b0));
    CHECK_THROWS_AS(rollout(gen, 0, cond), ContractError);
}
