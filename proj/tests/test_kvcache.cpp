#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "lpm/kvcache/cache.hpp"
#include "lpm/latcore/errors.hpp"
#include "support.hpp"

using namespace lpm;
using namespace lpm::kv;
using lpm::testing::gaussian;
using lpm::testing::random_cond;
using lpm::testing::tiny_config;

namespace {

// Direct set construction: sinks first, then the sliding tail, as a std::set.
std::vector<std::int64_t> oracle_retained(std::int64_t cur, std::int64_t sink, std::int64_t recent) {
    std::set<std::int64_t> s;
    for (std::int64_t c = 0; c <= cur; ++c)
        if (c < sink || c > cur - recent) s.insert(c);
    return {s.begin(), s.end()};
}

KvEntry entry(std::int64_t chunk, std::size_t layer, std::size_t tpc, KvVariant v = KvVariant::Noisy) {
    return {chunk, layer, v, Tensor2D(tpc, 8, float(chunk)), Tensor2D(tpc, 8, -float(chunk)), SpanKind::Video};
}

}  // namespace

TEST_CASE("retained set examples") {
    const RetentionPolicy p;
    CHECK(retained_set(9, p) == std::vector<std::int64_t>{0, 1, 2, 8, 9});
    CHECK(retained_set(2, p) == std::vector<std::int64_t>{0, 1, 2});
    CHECK(retained_set(0, p) == std::vector<std::int64_t>{0});
    for (std::int64_t c = 4; c <= 100; ++c) CHECK(retained_set(c, p).size() == 5);
    CHECK_THROWS_AS(retained_set(-1, p), ContractError);
}

TEST_CASE("retained set matches the set definition across policies") {
    for (std::size_t sink = 0; sink <= 4; ++sink)
        for (std::size_t recent = 1; recent <= 4; ++recent)
            for (std::int64_t cur = 0; cur <= 30; ++cur)
                CHECK(retained_set(cur, {sink, recent}) ==
                      oracle_retained(cur, std::int64_t(sink), std::int64_t(recent)));
}

TEST_CASE("insert and evict replay") {
    const RetentionPolicy p;
    const std::size_t tpc = 4, layers = 2;
    KvCache cache(KvVariant::Noisy, layers, tpc);
    std::vector<KvEntry> refs{{-1, 0, KvVariant::Noisy, Tensor2D(2, 8, 7.0f), Tensor2D(2, 8, 7.0f)},
                              {-1, 1, KvVariant::Noisy, Tensor2D(2, 8, 7.0f), Tensor2D(2, 8, 7.0f)}};
    cache.set_references(refs, {{100, 0, 0}, {200, 0, 0}});
    const std::size_t bound = p.window_chunks() * tpc * layers * 2 * 8 + 2 * 2 * 8 * layers;
    std::size_t steady = 0;
    for (std::int64_t c = 0; c < 10; ++c) {
        for (std::size_t l = 0; l < layers; ++l) cache.insert(entry(c, l, tpc));
        cache.evict_for(c + 1, p);
        // Entries needed for the next chunk stay; everything else is gone.
        auto want = retained_set(c + 1, p);
        want.pop_back();
        CHECK(cache.stored_chunks() == want);
        CHECK(cache.stats().stored_floats <= bound);
        if (c >= 5) {
            if (steady == 0) steady = cache.stats().entries;
            CHECK(cache.stats().entries == steady);
        }
        for (std::int64_t s = 0; s < std::min<std::int64_t>(3, c + 1); ++s) CHECK(cache.contains(s, 0));
        CHECK(cache.reference(1).k_pre == refs[1].k_pre);
    }
    // Final stored set for current 9, once its own entries are in.
    KvCache last(KvVariant::Noisy, 1, tpc);
    for (std::int64_t c = 0; c < 10; ++c) {
        last.evict_for(c, p);
        last.insert(entry(c, 0, tpc));
    }
    CHECK(last.stored_chunks() == std::vector<std::int64_t>{0, 1, 2, 8, 9});
}

TEST_CASE("insert contract") {
    KvCache cache(KvVariant::Clean, 2, 4);
    cache.insert(entry(0, 0, 4, KvVariant::Clean));
    CHECK_THROWS_AS(cache.insert(entry(0, 0, 4, KvVariant::Clean)), ContractError);
    CHECK_THROWS_AS(cache.insert(entry(1, 0, 4, KvVariant::Noisy)), ContractError);
    CHECK_THROWS_AS(cache.insert(entry(1, 5, 4, KvVariant::Clean)), ContractError);
}

TEST_CASE("missing history is a cache miss") {
    const RetentionPolicy p;
    KvCache cache(KvVariant::Noisy, 1, 4);
    cache.insert(entry(0, 0, 4));
    CHECK_THROWS_AS(cache.assemble_window(2, p, rope::RopeParams::temporal(8)), CacheMissError);
    CHECK_NOTHROW(cache.assemble_window(1, p, rope::RopeParams::temporal(8)));
}

TEST_CASE("empty history window at session start") {
    KvCache cache(KvVariant::Noisy, 2, 4);
    const auto w = cache.assemble_window(0, {}, rope::RopeParams::temporal(8));
    CHECK(w.history_rows() == 0);
    CHECK(w.retained == std::vector<std::int64_t>{0});
    CHECK(w.current_positions.size() == 4);
    CHECK(w.current_positions.front().t == 0);
}

TEST_CASE("window positions: sinks keep absolute slots, the tail is renumbered") {
    const auto pos = window_positions(std::vector<std::int64_t>{0, 1, 2, 8, 9}, 2);
    REQUIRE(pos.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(pos[i].t == std::int64_t(i));
}

TEST_CASE("cached window equals a full uncached forward before eviction") {
    std::mt19937_64 rng(1);
    const auto cfg = tiny_config();
    const auto model = dit::ToyDit::random(cfg, 3, 0.8f);
    const auto refs = denoise::make_reference_set(cfg, 4);
    testing::StreamHarness h(model, {}, &refs);
    const auto cond = random_cond(cfg, rng);
    std::vector<Tensor2D> xs;
    std::vector<float> ts;
    for (int c = 0; c < 4; ++c) {
        xs.push_back(gaussian(cfg.tokens_per_chunk, cfg.d_model, rng));
        ts.push_back(c % 2 ? 1.0f : 0.5f);
        h.push(xs.back(), ts.back(), cond);
    }
    const std::vector<dit::CondBundle> conds{cond};
    const auto full = model.forward_full(xs, ts, conds, &h.refs);
    for (std::size_t c = 0; c < 4; ++c) CHECK(full.out.slice_rows(c * 4, 4) == h.steps[c].out);
}

TEST_CASE("cached attention equals recompute over the retained window") {
    std::mt19937_64 rng(2);
    const auto cfg = tiny_config();
    const auto model = dit::ToyDit::random(cfg, 5, 0.8f);
    const auto refs = denoise::make_reference_set(cfg, 6);
    testing::StreamHarness h(model, {}, &refs);
    const auto cond = random_cond(cfg, rng);
    for (int c = 0; c < 12; ++c) {
        h.push(gaussian(cfg.tokens_per_chunk, cfg.d_model, rng), c % 3 ? 1.0f : 0.5f, cond);
        const auto oracle = testing::recompute_window(h, c, cond);
        CHECK(max_abs_diff(oracle, h.steps.back().out) < 1e-5f);
    }
    // The current-9 window holds exactly the five retained chunks.
    CHECK(kv::retained_set(9, {}).size() == 5);
}

TEST_CASE("snapshot dump writes an index and a blob") {
    const auto dir = std::filesystem::temp_directory_path() / "lpm_kv_snapshot_test";
    std::filesystem::remove_all(dir);
    KvCache cache(KvVariant::Noisy, 1, 4);
    cache.insert(entry(0, 0, 4));
    cache.insert(entry(1, 0, 4));
    cache.dump_snapshot(dir);
    std::ifstream in(dir / "index.json");
    const auto idx = nlohmann::json::parse(in);
    CHECK(idx.at("variant") == "noisy");
    CHECK(idx.at("entries").size() == 2);
    CHECK(std::filesystem::file_size(dir / "kv.bin") == 2 * 2 * 4 * 8 * sizeof(float));
    std::filesystem::remove_all(dir);
}
