#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "lpm/latcore/errors.hpp"
#include "lpm/maskgen/masks.hpp"

using namespace lpm;
using namespace lpm::mask;

namespace {

// Attendable keys for a query, enumerated from the rule as written:
// video sees chunks <= its own plus refs, refs see refs.
std::set<std::size_t> oracle_keys(std::size_t q, std::size_t n_chunks, std::size_t tpc, std::size_t n_ref) {
    const std::size_t n_video = n_chunks * tpc;
    std::set<std::size_t> out;
    for (std::size_t r = 0; r < n_ref; ++r) out.insert(n_video + r);
    if (q < n_video) {
        const std::size_t qc = q / tpc;
        for (std::size_t c = 0; c <= qc; ++c)
            for (std::size_t i = 0; i < tpc; ++i) out.insert(c * tpc + i);
    }
    return out;
}

std::set<std::size_t> row_set(const BoolMask& m, std::size_t r) {
    std::set<std::size_t> s;
    for (std::size_t c = 0; c < m.cols(); ++c)
        if (m(r, c)) s.insert(c);
    return s;
}

}  // namespace

TEST_CASE("single chunk is fully bidirectional") {
    const auto m = chunk_causal_mask(1, 4, 0);
    CHECK(m == BoolMask(4, 4, true));
}

TEST_CASE("three chunks, two tokens, one reference") {
    const auto m = chunk_causal_mask(3, 2, 1);
    CHECK(row_set(m, 2) == std::set<std::size_t>{0, 1, 2, 3, 6});
    CHECK(row_set(m, 6) == std::set<std::size_t>{6});
}

TEST_CASE("chunk-causal mask matches enumeration for every small layout") {
    for (std::size_t nc = 0; nc <= 6; ++nc)
        for (std::size_t tpc = 1; tpc <= 3; ++tpc)
            for (std::size_t nr = 0; nr <= 2; ++nr) {
                if (nc * tpc + nr == 0) {
                    CHECK_THROWS_AS(chunk_causal_mask(nc, tpc, nr), ShapeError);
                    continue;
                }
                const auto m = chunk_causal_mask(nc, tpc, nr);
                for (std::size_t q = 0; q < m.rows(); ++q) {
                    CHECK(row_set(m, q) == oracle_keys(q, nc, tpc, nr));
                    CHECK(m.count_row(q) >= 1);
                    // No future key, exhaustively.
                    if (q < nc * tpc)
                        for (std::size_t k = 0; k < nc * tpc; ++k)
                            if (k / tpc > q / tpc) CHECK_FALSE(m(q, k));
                }
            }
}

TEST_CASE("windowed mask over retained chunks") {
    const std::vector<std::int64_t> retained{0, 1, 2, 8, 9};
    const std::size_t tpc = 2, nr = 3;
    const auto m = windowed_context_mask(retained, tpc, nr);
    CHECK(m.cols() == retained.size() * tpc + nr);
    // Chunk 9 is slot 4.
    for (std::size_t q = 8; q < 10; ++q) CHECK(m.count_row(q) == m.cols());
    // Slot order follows chunk order, so the window is the dense causal mask.
    CHECK(m == chunk_causal_mask(retained.size(), tpc, nr));

    const std::vector<std::int64_t> only0{0};
    CHECK(windowed_context_mask(only0, 4, 2) == chunk_causal_mask(1, 4, 2));
    CHECK_THROWS_AS(windowed_context_mask({}, 4, 2), ContractError);
    const std::vector<std::int64_t> unsorted{3, 1};
    CHECK_THROWS_AS(windowed_context_mask(unsorted, 4, 2), ContractError);
}

TEST_CASE("enlarging the retained set never removes an edge") {
    const std::vector<std::int64_t> small{0, 9}, big{0, 1, 9};
    const std::size_t tpc = 2;
    const auto a = windowed_context_mask(small, tpc, 1);
    const auto b = windowed_context_mask(big, tpc, 1);
    // Map each small column/row to its column in the big layout.
    auto to_big = [&](std::size_t i) -> std::size_t {
        if (i >= small.size() * tpc) return big.size() * tpc + (i - small.size() * tpc);
        const auto chunk = small[i / tpc];
        std::size_t slot = 0;
        while (big[slot] != chunk) ++slot;
        return slot * tpc + i % tpc;
    };
    for (std::size_t q = 0; q < a.rows(); ++q)
        for (std::size_t k = 0; k < a.cols(); ++k)
            if (a(q, k)) CHECK(b(to_big(q), to_big(k)));
}

TEST_CASE("audio window arithmetic") {
    // One token at 0 s, 16 fps audio, half-width 2 frames: frames 0..2.
    const auto m = audio_window_mask(1, 1.0, 10, 16.0, 2.0);
    CHECK(row_set(m, 0) == std::set<std::size_t>{0, 1, 2});

    const auto all = audio_window_mask(5, 3.0, 12, 8.0, kGlobalWindow);
    CHECK(all == BoolMask(5, 12, true));

    // Brute-force the time-distance rule.
    const double vr = 2.0, fps = 8.0;
    for (double w : {1.0, 3.0, 12.0}) {
        const auto mm = audio_window_mask(6, vr, 24, fps, w);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t f = 0; f < 24; ++f) {
                const bool near = std::abs(f / fps - i / vr) <= w / fps + 1e-12;
                if (near) CHECK(mm(i, f));
            }
    }

    // Listen (wider) covers speak everywhere.
    const AudioWindowSpec spec;
    const auto sp = audio_window_mask(8, 8.0, 24, 8.0, spec.speak_window, -2.0);
    const auto li = audio_window_mask(8, 8.0, 24, 8.0, spec.listen_window, -2.0);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(sp.count_row(i) >= 1);
        for (std::size_t f = 0; f < 24; ++f)
            if (sp(i, f)) CHECK(li(i, f));
    }

    // A token far outside the audio span still gets its nearest frame.
    const auto edge = audio_window_mask(1, 1.0, 4, 8.0, 1.0, 100.0);
    CHECK(row_set(edge, 0) == std::set<std::size_t>{0});
}

TEST_CASE("audio window spec validation") {
    AudioWindowSpec s;
    CHECK_NOTHROW(s.validate());
    s.listen_window = s.speak_window;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}
