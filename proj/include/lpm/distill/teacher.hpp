#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace lpm::distill {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

// Autoregressive 2-D Gaussian mixture. Chunk l given the previous clean
// chunk p: sum_k w_k N(base_k + A p, sigma^2 I). Chunk 0 uses p = 0.
//
// Under x_t = (1 - t) x0 + t eps the marginal stays a mixture with means
// (1 - t) mu_k and variance v = (1 - t)^2 sigma^2 + t^2.
struct MixtureTeacher {
    std::vector<double> weights{0.5, 0.5};
    std::vector<Vec2> bases{Vec2(-2.0, 0.0), Vec2(2.0, 0.0)};
    Mat2 coupling = (Mat2() << 0.5, 0.0, 0.3, 0.0).finished();
    double sigma = 0.4;

    void validate() const;
    std::size_t n_modes() const { return weights.size(); }
    Vec2 mode_mean(std::size_t k, const Vec2& prev) const { return bases[k] + coupling * prev; }

    double variance(double t) const { return (1.0 - t) * (1.0 - t) * sigma * sigma + t * t; }
    // Posterior mode probabilities of x at noise level t.
    std::vector<double> responsibilities(const Vec2& x, double t, const Vec2& prev) const;
    double log_density(const Vec2& x, double t, const Vec2& prev) const;
    // grad_x log p_t(x | prev). At t = 1 this is -x.
    Vec2 score(const Vec2& x, double t, const Vec2& prev) const;
    // E[x0 | x_t = x, prev].
    Vec2 denoise(const Vec2& x, double t, const Vec2& prev) const;
    // Probability-flow velocity dx/dt = (x - E[x0 | x]) / t for t in (0, 1].
    Vec2 velocity(const Vec2& x, double t, const Vec2& prev) const;

    Vec2 sample(const Vec2& prev, std::mt19937_64& rng) const;
    std::size_t assign_mode(const Vec2& x, const Vec2& prev) const;

    nlohmann::json to_json() const;
    static MixtureTeacher from_json(const nlohmann::json& j);
};

// Euler integration of the probability-flow ODE from t_from down to t_to.
Vec2 integrate_ode(const MixtureTeacher& teacher, Vec2 x, double t_from, double t_to, std::size_t substeps,
                   const Vec2& prev);

// Teacher ODE states of one chunk at the schedule levels {T0, T1, T2, 0}.
struct ChunkStates {
    Vec2 x_t0, x_t1, x_t2, x0;
};

struct TrajectoryDataset {
    std::size_t n_sequences = 0;
    std::size_t n_chunks = 0;
    std::vector<ChunkStates> states;  // sequence-major

    const ChunkStates& at(std::size_t seq, std::size_t chunk) const { return states[seq * n_chunks + chunk]; }
};

struct Levels {
    double t0 = 1.0, t1 = 0.5, t2 = 0.3;
};

// Chunk l starts from Gaussian noise at T0 and is integrated conditioned on
// chunk l-1's clean endpoint. Seed-deterministic.
TrajectoryDataset teacher_ode_rollout(const MixtureTeacher& teacher, const Levels& levels, std::size_t n_sequences,
                                      std::size_t n_chunks, std::size_t substeps, std::uint64_t seed);

// Exact ancestral samples: out[seq][chunk].
std::vector<std::vector<Vec2>> teacher_ancestral(const MixtureTeacher& teacher, std::size_t n_sequences,
                                                 std::size_t n_chunks, std::uint64_t seed);

}  // namespace lpm::distill
