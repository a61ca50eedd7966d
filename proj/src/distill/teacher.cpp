#include "lpm/distill/teacher.hpp"

#include <cmath>
#include <numbers>

#include "lpm/latcore/errors.hpp"

namespace lpm::distill {

void MixtureTeacher::validate() const {
    if (weights.empty() || weights.size() != bases.size()) throw ConfigError("teacher: one base per weight");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw ConfigError("teacher: weights must be positive");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("teacher: weights must sum to 1");
    if (!(sigma > 0.0)) throw ConfigError("teacher: sigma must be positive");
}

std::vector<double> MixtureTeacher::responsibilities(const Vec2& x, double t, const Vec2& prev) const {
    const double v = variance(t);
    std::vector<double> logit(n_modes());
    double mx = -INFINITY;
    for (std::size_t k = 0; k < n_modes(); ++k) {
        const Vec2 d = x - (1.0 - t) * mode_mean(k, prev);
        logit[k] = std::log(weights[k]) - 0.5 * d.squaredNorm() / v;
        mx = std::max(mx, logit[k]);
    }
    double z = 0.0;
    for (double& l : logit) z += (l = std::exp(l - mx));
    for (double& l : logit) l /= z;
    return logit;
}

double MixtureTeacher::log_density(const Vec2& x, double t, const Vec2& prev) const {
    const double v = variance(t);
    double mx = -INFINITY;
    std::vector<double> terms(n_modes());
    for (std::size_t k = 0; k < n_modes(); ++k) {
        const Vec2 d = x - (1.0 - t) * mode_mean(k, prev);
        terms[k] = std::log(weights[k]) - 0.5 * d.squaredNorm() / v - std::log(2.0 * std::numbers::pi * v);
        mx = std::max(mx, terms[k]);
    }
    double s = 0.0;
    for (double l : terms) s += std::exp(l - mx);
    return mx + std::log(s);
}

Vec2 MixtureTeacher::score(const Vec2& x, double t, const Vec2& prev) const {
    if (t >= 1.0) return -x;
    const double v = variance(t);
    const auto r = responsibilities(x, t, prev);
    Vec2 s = Vec2::Zero();
    for (std::size_t k = 0; k < n_modes(); ++k) s += r[k] * (-(x - (1.0 - t) * mode_mean(k, prev)) / v);
    return s;
}

Vec2 MixtureTeacher::denoise(const Vec2& x, double t, const Vec2& prev) const {
    const double v = variance(t);
    const auto r = responsibilities(x, t, prev);
    const double gain = (1.0 - t) * sigma * sigma / v;
    Vec2 out = Vec2::Zero();
    for (std::size_t k = 0; k < n_modes(); ++k) {
        const Vec2 mu = mode_mean(k, prev);
        out += r[k] * (mu + gain * (x - (1.0 - t) * mu));
    }
    return out;
}

Vec2 MixtureTeacher::velocity(const Vec2& x, double t, const Vec2& prev) const {
    if (!(t > 0.0)) throw ContractError("velocity: t must be positive");
    return (x - denoise(x, t, prev)) / t;
}

Vec2 MixtureTeacher::sample(const Vec2& prev, std::mt19937_64& rng) const {
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t k = pick(rng);
    const double a = normal(rng);
    const double b = normal(rng);
    return mode_mean(k, prev) + sigma * Vec2(a, b);
}

std::size_t MixtureTeacher::assign_mode(const Vec2& x, const Vec2& prev) const {
    const auto r = responsibilities(x, 0.0, prev);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

nlohmann::json MixtureTeacher::to_json() const {
    nlohmann::json b = nlohmann::json::array();
    for (const auto& v : bases) b.push_back({v.x(), v.y()});
    return {{"weights", weights},
            {"bases", b},
            {"coupling", {coupling(0, 0), coupling(0, 1), coupling(1, 0), coupling(1, 1)}},
            {"sigma", sigma}};
}

MixtureTeacher MixtureTeacher::from_json(const nlohmann::json& j) {
    MixtureTeacher t;
    t.weights = j.at("weights").get<std::vector<double>>();
    t.bases.clear();
    for (const auto& b : j.at("bases")) t.bases.emplace_back(b.at(0).get<double>(), b.at(1).get<double>());
    const auto c = j.at("coupling").get<std::vector<double>>();
    if (c.size() != 4) throw FormatError("teacher: coupling needs 4 values");
    t.coupling << c[0], c[1], c[2], c[3];
    t.sigma = j.at("sigma").get<double>();
    t.validate();
    return t;
}

Vec2 integrate_ode(const MixtureTeacher& teacher, Vec2 x, double t_from, double t_to, std::size_t substeps,
                   const Vec2& prev) {
    const double h = (t_from - t_to) / static_cast<double>(substeps);
    for (std::size_t i = 0; i < substeps; ++i) {
        const double t = t_from - h * static_cast<double>(i);
        x -= h * teacher.velocity(x, t, prev);
    }
    return x;
}

TrajectoryDataset teacher_ode_rollout(const MixtureTeacher& teacher, const Levels& levels, std::size_t n_sequences,
                                      std::size_t n_chunks, std::size_t substeps, std::uint64_t seed) {
    teacher.validate();
    TrajectoryDataset ds;
    ds.n_sequences = n_sequences;
    ds.n_chunks = n_chunks;
    ds.states.resize(n_sequences * n_chunks);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        Vec2 prev = Vec2::Zero();
        for (std::size_t c = 0; c < n_chunks; ++c) {
            ChunkStates st;
            const double a = normal(rng);
            const double b = normal(rng);
            st.x_t0 = Vec2(a, b);
            st.x_t1 = integrate_ode(teacher, st.x_t0, levels.t0, levels.t1, substeps, prev);
            st.x_t2 = integrate_ode(teacher, st.x_t1, levels.t1, levels.t2, substeps, prev);
            st.x0 = integrate_ode(teacher, st.x_t2, levels.t2, 0.0, substeps, prev);
            ds.states[s * n_chunks + c] = st;
            prev = st.x0;
        }
    }
    return ds;
}

std::vector<std::vector<Vec2>> teacher_ancestral(const MixtureTeacher& teacher, std::size_t n_sequences,
                                                 std::size_t n_chunks, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<Vec2>> out(n_sequences, std::vector<Vec2>(n_chunks));
    for (auto& seq : out) {
        Vec2 prev = Vec2::Zero();
        for (auto& x : seq) {
            x = teacher.sample(prev, rng);
            prev = x;
        }
    }
    return out;
}

}  // namespace lpm::distill
