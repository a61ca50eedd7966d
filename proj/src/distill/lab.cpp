#include "lpm/distill/lab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "lpm/latcore/errors.hpp"
#include "lpm/latcore/latent.hpp"

namespace lpm::distill {

namespace {

constexpr std::uint64_t kHeldoutSalt = 0x68656c646f7574ull;

MatF zeros2(std::size_t n) { return MatF::Zero(2, static_cast<Eigen::Index>(n)); }

MatF gaussian2(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    MatF m(2, static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

MatF renoise_cols(const MatF& x0, const std::vector<float>& t, const MatF& eps) {
    MatF out(2, x0.cols());
    for (Eigen::Index i = 0; i < x0.cols(); ++i) {
        const float ti = t[static_cast<std::size_t>(i)];
        out.col(i) = (1.0f - ti) * x0.col(i) + ti * eps.col(i);
    }
    return out;
}

MatF renoise_const(const MatF& x0, float t, const MatF& eps) { return (1.0f - t) * x0 + t * eps; }

Vec2 col2(const MatF& m, Eigen::Index i) { return Vec2(m(0, i), m(1, i)); }

void check_finite(const MatF& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string("distill: non-finite ") + what + " (training diverged)");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::uint64_t dataset_hash(const TrajectoryDataset& ds) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& s : ds.states) {
        const float v[8] = {float(s.x_t0.x()), float(s.x_t0.y()), float(s.x_t1.x()), float(s.x_t1.y()),
                            float(s.x_t2.x()), float(s.x_t2.y()), float(s.x0.x()),   float(s.x0.y())};
        h = hash_floats(v, h);
    }
    return h;
}

}  // namespace

void LabConfig::validate() const {
    teacher.validate();
    if (!(levels.t0 >= levels.t1 && levels.t1 >= levels.t2 && levels.t2 > 0.0 && levels.t0 <= 1.0)) {
        throw ConfigError("distill: levels must satisfy 1 >= T0 >= T1 >= T2 > 0");
    }
    if (n_sequences == 0 || train_chunks == 0 || batch == 0) throw ConfigError("distill: empty dataset or batch");
    if (ode_substeps == 0) throw ConfigError("distill: need at least one ODE substep");
    if (!(t_min > 0.0 && t_min < t_max && t_max < 1.0)) throw ConfigError("distill: perturbation range inside (0,1)");
    if (fake_per_gen == 0) throw ConfigError("distill: fake_per_gen must be >= 1");
}

nlohmann::json LabConfig::to_json() const {
    return {{"teacher", teacher.to_json()},
            {"levels", {levels.t0, levels.t1, levels.t2}},
            {"seed", seed},
            {"ode_substeps", ode_substeps},
            {"n_sequences", n_sequences},
            {"train_chunks", train_chunks},
            {"eval_chunks", eval_chunks},
            {"eval_rollouts", eval_rollouts},
            {"hidden", hidden},
            {"batch", batch},
            {"steps", {steps1, steps2, steps3, steps4}},
            {"fake_per_gen", fake_per_gen},
            {"fake_warmup", fake_warmup},
            {"lr", {{"reg", lr_reg}, {"fake", lr_fake}, {"gen", lr_gen}}},
            {"reg_weight", reg_weight},
            {"t_range", {t_min, t_max}}};
}

std::vector<float> time_embedding(float t) {
    const float pi = std::numbers::pi_v<float>;
    return {t, std::sin(pi * t), std::cos(pi * t), std::sqrt(std::max(t, 0.0f))};
}

MatF features(const MatF& x_t, const std::vector<float>& t, const MatF& history, const std::vector<float>& first) {
    const Eigen::Index n = x_t.cols();
    if (static_cast<Eigen::Index>(t.size()) != n || history.cols() != n || static_cast<Eigen::Index>(first.size()) != n ||
        x_t.rows() != 2 || history.rows() != 2) {
        throw ShapeError("distill: feature inputs disagree on batch size");
    }
    MatF f(kFeatureDim, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto e = time_embedding(t[static_cast<std::size_t>(i)]);
        f(0, i) = x_t(0, i);
        f(1, i) = x_t(1, i);
        for (int j = 0; j < 4; ++j) f(2 + j, i) = e[static_cast<std::size_t>(j)];
        f(6, i) = history(0, i);
        f(7, i) = history(1, i);
        f(8, i) = first[static_cast<std::size_t>(i)];
    }
    return f;
}

Net make_net(int hidden, std::uint64_t seed) { return Net({kFeatureDim, hidden, hidden, 2}, seed); }

MatF predict(const Net& net, const MatF& x_t, const std::vector<float>& t, const MatF& history,
             const std::vector<float>& first) {
    return net.forward(features(x_t, t, history, first));
}

MatF teacher_denoise(const MixtureTeacher& teacher, const MatF& x_t, const std::vector<float>& t, const MatF& prev) {
    MatF out(2, x_t.cols());
    for (Eigen::Index i = 0; i < x_t.cols(); ++i) {
        const Vec2 d = teacher.denoise(col2(x_t, i), t[static_cast<std::size_t>(i)], col2(prev, i));
        out(0, i) = static_cast<float>(d.x());
        out(1, i) = static_cast<float>(d.y());
    }
    return out;
}

Denoiser net_denoiser(const Net& net) {
    return [&net](const MatF& x, const std::vector<float>& t, const MatF& prev, const std::vector<float>& first) {
        return predict(net, x, t, prev, first);
    };
}

Denoiser teacher_denoiser(const MixtureTeacher& teacher) {
    return [&teacher](const MatF& x, const std::vector<float>& t, const MatF& prev, const std::vector<float>&) {
        return teacher_denoise(teacher, x, t, prev);
    };
}

DmdResult dmd_step(const Net& gen, const MatF& gen_input, const MatF& prev_clean, const std::vector<float>& first,
                   const Denoiser& fake, const Denoiser& real, std::mt19937_64& rng, double t_min, double t_max,
                   const MatF* reg_target, double reg_w) {
    Net::Tape tape;
    const MatF x0 = gen.forward(gen_input, &tape);
    check_finite(x0, "generator output");
    const auto n = static_cast<std::size_t>(x0.cols());
    DmdResult r;
    r.x0_grad = zeros2(n);
    if (n == 0) return r;

    std::uniform_real_distribution<double> ut(t_min, t_max);
    std::vector<float> t(n);
    for (float& v : t) v = static_cast<float>(ut(rng));
    const MatF eps = gaussian2(n, rng);
    const MatF x_t = renoise_cols(x0, t, eps);
    const MatF d_fake = fake(x_t, t, prev_clean, first);
    const MatF d_real = real(x_t, t, prev_clean, first);
    const MatF diff = d_fake - d_real;
    const double norm = std::max(1e-3, static_cast<double>((x0 - d_real).cwiseAbs().mean()));
    r.x0_grad = diff / static_cast<float>(norm);

    const float inv_n = 1.0f / static_cast<float>(n);
    MatF dy = r.x0_grad * inv_n;
    r.dmd_loss = 0.5 * r.x0_grad.colwise().squaredNorm().mean();
    r.grad_norm = r.x0_grad.colwise().norm().mean();
    if (reg_target && reg_w > 0.0) {
        const MatF res = x0 - *reg_target;
        r.reg_loss = res.colwise().squaredNorm().mean();
        dy += (2.0f * static_cast<float>(reg_w) * inv_n) * res;
    } else if (reg_target) {
        r.reg_loss = (x0 - *reg_target).colwise().squaredNorm().mean();
    }
    r.grads = gen.backward(tape, dy);
    return r;
}

double fake_update(Net& fake, Adam<float>& opt, const MatF& x0_samples, const MatF& prev_clean,
                   const std::vector<float>& first, std::mt19937_64& rng, double t_min, double t_max) {
    const auto n = static_cast<std::size_t>(x0_samples.cols());
    if (n == 0) return 0.0;
    std::uniform_real_distribution<double> ut(t_min, t_max);
    std::vector<float> t(n);
    for (float& v : t) v = static_cast<float>(ut(rng));
    const MatF x_t = renoise_cols(x0_samples, t, gaussian2(n, rng));
    Net::Tape tape;
    const MatF y = fake.forward(features(x_t, t, prev_clean, first), &tape);
    const MatF res = y - x0_samples;
    check_finite(res, "fake-score output");
    opt.step(fake, fake.backward(tape, (2.0f / static_cast<float>(n)) * res));
    return res.colwise().squaredNorm().mean();
}

const char* to_string(Lineage l) { return l == Lineage::TeacherDerived ? "teacher" : "self_rollout"; }

std::uint64_t matrix_hash(const MatF& m) {
    return hash_floats(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

std::uint64_t weight_hash(const Net& net) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        const auto& w = net.weights()[l];
        const auto& b = net.biases()[l];
        h = hash_floats(std::span<const float>(w.data(), static_cast<std::size_t>(w.size())), h);
        h = hash_floats(std::span<const float>(b.data(), static_cast<std::size_t>(b.size())), h);
    }
    return h;
}

Rollout rollout_stack(const Net& backbone, const Net* refiner, const Levels& levels, std::size_t n,
                      std::size_t chunks, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Rollout r;
    MatF noisy = zeros2(n);
    MatF clean = zeros2(n);
    const auto t0 = static_cast<float>(levels.t0);
    const auto t1 = static_cast<float>(levels.t1);
    const auto t2 = static_cast<float>(levels.t2);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::vector<float> first(n, c == 0 ? 1.0f : 0.0f);
        // Draw all three noises every chunk so stacks with and without a
        // refiner share the backbone's noise stream.
        const MatF eps0 = gaussian2(n, rng);
        const MatF eps1 = gaussian2(n, rng);
        const MatF eps2 = gaussian2(n, rng);
        const MatF x_init = renoise_const(zeros2(n), t0, eps0);
        const MatF xa = predict(backbone, x_init, std::vector<float>(n, t0), noisy, first);
        const MatF x1 = renoise_const(xa, t1, eps1);
        const MatF xb = predict(backbone, x1, std::vector<float>(n, t1), noisy, first);
        MatF out = xb;
        if (refiner) out = predict(*refiner, renoise_const(xb, t2, eps2), std::vector<float>(n, t2), clean, first);
        r.backbone.push_back(xb);
        r.noisy_hist.push_back(x1);
        r.clean.push_back(out);
        noisy = x1;
        clean = out;
    }
    return r;
}

nlohmann::json EvalReport::to_json() const {
    return {{"n", n}, {"occupancy", occupancy}, {"mode_mean_error", mode_mean_error}, {"w2", w2}, {"drift", drift}};
}

double sliced_w2(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t n_dirs, std::uint64_t seed) {
    if (a.rows() != b.rows()) throw ShapeError("sliced_w2: dimension mismatch");
    if (a.cols() == 0 || b.cols() == 0) return 0.0;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Eigen::Index m = std::max(a.cols(), b.cols());
    double total = 0.0;
    for (std::size_t d = 0; d < n_dirs; ++d) {
        Eigen::VectorXd dir(a.rows());
        for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = normal(rng);
        dir.normalize();
        Eigen::VectorXd pa = a.transpose() * dir;
        Eigen::VectorXd pb = b.transpose() * dir;
        std::sort(pa.data(), pa.data() + pa.size());
        std::sort(pb.data(), pb.data() + pb.size());
        double acc = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) {
            const double q = (static_cast<double>(j) + 0.5) / static_cast<double>(m);
            const double va = pa(static_cast<Eigen::Index>(q * static_cast<double>(pa.size())));
            const double vb = pb(static_cast<Eigen::Index>(q * static_cast<double>(pb.size())));
            acc += (va - vb) * (va - vb);
        }
        total += acc / static_cast<double>(m);
    }
    return std::sqrt(total / static_cast<double>(n_dirs));
}

EvalReport evaluate_samples(const MixtureTeacher& teacher, const std::vector<MatF>& samples, std::uint64_t seed) {
    EvalReport rep;
    if (samples.empty() || samples.front().cols() == 0) return rep;
    const auto n = static_cast<std::size_t>(samples.front().cols());
    const std::size_t chunks = samples.size();
    const std::size_t k_modes = teacher.n_modes();
    rep.n = n;
    std::vector<double> count(k_modes, 0.0);
    std::vector<Vec2> resid(k_modes, Vec2::Zero());
    for (std::size_t c = 0; c < chunks; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const Vec2 prev = c == 0 ? Vec2::Zero() : col2(samples[c - 1], ii);
            const Vec2 x = col2(samples[c], ii);
            const std::size_t k = teacher.assign_mode(x, prev);
            count[k] += 1.0;
            resid[k] += x - teacher.mode_mean(k, prev);
        }
    }
    const double total = static_cast<double>(n * chunks);
    for (std::size_t k = 0; k < k_modes; ++k) {
        rep.occupancy.push_back(count[k] / total);
        rep.mode_mean_error.push_back(count[k] > 0 ? (resid[k] / count[k]).norm() / teacher.sigma
                                                   : std::numeric_limits<double>::infinity());
    }

    // Teacher reference, four times the sample count.
    const std::size_t n_ref = 4 * n;
    const auto ref = teacher_ancestral(teacher, n_ref, chunks, seed ^ 0x7265666572656e63ull);
    if (chunks >= 2) {
        Eigen::MatrixXd gen_pairs(4, static_cast<Eigen::Index>(n * (chunks - 1)));
        Eigen::MatrixXd ref_pairs(4, static_cast<Eigen::Index>(n_ref * (chunks - 1)));
        Eigen::Index col = 0;
        for (std::size_t c = 1; c < chunks; ++c) {
            for (std::size_t i = 0; i < n; ++i, ++col) {
                const auto ii = static_cast<Eigen::Index>(i);
                gen_pairs.col(col) << samples[c - 1](0, ii), samples[c - 1](1, ii), samples[c](0, ii), samples[c](1, ii);
            }
        }
        col = 0;
        for (std::size_t c = 1; c < chunks; ++c) {
            for (std::size_t i = 0; i < n_ref; ++i, ++col) {
                ref_pairs.col(col) << ref[i][c - 1], ref[i][c];
            }
        }
        rep.w2 = sliced_w2(gen_pairs, ref_pairs, 64, seed);
    }
    Eigen::MatrixXd last(2, static_cast<Eigen::Index>(n));
    Eigen::MatrixXd ref_last(2, static_cast<Eigen::Index>(n_ref));
    for (std::size_t i = 0; i < n; ++i) last.col(static_cast<Eigen::Index>(i)) = samples.back().col(static_cast<Eigen::Index>(i)).cast<double>();
    for (std::size_t i = 0; i < n_ref; ++i) ref_last.col(static_cast<Eigen::Index>(i)) = ref[i][chunks - 1];
    rep.drift = sliced_w2(last, ref_last, 64, seed + 1);
    return rep;
}

EvalReport eval_rollouts(const MixtureTeacher& teacher, const Levels& levels, const Net& backbone,
                         const Net* refiner, std::size_t n, std::size_t chunks, std::uint64_t seed) {
    if (n == 0 || chunks == 0) return {};
    const Rollout r = rollout_stack(backbone, refiner, levels, n, chunks, seed);
    return evaluate_samples(teacher, r.clean, seed);
}

Lab::Lab(LabConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    train_ = teacher_ode_rollout(cfg_.teacher, cfg_.levels, cfg_.n_sequences, cfg_.train_chunks, cfg_.ode_substeps,
                                 cfg_.seed);
    heldout_ = teacher_ode_rollout(cfg_.teacher, cfg_.levels, cfg_.n_heldout, cfg_.train_chunks, cfg_.ode_substeps,
                                   cfg_.seed ^ kHeldoutSalt);
    train_hash_ = dataset_hash(train_);
}

Lab::Batch Lab::teacher_batch(std::mt19937_64& rng, bool stage1_inputs) const {
    const std::size_t n = cfg_.batch;
    std::uniform_int_distribution<std::size_t> pick_seq(0, train_.n_sequences - 1);
    std::uniform_int_distribution<std::size_t> pick_chunk(0, train_.n_chunks - 1);
    std::bernoulli_distribution pick_t(0.5);
    Batch b;
    b.input_x = zeros2(n);
    b.history = zeros2(n);
    b.prev_clean = zeros2(n);
    b.target = zeros2(n);
    b.t.resize(n);
    b.first.resize(n);
    b.source_hash = train_hash_;
    const MatF eps_in = gaussian2(n, rng);
    const MatF eps_hist = gaussian2(n, rng);
    const auto t1 = static_cast<float>(cfg_.levels.t1);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const std::size_t s = pick_seq(rng);
        const std::size_t c = pick_chunk(rng);
        const auto& st = train_.at(s, c);
        const bool at_t0 = pick_t(rng);
        const float t = static_cast<float>(at_t0 ? cfg_.levels.t0 : cfg_.levels.t1);
        b.t[i] = t;
        b.first[i] = c == 0 ? 1.0f : 0.0f;
        b.target.col(ii) = st.x0.cast<float>();
        if (stage1_inputs) {
            b.input_x.col(ii) = (at_t0 ? st.x_t0 : st.x_t1).cast<float>();
        } else {
            b.input_x.col(ii) = (1.0f - t) * b.target.col(ii) + t * eps_in.col(ii);
        }
        if (c > 0) {
            b.prev_clean.col(ii) = train_.at(s, c - 1).x0.cast<float>();
            b.history.col(ii) = (1.0f - t1) * b.prev_clean.col(ii) + t1 * eps_hist.col(ii);
        }
    }
    return b;
}

double Lab::heldout_loss(const Net& backbone) const {
    std::mt19937_64 rng(cfg_.seed ^ kHeldoutSalt);
    const std::size_t n = heldout_.n_sequences * heldout_.n_chunks;
    const MatF eps = gaussian2(n, rng);
    const auto t1 = static_cast<float>(cfg_.levels.t1);
    double total = 0.0;
    for (int which = 0; which < 2; ++which) {
        MatF x = zeros2(n), hist = zeros2(n), target = zeros2(n);
        std::vector<float> t(n, static_cast<float>(which == 0 ? cfg_.levels.t0 : cfg_.levels.t1));
        std::vector<float> first(n);
        for (std::size_t s = 0; s < heldout_.n_sequences; ++s) {
            for (std::size_t c = 0; c < heldout_.n_chunks; ++c) {
                const auto i = static_cast<Eigen::Index>(s * heldout_.n_chunks + c);
                const auto& st = heldout_.at(s, c);
                x.col(i) = (which == 0 ? st.x_t0 : st.x_t1).cast<float>();
                target.col(i) = st.x0.cast<float>();
                first[static_cast<std::size_t>(i)] = c == 0 ? 1.0f : 0.0f;
                if (c > 0) hist.col(i) = (1.0f - t1) * heldout_.at(s, c - 1).x0.cast<float>() + t1 * eps.col(i);
            }
        }
        total += (predict(backbone, x, t, hist, first) - target).colwise().squaredNorm().mean();
    }
    return total / 2.0;
}

StageReport Lab::stage1(Net& backbone) const {
    const auto start = std::chrono::steady_clock::now();
    StageReport rep;
    rep.stage = 1;
    rep.initial_heldout = heldout_loss(backbone);
    std::mt19937_64 rng(cfg_.seed * 4 + 1);
    Adam<float> opt(cfg_.lr_reg);
    const std::size_t steps = cfg_.steps1;
    for (std::size_t step = 0; step < steps; ++step) {
        // Cosine decay keeps the held-out curve settling instead of jittering.
        opt.set_lr(cfg_.lr_reg * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / steps)));
        const Batch b = teacher_batch(rng, true);
        Net::Tape tape;
        const MatF y = backbone.forward(features(b.input_x, b.t, b.history, b.first), &tape);
        const MatF res = y - b.target;
        check_finite(res, "stage-1 prediction");
        opt.step(backbone, backbone.backward(tape, (2.0f / static_cast<float>(cfg_.batch)) * res));
        if (step == 0) rep.lineage.push_back({1, Lineage::TeacherDerived, matrix_hash(b.input_x), train_hash_, 0});
        if ((step + 1) % cfg_.log_every == 0 || step + 1 == steps) {
            CurvePoint p;
            p.stage = 1;
            p.step = step + 1;
            p.loss_reg = res.colwise().squaredNorm().mean();
            p.heldout = heldout_loss(backbone);
            rep.curve.push_back(p);
        }
    }
    rep.final_heldout = heldout_loss(backbone);
    rep.seconds = seconds_since(start);
    return rep;
}

void Lab::warm_fake(Net& fake, Adam<float>& opt, const std::function<Batch(std::mt19937_64&)>& sampler,
                    const Net& gen, std::mt19937_64& rng, StageReport& rep) const {
    double loss = 0.0;
    for (std::size_t i = 0; i < cfg_.fake_warmup; ++i) {
        const Batch b = sampler(rng);
        const MatF x0 = predict(gen, b.input_x, b.t, b.history, b.first);
        loss = fake_update(fake, opt, x0, b.prev_clean, b.first, rng, cfg_.t_min, cfg_.t_max);
    }
    CurvePoint p;
    p.stage = rep.stage;
    p.step = 0;
    p.loss_fake = loss;
    p.heldout = std::numeric_limits<double>::quiet_NaN();
    rep.curve.push_back(p);
}

StageReport Lab::dmd_stage(int stage, Net& gen, Net& fake, const std::function<Batch(std::mt19937_64&)>& sampler,
                           Lineage lineage, std::size_t steps, double reg_w, std::uint64_t seed) const {
    const auto start = std::chrono::steady_clock::now();
    StageReport rep;
    rep.stage = stage;
    if (steps == 0) {
        rep.seconds = seconds_since(start);
        return rep;
    }
    std::mt19937_64 rng(seed);
    Adam<float> fake_opt(cfg_.lr_fake);
    Adam<float> gen_opt(cfg_.lr_gen);
    warm_fake(fake, fake_opt, sampler, gen, rng, rep);
    const Denoiser real = teacher_denoiser(cfg_.teacher);
    const Denoiser fake_d = net_denoiser(fake);
    double acc_dmd = 0.0, acc_reg = 0.0, acc_fake = 0.0;
    std::size_t acc_n = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        for (std::size_t f = 0; f < cfg_.fake_per_gen; ++f) {
            const Batch b = sampler(rng);
            const MatF x0 = predict(gen, b.input_x, b.t, b.history, b.first);
            acc_fake += fake_update(fake, fake_opt, x0, b.prev_clean, b.first, rng, cfg_.t_min, cfg_.t_max);
        }
        const std::uint64_t before = weight_hash(gen);
        const Batch b = sampler(rng);
        rep.lineage.push_back({stage, lineage, matrix_hash(b.input_x), b.source_hash, before});
        const MatF input = features(b.input_x, b.t, b.history, b.first);
        const bool has_target = lineage == Lineage::TeacherDerived;
        const DmdResult r = dmd_step(gen, input, b.prev_clean, b.first, fake_d, real, rng, cfg_.t_min, cfg_.t_max,
                                     has_target ? &b.target : nullptr, reg_w);
        gen_opt.step(gen, r.grads);
        acc_dmd += r.dmd_loss;
        acc_reg += r.reg_loss;
        ++acc_n;
        if ((step + 1) % cfg_.log_every == 0 || step + 1 == steps) {
            CurvePoint p;
            p.stage = stage;
            p.step = step + 1;
            p.loss_dmd = acc_dmd / static_cast<double>(acc_n);
            p.loss_reg = acc_reg / static_cast<double>(acc_n);
            p.loss_fake = acc_fake / static_cast<double>(acc_n * cfg_.fake_per_gen);
            p.heldout = std::numeric_limits<double>::quiet_NaN();
            rep.curve.push_back(p);
            acc_dmd = acc_reg = acc_fake = 0.0;
            acc_n = 0;
        }
    }
    rep.seconds = seconds_since(start);
    return rep;
}

StageReport Lab::stage2(Net& backbone, Net& fake) const {
    auto sampler = [this](std::mt19937_64& rng) { return teacher_batch(rng, false); };
    return dmd_stage(2, backbone, fake, sampler, Lineage::TeacherDerived, cfg_.steps2, cfg_.reg_weight,
                     cfg_.seed * 4 + 2);
}

StageReport Lab::stage3(Net& backbone, Net& fake) const {
    const std::size_t per = std::max<std::size_t>(1, cfg_.batch / cfg_.train_chunks);
    const auto t0 = static_cast<float>(cfg_.levels.t0);
    const auto t1 = static_cast<float>(cfg_.levels.t1);
    // Rolls out the backbone as it is right now; target carries the weight
    // hash so the lineage record can be traced back.
    auto sampler = [&, this](std::mt19937_64& rng) {
        const Rollout r = rollout_stack(backbone, nullptr, cfg_.levels, per, cfg_.train_chunks, rng());
        const std::size_t n = per * cfg_.train_chunks;
        Batch b;
        b.input_x = zeros2(n);
        b.history = zeros2(n);
        b.prev_clean = zeros2(n);
        b.t.resize(n);
        b.first.resize(n);
        const MatF eps = gaussian2(n, rng);
        std::bernoulli_distribution pick_t(0.5);
        for (std::size_t c = 0; c < cfg_.train_chunks; ++c) {
            for (std::size_t s = 0; s < per; ++s) {
                const auto i = static_cast<Eigen::Index>(c * per + s);
                const auto si = static_cast<Eigen::Index>(s);
                const float t = pick_t(rng) ? t0 : t1;
                b.t[static_cast<std::size_t>(i)] = t;
                b.first[static_cast<std::size_t>(i)] = c == 0 ? 1.0f : 0.0f;
                b.input_x.col(i) = (1.0f - t) * r.clean[c].col(si) + t * eps.col(i);
                if (c > 0) {
                    b.history.col(i) = r.noisy_hist[c - 1].col(si);
                    b.prev_clean.col(i) = r.clean[c - 1].col(si);
                }
            }
        }
        b.source_hash = weight_hash(backbone);
        return b;
    };
    return dmd_stage(3, backbone, fake, sampler, Lineage::SelfRollout, cfg_.steps3, 0.0, cfg_.seed * 4 + 3);
}

StageReport Lab::stage4(const Net& backbone, Net& refiner, Net& fake) const {
    const std::size_t per = std::max<std::size_t>(1, cfg_.batch / cfg_.train_chunks);
    const auto t2 = static_cast<float>(cfg_.levels.t2);
    auto sampler = [&, this](std::mt19937_64& rng) {
        const Rollout r = rollout_stack(backbone, &refiner, cfg_.levels, per, cfg_.train_chunks, rng());
        const std::size_t n = per * cfg_.train_chunks;
        Batch b;
        b.input_x = zeros2(n);
        b.history = zeros2(n);
        b.prev_clean = zeros2(n);
        b.t.assign(n, t2);
        b.first.resize(n);
        const MatF eps = gaussian2(n, rng);
        for (std::size_t c = 0; c < cfg_.train_chunks; ++c) {
            for (std::size_t s = 0; s < per; ++s) {
                const auto i = static_cast<Eigen::Index>(c * per + s);
                const auto si = static_cast<Eigen::Index>(s);
                b.first[static_cast<std::size_t>(i)] = c == 0 ? 1.0f : 0.0f;
                b.input_x.col(i) = (1.0f - t2) * r.backbone[c].col(si) + t2 * eps.col(i);
                if (c > 0) {
                    b.history.col(i) = r.clean[c - 1].col(si);
                    b.prev_clean.col(i) = r.clean[c - 1].col(si);
                }
            }
        }
        b.source_hash = weight_hash(refiner);
        return b;
    };
    return dmd_stage(4, refiner, fake, sampler, Lineage::SelfRollout, cfg_.steps4, 0.0, cfg_.seed * 4 + 4);
}

Checkpoint to_checkpoint(const Net& net, const std::string& role, const LabConfig& cfg) {
    Checkpoint ck;
    ck.meta = {{"kind", "distill-mlp"}, {"role", role}, {"dims", net.dims()}, {"lab", cfg.to_json()}};
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        const auto& w = net.weights()[l];
        Tensor2D tw(static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()));
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) tw(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = w(r, c);
        const auto& b = net.biases()[l];
        Tensor2D tb(static_cast<std::size_t>(b.size()), 1);
        for (Eigen::Index r = 0; r < b.size(); ++r) tb(static_cast<std::size_t>(r), 0) = b(r);
        ck.tensors.push_back({"layers." + std::to_string(l) + ".w", std::move(tw)});
        ck.tensors.push_back({"layers." + std::to_string(l) + ".b", std::move(tb)});
    }
    return ck;
}

Net net_from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("kind", "") != "distill-mlp") throw FormatError("checkpoint is not a distill-lab network");
    Net net(ck.meta.at("dims").get<std::vector<int>>());
    for (std::size_t l = 0; l < net.n_layers(); ++l) {
        const Tensor2D& tw = ck.at("layers." + std::to_string(l) + ".w");
        const Tensor2D& tb = ck.at("layers." + std::to_string(l) + ".b");
        auto& w = net.weights()[l];
        auto& b = net.biases()[l];
        if (tw.rows() != static_cast<std::size_t>(w.rows()) || tw.cols() != static_cast<std::size_t>(w.cols()) ||
            tb.rows() != static_cast<std::size_t>(b.size())) {
            throw FormatError("distill checkpoint: layer " + std::to_string(l) + " has the wrong shape");
        }
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = tw(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = tb(static_cast<std::size_t>(r), 0);
    }
    return net;
}

void write_curve_csv(std::ostream& out, const std::vector<StageReport>& reports, bool header) {
    if (header) out << "stage,step,loss_reg,loss_dmd,loss_fake,heldout\n";
    for (const auto& rep : reports) {
        for (const auto& p : rep.curve) {
            out << p.stage << ',' << p.step << ',' << p.loss_reg << ',' << p.loss_dmd << ',' << p.loss_fake << ',';
            if (!std::isnan(p.heldout)) out << p.heldout;
            out << '\n';
        }
    }
}

}  // namespace lpm::distill
