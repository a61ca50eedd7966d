#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/distill/mlp.hpp"
#include "lpm/distill/teacher.hpp"
#include "lpm/latcore/checkpoint.hpp"

namespace lpm::distill {

using Net = Mlp<float>;
using MatF = Net::Mat;

// Feature layout shared by generator and fake-score nets:
// [x_t (2), t-embedding (4), history (2), first-chunk flag (1)].
inline constexpr int kFeatureDim = 9;

struct LabConfig {
    MixtureTeacher teacher;
    Levels levels;
    std::uint64_t seed = 0;
    std::size_t ode_substeps = 40;
    std::size_t n_sequences = 4096;  // training trajectories
    std::size_t n_heldout = 512;
    std::size_t train_chunks = 8;
    std::size_t eval_chunks = 16;
    std::size_t eval_rollouts = 2000;
    int hidden = 64;
    std::size_t batch = 256;
    std::size_t steps1 = 3000;
    std::size_t steps2 = 1500;
    std::size_t steps3 = 1500;
    std::size_t steps4 = 3000;
    std::size_t fake_per_gen = 5;
    std::size_t fake_warmup = 400;
    double lr_reg = 1e-3;
    double lr_fake = 1e-3;
    double lr_gen = 2e-4;
    double reg_weight = 0.1;
    double t_min = 0.02;
    double t_max = 0.98;
    std::size_t log_every = 50;

    void validate() const;
    nlohmann::json to_json() const;
};

// One row per sample: x_t, t, history, first flag.
MatF features(const MatF& x_t, const std::vector<float>& t, const MatF& history, const std::vector<float>& first);
std::vector<float> time_embedding(float t);

Net make_net(int hidden, std::uint64_t seed);

// x0 estimate, in the column layout of the inputs.
MatF predict(const Net& net, const MatF& x_t, const std::vector<float>& t, const MatF& history,
             const std::vector<float>& first);

// Batched teacher posterior mean E[x0 | x_t, prev].
MatF teacher_denoise(const MixtureTeacher& teacher, const MatF& x_t, const std::vector<float>& t, const MatF& prev);

// x0-parameterised denoiser; score = -(x - (1 - t) D) / t^2.
using Denoiser = std::function<MatF(const MatF& x_t, const std::vector<float>& t, const MatF& prev,
                                    const std::vector<float>& first)>;
Denoiser net_denoiser(const Net& net);
Denoiser teacher_denoiser(const MixtureTeacher& teacher);

struct DmdResult {
    MatF x0_grad;  // gradient wrt the generator output, per sample
    Net::Grads grads;
    double dmd_loss = 0.0;  // 0.5 mean |x0_grad|^2
    double reg_loss = 0.0;
    double grad_norm = 0.0;  // mean per-sample |x0_grad|
};

// One generator gradient. x0_hat = gen(input); x_t = (1 - t) x0_hat + t eps with
// t ~ U[t_min, t_max]; the output gradient is (D_fake - D_real) scaled by
// 1 / mean |x0_hat - D_real|, a positive multiple of s_fake - s_real. With
// reg_target the squared distance (weight reg_w) is added.
DmdResult dmd_step(const Net& gen, const MatF& gen_input, const MatF& prev_clean, const std::vector<float>& first,
                   const Denoiser& fake, const Denoiser& real, std::mt19937_64& rng, double t_min, double t_max,
                   const MatF* reg_target = nullptr, double reg_w = 0.0);

// Denoising score matching on generator samples; returns the loss.
double fake_update(Net& fake, Adam<float>& opt, const MatF& x0_samples, const MatF& prev_clean,
                   const std::vector<float>& first, std::mt19937_64& rng, double t_min, double t_max);

enum class Lineage { TeacherDerived, SelfRollout };
const char* to_string(Lineage l);

struct BatchLineage {
    int stage = 0;
    Lineage lineage = Lineage::TeacherDerived;
    std::uint64_t input_hash = 0;
    std::uint64_t source_hash = 0;  // dataset hash, or the weights that produced the rollout
    std::uint64_t step_hash = 0;    // generator weights at the update
};

struct CurvePoint {
    int stage = 0;
    std::size_t step = 0;
    double loss_reg = 0.0;
    double loss_dmd = 0.0;
    double loss_fake = 0.0;
    double heldout = 0.0;  // held-out L_reg (stage 1) or NaN
};

struct StageReport {
    int stage = 0;
    std::vector<CurvePoint> curve;
    std::vector<BatchLineage> lineage;
    double seconds = 0.0;
    double initial_heldout = 0.0;
    double final_heldout = 0.0;
};

std::uint64_t weight_hash(const Net& net);
std::uint64_t matrix_hash(const MatF& m);

// Autoregressive rollout of the generator stack: backbone two passes at
// T0 and T1 under noisy history; optional refiner at T2 under clean history.
struct Rollout {
    std::vector<MatF> clean;       // final output per chunk, 2 x n
    std::vector<MatF> backbone;    // backbone output per chunk
    std::vector<MatF> noisy_hist;  // T1 input of each chunk (the next chunk's noisy history)
};
Rollout rollout_stack(const Net& backbone, const Net* refiner, const Levels& levels, std::size_t n,
                      std::size_t chunks, std::uint64_t seed);

struct EvalReport {
    std::size_t n = 0;
    std::vector<double> occupancy;        // per mode, pooled over chunks
    std::vector<double> mode_mean_error;  // |mean residual| / sigma per mode
    double w2 = 0.0;                      // sliced W2 of consecutive pairs vs teacher
    double drift = 0.0;                   // sliced W2 of the last chunk vs teacher marginal
    nlohmann::json to_json() const;
};

// Sliced W2 between two point clouds (columns) over fixed random directions.
double sliced_w2(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::size_t n_dirs, std::uint64_t seed);

// samples[chunk] is 2 x n. Teacher references are drawn ancestrally.
EvalReport evaluate_samples(const MixtureTeacher& teacher, const std::vector<MatF>& samples, std::uint64_t seed);
EvalReport eval_rollouts(const MixtureTeacher& teacher, const Levels& levels, const Net& backbone,
                         const Net* refiner, std::size_t n, std::size_t chunks, std::uint64_t seed);

class Lab {
public:
    explicit Lab(LabConfig cfg);

    const LabConfig& config() const { return cfg_; }
    const TrajectoryDataset& train_set() const { return train_; }
    const TrajectoryDataset& heldout_set() const { return heldout_; }

    double heldout_loss(const Net& backbone) const;

    StageReport stage1(Net& backbone) const;
    StageReport stage2(Net& backbone, Net& fake) const;
    StageReport stage3(Net& backbone, Net& fake) const;
    // Backbone read-only; the refiner must start as its copy.
    StageReport stage4(const Net& backbone, Net& refiner, Net& fake) const;

private:
    struct Batch {
        MatF input_x;
        std::vector<float> t;
        MatF history;
        MatF prev_clean;
        std::vector<float> first;
        MatF target;                  // teacher clean, when teacher-derived
        std::uint64_t source_hash = 0;  // dataset, or the weights that rolled out
    };
    Batch teacher_batch(std::mt19937_64& rng, bool stage1_inputs) const;
    void warm_fake(Net& fake, Adam<float>& opt, const std::function<Batch(std::mt19937_64&)>& sampler,
                   const Net& gen, std::mt19937_64& rng, StageReport& rep) const;
    StageReport dmd_stage(int stage, Net& gen, Net& fake, const std::function<Batch(std::mt19937_64&)>& sampler,
                          Lineage lineage, std::size_t steps, double reg_w, std::uint64_t seed) const;

    LabConfig cfg_;
    TrajectoryDataset train_;
    TrajectoryDataset heldout_;
    std::uint64_t train_hash_ = 0;
};

// Checkpoint files in the toydit container format.
Checkpoint to_checkpoint(const Net& net, const std::string& role, const LabConfig& cfg);
Net net_from_checkpoint(const Checkpoint& ck);

void write_curve_csv(std::ostream& out, const std::vector<StageReport>& reports, bool header = true);

// Everything the full four-stage run produces. Evaluations share one seed so
// checkpoints are compared on the same noise.
struct CurriculumResult {
    Net backbone1, backbone2, backbone3, refiner, fake;
    std::vector<StageReport> reports;
    EvalReport stage2_backbone;  // 2 NFE
    EvalReport stage3_backbone;  // 2 NFE
    EvalReport full_stack;       // 3 NFE
    std::uint64_t backbone_hash_before_refiner = 0;
    std::uint64_t backbone_hash_after_refiner = 0;
    bool refiner_init_matches = false;
    double seconds = 0.0;

    nlohmann::json summary() const;
};

std::uint64_t eval_seed(const LabConfig& cfg);
CurriculumResult run_curriculum(const LabConfig& cfg);

}  // namespace lpm::distill
