#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "lpm/latcore/errors.hpp"

namespace lpm::distill {

// Fully connected net with SiLU between layers and a linear head. Batches are
// column-major: one sample per column. Reverse mode is written out by hand.
template <typename T>
class Mlp {
public:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

    struct Grads {
        std::vector<Mat> w;
        std::vector<Vec> b;
    };

    // Activations kept for backward.
    struct Tape {
        std::vector<Mat> inputs;  // input to each layer
        std::vector<Mat> pre;     // pre-activation of each hidden layer
    };

    Mlp() = default;

    explicit Mlp(std::vector<int> dims, std::uint64_t seed = 0) : dims_(std::move(dims)) {
        if (dims_.size() < 2) throw ConfigError("mlp: need at least input and output dims");
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            Mat w(dims_[l + 1], dims_[l]);
            const double s = std::sqrt(1.0 / dims_[l]);
            for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(s * normal(rng));
            w_.push_back(std::move(w));
            b_.push_back(Vec::Zero(dims_[l + 1]));
        }
    }

    const std::vector<int>& dims() const { return dims_; }
    std::size_t n_layers() const { return w_.size(); }
    int in_dim() const { return dims_.front(); }
    int out_dim() const { return dims_.back(); }
    std::vector<Mat>& weights() { return w_; }
    const std::vector<Mat>& weights() const { return w_; }
    std::vector<Vec>& biases() { return b_; }
    const std::vector<Vec>& biases() const { return b_; }

    std::size_t n_params() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < w_.size(); ++l) n += static_cast<std::size_t>(w_[l].size() + b_[l].size());
        return n;
    }

    Mat forward(const Mat& x, Tape* tape = nullptr) const {
        if (x.rows() != in_dim()) throw ShapeError("mlp: input has wrong row count");
        if (tape) {
            tape->inputs.clear();
            tape->pre.clear();
        }
        Mat h = x;
        for (std::size_t l = 0; l < w_.size(); ++l) {
            if (tape) tape->inputs.push_back(h);
            Mat z = (w_[l] * h).colwise() + b_[l];
            if (l + 1 == w_.size()) return z;
            if (tape) tape->pre.push_back(z);
            h = z.unaryExpr([](T v) { return silu(v); });
        }
        return h;
    }

    // Gradients of sum(dy .* y) wrt the parameters; dx receives the input
    // gradient when non-null.
    Grads backward(const Tape& tape, const Mat& dy, Mat* dx = nullptr) const {
        Grads g;
        g.w.resize(w_.size());
        g.b.resize(w_.size());
        Mat d = dy;
        for (std::size_t l = w_.size(); l-- > 0;) {
            g.w[l] = d * tape.inputs[l].transpose();
            g.b[l] = d.rowwise().sum();
            Mat up = w_[l].transpose() * d;
            if (l == 0) {
                if (dx) *dx = std::move(up);
                break;
            }
            const Mat& z = tape.pre[l - 1];
            d = up.cwiseProduct(z.unaryExpr([](T v) { return dsilu(v); }));
        }
        return g;
    }

    template <typename U>
    Mlp<U> cast() const {
        Mlp<U> out;
        out.dims_ = dims_;
        for (std::size_t l = 0; l < w_.size(); ++l) {
            out.w_.push_back(w_[l].template cast<U>());
            out.b_.push_back(b_[l].template cast<U>());
        }
        return out;
    }

    // Visits every parameter scalar in a fixed order.
    template <typename F>
    void for_each_param(F&& f) {
        for (std::size_t l = 0; l < w_.size(); ++l) {
            for (Eigen::Index i = 0; i < w_[l].size(); ++i) f(w_[l].data()[i]);
            for (Eigen::Index i = 0; i < b_[l].size(); ++i) f(b_[l].data()[i]);
        }
    }

    static T silu(T v) { return v / (T(1) + std::exp(-v)); }
    static T dsilu(T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
    }

private:
    template <typename>
    friend class Mlp;
    std::vector<int> dims_;
    std::vector<Mat> w_;
    std::vector<Vec> b_;
};

// Adam with bias correction.
template <typename T>
class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(Mlp<T>& net, const typename Mlp<T>::Grads& g) {
        if (m_w_.empty()) init(net);
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t l = 0; l < net.n_layers(); ++l) {
            update(net.weights()[l], g.w[l], m_w_[l], v_w_[l], c1, c2);
            update(net.biases()[l], g.b[l], m_b_[l], v_b_[l], c1, c2);
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::uint64_t steps() const { return t_; }

private:
    void init(const Mlp<T>& net) {
        for (std::size_t l = 0; l < net.n_layers(); ++l) {
            m_w_.push_back(Mlp<T>::Mat::Zero(net.weights()[l].rows(), net.weights()[l].cols()));
            v_w_.push_back(m_w_.back());
            m_b_.push_back(Mlp<T>::Vec::Zero(net.biases()[l].size()));
            v_b_.push_back(m_b_.back());
        }
    }

    template <typename P>
    void update(P& p, const P& g, P& m, P& v, double c1, double c2) {
        m = T(b1_) * m + T(1.0 - b1_) * g;
        v = T(b2_) * v + T(1.0 - b2_) * g.cwiseProduct(g);
        const T step = T(lr_ / c1);
        const T sc2 = T(std::sqrt(c2));
        p.array() -= step * m.array() / (v.array().sqrt() / sc2 + T(eps_));
    }

    double lr_, b1_, b2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<typename Mlp<T>::Mat> m_w_, v_w_;
    std::vector<typename Mlp<T>::Vec> m_b_, v_b_;
};

}  // namespace lpm::distill
