#pragma once

// Feed-forward ReLU network with an explicit reverse pass, and Adam.
//
// Batches are column-major: an input batch is n_in x B, one sample per column.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "caffnet/errors.hpp"
#include "caffnet/linalg.hpp"
#include "caffnet/rng.hpp"

namespace caffnet {

struct MlpGradients {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    void set_zero() {
        for (auto& w : weights) w.setZero();
        for (auto& b : biases) b.setZero();
    }

    MlpGradients& operator+=(const MlpGradients& other) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            weights[l] += other.weights[l];
            biases[l] += other.biases[l];
        }
        return *this;
    }
};

/// Activations recorded by a forward pass.
struct MlpTape {
    std::vector<Matrix> inputs;  ///< input to layer l (post-activation of layer l-1)
    std::vector<Matrix> pre;     ///< pre-activation of layer l
};

class Mlp {
public:
    Mlp() = default;

    /// Layer widths {n_in, hidden..., n_out}; weights and biases drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Mlp(const std::vector<std::size_t>& widths, Rng& rng) : widths_(widths) {
        if (widths.size() < 2) throw ArgumentError("Mlp: need at least input and output widths");
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const auto fan_in = static_cast<Eigen::Index>(widths[l]);
            const auto fan_out = static_cast<Eigen::Index>(widths[l + 1]);
            if (fan_in == 0 || fan_out == 0) throw ArgumentError("Mlp: zero width layer");
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Matrix w(fan_out, fan_in);
            Vector b(fan_out);
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
            for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
            weights_.push_back(std::move(w));
            biases_.push_back(std::move(b));
        }
    }

    Mlp(std::vector<Matrix> weights, std::vector<Vector> biases)
        : weights_(std::move(weights)), biases_(std::move(biases)) {
        if (weights_.empty() || weights_.size() != biases_.size()) {
            throw ArgumentError("Mlp: weights and biases disagree");
        }
        widths_.push_back(static_cast<std::size_t>(weights_.front().cols()));
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            if (biases_[l].size() != weights_[l].rows() ||
                (l > 0 && weights_[l].cols() != weights_[l - 1].rows())) {
                throw ArgumentError("Mlp: inconsistent layer shapes at layer " + std::to_string(l));
            }
            widths_.push_back(static_cast<std::size_t>(weights_[l].rows()));
        }
    }

    std::size_t n_in() const { return widths_.front(); }
    std::size_t n_out() const { return widths_.back(); }
    std::size_t layers() const { return weights_.size(); }
    const std::vector<std::size_t>& widths() const { return widths_; }
    std::vector<Matrix>& weights() { return weights_; }
    std::vector<Vector>& biases() { return biases_; }
    const std::vector<Matrix>& weights() const { return weights_; }
    const std::vector<Vector>& biases() const { return biases_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
        }
        return n;
    }

    MlpGradients zero_gradients() const {
        MlpGradients g;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            g.weights.push_back(Matrix::Zero(weights_[l].rows(), weights_[l].cols()));
            g.biases.push_back(Vector::Zero(biases_[l].size()));
        }
        return g;
    }

    /// Batched forward pass. Hidden layers use ReLU, the output layer is affine.
    Matrix forward(const Matrix& x, MlpTape* tape = nullptr) const {
        if (static_cast<std::size_t>(x.rows()) != n_in()) {
            throw ArgumentError("Mlp::forward: input has " + std::to_string(x.rows()) +
                                " rows, expected " + std::to_string(n_in()));
        }
        if (tape) {
            tape->inputs.clear();
            tape->pre.clear();
        }
        Matrix h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            Matrix z = weights_[l] * h;
            z.colwise() += biases_[l];
            const bool last = l + 1 == weights_.size();
            if (tape) {
                tape->inputs.push_back(std::move(h));
                tape->pre.push_back(z);
            }
            h = last ? std::move(z) : Matrix(z.cwiseMax(0.0));
        }
        return h;
    }

    Vector forward(const Vector& x, MlpTape* tape = nullptr) const {
        return forward(Matrix(x), tape).col(0);
    }

    /// Reverse pass for a batch. `upstream` is dLoss/dOutput (n_out x B).
    /// Gradients are summed over the batch; ReLU'(0) is taken as 0. When
    /// `input_grad` is given it receives dLoss/dInput (n_in x B).
    MlpGradients backward(const MlpTape& tape, const Matrix& upstream,
                          Matrix* input_grad = nullptr) const {
        MlpGradients g = zero_gradients();
        backward_into(tape, upstream, g, input_grad);
        return g;
    }

    /// As backward(), accumulating into `g`.
    void backward_into(const MlpTape& tape, const Matrix& upstream, MlpGradients& g,
                       Matrix* input_grad = nullptr) const {
        if (tape.pre.size() != weights_.size()) throw ArgumentError("Mlp::backward: tape mismatch");
        if (static_cast<std::size_t>(upstream.rows()) != n_out() ||
            upstream.cols() != tape.pre.back().cols()) {
            throw ArgumentError("Mlp::backward: upstream gradient has wrong shape");
        }
        Matrix delta = upstream;
        for (std::size_t l = weights_.size(); l-- > 0;) {
            if (l + 1 < weights_.size()) {
                delta = delta.cwiseProduct((tape.pre[l].array() > 0.0).cast<double>().matrix());
            }
            g.weights[l].noalias() += delta * tape.inputs[l].transpose();
            g.biases[l] += delta.rowwise().sum();
            if (l > 0 || input_grad) {
                Matrix next = weights_[l].transpose() * delta;
                delta = std::move(next);
            }
        }
        if (input_grad) *input_grad = std::move(delta);
    }

private:
    std::vector<std::size_t> widths_;
    std::vector<Matrix> weights_;
    std::vector<Vector> biases_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction, one moment pair per parameter tensor.
class AdamState {
public:
    AdamState() = default;
    AdamState(const Mlp& net, AdamConfig cfg) : cfg_(cfg), m_(net.zero_gradients()), v_(net.zero_gradients()) {}

    const AdamConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }

    void step(Mlp& net, const MlpGradients& g) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t l = 0; l < net.layers(); ++l) {
            update(net.weights()[l], g.weights[l], m_.weights[l], v_.weights[l], c1, c2);
            update(net.biases()[l], g.biases[l], m_.biases[l], v_.biases[l], c1, c2);
        }
    }

private:
    template <typename P>
    void update(P& param, const P& grad, P& m, P& v, double c1, double c2) const {
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        param.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
    }

    AdamConfig cfg_;
    MlpGradients m_;
    MlpGradients v_;
    std::size_t t_ = 0;
};

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const Mlp& net) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < net.layers(); ++l) {
        const Matrix& w = net.weights()[l];
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(w.size()));
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            for (Eigen::Index j = 0; j < w.cols(); ++j) flat.push_back(w(i, j));
        const Vector& b = net.biases()[l];
        layers.push_back({{"weights", flat}, {"biases", std::vector<double>(b.data(), b.data() + b.size())}});
    }
    return {{"format", "caffnet-mlp"},
            {"version", kCheckpointVersion},
            {"widths", net.widths()},
            {"activation", "relu"},
            {"layers", std::move(layers)}};
}

inline Mlp mlp_from_json(const nlohmann::json& doc) {
    if (doc.value("format", "") != "caffnet-mlp" || doc.value("version", 0) != kCheckpointVersion) {
        throw ConfigError("checkpoint: unsupported format or version");
    }
    const auto widths = doc.at("widths").get<std::vector<std::size_t>>();
    const auto& layers = doc.at("layers");
    if (widths.size() != layers.size() + 1) throw ConfigError("checkpoint: widths/layers mismatch");
    std::vector<Matrix> ws;
    std::vector<Vector> bs;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto rows = static_cast<Eigen::Index>(widths[l + 1]);
        const auto cols = static_cast<Eigen::Index>(widths[l]);
        const auto flat = layers[l].at("weights").get<std::vector<double>>();
        const auto bias = layers[l].at("biases").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(flat.size()) != rows * cols || static_cast<Eigen::Index>(bias.size()) != rows) {
            throw ConfigError("checkpoint: layer " + std::to_string(l) + " has wrong size");
        }
        Matrix w(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = flat[static_cast<std::size_t>(i * cols + j)];
        ws.push_back(std::move(w));
        bs.push_back(Eigen::Map<const Vector>(bias.data(), rows));
    }
    return Mlp(std::move(ws), std::move(bs));
}

}  // namespace caffnet
