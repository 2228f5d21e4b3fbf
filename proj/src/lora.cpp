#include "fedtree/lora.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedtree/errors.hpp"

namespace fedtree {

namespace {

std::atomic<bool> g_lambda_clamp_enabled{true};

void require(bool condition, const std::string& message) {
    if (!condition) throw std::invalid_argument(message);
}

std::string shape(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void check_pair_shapes(const char* where, const Matrix& w0, const AdapterPair& pair) {
    require(pair.B.rows() == w0.rows(),
            std::string(where) + ": B is " + shape(pair.B) + " but W0 has " +
                std::to_string(w0.rows()) + " rows");
    require(pair.A.cols() == w0.cols(),
            std::string(where) + ": A is " + shape(pair.A) + " but W0 has " +
                std::to_string(w0.cols()) + " columns");
    require(pair.B.cols() == pair.A.rows(),
            std::string(where) + ": B is " + shape(pair.B) + " but A is " + shape(pair.A));
    require(pair.rank() <= std::min(w0.rows(), w0.cols()),
            std::string(where) + ": rank " + std::to_string(pair.rank()) +
                " exceeds min(d_out, d_in) for a " + shape(w0) + " layer");
}

// W0 + lambda (B A)_c + (1 - lambda) (B A)_e, materialized. Only the
// backward pass needs the dense form; forward passes stay factorized.
Matrix effective_weight(const Matrix& w0, const LayerExperts& e) {
    Matrix w = w0;
    if (e.lambda != 0.0) w += e.lambda * (e.cluster.B * e.cluster.A);
    if (!e.external_zeroed && e.lambda != 1.0) w += (1.0 - e.lambda) * (e.external.B * e.external.A);
    return w;
}

}  // namespace

namespace testhooks {
void set_lambda_clamp_enabled(bool enabled) { g_lambda_clamp_enabled.store(enabled); }
bool lambda_clamp_enabled() { return g_lambda_clamp_enabled.load(); }
}  // namespace testhooks

Vector lora_forward(const Matrix& w0, const AdapterPair& pair, const Vector& x) {
    require(w0.cols() == x.size(), "lora_forward: W0 is " + shape(w0) + " but x has size " +
                                       std::to_string(x.size()));
    check_pair_shapes("lora_forward", w0, pair);
    // Two rank-sized products; B A is never formed.
    return w0 * x + pair.B * (pair.A * x);
}

Vector mixed_forward(const Matrix& w0, const LayerExperts& experts, const Vector& x) {
    require(w0.cols() == x.size(), "mixed_forward: W0 is " + shape(w0) + " but x has size " +
                                       std::to_string(x.size()));
    check_pair_shapes("mixed_forward", w0, experts.cluster);
    if (!experts.external_zeroed) check_pair_shapes("mixed_forward", w0, experts.external);
    Vector out = w0 * x;
    if (experts.lambda != 0.0) {
        out += experts.lambda * (experts.cluster.B * (experts.cluster.A * x));
    }
    if (!experts.external_zeroed && experts.lambda != 1.0) {
        out += (1.0 - experts.lambda) * (experts.external.B * (experts.external.A * x));
    }
    return out;
}

Vector model_forward(const FrozenBackbone& backbone, std::span<const LayerExperts> experts,
                     const Vector& x) {
    require(static_cast<int>(experts.size()) == backbone.depth(),
            "model_forward: " + std::to_string(experts.size()) + " expert layers for a depth-" +
                std::to_string(backbone.depth()) + " backbone");
    Vector h = x;
    for (int l = 0; l < backbone.depth(); ++l) {
        h = mixed_forward(backbone.layers[l], experts[l], h);
        if (l + 1 < backbone.depth() && backbone.activation == Activation::Tanh) {
            h = h.array().tanh().matrix();
        }
    }
    return h;
}

double mse_loss(const FrozenBackbone& backbone, std::span<const LayerExperts> experts,
                std::span<const Sample> data) {
    require(!data.empty(), "mse_loss: empty data");
    double total = 0.0;
    for (const Sample& s : data) {
        total += (model_forward(backbone, experts, s.x) - s.y).squaredNorm();
    }
    return total / static_cast<double>(data.size());
}

BackpropResult backprop_effective(const FrozenBackbone& backbone,
                                  std::span<const LayerExperts> experts,
                                  std::span<const Sample> batch) {
    const int depth = backbone.depth();
    require(static_cast<int>(experts.size()) == depth,
            "backprop_effective: " + std::to_string(experts.size()) +
                " expert layers for a depth-" + std::to_string(depth) + " backbone");
    require(!batch.empty(), "backprop_effective: empty batch");

    std::vector<Matrix> w_eff(depth);
    for (int l = 0; l < depth; ++l) w_eff[l] = effective_weight(backbone.layers[l], experts[l]);

    BackpropResult result;
    result.layer_grads.reserve(depth);
    for (int l = 0; l < depth; ++l) {
        result.layer_grads.emplace_back(Matrix::Zero(w_eff[l].rows(), w_eff[l].cols()));
    }

    const bool tanh_act = backbone.activation == Activation::Tanh;
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    std::vector<Vector> acts(depth + 1);
    for (const Sample& s : batch) {
        require(s.x.size() == w_eff[0].cols(), "backprop_effective: sample x has size " +
                                                   std::to_string(s.x.size()) + ", expected " +
                                                   std::to_string(w_eff[0].cols()));
        require(s.y.size() == w_eff[depth - 1].rows(),
                "backprop_effective: sample y has size " + std::to_string(s.y.size()) +
                    ", expected " + std::to_string(w_eff[depth - 1].rows()));
        acts[0] = s.x;
        for (int l = 0; l < depth; ++l) {
            acts[l + 1] = w_eff[l] * acts[l];
            if (l + 1 < depth && tanh_act) acts[l + 1] = acts[l + 1].array().tanh().matrix();
        }
        Vector residual = acts[depth] - s.y;
        result.loss += residual.squaredNorm();

        Vector delta = (2.0 * inv_n) * residual;
        for (int l = depth - 1; l >= 0; --l) {
            result.layer_grads[l] += delta * acts[l].transpose();
            if (l > 0) {
                delta = w_eff[l].transpose() * delta;
                if (tanh_act) {
                    // tanh'(z) = 1 - tanh(z)^2, and acts[l] stores tanh(z).
                    delta.array() *= 1.0 - acts[l].array().square();
                }
            }
        }
    }
    result.loss *= inv_n;
    return result;
}

AdapterGradients adapter_gradients(const LayerExperts& experts, const Matrix& layer_grad) {
    const AdapterPair& c = experts.cluster;
    require(layer_grad.rows() == c.B.rows() && layer_grad.cols() == c.A.cols(),
            "adapter_gradients: layer gradient is " + shape(layer_grad) + " but B A is " +
                std::to_string(c.B.rows()) + "x" + std::to_string(c.A.cols()));

    AdapterGradients g;
    g.grad_B = experts.lambda * (layer_grad * c.A.transpose());
    g.grad_A = experts.lambda * (c.B.transpose() * layer_grad);
    if (experts.lambda_frozen) {
        g.grad_lambda = 0.0;
    } else {
        // <B A, G> = <A, B^T G>, evaluated without forming either product of
        // full d_out x d_in size.
        g.grad_lambda = (c.B.transpose() * layer_grad).cwiseProduct(c.A).sum();
        if (!experts.external_zeroed) {
            const AdapterPair& e = experts.external;
            g.grad_lambda -= (e.B.transpose() * layer_grad).cwiseProduct(e.A).sum();
        }
    }
    return g;
}

LayerExperts sgd_step(LayerExperts experts, const AdapterGradients& grads, double eta) {
    require(grads.grad_B.rows() == experts.cluster.B.rows() &&
                grads.grad_B.cols() == experts.cluster.B.cols(),
            "sgd_step: grad_B is " + shape(grads.grad_B) + " but B is " + shape(experts.cluster.B));
    require(grads.grad_A.rows() == experts.cluster.A.rows() &&
                grads.grad_A.cols() == experts.cluster.A.cols(),
            "sgd_step: grad_A is " + shape(grads.grad_A) + " but A is " + shape(experts.cluster.A));
    if (!grads.grad_B.allFinite() || !grads.grad_A.allFinite() ||
        !std::isfinite(grads.grad_lambda)) {
        throw NumericError("sgd_step: non-finite adapter gradient");
    }
    experts.cluster.B -= eta * grads.grad_B;
    experts.cluster.A -= eta * grads.grad_A;
    if (!experts.lambda_frozen) {
        experts.lambda -= eta * grads.grad_lambda;
        if (testhooks::lambda_clamp_enabled()) {
            experts.lambda = std::clamp(experts.lambda, 0.0, 1.0);
        }
    }
    return experts;
}

}  // namespace fedtree
