#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace fedtree {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Identity, Tanh };

// One layer's low-rank adapter. The adapted update is B * A, which has rank
// at most `rank()`; A is rank x d_in and B is d_out x rank. Forward passes
// apply the two factors separately and never materialize the product.
struct AdapterPair {
    Matrix A;
    Matrix B;

    int rank() const { return static_cast<int>(A.rows()); }

    static AdapterPair zeros(int d_out, int d_in, int rank) {
        return AdapterPair{Matrix::Zero(rank, d_in), Matrix::Zero(d_out, rank)};
    }
};

// Frozen dense weights W_1..W_L; only adapters ever train. layers[l] maps
// activations of width layers[l].cols() to width layers[l].rows(). The
// activation is applied between layers, not after the last one.
struct FrozenBackbone {
    std::vector<Matrix> layers;
    Activation activation = Activation::Tanh;

    int depth() const { return static_cast<int>(layers.size()); }
};

// A client's view of one layer: its trainable cluster expert, a frozen
// external expert, and the scalar that mixes them. `external_zeroed` marks
// the degenerate case where everyone shares one cluster, so there is nothing
// external to mix in and lambda stays frozen at 1.
struct LayerExperts {
    AdapterPair cluster;
    AdapterPair external;
    double lambda = 1.0;
    bool external_zeroed = true;
    bool lambda_frozen = true;
};

struct Sample {
    Vector x;
    Vector y;
};

struct AdapterGradients {
    Matrix grad_B;
    Matrix grad_A;
    double grad_lambda = 0.0;
};

struct BackpropResult {
    double loss = 0.0;
    // Gradient of the batch loss with respect to each layer's effective
    // weight matrix, in layer order.
    std::vector<Matrix> layer_grads;
};

// y = W0 x + B (A x)
Vector lora_forward(const Matrix& w0, const AdapterPair& pair, const Vector& x);

// y = W0 x + lambda * Bc (Ac x) + (1 - lambda) * Be (Ae x)
// Terms with a zero coefficient are skipped, so lambda == 1 reproduces
// lora_forward on the cluster pair bit for bit (and lambda == 0 the external).
Vector mixed_forward(const Matrix& w0, const LayerExperts& experts, const Vector& x);

// Full forward pass through the backbone with one LayerExperts per layer.
Vector model_forward(const FrozenBackbone& backbone, std::span<const LayerExperts> experts,
                     const Vector& x);

// Mean squared error over `data`: (1/n) * sum ||model(x) - y||^2.
double mse_loss(const FrozenBackbone& backbone, std::span<const LayerExperts> experts,
                std::span<const Sample> data);

// Backpropagates the batch MSE through the effective weights
// W_l = W0_l + lambda (B A)_cluster + (1 - lambda) (B A)_external
// and returns the loss plus dLoss/dW_l for every layer. Samples are
// accumulated in batch order, so results do not depend on thread count.
BackpropResult backprop_effective(const FrozenBackbone& backbone,
                                  std::span<const LayerExperts> experts,
                                  std::span<const Sample> batch);

// Chain rule from a layer's effective-weight gradient G to the trainable
// pieces: grad_B = lambda G A_c^T, grad_A = lambda B_c^T G, and
// grad_lambda = <(BA)_cluster - (BA)_external, G>. The external pair is
// frozen and gets no gradient; grad_lambda is forced to 0 when lambda is
// frozen.
AdapterGradients adapter_gradients(const LayerExperts& experts, const Matrix& layer_grad);

// One SGD step on the cluster pair and lambda; lambda is clamped to [0, 1].
// The external pair is returned untouched. Non-finite gradients raise
// NumericError.
LayerExperts sgd_step(LayerExperts experts, const AdapterGradients& grads, double eta);

namespace testhooks {
// Verification hook: disabling the clamp lets lambda leave [0, 1], which the
// invariant checks must catch. Always enabled in normal operation.
void set_lambda_clamp_enabled(bool enabled);
bool lambda_clamp_enabled();
}  // namespace testhooks

}  // namespace fedtree
