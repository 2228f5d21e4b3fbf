#include <doctest.h>

#include <cmath>

#include "fedtree/checks.hpp"
#include "fedtree/errors.hpp"
#include "fedtree/lora.hpp"
#include "fedtree/rng.hpp"

using namespace fedtree;

namespace {

Matrix rand_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    }
    return m;
}

LayerExperts rand_experts(Rng& rng, int d_out, int d_in, int rank, double lambda) {
    LayerExperts e;
    e.cluster = AdapterPair{rand_matrix(rng, rank, d_in), rand_matrix(rng, d_out, rank)};
    e.external = AdapterPair{rand_matrix(rng, rank, d_in), rand_matrix(rng, d_out, rank)};
    e.lambda = lambda;
    e.external_zeroed = false;
    e.lambda_frozen = false;
    return e;
}

}  // namespace

TEST_CASE("lora_forward matches the dense materialization") {
    Rng rng(101);
    for (int trial = 0; trial < 50; ++trial) {
        const int d_out = 2 + static_cast<int>(rng.below(7));
        const int d_in = 2 + static_cast<int>(rng.below(7));
        const int rank = 1 + static_cast<int>(rng.below(std::min(d_out, d_in)));
        const Matrix w0 = rand_matrix(rng, d_out, d_in);
        const AdapterPair pair{rand_matrix(rng, rank, d_in), rand_matrix(rng, d_out, rank)};
        const Vector x = rand_matrix(rng, d_in, 1);

        const Vector got = lora_forward(w0, pair, x);
        const Vector dense = (w0 + pair.B * pair.A) * x;
        REQUIRE(got.size() == d_out);
        for (int i = 0; i < d_out; ++i) CHECK(got(i) == doctest::Approx(dense(i)).epsilon(1e-12));
    }
}

TEST_CASE("mixed_forward at the lambda endpoints reproduces lora_forward exactly") {
    Rng rng(102);
    const Matrix w0 = rand_matrix(rng, 5, 4);
    const Vector x = rand_matrix(rng, 4, 1);
    LayerExperts e = rand_experts(rng, 5, 4, 2, 0.5);

    e.lambda = 1.0;
    const Vector cluster_only = mixed_forward(w0, e, x);
    const Vector cluster_ref = lora_forward(w0, e.cluster, x);
    CHECK((cluster_only.array() == cluster_ref.array()).all());

    e.lambda = 0.0;
    const Vector external_only = mixed_forward(w0, e, x);
    const Vector external_ref = lora_forward(w0, e.external, x);
    CHECK((external_only.array() == external_ref.array()).all());
}

TEST_CASE("mixed_forward blends the two experts") {
    Rng rng(103);
    const Matrix w0 = rand_matrix(rng, 3, 3);
    const Vector x = rand_matrix(rng, 3, 1);
    const LayerExperts e = rand_experts(rng, 3, 3, 1, 0.25);

    const Vector got = mixed_forward(w0, e, x);
    const Vector expected = w0 * x + 0.25 * (e.cluster.B * e.cluster.A * x) +
                            0.75 * (e.external.B * e.external.A * x);
    for (int i = 0; i < 3; ++i) CHECK(got(i) == doctest::Approx(expected(i)).epsilon(1e-12));
}

TEST_CASE("forward shape mismatches raise invalid_argument") {
    Rng rng(104);
    const Matrix w0 = rand_matrix(rng, 4, 3);
    const AdapterPair pair{rand_matrix(rng, 2, 3), rand_matrix(rng, 4, 2)};
    const Vector x_bad = rand_matrix(rng, 5, 1);
    CHECK_THROWS_AS(lora_forward(w0, pair, x_bad), std::invalid_argument);

    const AdapterPair wrong_rank{rand_matrix(rng, 2, 3), rand_matrix(rng, 4, 3)};
    const Vector x = rand_matrix(rng, 3, 1);
    CHECK_THROWS_AS(lora_forward(w0, wrong_rank, x), std::invalid_argument);

    const AdapterPair wrong_rows{rand_matrix(rng, 2, 3), rand_matrix(rng, 5, 2)};
    CHECK_THROWS_AS(lora_forward(w0, wrong_rows, x), std::invalid_argument);
}

TEST_CASE("adapter gradients and backprop agree with finite differences") {
    // Randomized joint check over small models; the oracle recomputes the
    // loss through a dense, loop-based forward pass.
    const CheckResult result = check_gradient_fidelity(40, 777);
    CHECK(result.pass);
    CHECK(result.max_error <= 1e-6);
}

TEST_CASE("lambda = 0 silences the cluster gradients") {
    Rng rng(105);
    LayerExperts e = rand_experts(rng, 4, 3, 2, 0.0);
    const Matrix layer_grad = rand_matrix(rng, 4, 3);
    const AdapterGradients g = adapter_gradients(e, layer_grad);
    CHECK(g.grad_B.isZero(0.0));
    CHECK(g.grad_A.isZero(0.0));
}

TEST_CASE("frozen lambda receives no gradient") {
    Rng rng(106);
    LayerExperts e = rand_experts(rng, 4, 4, 2, 0.5);
    e.lambda_frozen = true;
    const AdapterGradients g = adapter_gradients(e, rand_matrix(rng, 4, 4));
    CHECK(g.grad_lambda == 0.0);
}

TEST_CASE("sgd_step clamps lambda to [0, 1] and never touches the external expert") {
    Rng rng(107);
    LayerExperts e = rand_experts(rng, 4, 3, 2, 0.9);
    const Matrix ext_a = e.external.A;
    const Matrix ext_b = e.external.B;

    AdapterGradients g;
    g.grad_B = Matrix::Zero(4, 2);
    g.grad_A = Matrix::Zero(2, 3);
    g.grad_lambda = -10.0;
    e = sgd_step(std::move(e), g, 0.1);
    CHECK(e.lambda == 1.0);  // 0.9 + 1.0, clamped

    g.grad_lambda = 50.0;
    e = sgd_step(std::move(e), g, 0.1);
    CHECK(e.lambda == 0.0);

    CHECK((e.external.A.array() == ext_a.array()).all());
    CHECK((e.external.B.array() == ext_b.array()).all());
}

TEST_CASE("sgd_step applies the learning rate to both factors") {
    LayerExperts e;
    e.cluster = AdapterPair{Matrix::Ones(1, 2), Matrix::Ones(2, 1)};
    e.external = AdapterPair::zeros(2, 2, 1);
    e.external_zeroed = true;
    e.lambda_frozen = true;

    AdapterGradients g;
    g.grad_A = Matrix::Constant(1, 2, 2.0);
    g.grad_B = Matrix::Constant(2, 1, 4.0);
    e = sgd_step(std::move(e), g, 0.5);
    CHECK(e.cluster.A(0, 0) == 0.0);
    CHECK(e.cluster.B(0, 0) == -1.0);
    CHECK(e.lambda == 1.0);
}

TEST_CASE("non-finite gradients raise NumericError") {
    Rng rng(108);
    LayerExperts e = rand_experts(rng, 3, 3, 1, 0.5);
    AdapterGradients g;
    g.grad_B = Matrix::Zero(3, 1);
    g.grad_A = Matrix::Zero(1, 3);
    g.grad_B(1, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sgd_step(std::move(e), g, 0.1), NumericError);
}

TEST_CASE("disabling the clamp hook lets lambda escape and the battery notices") {
    testhooks::set_lambda_clamp_enabled(false);
    LayerExperts e;
    e.cluster = AdapterPair::zeros(2, 2, 1);
    e.external = AdapterPair::zeros(2, 2, 1);
    e.external_zeroed = false;
    e.lambda_frozen = false;
    e.lambda = 0.5;
    AdapterGradients g;
    g.grad_B = Matrix::Zero(2, 1);
    g.grad_A = Matrix::Zero(1, 2);
    g.grad_lambda = -100.0;
    e = sgd_step(std::move(e), g, 1.0);
    CHECK(e.lambda > 1.0);

    const CheckResult invariants = check_lambda_invariants(20, 5);
    CHECK_FALSE(invariants.pass);

    testhooks::set_lambda_clamp_enabled(true);
    const CheckResult restored = check_lambda_invariants(20, 5);
    CHECK(restored.pass);
}

TEST_CASE("model_forward chains layers with tanh between them") {
    FrozenBackbone bb;
    bb.activation = Activation::Tanh;
    bb.layers = {Matrix::Identity(2, 2), Matrix::Identity(2, 2)};
    std::vector<LayerExperts> experts(2);
    for (LayerExperts& e : experts) {
        e.cluster = AdapterPair::zeros(2, 2, 1);
        e.external = AdapterPair::zeros(2, 2, 1);
    }
    Vector x(2);
    x << 0.5, -1.0;
    const Vector y = model_forward(bb, experts, x);
    CHECK(y(0) == doctest::Approx(std::tanh(0.5)).epsilon(1e-15));
    CHECK(y(1) == doctest::Approx(std::tanh(-1.0)).epsilon(1e-15));

    bb.activation = Activation::Identity;
    const Vector y_id = model_forward(bb, experts, x);
    CHECK(y_id(0) == 0.5);
    CHECK(y_id(1) == -1.0);
}

TEST_CASE("mse_loss averages per-sample squared error") {
    FrozenBackbone bb;
    bb.activation = Activation::Identity;
    bb.layers = {Matrix::Identity(1, 1)};
    std::vector<LayerExperts> experts(1);
    experts[0].cluster = AdapterPair::zeros(1, 1, 1);
    experts[0].external = AdapterPair::zeros(1, 1, 1);

    std::vector<Sample> data;
    data.push_back(Sample{Vector::Constant(1, 1.0), Vector::Constant(1, 3.0)});  // error 2
    data.push_back(Sample{Vector::Constant(1, 2.0), Vector::Constant(1, 2.0)});  // error 0
    CHECK(mse_loss(bb, experts, data) == doctest::Approx(2.0).epsilon(1e-15));
}
