#include "fedtree/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedtree {

void DistanceMatrix::validate() const {
    if (entries.rows() != entries.cols()) {
        throw std::invalid_argument("DistanceMatrix: entries are " +
                                    std::to_string(entries.rows()) + "x" +
                                    std::to_string(entries.cols()) + ", expected square");
    }
    for (int i = 0; i < entries.rows(); ++i) {
        if (entries(i, i) != 0.0) {
            throw std::invalid_argument("DistanceMatrix: nonzero diagonal at " +
                                        std::to_string(i));
        }
        for (int j = 0; j < entries.cols(); ++j) {
            if (!(entries(i, j) >= 0.0)) {  // also catches NaN
                throw std::invalid_argument("DistanceMatrix: negative or non-finite entry at (" +
                                            std::to_string(i) + ", " + std::to_string(j) + ")");
            }
            if (entries(i, j) != entries(j, i)) {
                throw std::invalid_argument("DistanceMatrix: asymmetric at (" + std::to_string(i) +
                                            ", " + std::to_string(j) + ")");
            }
        }
    }
}

double pairwise_distance(const Matrix& x, const Matrix& y, Metric metric) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) {
        throw std::invalid_argument("pairwise_distance: shapes " + std::to_string(x.rows()) + "x" +
                                    std::to_string(x.cols()) + " and " + std::to_string(y.rows()) +
                                    "x" + std::to_string(y.cols()) + " differ");
    }
    switch (metric) {
        case Metric::Frobenius:
            return (x - y).norm();
        case Metric::Cosine: {
            const bool x_zero = x.isZero(0.0);
            const bool y_zero = y.isZero(0.0);
            if (x_zero && y_zero) return 0.0;  // identical, even if degenerate
            if (x_zero || y_zero) return 1.0;  // orthogonal by convention
            // Equal matrices must land exactly on 0 regardless of rounding in
            // the norms, which the clamp alone would not guarantee.
            if (x == y) return 0.0;
            double cosine = x.cwiseProduct(y).sum() / (x.norm() * y.norm());
            return std::clamp(1.0 - cosine, 0.0, 2.0);
        }
    }
    throw std::invalid_argument("pairwise_distance: unknown metric");
}

DistanceMatrix layer_distance_matrix(std::span<const Matrix> bs, Metric metric) {
    const int n = static_cast<int>(bs.size());
    if (n < 1) throw std::invalid_argument("layer_distance_matrix: no clients");
    DistanceMatrix d;
    d.entries = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            // Computed once per pair and mirrored, keeping symmetry exact.
            double dist = pairwise_distance(bs[i], bs[j], metric);
            d.entries(i, j) = dist;
            d.entries(j, i) = dist;
        }
    }
    return d;
}

DistanceMatrix global_distance_matrix(std::span<const std::vector<Matrix>> layers, Metric metric) {
    if (layers.empty()) throw std::invalid_argument("global_distance_matrix: no layers");
    const int n = static_cast<int>(layers[0].size());
    DistanceMatrix global;
    global.entries = Matrix::Zero(n, n);
    for (const std::vector<Matrix>& layer : layers) {
        if (static_cast<int>(layer.size()) != n) {
            throw std::invalid_argument("global_distance_matrix: layer covers " +
                                        std::to_string(layer.size()) + " clients, expected " +
                                        std::to_string(n));
        }
        global.entries += layer_distance_matrix(layer, metric).entries;
    }
    global.entries /= static_cast<double>(layers.size());
    return global;
}

}  // namespace fedtree
