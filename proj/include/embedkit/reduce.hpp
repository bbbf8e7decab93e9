#pragma once

// Dimensionality reduction of embeddings to the 64-d output budget: PCA
// (covariance eigendecomposition, divisor N-1) and the average-pooling
// baseline it is compared against.

#include <cstddef>
#include <string>
#include <vector>

#include "embedkit/numkit.hpp"

namespace embedkit {

struct PcaModel {
    Matrix mean;        // 1 x in_dim
    Matrix components;  // out_dim x in_dim, rows orthonormal, variance-sorted
    std::vector<double> explained_variance;  // non-increasing, non-negative
    bool whiten = false;
};

// Requires N > out_dim rows and non-zero total variance. Components are the
// top eigenvectors of the sample covariance; the eigenvector sign convention
// comes from symmetric_eig, so fits are reproducible.
PcaModel pca_fit(const Matrix& x, std::size_t out_dim = 64, bool whiten = false);

// y = (x - mean) * components^T, optionally whitened, then row-normalized
// when renormalize is set.
Matrix pca_transform(const PcaModel& model, const Matrix& x, bool renormalize = true);

// Reconstruction back into the input space (no renormalization involved).
Matrix pca_inverse_transform(const PcaModel& model, const Matrix& y);

// Coordinate j of the output is the mean of the input block
// [j*g, (j+1)*g) with g = in_dim / out_dim; out_dim must divide in_dim.
Matrix avgpool_reduce(const Matrix& x, std::size_t out_dim = 64, bool renormalize = true);

void save_pca_model(const PcaModel& model, const std::string& path);
PcaModel load_pca_model(const std::string& path);

}  // namespace embedkit
