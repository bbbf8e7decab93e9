#include "embedkit/reduce.hpp"

#include <cmath>
#include <stdexcept>

#include "embedkit/tensor_file.hpp"

namespace embedkit {

PcaModel pca_fit(const Matrix& x, std::size_t out_dim, bool whiten) {
    const std::size_t n = x.rows();
    const std::size_t dim = x.cols();
    if (out_dim < 1 || out_dim > dim)
        throw std::invalid_argument("pca_fit: out_dim must be in [1, in_dim]");
    if (n <= out_dim)
        throw std::invalid_argument("pca_fit: need more than out_dim=" + std::to_string(out_dim) +
                                    " samples, got " + std::to_string(n));
    if (!x.all_finite()) throw std::invalid_argument("pca_fit: non-finite input");

    PcaModel model;
    model.whiten = whiten;
    model.mean = Matrix(1, dim);
    for (std::size_t j = 0; j < dim; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x(i, j);
        model.mean(0, j) = s / static_cast<double>(n);
    }

    Matrix centered = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) centered(i, j) -= model.mean(0, j);

    Matrix cov = scale(matmul(transpose(centered), centered), 1.0 / static_cast<double>(n - 1));
    double total_var = 0.0;
    for (std::size_t j = 0; j < dim; ++j) total_var += cov(j, j);
    if (total_var <= 0.0) throw std::invalid_argument("pca_fit: input has zero variance");

    SymEig eig = symmetric_eig(cov);

    model.components = Matrix(out_dim, dim);
    model.explained_variance.resize(out_dim);
    for (std::size_t k = 0; k < out_dim; ++k) {
        model.explained_variance[k] = std::max(eig.values[k], 0.0);  // PSD up to roundoff
        for (std::size_t j = 0; j < dim; ++j) model.components(k, j) = eig.vectors(j, k);
    }
    return model;
}

Matrix pca_transform(const PcaModel& model, const Matrix& x, bool renormalize) {
    if (x.cols() != model.mean.cols())
        throw std::invalid_argument("pca_transform: input dim " + std::to_string(x.cols()) +
                                    " != model dim " + std::to_string(model.mean.cols()));
    Matrix centered = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) centered(i, j) -= model.mean(0, j);
    Matrix y = matmul(centered, transpose(model.components));
    if (model.whiten) {
        for (std::size_t k = 0; k < y.cols(); ++k) {
            double inv = 1.0 / std::sqrt(model.explained_variance[k] + 1e-12);
            for (std::size_t i = 0; i < y.rows(); ++i) y(i, k) *= inv;
        }
    }
    if (renormalize) y = l2_normalize_rows(y);
    return y;
}

Matrix pca_inverse_transform(const PcaModel& model, const Matrix& y) {
    if (y.cols() != model.components.rows())
        throw std::invalid_argument("pca_inverse_transform: dim mismatch");
    Matrix yw = y;
    if (model.whiten) {
        for (std::size_t k = 0; k < yw.cols(); ++k) {
            double sd = std::sqrt(model.explained_variance[k] + 1e-12);
            for (std::size_t i = 0; i < yw.rows(); ++i) yw(i, k) *= sd;
        }
    }
    Matrix x = matmul(yw, model.components);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += model.mean(0, j);
    return x;
}

Matrix avgpool_reduce(const Matrix& x, std::size_t out_dim, bool renormalize) {
    const std::size_t dim = x.cols();
    if (out_dim < 1 || out_dim > dim || dim % out_dim != 0)
        throw std::invalid_argument("avgpool_reduce: out_dim " + std::to_string(out_dim) +
                                    " must divide in_dim " + std::to_string(dim));
    const std::size_t group = dim / out_dim;
    Matrix y(x.rows(), out_dim);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < out_dim; ++j) {
            double s = 0.0;
            for (std::size_t g = 0; g < group; ++g) s += x(i, j * group + g);
            y(i, j) = s / static_cast<double>(group);
        }
    if (renormalize) y = l2_normalize_rows(y);
    return y;
}

void save_pca_model(const PcaModel& model, const std::string& path) {
    TensorFile tf;
    tf.put_scalar("cfg.whiten", model.whiten ? 1.0 : 0.0);
    tf.put("mean", model.mean);
    tf.put("components", model.components);
    Matrix ev(1, model.explained_variance.size());
    for (std::size_t i = 0; i < model.explained_variance.size(); ++i)
        ev(0, i) = model.explained_variance[i];
    tf.put("explained_variance", ev);
    tf.save(path);
}

PcaModel load_pca_model(const std::string& path) {
    TensorFile tf = TensorFile::load(path);
    PcaModel model;
    model.whiten = tf.get_scalar("cfg.whiten") != 0.0;
    model.mean = tf.get("mean");
    model.components = tf.get("components");
    const Matrix& ev = tf.get("explained_variance");
    model.explained_variance.assign(ev.data(), ev.data() + ev.size());
    if (model.components.cols() != model.mean.cols() ||
        model.components.rows() != model.explained_variance.size())
        throw std::runtime_error("load_pca_model: inconsistent shapes in '" + path + "'");
    return model;
}

}  // namespace embedkit
