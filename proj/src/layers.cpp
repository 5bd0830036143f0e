#include "etchvm/layers.hpp"

#include <cmath>

namespace etchvm::nn {

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    if (x.cols() != w.rows() || b.cols() != w.cols() || b.rows() != 1)
        throw Error(ErrorCode::ShapeMismatch, "affine: input " + std::to_string(x.rows()) + "x" +
                                                  std::to_string(x.cols()) + " vs weight " +
                                                  std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    Matrix y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

Matrix affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db) {
    dw.noalias() += x.transpose() * dy;
    db += dy.colwise().sum();
    return dy * w.transpose();
}

Matrix softmax_rows(const Matrix& scores) {
    Matrix p(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        p.row(r) = (scores.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

Matrix softmax_rows_backward(const Matrix& probs, const Matrix& dprobs) {
    const Vector inner = (probs.array() * dprobs.array()).rowwise().sum();
    return probs.array() * (dprobs.colwise() - inner).array();
}

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps, LayerNormCache* cache) {
    const auto n = static_cast<double>(x.cols());
    const Vector mu = x.rowwise().mean();
    Matrix xc = x.colwise() - mu;
    const Vector inv_std = ((xc.array().square().rowwise().sum() / n) + eps).rsqrt();
    Matrix xhat = xc.array().colwise() * inv_std.array();
    Matrix y = xhat.array().rowwise() * gamma.row(0).array();
    y.rowwise() += beta.row(0);
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = inv_std;
    }
    return y;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy) {
    const auto n = static_cast<double>(dy.cols());
    const Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
    const Vector mean_d = dxhat.rowwise().sum() / n;
    const Vector mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().sum() / n;
    Matrix dx = dxhat.colwise() - mean_d;
    dx -= (cache.xhat.array().colwise() * mean_dx.array()).matrix();
    return dx.array().colwise() * cache.inv_std.array();
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Matrix gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
    Matrix d = x.unaryExpr([](double v) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double th = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    });
    return d.cwiseProduct(dy);
}

Matrix multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, int head_dim,
                            AttentionCache* cache) {
    const Eigen::Index width = static_cast<Eigen::Index>(heads) * head_dim;
    if (q.cols() != width || k.cols() != width || v.cols() != width || k.rows() != v.rows())
        throw Error(ErrorCode::ShapeMismatch, "attention: projections do not match heads x head_dim");
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Matrix out(q.rows(), width);
    if (cache) cache->weights.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * head_dim;
        Matrix w = softmax_rows(scale * q.middleCols(off, head_dim) * k.middleCols(off, head_dim).transpose());
        out.middleCols(off, head_dim).noalias() = w * v.middleCols(off, head_dim);
        if (cache) cache->weights[static_cast<std::size_t>(h)] = std::move(w);
    }
    return out;
}

void multi_head_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, int heads, int head_dim,
                                   const AttentionCache& cache, const Matrix& dout, Matrix& dq, Matrix& dk,
                                   Matrix& dv) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * head_dim;
        const Matrix& w = cache.weights[static_cast<std::size_t>(h)];
        const auto dout_h = dout.middleCols(off, head_dim);
        dv.middleCols(off, head_dim).noalias() += w.transpose() * dout_h;
        const Matrix dw = dout_h * v.middleCols(off, head_dim).transpose();
        const Matrix ds = scale * softmax_rows_backward(w, dw);
        dq.middleCols(off, head_dim).noalias() += ds * k.middleCols(off, head_dim);
        dk.middleCols(off, head_dim).noalias() += ds.transpose() * q.middleCols(off, head_dim);
    }
}

}  // namespace etchvm::nn
