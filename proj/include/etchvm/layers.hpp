#pragma once

#include "etchvm/common.hpp"

#include <vector>

// Row-major token convention throughout: a sequence is a (tokens x features)
// matrix, weights map features in -> out as (in x out), biases are 1 x out.
namespace etchvm::nn {

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b);

/// Accumulates into dw and db; returns dx.
Matrix affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db);

Matrix softmax_rows(const Matrix& scores);
Matrix softmax_rows_backward(const Matrix& probs, const Matrix& dprobs);

struct LayerNormCache {
    Matrix xhat;
    Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps, LayerNormCache* cache);
Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy);

/// tanh approximation
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

struct AttentionCache {
    std::vector<Matrix> weights;  // one (n_q x n_k) matrix per head
};

/// Scaled dot-product attention per head over column blocks of width
/// head_dim; heads are concatenated column-wise in the output.
Matrix multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, int head_dim,
                            AttentionCache* cache);

/// Gradients are accumulated into dq, dk, dv (which must be pre-sized).
void multi_head_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, int heads, int head_dim,
                                   const AttentionCache& cache, const Matrix& dout, Matrix& dq, Matrix& dk,
                                   Matrix& dv);

}  // namespace etchvm::nn
