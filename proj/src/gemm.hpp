#pragma once

// Internal dense float kernels behind the conv2d fast path. Row-major
// throughout; deterministic fixed-order accumulation.

namespace sacnn::detail {

// C (+)= A * B with A: M x K (lda), B: K x N (ldb), C: M x N (ldc).
void sgemm(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
           int ldc, bool accumulate);

// dst (N x M) = transpose of src (M x N), both row-major and dense.
void transpose(const float* src, int m, int n, float* dst);

// col[(ic*k+dy)*k+dx][y*wo+x] = x[ic][y+dy][x+dx]
void im2col(const float* x, int cin, int h, int w, int k, float* col);

// gx[ic][y+dy][x+dx] += col[(ic*k+dy)*k+dx][y*wo+x]
void col2im_add(const float* col, int cin, int h, int w, int k, float* gx);

}  // namespace sacnn::detail
