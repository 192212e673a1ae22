#pragma once

namespace lesionlab::kernels {

// The OpenMP kernels assign every output element to exactly one thread and
// keep each element's reduction order identical to the serial code, so the
// two backends produce bitwise-equal results.
enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend backend);

struct Conv2dShape {
  int batch, in_ch, in_h, in_w;
  int out_ch, ksize, stride, pad;

  int out_h() const { return (in_h + 2 * pad - ksize) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - ksize) / stride + 1; }
};

namespace serial {
void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s);
void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s);
void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim);
void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim);
void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w);
void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w);
}  // namespace serial

namespace openmp {
void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s);
void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s);
void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim);
void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim);
void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w);
void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w);
}  // namespace openmp

// Dispatch through the active backend. Gradients accumulate into dw/db.
void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s);
void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s);
void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim);
void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim);
void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w);
void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w);

}  // namespace lesionlab::kernels
