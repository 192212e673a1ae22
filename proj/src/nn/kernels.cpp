#include "lesionlab/nn/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>

namespace lesionlab::kernels {

namespace {
Backend g_backend = Backend::openmp;
}

Backend backend() { return g_backend; }
void set_backend(Backend backend) { g_backend = backend; }

// ---------------------------------------------------------------------------
// serial reference

namespace serial {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
  for (int n = 0; n < s.batch; ++n) {
    for (int oc = 0; oc < s.out_ch; ++oc) {
      float* y_plane = y + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
      for (int oh = 0; oh < oh_n; ++oh) {
        for (int ow = 0; ow < ow_n; ++ow) {
          float acc = bias ? bias[oc] : 0.0f;
          for (int ic = 0; ic < s.in_ch; ++ic) {
            const float* x_plane = x + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
            const float* w_plane = w + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
            for (int kh = 0; kh < s.ksize; ++kh) {
              const int ih = oh * s.stride - s.pad + kh;
              if (ih < 0 || ih >= s.in_h) continue;
              for (int kw = 0; kw < s.ksize; ++kw) {
                const int iw = ow * s.stride - s.pad + kw;
                if (iw < 0 || iw >= s.in_w) continue;
                acc += x_plane[ih * s.in_w + iw] * w_plane[kh * s.ksize + kw];
              }
            }
          }
          y_plane[oh * ow_n + ow] = acc;
        }
      }
    }
  }
}

void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
  for (int n = 0; n < s.batch; ++n) {
    for (int ic = 0; ic < s.in_ch; ++ic) {
      float* dx_plane = dx + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
      for (int ih = 0; ih < s.in_h; ++ih) {
        for (int iw = 0; iw < s.in_w; ++iw) {
          float acc = 0.0f;
          for (int oc = 0; oc < s.out_ch; ++oc) {
            const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
            const float* w_plane = w + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
            for (int kh = 0; kh < s.ksize; ++kh) {
              const int oh_num = ih + s.pad - kh;
              if (oh_num < 0 || oh_num % s.stride != 0) continue;
              const int oh = oh_num / s.stride;
              if (oh >= oh_n) continue;
              for (int kw = 0; kw < s.ksize; ++kw) {
                const int ow_num = iw + s.pad - kw;
                if (ow_num < 0 || ow_num % s.stride != 0) continue;
                const int ow = ow_num / s.stride;
                if (ow >= ow_n) continue;
                acc += dy_plane[oh * ow_n + ow] * w_plane[kh * s.ksize + kw];
              }
            }
          }
          dx_plane[ih * s.in_w + iw] = acc;
        }
      }
    }
  }
}

void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
  for (int oc = 0; oc < s.out_ch; ++oc) {
    for (int ic = 0; ic < s.in_ch; ++ic) {
      float* dw_plane = dw + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
      for (int kh = 0; kh < s.ksize; ++kh) {
        for (int kw = 0; kw < s.ksize; ++kw) {
          float acc = 0.0f;
          for (int n = 0; n < s.batch; ++n) {
            const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
            const float* x_plane = x + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
            for (int oh = 0; oh < oh_n; ++oh) {
              const int ih = oh * s.stride - s.pad + kh;
              if (ih < 0 || ih >= s.in_h) continue;
              for (int ow = 0; ow < ow_n; ++ow) {
                const int iw = ow * s.stride - s.pad + kw;
                if (iw < 0 || iw >= s.in_w) continue;
                acc += dy_plane[oh * ow_n + ow] * x_plane[ih * s.in_w + iw];
              }
            }
          }
          dw_plane[kh * s.ksize + kw] += acc;
        }
      }
    }
  }
  if (db) {
    for (int oc = 0; oc < s.out_ch; ++oc) {
      float acc = 0.0f;
      for (int n = 0; n < s.batch; ++n) {
        const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
        for (int i = 0; i < oh_n * ow_n; ++i) acc += dy_plane[i];
      }
      db[oc] += acc;
    }
  }
}

void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim) {
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < out_dim; ++o) {
      float acc = b ? b[o] : 0.0f;
      const float* x_row = x + static_cast<int64_t>(n) * in_dim;
      const float* w_row = w + static_cast<int64_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) acc += x_row[i] * w_row[i];
      y[static_cast<int64_t>(n) * out_dim + o] = acc;
    }
  }
}

void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim) {
  for (int n = 0; n < batch; ++n) {
    for (int i = 0; i < in_dim; ++i) {
      float acc = 0.0f;
      for (int o = 0; o < out_dim; ++o) {
        acc += dy[static_cast<int64_t>(n) * out_dim + o] * w[static_cast<int64_t>(o) * in_dim + i];
      }
      dx[static_cast<int64_t>(n) * in_dim + i] = acc;
    }
  }
}

void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim) {
  for (int o = 0; o < out_dim; ++o) {
    float* dw_row = dw + static_cast<int64_t>(o) * in_dim;
    float db_acc = 0.0f;
    for (int n = 0; n < batch; ++n) {
      const float g = dy[static_cast<int64_t>(n) * out_dim + o];
      const float* x_row = x + static_cast<int64_t>(n) * in_dim;
      for (int i = 0; i < in_dim; ++i) dw_row[i] += g * x_row[i];
      db_acc += g;
    }
    if (db) db[o] += db_acc;
  }
}

void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w) {
  const float inv = 1.0f / static_cast<float>(h * w);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float* plane = x + (static_cast<int64_t>(n) * ch + c) * h * w;
      float acc = 0.0f;
      for (int i = 0; i < h * w; ++i) acc += plane[i];
      y[static_cast<int64_t>(n) * ch + c] = acc * inv;
    }
  }
}

void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w) {
  const float inv = 1.0f / static_cast<float>(h * w);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float g = dy[static_cast<int64_t>(n) * ch + c] * inv;
      float* plane = dx + (static_cast<int64_t>(n) * ch + c) * h * w;
      for (int i = 0; i < h * w; ++i) plane[i] = g;
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels. Each output element (or disjoint parameter slice) is owned
// by a single thread, and every element accumulates its (ic,kh,kw) terms in
// the reference order, so results stay bitwise-equal to the serial kernels.
// Border handling is hoisted out of the inner loops so they vectorize.

namespace openmp {

namespace {

// Output range [lo,hi) for which `o*stride - pad + k` stays inside [0, in).
inline void valid_out_range(int k, int pad, int stride, int in, int out, int& lo, int& hi) {
  const int shift = pad - k;  // i = o*stride - shift
  lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  const int last = in - 1 + shift;  // numerator of the last valid o
  hi = last < 0 ? lo : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < s.batch; ++n) {
    for (int oc = 0; oc < s.out_ch; ++oc) {
      float* y_plane = y + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
      const float init = bias ? bias[oc] : 0.0f;
      for (int i = 0; i < oh_n * ow_n; ++i) y_plane[i] = init;
      for (int ic = 0; ic < s.in_ch; ++ic) {
        const float* x_plane = x + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
        const float* w_plane = w + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
        for (int kh = 0; kh < s.ksize; ++kh) {
          int oh_lo, oh_hi;
          valid_out_range(kh, s.pad, s.stride, s.in_h, oh_n, oh_lo, oh_hi);
          for (int kw = 0; kw < s.ksize; ++kw) {
            int ow_lo, ow_hi;
            valid_out_range(kw, s.pad, s.stride, s.in_w, ow_n, ow_lo, ow_hi);
            const float wv = w_plane[kh * s.ksize + kw];
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const float* x_row = x_plane + (oh * s.stride - s.pad + kh) * s.in_w - s.pad + kw;
              float* y_row = y_plane + oh * ow_n;
              if (s.stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) y_row[ow] += wv * x_row[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) y_row[ow] += wv * x_row[ow * s.stride];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < s.batch; ++n) {
    for (int ic = 0; ic < s.in_ch; ++ic) {
      float* dx_plane = dx + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
      for (int i = 0; i < s.in_h * s.in_w; ++i) dx_plane[i] = 0.0f;
      for (int oc = 0; oc < s.out_ch; ++oc) {
        const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
        const float* w_plane = w + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
        for (int kh = 0; kh < s.ksize; ++kh) {
          int oh_lo, oh_hi;
          valid_out_range(kh, s.pad, s.stride, s.in_h, oh_n, oh_lo, oh_hi);
          for (int kw = 0; kw < s.ksize; ++kw) {
            int ow_lo, ow_hi;
            valid_out_range(kw, s.pad, s.stride, s.in_w, ow_n, ow_lo, ow_hi);
            const float wv = w_plane[kh * s.ksize + kw];
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              float* dx_row = dx_plane + (oh * s.stride - s.pad + kh) * s.in_w - s.pad + kw;
              const float* dy_row = dy_plane + oh * ow_n;
              if (s.stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) dx_row[ow] += wv * dy_row[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) dx_row[ow * s.stride] += wv * dy_row[ow];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s) {
  const int oh_n = s.out_h(), ow_n = s.out_w();
#pragma omp parallel for collapse(2) schedule(static)
  for (int oc = 0; oc < s.out_ch; ++oc) {
    for (int ic = 0; ic < s.in_ch; ++ic) {
      float* dw_plane = dw + ((static_cast<int64_t>(oc) * s.in_ch + ic) * s.ksize) * s.ksize;
      for (int kh = 0; kh < s.ksize; ++kh) {
        int oh_lo, oh_hi;
        valid_out_range(kh, s.pad, s.stride, s.in_h, oh_n, oh_lo, oh_hi);
        for (int kw = 0; kw < s.ksize; ++kw) {
          int ow_lo, ow_hi;
          valid_out_range(kw, s.pad, s.stride, s.in_w, ow_n, ow_lo, ow_hi);
          float acc = 0.0f;
          for (int n = 0; n < s.batch; ++n) {
            const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
            const float* x_plane = x + (static_cast<int64_t>(n) * s.in_ch + ic) * s.in_h * s.in_w;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const float* x_row = x_plane + (oh * s.stride - s.pad + kh) * s.in_w - s.pad + kw;
              const float* dy_row = dy_plane + oh * ow_n;
              if (s.stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) acc += dy_row[ow] * x_row[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) acc += dy_row[ow] * x_row[ow * s.stride];
              }
            }
          }
          dw_plane[kh * s.ksize + kw] += acc;
        }
      }
    }
  }
  if (db) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < s.out_ch; ++oc) {
      float acc = 0.0f;
      for (int n = 0; n < s.batch; ++n) {
        const float* dy_plane = dy + (static_cast<int64_t>(n) * s.out_ch + oc) * oh_n * ow_n;
        for (int i = 0; i < oh_n * ow_n; ++i) acc += dy_plane[i];
      }
      db[oc] += acc;
    }
  }
}

void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < out_dim; ++o) {
      float acc = b ? b[o] : 0.0f;
      const float* x_row = x + static_cast<int64_t>(n) * in_dim;
      const float* w_row = w + static_cast<int64_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) acc += x_row[i] * w_row[i];
      y[static_cast<int64_t>(n) * out_dim + o] = acc;
    }
  }
}

void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int i = 0; i < in_dim; ++i) {
      float acc = 0.0f;
      for (int o = 0; o < out_dim; ++o) {
        acc += dy[static_cast<int64_t>(n) * out_dim + o] * w[static_cast<int64_t>(o) * in_dim + i];
      }
      dx[static_cast<int64_t>(n) * in_dim + i] = acc;
    }
  }
}

void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out_dim; ++o) {
    float* dw_row = dw + static_cast<int64_t>(o) * in_dim;
    float db_acc = 0.0f;
    for (int n = 0; n < batch; ++n) {
      const float g = dy[static_cast<int64_t>(n) * out_dim + o];
      const float* x_row = x + static_cast<int64_t>(n) * in_dim;
      for (int i = 0; i < in_dim; ++i) dw_row[i] += g * x_row[i];
      db_acc += g;
    }
    if (db) db[o] += db_acc;
  }
}

void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w) {
  const float inv = 1.0f / static_cast<float>(h * w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float* plane = x + (static_cast<int64_t>(n) * ch + c) * h * w;
      float acc = 0.0f;
      for (int i = 0; i < h * w; ++i) acc += plane[i];
      y[static_cast<int64_t>(n) * ch + c] = acc * inv;
    }
  }
}

void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w) {
  const float inv = 1.0f / static_cast<float>(h * w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float g = dy[static_cast<int64_t>(n) * ch + c] * inv;
      float* plane = dx + (static_cast<int64_t>(n) * ch + c) * h * w;
      for (int i = 0; i < h * w; ++i) plane[i] = g;
    }
  }
}

}  // namespace openmp

// ---------------------------------------------------------------------------
// dispatch

#define LESIONLAB_DISPATCH(fn, ...)                                  \
  do {                                                               \
    if (g_backend == Backend::serial) {                              \
      serial::fn(__VA_ARGS__);                                       \
    } else {                                                         \
      openmp::fn(__VA_ARGS__);                                       \
    }                                                                \
  } while (0)

void conv2d_forward(const float* x, const float* w, const float* bias, float* y, const Conv2dShape& s) {
  LESIONLAB_DISPATCH(conv2d_forward, x, w, bias, y, s);
}
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dShape& s) {
  LESIONLAB_DISPATCH(conv2d_backward_input, dy, w, dx, s);
}
void conv2d_backward_params(const float* dy, const float* x, float* dw, float* db, const Conv2dShape& s) {
  LESIONLAB_DISPATCH(conv2d_backward_params, dy, x, dw, db, s);
}
void linear_forward(const float* x, const float* w, const float* b, float* y,
                    int batch, int in_dim, int out_dim) {
  LESIONLAB_DISPATCH(linear_forward, x, w, b, y, batch, in_dim, out_dim);
}
void linear_backward_input(const float* dy, const float* w, float* dx,
                           int batch, int in_dim, int out_dim) {
  LESIONLAB_DISPATCH(linear_backward_input, dy, w, dx, batch, in_dim, out_dim);
}
void linear_backward_params(const float* dy, const float* x, float* dw, float* db,
                            int batch, int in_dim, int out_dim) {
  LESIONLAB_DISPATCH(linear_backward_params, dy, x, dw, db, batch, in_dim, out_dim);
}
void global_avg_pool_forward(const float* x, float* y, int batch, int ch, int h, int w) {
  LESIONLAB_DISPATCH(global_avg_pool_forward, x, y, batch, ch, h, w);
}
void global_avg_pool_backward(const float* dy, float* dx, int batch, int ch, int h, int w) {
  LESIONLAB_DISPATCH(global_avg_pool_backward, dy, dx, batch, ch, h, w);
}

#undef LESIONLAB_DISPATCH

}  // namespace lesionlab::kernels
