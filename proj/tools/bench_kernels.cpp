// Compares the serial reference kernels against the OpenMP kernels on the
// shapes the training loops actually hit.

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <omp.h>

#include "lesionlab/nn/backbone.hpp"
#include "lesionlab/nn/kernels.hpp"
#include "lesionlab/rng.hpp"

using namespace lesionlab;
using nn::Tensor;
namespace k = lesionlab::kernels;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

template <class Fn>
double time_best_of(int repeats, Fn&& fn) {
  double best = 1e30;
  for (int r = 0; r < repeats; ++r) {
    const double t0 = omp_get_wtime();
    fn();
    best = std::min(best, omp_get_wtime() - t0);
  }
  return best;
}

void report(const std::string& name, double serial_s, double omp_s) {
  std::printf("%-34s %10.3f ms %10.3f ms %7.2fx\n", name.c_str(), serial_s * 1e3, omp_s * 1e3,
              serial_s / omp_s);
}

}  // namespace

int main(int argc, char** argv) {
  int repeats = 5;
  if (argc > 1) repeats = std::max(1, std::atoi(argv[1]));
  std::printf("threads: %d, best of %d runs\n", omp_get_max_threads(), repeats);
  std::printf("%-34s %13s %13s %8s\n", "kernel", "serial", "openmp", "speedup");

  Rng rng(1);

  const k::Conv2dShape conv_shapes[] = {
      {16, 3, 64, 64, 16, 3, 1, 1},   // input block, batch 16
      {16, 32, 16, 16, 32, 3, 2, 1},  // mid block, stride 2
      {16, 64, 8, 8, 64, 3, 1, 1},    // deep block
  };
  for (const auto& s : conv_shapes) {
    const Tensor x = random_tensor(rng, {s.batch, s.in_ch, s.in_h, s.in_w});
    const Tensor w = random_tensor(rng, {s.out_ch, s.in_ch, s.ksize, s.ksize});
    const Tensor b = random_tensor(rng, {s.out_ch});
    Tensor y({s.batch, s.out_ch, s.out_h(), s.out_w()});
    const Tensor dy = random_tensor(rng, y.shape);
    Tensor dx(x.shape), dw(w.shape), db(b.shape);

    char tag[64];
    std::snprintf(tag, sizeof(tag), "conv %dx%dx%dx%d oc%d s%d", s.batch, s.in_ch, s.in_h, s.in_w,
                  s.out_ch, s.stride);
    report(std::string(tag) + " fwd",
           time_best_of(repeats, [&] { k::serial::conv2d_forward(x.ptr(), w.ptr(), b.ptr(), y.ptr(), s); }),
           time_best_of(repeats, [&] { k::openmp::conv2d_forward(x.ptr(), w.ptr(), b.ptr(), y.ptr(), s); }));
    report(std::string(tag) + " bwd_in",
           time_best_of(repeats, [&] { k::serial::conv2d_backward_input(dy.ptr(), w.ptr(), dx.ptr(), s); }),
           time_best_of(repeats, [&] { k::openmp::conv2d_backward_input(dy.ptr(), w.ptr(), dx.ptr(), s); }));
    report(std::string(tag) + " bwd_par",
           time_best_of(repeats, [&] {
             dw.zero();
             db.zero();
             k::serial::conv2d_backward_params(dy.ptr(), x.ptr(), dw.ptr(), db.ptr(), s);
           }),
           time_best_of(repeats, [&] {
             dw.zero();
             db.zero();
             k::openmp::conv2d_backward_params(dy.ptr(), x.ptr(), dw.ptr(), db.ptr(), s);
           }));
  }

  {
    const int batch = 200, in_dim = 64 * 8 * 8, out_dim = 128;
    const Tensor x = random_tensor(rng, {batch, in_dim});
    const Tensor w = random_tensor(rng, {out_dim, in_dim});
    const Tensor b = random_tensor(rng, {out_dim});
    Tensor y({batch, out_dim});
    report("linear 200x4096 -> 128 fwd",
           time_best_of(repeats, [&] {
             k::serial::linear_forward(x.ptr(), w.ptr(), b.ptr(), y.ptr(), batch, in_dim, out_dim);
           }),
           time_best_of(repeats, [&] {
             k::openmp::linear_forward(x.ptr(), w.ptr(), b.ptr(), y.ptr(), batch, in_dim, out_dim);
           }));
  }

  {
    Rng build_rng(7);
    auto backbone = nn::BackboneRegistry::instance().create("tiny8", build_rng);
    const Tensor x = random_tensor(rng, {16, 3, 64, 64});
    const auto run = [&] { backbone->forward(x, false, false); };
    k::set_backend(k::Backend::serial);
    const double serial_s = time_best_of(repeats, run);
    k::set_backend(k::Backend::openmp);
    const double omp_s = time_best_of(repeats, run);
    report("tiny8 forward, batch 16", serial_s, omp_s);
  }
  return 0;
}
