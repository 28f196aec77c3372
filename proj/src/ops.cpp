#include <algorithm>
#include <cmath>

#include "moc/error.hpp"
#include "moc/tensor.hpp"

namespace moc {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

// Gradient sink for an input, or an empty span when it does not need one.
std::span<double> sink(const NodePtr& n) {
  if (!n->requires_grad) return {};
  return n->grad_buffer();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  require_same_shape(a, b, name);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Tensor result(a.shape(), std::move(out));
  auto an = a.node();
  auto bn = b.node();
  GradTape::current().record(result, {a, b}, [an, bn, da, db](std::span<const double> g) {
    auto ga = sink(an);
    auto gb = sink(bn);
    const auto& x = an->data;
    const auto& y = bn->data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!ga.empty()) ga[i] += g[i] * da(x[i], y[i]);
      if (!gb.empty()) gb[i] += g[i] * db(x[i], y[i]);
    }
  });
  return result;
}

template <typename F, typename D>
Tensor unary_op(const Tensor& a, F f, D d) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Tensor result(a.shape(), std::move(out));
  auto an = a.node();
  GradTape::current().record(result, {a}, [an, d](std::span<const double> g) {
    auto ga = sink(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(an->data[i]);
  });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: scale must hold one value");
  const double k = s.item();
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * av[i];
  Tensor result(a.shape(), std::move(out));
  auto an = a.node();
  auto sn = s.node();
  GradTape::current().record(result, {a, s}, [an, sn](std::span<const double> g) {
    auto ga = sink(an);
    auto gs = sink(sn);
    const double k = sn->data[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!ga.empty()) ga[i] += k * g[i];
      acc += g[i] * an->data[i];
    }
    if (!gs.empty()) gs[0] += acc;
  });
  return result;
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      a, [floor](double x) { return x < floor ? floor : x; },
      [floor](double x) { return x < floor ? 0.0 : 1.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor result = Tensor::scalar(acc);
  auto an = a.node();
  GradTape::current().record(result, {a}, [an](std::span<const double> g) {
    auto ga = sink(an);
    for (auto& v : ga) v += g[0];
  });
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  Tensor result(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  auto an = a.node();
  GradTape::current().record(result, {a}, [an](std::span<const double> g) {
    auto ga = sink(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return result;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  Tensor result(Shape{n, m}, std::move(out));
  auto an = a.node();
  GradTape::current().record(result, {a}, [an, m, n](std::span<const double> g) {
    auto ga = sink(an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
  return result;
}

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  Tensor result(Shape{m, n}, std::move(out));
  auto an = a.node();
  auto bn = b.node();
  GradTape::current().record(result, {a, b}, [an, bn, m, k, n](std::span<const double> g) {
    auto ga = sink(an);
    auto gb = sink(bn);
    if (!ga.empty()) gemm_nt(g.data(), bn->data.data(), ga.data(), m, n, k);
    if (!gb.empty()) gemm_tn(an->data.data(), g.data(), gb.data(), m, k, n);
  });
  return result;
}

Tensor softmax_axis(const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    throw DimensionError("softmax_axis: axis " + std::to_string(axis) + " invalid for " +
                         shape_string(t.shape()));
  }
  const auto& shape = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const auto tv = t.values();
  std::vector<double> out(tv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, tv[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(tv[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
    }
  }
  Tensor result(shape, std::move(out));
  auto tn = t.node();
  auto rn = result.node();
  GradTape::current().record(
      result, {t}, [tn, rn, outer, inner, len](std::span<const double> g) {
        auto gt = sink(tn);
        const auto& y = rn->data;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i)
              dot += g[base + i * inner] * y[base + i * inner];
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t idx = base + i * inner;
              gt[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
  return result;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad,
              const Tensor& bias) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " does not match input channels " + std::to_string(cin));
  }
  if (kernel.dim(3) != k || k % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square with odd size, got " +
                         shape_string(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k || (h + 2 * pad - k) % stride != 0 ||
      (w + 2 * pad - k) % stride != 0) {
    throw DimensionError("conv2d: non-integral output extent for input " +
                         shape_string(input.shape()) + ", k=" + std::to_string(k) +
                         ", stride=" + std::to_string(stride) + ", pad=" + std::to_string(pad));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias must have length c_out");
  }
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  const auto pad_i = static_cast<std::ptrdiff_t>(pad);

  // Valid output range [lo, hi) for kernel offset `off` along an axis of extent n.
  auto valid = [=](std::size_t off, std::size_t n, std::size_t on) {
    const auto o = static_cast<std::ptrdiff_t>(off) - pad_i;
    const auto s = static_cast<std::ptrdiff_t>(stride);
    std::ptrdiff_t lo = o >= 0 ? 0 : (-o + s - 1) / s;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(n) - 1 - o) / s + 1;
    if (static_cast<std::ptrdiff_t>(n) - 1 - o < 0) hi = 0;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(on));
    return std::pair<std::size_t, std::size_t>(lo, std::max(lo, hi));
  };

  const auto x = input.values();
  const auto kv = kernel.values();
  std::vector<double> out(cout * oh * ow, 0.0);
  for (std::size_t co = 0; co < cout; ++co) {
    double* op = out.data() + co * oh * ow;
    if (bias.defined()) std::fill(op, op + oh * ow, bias.values()[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* ip = x.data() + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [y0, y1] = valid(ky, h, oh);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = kv[((co * cin + ci) * k + ky) * k + kx];
          if (wv == 0.0) continue;
          const auto [x0, x1] = valid(kx, w, ow);
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const std::size_t iy = oy * stride + ky - pad;
            const double* irow = ip + iy * w + (static_cast<std::ptrdiff_t>(kx) - pad_i);
            double* orow = op + oy * ow;
            if (stride == 1) {
              for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += wv * irow[ox];
            } else {
              for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += wv * irow[ox * stride];
            }
          }
        }
      }
    }
  }
  Tensor result(Shape{cout, oh, ow}, std::move(out));
  auto in_n = input.node();
  auto k_n = kernel.node();
  auto b_n = bias.node();
  std::vector<Tensor> deps{input, kernel};
  if (bias.defined()) deps.push_back(bias);
  GradTape::current().record(
      result, std::move(deps),
      [=](std::span<const double> g) {
        auto gx = sink(in_n);
        auto gk = sink(k_n);
        if (b_n) {
          auto gb = sink(b_n);
          if (!gb.empty()) {
            for (std::size_t co = 0; co < cout; ++co) {
              double acc = 0.0;
              for (std::size_t i = 0; i < oh * ow; ++i) acc += g[co * oh * ow + i];
              gb[co] += acc;
            }
          }
        }
        const auto& xv = in_n->data;
        const auto& kd = k_n->data;
        for (std::size_t co = 0; co < cout; ++co) {
          const double* gp = g.data() + co * oh * ow;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::size_t ibase = ci * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const auto [y0, y1] = valid(ky, h, oh);
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t kidx = ((co * cin + ci) * k + ky) * k + kx;
                const double wv = kd[kidx];
                const auto [x0, x1] = valid(kx, w, ow);
                double acc = 0.0;
                for (std::size_t oy = y0; oy < y1; ++oy) {
                  const std::size_t iy = oy * stride + ky - pad;
                  const std::ptrdiff_t off =
                      static_cast<std::ptrdiff_t>(ibase + iy * w) + (static_cast<std::ptrdiff_t>(kx) - pad_i);
                  const double* grow = gp + oy * ow;
                  if (!gk.empty()) {
                    const double* irow = xv.data() + off;
                    for (std::size_t ox = x0; ox < x1; ++ox) acc += grow[ox] * irow[ox * stride];
                  }
                  if (!gx.empty() && wv != 0.0) {
                    double* girow = gx.data() + off;
                    for (std::size_t ox = x0; ox < x1; ++ox) girow[ox * stride] += wv * grow[ox];
                  }
                }
                if (!gk.empty()) gk[kidx] += acc;
              }
            }
          }
        }
      });
  return result;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t n, std::size_t factor) {
  std::vector<Tap> taps(n * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
  }
  return taps;
}

std::vector<Tap> nearest_taps(std::size_t n, std::size_t factor) {
  std::vector<Tap> taps(n * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) taps[o] = {o / factor, o / factor, 0.0};
  return taps;
}

}  // namespace

Tensor upsample(const Tensor& t, std::size_t factor, Upsampling mode) {
  require_rank(t, 3, "upsample");
  if (factor != 2 && factor != 4) {
    throw DimensionError("upsample: factor must be 2 or 4, got " + std::to_string(factor));
  }
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = mode == Upsampling::kBilinear ? bilinear_taps(h, factor) : nearest_taps(h, factor);
  const auto tx = mode == Upsampling::kBilinear ? bilinear_taps(w, factor) : nearest_taps(w, factor);
  const auto v = t.values();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = v.data() + ch * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& b = tx[ox];
        const double top = (1 - b.w1) * p[a.i0 * w + b.i0] + b.w1 * p[a.i0 * w + b.i1];
        const double bot = (1 - b.w1) * p[a.i1 * w + b.i0] + b.w1 * p[a.i1 * w + b.i1];
        out[(ch * oh + oy) * ow + ox] = (1 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  Tensor result(Shape{c, oh, ow}, std::move(out));
  auto tn = t.node();
  GradTape::current().record(result, {t}, [=](std::span<const double> g) {
    auto gt = sink(tn);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = gt.data() + ch * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& b = tx[ox];
          const double gv = g[(ch * oh + oy) * ow + ox];
          p[a.i0 * w + b.i0] += (1 - a.w1) * (1 - b.w1) * gv;
          p[a.i0 * w + b.i1] += (1 - a.w1) * b.w1 * gv;
          p[a.i1 * w + b.i0] += a.w1 * (1 - b.w1) * gv;
          p[a.i1 * w + b.i1] += a.w1 * b.w1 * gv;
        }
      }
    }
  });
  return result;
}

Tensor sum_pool2d(const Tensor& t, std::size_t factor) {
  require_rank(t, 3, "sum_pool2d");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (factor == 0 || h % factor != 0 || w % factor != 0) {
    throw DimensionError("sum_pool2d: extents " + shape_string(t.shape()) +
                         " not divisible by " + std::to_string(factor));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  const auto v = t.values();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * oh + y / factor) * ow + x / factor] += v[(ch * h + y) * w + x];
  Tensor result(Shape{c, oh, ow}, std::move(out));
  auto tn = t.node();
  GradTape::current().record(result, {t}, [=](std::span<const double> g) {
    auto gt = sink(tn);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          gt[(ch * h + y) * w + x] += g[(ch * oh + y / factor) * ow + x / factor];
  });
  return result;
}

Tensor avg_pool2d(const Tensor& t, std::size_t factor) {
  return scale(sum_pool2d(t, factor), 1.0 / static_cast<double>(factor * factor));
}

Tensor concat(const std::vector<Tensor>& ts, std::size_t axis) {
  if (ts.empty()) throw DimensionError("concat: no tensors");
  const Shape& first = ts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& t : ts) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_string(s) + " incompatible with " +
                           shape_string(first) + " along axis " + std::to_string(axis));
    }
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t out_block = shape[axis] * inner;
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& t : ts) {
    offsets.push_back(offset);
    const std::size_t block = t.dim(axis) * inner;
    const auto v = t.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * block, block, out.data() + o * out_block + offset);
    offset += block;
  }
  Tensor result(shape, std::move(out));
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> blocks;
  for (const auto& t : ts) {
    nodes.push_back(t.node());
    blocks.push_back(t.dim(axis) * inner);
  }
  GradTape::current().record(result, ts, [=](std::span<const double> g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto gk = sink(nodes[k]);
      if (gk.empty()) continue;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < blocks[k]; ++i)
          gk[o * blocks[k] + i] += g[o * out_block + offsets[k] + i];
    }
  });
  return result;
}

Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= t.rank()) throw DimensionError("slice: axis out of range");
  if (begin > end || end > t.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(t.shape()));
  }
  const auto& src = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= src[i];
  for (std::size_t i = axis + 1; i < src.size(); ++i) inner *= src[i];
  Shape shape = src;
  shape[axis] = end - begin;
  const std::size_t in_block = src[axis] * inner;
  const std::size_t block = shape[axis] * inner;
  const std::size_t offset = begin * inner;
  const auto v = t.values();
  std::vector<double> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.data() + o * in_block + offset, block, out.data() + o * block);
  Tensor result(shape, std::move(out));
  auto tn = t.node();
  GradTape::current().record(result, {t}, [=](std::span<const double> g) {
    auto gt = sink(tn);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < block; ++i) gt[o * in_block + offset + i] += g[o * block + i];
  });
  return result;
}

}  // namespace moc

namespace moc {

Tensor normalize_rows(const Tensor& a, double eps) {
  if (a.rank() != 2) throw DimensionError("normalize_rows expects a 2-D tensor");
  const std::size_t rows = a.dim(0), len = a.dim(1);
  const auto v = a.values();
  std::vector<double> out(v.size());
  std::vector<double> denom(rows);
  std::vector<bool> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) ss += v[r * len + i] * v[r * len + i];
    const double norm = std::sqrt(ss);
    clamped[r] = norm <= eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = v[r * len + i] / denom[r];
  }
  Tensor result(a.shape(), std::move(out));
  auto an = a.node();
  auto rn = result.node();
  GradTape::current().record(result, {a}, [=](std::span<const double> g) {
    auto ga = an->grad_buffer();
    const auto& u = rn->data;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      if (!clamped[r]) {
        for (std::size_t i = 0; i < len; ++i) dot += u[r * len + i] * g[r * len + i];
      }
      for (std::size_t i = 0; i < len; ++i) {
        ga[r * len + i] += (g[r * len + i] - u[r * len + i] * dot) / denom[r];
      }
    }
  });
  return result;
}

}  // namespace moc
