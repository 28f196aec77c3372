#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moc {

/// Extents of a tensor. Rasters are channel-major: channels x height x width.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;

  std::span<double> grad_buffer();
};

}  // namespace detail

/// Dense 64-bit tensor handle. Copies share storage; use detach() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct write access. Only for leaves outside a recorded graph (optimizers, perturbation).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Accumulated gradient; zeros when none has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad();

  Tensor detach() const;
  bool is_same(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of differentiable operations executed on the current thread.
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Entry {
    std::shared_ptr<detail::Node> output;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    BackwardFn backward;
  };

  static GradTape& current();

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Records `fn` if recording is enabled and any input requires a gradient.
  /// Returns whether the entry was recorded.
  bool record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn);

  /// Replays the tape backward from `loss` and clears it.
  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

/// Suspends tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// Element-wise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Multiplies every element of `a` by the single value held in `s`.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double floor);
/// x * sigmoid(x)
Tensor silu(const Tensor& a);

// Reductions to a rank-0 tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Each row of a 2-D tensor divided by max(||row||_2, eps).
Tensor normalize_rows(const Tensor& a, double eps);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_axis(const Tensor& t, std::size_t axis);

/// Cross-correlation of a c_in x H x W input with c_out x c_in x k x k kernels.
/// `bias` is optional (undefined tensor) or of length c_out.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
              std::size_t pad = 0, const Tensor& bias = {});

enum class Upsampling { kBilinear, kNearest };

/// Half-pixel-center upsampling of a c x h x w tensor by 2 or 4.
Tensor upsample(const Tensor& t, std::size_t factor,
                Upsampling mode = Upsampling::kBilinear);
inline Tensor upsample_bilinear(const Tensor& t, std::size_t factor) {
  return upsample(t, factor, Upsampling::kBilinear);
}

Tensor sum_pool2d(const Tensor& t, std::size_t factor);
Tensor avg_pool2d(const Tensor& t, std::size_t factor);

Tensor concat(const std::vector<Tensor>& ts, std::size_t axis);
Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t end);

/// Central-difference estimate of d f / d t, perturbing `t` in place.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor t,
                        double eps);

/// max_k |analytic_k - numeric_k| / (|numeric_k| + floor)
double max_relative_error(std::span<const double> analytic,
                          std::span<const double> numeric, double floor = 1e-8);

// Serialization: u64 rank, u64 extents, then little-endian f64 values.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace moc
