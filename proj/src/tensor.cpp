#include "moc/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "moc/error.hpp"

namespace moc {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape) : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), 0.0);
  node_->shape = std::move(shape);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t(std::move(shape));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) return {};
  return node_->data;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) return {};
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_string(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (node_) node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (!node_) return {};
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  return Tensor(node_->shape, node_->data, false);
}

// ---------------------------------------------------------------------------

GradTape& GradTape::current() {
  thread_local GradTape tape;
  return tape;
}

bool GradTape::record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!enabled_) return false;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return false;
  Entry e;
  e.output = output.node();
  e.output->requires_grad = true;
  e.output->is_leaf = false;
  e.inputs.reserve(inputs.size());
  for (auto& t : inputs) e.inputs.push_back(t.node());
  e.backward = std::move(fn);
  entries_.push_back(std::move(e));
  return true;
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() requires a scalar loss, got " +
                         shape_string(loss.shape()));
  }
  const auto& root = loss.node();
  if (!root->requires_grad) {
    throw ValidationError("backward(): loss is not connected to any tensor requiring grad");
  }
  const bool on_tape = root->is_leaf ||
                       std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == root; });
  if (!on_tape) throw ValidationError("backward(): loss was not produced on this tape");

  root->grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = it->output;
    if (out->grad.empty()) continue;
    it->backward(out->grad);
    out->grad.clear();
    out->grad.shrink_to_fit();
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : previous_(GradTape::current().enabled_) {
  GradTape::current().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { GradTape::current().enabled_ = previous_; }

void backward(const Tensor& loss) { GradTape::current().backward(loss); }

// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor t,
                        double eps) {
  if (!(eps > 0.0)) throw ValidationError("finite_diff_grad: eps must be positive");
  NoGradGuard guard;
  auto values = t.mutable_values();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = f(t);
    values[i] = saved - eps;
    const double minus = f(t);
    values[i] = saved;
    out[i] = (plus - minus) / (2.0 * eps);
  }
  return Tensor(t.shape(), std::move(out));
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + floor);
    if (!(err <= worst)) worst = std::isnan(err) ? INFINITY : err;
  }
  return worst;
}

// ---------------------------------------------------------------------------

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw ParseError("tensor stream truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (auto e : t.shape()) put_u64(out, e);
  for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  const auto rank = get_u64(in);
  if (rank > 16) throw ParseError("tensor stream: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u64(in);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path + " for writing");
  write_tensor(out, t);
  if (!out) throw ValidationError("failed writing " + path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return read_tensor(in);
}

}  // namespace moc
