#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace udes {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer();
};
}  // namespace detail

/// Dense row-major array with optional gradient. Copies share the same
/// storage (handle semantics); use detach() or clone() for an independent copy.
///
/// Operations record themselves on a dynamic tape whenever one operand
/// requires a gradient. backward() on a scalar result accumulates into the
/// grad of every reachable leaf that requires one.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t rows() const { return shape().at(0); }
  /// Elements per leading-dimension slice.
  std::size_t row_size() const;

  std::span<const double> data() const;
  /// Mutable values. Only meaningful on leaves; intermediate values are
  /// already consumed by the recorded backward closures.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  /// Empty span if no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Leaf copy of the values, no gradient tracking.
  Tensor detach() const;
  /// Leaf copy of the values keeping the requires_grad flag.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse pass from a scalar root.
void backward(const Tensor& root);

/// Max over coordinates of |analytic - central difference| / (|central| + 1e-12).
/// `f` must be deterministic; a non-deterministic f is not detected.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-5);

namespace ad {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor lgamma(const Tensor& a);
Tensor digamma(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// (R, C) -> (R, 1)
Tensor sum_cols(const Tensor& a);
/// (R, 1) -> (R, C)
Tensor expand_cols(const Tensor& a, std::size_t cols);
/// (R, C) with labels[r] in [0, C) -> (R, 1)
Tensor gather_cols(const Tensor& a, std::span<const int> labels);
/// (R, C) -> (R, 1): max over the columns other than labels[r].
Tensor masked_max_cols(const Tensor& a, std::span<const int> labels);

Tensor reshape(const Tensor& a, Shape shape);
/// Concatenate along dim 1; all other dims must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Concatenate along dim 0.
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

/// Whole tensor repeated `times` along dim 0: rows (k, r).
Tensor tile_rows(const Tensor& a, std::size_t times);
/// Consecutive groups of `block` rows, each group repeated `times` in place:
/// rows (r, k, b). block = 1 repeats every row.
Tensor repeat_rows(const Tensor& a, std::size_t times, std::size_t block = 1);
/// (R, C) -> (R, C, spatial...) broadcasting each entry over the spatial dims.
Tensor expand_channels(const Tensor& a, const Shape& spatial);
/// Rows laid out as (g, t, b) with t < group, b < block -> rows (g, b), summed over t.
Tensor sum_row_blocks(const Tensor& a, std::size_t block, std::size_t group);
/// Rows laid out as (m, b) with b < block -> rows (b), product over m. The
/// backward uses explicit exclusive products so equal inputs receive
/// bitwise-equal gradients.
Tensor prod_row_blocks(const Tensor& a, std::size_t block);
/// out[i] = a[index[i]] or 0 where index[i] < 0.
Tensor gather_flat(const Tensor& a, std::span<const long> index, Shape out_shape);

/// Stride-1 "same" convolution. x: (N, C, H, W), w: (O, C, k, k), k odd.
Tensor conv2d(const Tensor& x, const Tensor& w);

}  // namespace ad
}  // namespace udes
