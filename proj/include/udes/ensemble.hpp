#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "udes/numerics.hpp"
#include "udes/tensor.hpp"

namespace udes {

enum class LayerKind { dense, conv };

/// How member logits are read out as class probabilities.
enum class Head {
  evidential,  ///< alpha = softplus(z) + 1, probabilities alpha / sum(alpha)
  softmax,     ///< plain softmax (pretrained baselines and surrogates)
};

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;      ///< input features (dense) or channels (conv)
  std::size_t out = 0;     ///< output features (dense) or channels (conv)
  std::size_t kernel = 0;  ///< conv only, odd
  bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
  Shape input_shape;  ///< per-sample: {d} or {C, H, W}
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  /// in_dim -> hidden... -> num_classes, ReLU between layers.
  static Architecture mlp(std::size_t in_dim, std::vector<std::size_t> hidden, std::size_t num_classes);
  /// Stride-1 same-padded conv layers, then a dense head on the flattened map.
  static Architecture image(std::size_t channels, std::size_t height, std::size_t width,
                            std::vector<std::size_t> conv_channels, std::size_t kernel,
                            std::vector<std::size_t> hidden, std::size_t num_classes);

  bool is_image() const { return input_shape.size() == 3; }
  std::size_t input_numel() const { return shape_numel(input_shape); }
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

/// Dense per-layer weights: the pretrained baseline, or one member after
/// materialisation. Dense weight is (in, out); conv weight is (out, in, k, k).
struct PlainNet {
  Architecture arch;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static PlainNet init(const Architecture& arch, RngStream& rng);
  /// x: (B, input_shape...) -> logits (B, N)
  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> parameters() const;
  PlainNet clone() const;
};

enum class ParamGroup { shared, factor };

struct Param {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

/// One member's view of one layer: p rows of r (length in), p rows of s
/// (length out), and the bias (length out).
struct MemberFactors {
  Tensor r;
  Tensor s;
  Tensor bias;
};

/// Shared weights plus stacked factors for all members. Per layer, r is
/// (M*p, in) with rows ordered (member, rank), s is (M*p, out), bias is (M, out).
class EnsembleNet {
 public:
  struct Layer {
    LayerSpec spec;
    Tensor weight;
    Tensor r;
    Tensor s;
    Tensor bias;
  };

  EnsembleNet() = default;
  EnsembleNet(Architecture arch, std::size_t members, std::size_t rank, Head head, std::vector<Layer> layers,
              std::uint64_t seed = 0);

  const Architecture& arch() const { return arch_; }
  std::size_t members() const { return members_; }
  std::size_t rank() const { return rank_; }
  std::size_t num_classes() const { return arch_.num_classes; }
  Head head() const { return head_; }
  void set_head(Head h) { head_ = h; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  /// Logits of member m: (B, N).
  Tensor member_forward(std::size_t m, const Tensor& x) const;
  /// Logits of all members in one pass: (M*B, N), rows ordered (member, sample).
  /// Row block m is bitwise equal to member_forward(m, x).
  Tensor grouped_forward(const Tensor& x) const;

  PlainNet materialize_member(std::size_t m) const;
  MemberFactors member_factors(std::size_t m, std::size_t layer) const;

  std::vector<Param> parameters() const;
  std::size_t parameter_count() const;
  /// shared + M*p*(in+out) + M*out per layer.
  static std::size_t expected_parameter_count(const Architecture& arch, std::size_t members, std::size_t rank);

  /// Deep copy with every parameter detached (requires_grad off).
  EnsembleNet frozen() const;
  /// Deep copy keeping requires_grad flags.
  EnsembleNet clone() const;
  /// Order-sensitive hash over every parameter bit pattern.
  std::uint64_t checksum() const;

 private:
  Tensor forward_members(std::size_t first, std::size_t count, const Tensor& x) const;
  void check_input(const Tensor& x) const;

  Architecture arch_;
  std::size_t members_ = 0;
  std::size_t rank_ = 0;
  Head head_ = Head::evidential;
  std::vector<Layer> layers_;
  std::uint64_t seed_ = 0;
};

/// Shared weights copied from the baseline; r, s = 1 + N(0, init_scale^2);
/// member biases copied from the baseline bias.
EnsembleNet init_from_pretrained(const PlainNet& baseline, std::size_t members, std::size_t rank, RngStream& rng,
                                 double init_scale = 0.1);

/// Wraps a plain network as a single-member, rank-1, all-ones ensemble with
/// the given head. materialize_member(0) recovers the weights exactly.
EnsembleNet as_single_member(const PlainNet& net, Head head);

void save_checkpoint(const EnsembleNet& net, const std::string& path);
EnsembleNet load_checkpoint(const std::string& path);
std::string checkpoint_to_string(const EnsembleNet& net);
EnsembleNet checkpoint_from_string(const std::string& text);

}  // namespace udes
