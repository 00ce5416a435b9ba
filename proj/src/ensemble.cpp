#include "udes/ensemble.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "udes/errors.hpp"

namespace udes {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::mlp(std::size_t in_dim, std::vector<std::size_t> hidden, std::size_t num_classes) {
  Architecture a;
  a.input_shape = {in_dim};
  a.num_classes = num_classes;
  std::size_t prev = in_dim;
  hidden.push_back(num_classes);
  for (auto h : hidden) {
    a.layers.push_back({LayerKind::dense, prev, h, 0});
    prev = h;
  }
  a.validate();
  return a;
}

Architecture Architecture::image(std::size_t channels, std::size_t height, std::size_t width,
                                 std::vector<std::size_t> conv_channels, std::size_t kernel,
                                 std::vector<std::size_t> hidden, std::size_t num_classes) {
  Architecture a;
  a.input_shape = {channels, height, width};
  a.num_classes = num_classes;
  std::size_t prev = channels;
  for (auto c : conv_channels) {
    a.layers.push_back({LayerKind::conv, prev, c, kernel});
    prev = c;
  }
  prev *= height * width;
  hidden.push_back(num_classes);
  for (auto h : hidden) {
    a.layers.push_back({LayerKind::dense, prev, h, 0});
    prev = h;
  }
  a.validate();
  return a;
}

void Architecture::validate() const {
  if (input_shape.size() != 1 && input_shape.size() != 3) {
    throw ShapeError("architecture: input shape must be (d) or (C, H, W), got " + shape_str(input_shape));
  }
  if (layers.empty()) throw ShapeError("architecture: no layers");
  if (num_classes < 2) throw ShapeError("architecture: need at least two classes");
  std::size_t width = input_shape[0];
  bool spatial = input_shape.size() == 3;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& ls = layers[l];
    if (ls.in == 0 || ls.out == 0) throw ShapeError("architecture: zero-sized layer " + std::to_string(l));
    if (ls.kind == LayerKind::conv) {
      if (!spatial) throw ShapeError("architecture: conv layer " + std::to_string(l) + " after a dense layer");
      if (ls.kernel % 2 == 0) throw ShapeError("architecture: conv kernel must be odd");
    } else if (spatial) {
      width *= input_shape[1] * input_shape[2];
      spatial = false;
    }
    if (ls.in != width) {
      throw ShapeError("architecture: layer " + std::to_string(l) + " expects " + std::to_string(ls.in) +
                       " inputs, previous layer provides " + std::to_string(width));
    }
    width = ls.out;
  }
  if (spatial) throw ShapeError("architecture: image networks need a dense head");
  if (width != num_classes) throw ShapeError("architecture: last layer width differs from class count");
}

namespace {

Shape weight_shape(const LayerSpec& ls) {
  if (ls.kind == LayerKind::conv) return {ls.out, ls.in, ls.kernel, ls.kernel};
  return {ls.in, ls.out};
}

std::size_t weight_numel(const LayerSpec& ls) { return shape_numel(weight_shape(ls)); }

Shape spatial_of(const Architecture& a) { return {a.input_shape[1], a.input_shape[2]}; }

// Flattens a (rows, C, H, W) activation before the first dense layer.
Tensor flatten_if_needed(const Tensor& h, const LayerSpec& ls) {
  if (ls.kind == LayerKind::dense && h.ndim() != 2) return ad::reshape(h, {h.rows(), h.row_size()});
  return h;
}

Tensor broadcast_bias(const Tensor& bias_rows, std::size_t batch, const LayerSpec& ls, const Shape& spatial) {
  Tensor b = ad::repeat_rows(bias_rows, batch);
  if (ls.kind == LayerKind::conv) b = ad::expand_channels(b, spatial);
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// PlainNet

PlainNet PlainNet::init(const Architecture& arch, RngStream& rng) {
  arch.validate();
  PlainNet net;
  net.arch = arch;
  for (const auto& ls : arch.layers) {
    const double fan_in = static_cast<double>(ls.kind == LayerKind::conv ? ls.in * ls.kernel * ls.kernel : ls.in);
    const double sd = std::sqrt(2.0 / fan_in);
    std::vector<double> w(weight_numel(ls));
    for (auto& v : w) v = rng.normal(0.0, sd);
    net.weights.push_back(Tensor::from(weight_shape(ls), std::move(w), true));
    net.biases.push_back(Tensor::zeros({ls.out}, true));
  }
  return net;
}

Tensor PlainNet::forward(const Tensor& x) const {
  if (x.ndim() != arch.input_shape.size() + 1 ||
      !std::equal(arch.input_shape.begin(), arch.input_shape.end(), x.shape().begin() + 1)) {
    throw ShapeError("PlainNet::forward: input " + shape_str(x.shape()) + " does not match per-sample shape " +
                     shape_str(arch.input_shape));
  }
  const std::size_t batch = x.rows();
  Tensor h = x;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const auto& ls = arch.layers[l];
    h = flatten_if_needed(h, ls);
    Tensor y = ls.kind == LayerKind::conv ? ad::conv2d(h, weights[l]) : ad::matmul(h, weights[l]);
    y = ad::add(y, broadcast_bias(ad::reshape(biases[l], {1, ls.out}), batch, ls,
                                  arch.is_image() ? spatial_of(arch) : Shape{}));
    h = l + 1 < arch.layers.size() ? ad::relu(y) : y;
  }
  return h;
}

std::vector<Tensor> PlainNet::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  return out;
}

PlainNet PlainNet::clone() const {
  PlainNet c;
  c.arch = arch;
  for (const auto& w : weights) c.weights.push_back(w.clone());
  for (const auto& b : biases) c.biases.push_back(b.clone());
  return c;
}

// ---------------------------------------------------------------------------
// EnsembleNet

EnsembleNet::EnsembleNet(Architecture arch, std::size_t members, std::size_t rank, Head head,
                         std::vector<Layer> layers, std::uint64_t seed)
    : arch_(std::move(arch)), members_(members), rank_(rank), head_(head), layers_(std::move(layers)), seed_(seed) {
  arch_.validate();
  if (members_ == 0 || rank_ == 0) throw ShapeError("EnsembleNet: members and rank must be positive");
  if (layers_.size() != arch_.layers.size()) throw ShapeError("EnsembleNet: layer count differs from architecture");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& ls = arch_.layers[l];
    auto& L = layers_[l];
    L.spec = ls;
    const auto expect = [&](const Tensor& t, const Shape& s, const char* what) {
      if (!t.defined() || t.shape() != s) {
        throw ShapeError("EnsembleNet: layer " + std::to_string(l) + " " + what + " has shape " +
                         (t.defined() ? shape_str(t.shape()) : "undefined") + ", expected " + shape_str(s));
      }
      for (double v : t.data()) {
        if (!std::isfinite(v)) throw DomainError("EnsembleNet: non-finite parameter in layer " + std::to_string(l));
      }
    };
    expect(L.weight, weight_shape(ls), "weight");
    expect(L.r, {members_ * rank_, ls.in}, "r");
    expect(L.s, {members_ * rank_, ls.out}, "s");
    expect(L.bias, {members_, ls.out}, "bias");
  }
}

void EnsembleNet::check_input(const Tensor& x) const {
  if (x.ndim() != arch_.input_shape.size() + 1 ||
      !std::equal(arch_.input_shape.begin(), arch_.input_shape.end(), x.shape().begin() + 1)) {
    throw ShapeError("EnsembleNet: input " + shape_str(x.shape()) + " does not match per-sample shape " +
                     shape_str(arch_.input_shape));
  }
  if (x.rows() == 0) throw ShapeError("EnsembleNet: empty batch");
}

Tensor EnsembleNet::forward_members(std::size_t first, std::size_t count, const Tensor& x) const {
  check_input(x);
  const std::size_t batch = x.rows();
  const std::size_t p = rank_;
  const bool all = first == 0 && count == members_;
  const Shape spatial = arch_.is_image() ? spatial_of(arch_) : Shape{};

  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const auto& ls = L.spec;
    h = flatten_if_needed(h, ls);
    // Rows (member, rank, sample).
    Tensor hin = l == 0 ? ad::tile_rows(h, count * p) : ad::repeat_rows(h, p, batch);
    Tensor r = all ? L.r : ad::slice_rows(L.r, first * p, (first + count) * p);
    Tensor s = all ? L.s : ad::slice_rows(L.s, first * p, (first + count) * p);
    Tensor bias = all ? L.bias : ad::slice_rows(L.bias, first, first + count);
    Tensor rr = ad::repeat_rows(r, batch);
    Tensor ss = ad::repeat_rows(s, batch);
    Tensor y;
    if (ls.kind == LayerKind::conv) {
      rr = ad::expand_channels(rr, spatial);
      ss = ad::expand_channels(ss, spatial);
      y = ad::conv2d(ad::mul(hin, rr), L.weight);
    } else {
      y = ad::matmul(ad::mul(hin, rr), L.weight);
    }
    y = ad::sum_row_blocks(ad::mul(y, ss), batch, p);
    y = ad::add(y, broadcast_bias(bias, batch, ls, spatial));
    h = l + 1 < layers_.size() ? ad::relu(y) : y;
  }
  return h;
}

Tensor EnsembleNet::member_forward(std::size_t m, const Tensor& x) const {
  if (m >= members_) {
    throw ContractError("member_forward: member " + std::to_string(m) + " out of range for " +
                        std::to_string(members_) + " members");
  }
  return forward_members(m, 1, x);
}

Tensor EnsembleNet::grouped_forward(const Tensor& x) const { return forward_members(0, members_, x); }

MemberFactors EnsembleNet::member_factors(std::size_t m, std::size_t layer) const {
  if (m >= members_) throw ContractError("member_factors: member index out of range");
  const auto& L = layers_.at(layer);
  return {ad::slice_rows(L.r.detach(), m * rank_, (m + 1) * rank_),
          ad::slice_rows(L.s.detach(), m * rank_, (m + 1) * rank_),
          ad::reshape(ad::slice_rows(L.bias.detach(), m, m + 1), {L.spec.out})};
}

PlainNet EnsembleNet::materialize_member(std::size_t m) const {
  if (m >= members_) throw ContractError("materialize_member: member index out of range");
  PlainNet net;
  net.arch = arch_;
  for (const auto& L : layers_) {
    const auto& ls = L.spec;
    const auto r = L.r.data();
    const auto s = L.s.data();
    // F = sum_t r_t s_t^T, shape (in, out).
    std::vector<double> F(ls.in * ls.out, 0.0);
    for (std::size_t t = 0; t < rank_; ++t) {
      const std::size_t row = m * rank_ + t;
      for (std::size_t i = 0; i < ls.in; ++i)
        for (std::size_t j = 0; j < ls.out; ++j) F[i * ls.out + j] += r[row * ls.in + i] * s[row * ls.out + j];
    }
    std::vector<double> w(L.weight.data().begin(), L.weight.data().end());
    if (ls.kind == LayerKind::conv) {
      const std::size_t kk = ls.kernel * ls.kernel;
      for (std::size_t o = 0; o < ls.out; ++o)
        for (std::size_t c = 0; c < ls.in; ++c)
          for (std::size_t q = 0; q < kk; ++q) w[(o * ls.in + c) * kk + q] *= F[c * ls.out + o];
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= F[i];
    }
    net.weights.push_back(Tensor::from(weight_shape(ls), std::move(w)));
    const auto b = L.bias.data();
    net.biases.push_back(Tensor::from({ls.out}, std::vector<double>(b.begin() + m * ls.out, b.begin() + (m + 1) * ls.out)));
  }
  return net;
}

std::vector<Param> EnsembleNet::parameters() const {
  std::vector<Param> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto tag = std::to_string(l);
    out.push_back({"layer" + tag + ".weight", layers_[l].weight, ParamGroup::shared});
    out.push_back({"layer" + tag + ".r", layers_[l].r, ParamGroup::factor});
    out.push_back({"layer" + tag + ".s", layers_[l].s, ParamGroup::factor});
    out.push_back({"layer" + tag + ".bias", layers_[l].bias, ParamGroup::factor});
  }
  return out;
}

std::size_t EnsembleNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

std::size_t EnsembleNet::expected_parameter_count(const Architecture& arch, std::size_t members, std::size_t rank) {
  std::size_t n = 0;
  for (const auto& ls : arch.layers) {
    n += weight_numel(ls) + members * rank * (ls.in + ls.out) + members * ls.out;
  }
  return n;
}

EnsembleNet EnsembleNet::frozen() const {
  EnsembleNet c = *this;
  for (auto& L : c.layers_) {
    L.weight = L.weight.detach();
    L.r = L.r.detach();
    L.s = L.s.detach();
    L.bias = L.bias.detach();
  }
  return c;
}

EnsembleNet EnsembleNet::clone() const {
  EnsembleNet c = *this;
  for (auto& L : c.layers_) {
    L.weight = L.weight.clone();
    L.r = L.r.clone();
    L.s = L.s.clone();
    L.bias = L.bias.clone();
  }
  return c;
}

std::uint64_t EnsembleNet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : parameters()) {
    for (double v : p.tensor.data()) {
      h ^= std::bit_cast<std::uint64_t>(v);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

EnsembleNet init_from_pretrained(const PlainNet& baseline, std::size_t members, std::size_t rank, RngStream& rng,
                                 double init_scale) {
  baseline.arch.validate();
  if (baseline.weights.size() != baseline.arch.layers.size() || baseline.biases.size() != baseline.arch.layers.size()) {
    throw ShapeError("init_from_pretrained: baseline layer count differs from its architecture");
  }
  if (!(init_scale >= 0.0)) throw DomainError("init_from_pretrained: init_scale must be non-negative");
  std::vector<EnsembleNet::Layer> layers;
  for (std::size_t l = 0; l < baseline.arch.layers.size(); ++l) {
    const auto& ls = baseline.arch.layers[l];
    if (baseline.weights[l].shape() != weight_shape(ls) || baseline.biases[l].shape() != Shape{ls.out}) {
      throw ShapeError("init_from_pretrained: baseline layer " + std::to_string(l) + " shape mismatch");
    }
    EnsembleNet::Layer L;
    L.spec = ls;
    L.weight = Tensor::from(weight_shape(ls),
                            std::vector<double>(baseline.weights[l].data().begin(), baseline.weights[l].data().end()),
                            true);
    std::vector<double> r(members * rank * ls.in), s(members * rank * ls.out), b;
    for (auto& v : r) v = init_scale > 0.0 ? 1.0 + rng.normal(0.0, init_scale) : 1.0;
    for (auto& v : s) v = init_scale > 0.0 ? 1.0 + rng.normal(0.0, init_scale) : 1.0;
    for (std::size_t m = 0; m < members; ++m)
      b.insert(b.end(), baseline.biases[l].data().begin(), baseline.biases[l].data().end());
    L.r = Tensor::from({members * rank, ls.in}, std::move(r), true);
    L.s = Tensor::from({members * rank, ls.out}, std::move(s), true);
    L.bias = Tensor::from({members, ls.out}, std::move(b), true);
    layers.push_back(std::move(L));
  }
  return EnsembleNet(baseline.arch, members, rank, Head::evidential, std::move(layers), rng.seed());
}

EnsembleNet as_single_member(const PlainNet& net, Head head) {
  RngStream unused(0);
  EnsembleNet e = init_from_pretrained(net, 1, 1, unused, 0.0);
  e.set_head(head);
  return e;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr int kCheckpointVersion = 1;

json tensor_json(const Tensor& t) { return json(std::vector<double>(t.data().begin(), t.data().end())); }

Tensor tensor_from_json(const json& j, const Shape& shape) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != shape_numel(shape)) {
    throw FormatError("checkpoint: tensor needs " + std::to_string(shape_numel(shape)) + " values, found " +
                      std::to_string(v.size()));
  }
  return Tensor::from(shape, std::move(v), true);
}

const char* kind_name(LayerKind k) { return k == LayerKind::conv ? "conv" : "dense"; }

}  // namespace

std::string checkpoint_to_string(const EnsembleNet& net) {
  json j;
  j["format"] = "udes-checkpoint";
  j["version"] = kCheckpointVersion;
  j["seed"] = net.seed();
  j["head"] = net.head() == Head::softmax ? "softmax" : "evidential";
  j["members"] = net.members();
  j["rank"] = net.rank();
  json arch;
  arch["input_shape"] = net.arch().input_shape;
  arch["num_classes"] = net.arch().num_classes;
  for (const auto& ls : net.arch().layers) {
    arch["layers"].push_back({{"kind", kind_name(ls.kind)}, {"in", ls.in}, {"out", ls.out}, {"kernel", ls.kernel}});
  }
  j["architecture"] = arch;
  for (const auto& L : net.layers()) {
    j["layers"].push_back({{"weight", tensor_json(L.weight)},
                           {"r", tensor_json(L.r)},
                           {"s", tensor_json(L.s)},
                           {"bias", tensor_json(L.bias)}});
  }
  return j.dump();
}

EnsembleNet checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "udes-checkpoint") throw FormatError("checkpoint: unknown format tag");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version " + j.at("version").dump());
    }
    Architecture arch;
    arch.input_shape = j.at("architecture").at("input_shape").get<Shape>();
    arch.num_classes = j.at("architecture").at("num_classes").get<std::size_t>();
    for (const auto& lj : j.at("architecture").at("layers")) {
      LayerSpec ls;
      const auto kind = lj.at("kind").get<std::string>();
      if (kind != "dense" && kind != "conv") throw FormatError("checkpoint: unknown layer kind " + kind);
      ls.kind = kind == "conv" ? LayerKind::conv : LayerKind::dense;
      ls.in = lj.at("in").get<std::size_t>();
      ls.out = lj.at("out").get<std::size_t>();
      ls.kernel = lj.at("kernel").get<std::size_t>();
      arch.layers.push_back(ls);
    }
    arch.validate();
    const auto members = j.at("members").get<std::size_t>();
    const auto rank = j.at("rank").get<std::size_t>();
    const auto& lays = j.at("layers");
    if (lays.size() != arch.layers.size()) throw FormatError("checkpoint: layer count mismatch");
    std::vector<EnsembleNet::Layer> layers;
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const auto& ls = arch.layers[l];
      EnsembleNet::Layer L;
      L.spec = ls;
      L.weight = tensor_from_json(lays[l].at("weight"), weight_shape(ls));
      L.r = tensor_from_json(lays[l].at("r"), {members * rank, ls.in});
      L.s = tensor_from_json(lays[l].at("s"), {members * rank, ls.out});
      L.bias = tensor_from_json(lays[l].at("bias"), {members, ls.out});
      layers.push_back(std::move(L));
    }
    const auto head = j.at("head").get<std::string>() == "softmax" ? Head::softmax : Head::evidential;
    return EnsembleNet(std::move(arch), members, rank, head, std::move(layers), j.at("seed").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const EnsembleNet& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os << checkpoint_to_string(net);
  if (!os) throw FormatError("failed writing checkpoint: " + path);
}

EnsembleNet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace udes
