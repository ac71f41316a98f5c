#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crfill/ops.hpp"
#include "crfill/patchops.hpp"

namespace crfill {

template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Var<T>& param)>;
template <typename T>
using BufferVisitor = std::function<void(const std::string& name, Tensor<T>& buffer)>;

/// Weight initialisation source. Values are drawn in double so float and double nets built
/// from the same seed hold the same numbers up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  template <typename T>
  Tensor<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

/// Plain convolution with "same" padding for odd kernels.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int dilation, Initializer& init);

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, options); }
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);
  int out_channels() const { return weight.dim(0); }

  Var<T> weight;
  Var<T> bias;
  ConvOptions options;
};

/// activation(feature_conv(x)) * sigmoid(gate_conv(x)); both branches live in one 2*out convolution,
/// feature filters first.
template <typename T>
class GatedConv2d {
 public:
  GatedConv2d() = default;
  GatedConv2d(int in_channels, int out_channels, int kernel, int stride, int dilation, Activation act,
              Initializer& init);

  Var<T> operator()(const Var<T>& x) const { return gated_activation(conv_(x), activation_); }
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
    conv_.visit_parameters(prefix, visit);
  }
  int out_channels() const { return conv_.out_channels() / 2; }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
  Activation activation_ = Activation::kElu;
};

/// Convolution whose weight is divided by its spectral-norm estimate on every forward.
template <typename T>
class SNConv2d {
 public:
  SNConv2d() = default;
  SNConv2d(int in_channels, int out_channels, int kernel, int stride, Initializer& init);

  Var<T> operator()(const Var<T>& x, bool update_estimate);
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);
  void visit_buffers(const std::string& prefix, const BufferVisitor<T>& visit);
  const SpectralState<T>& spectral_state() const { return state_; }
  const Var<T>& weight() const { return weight_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
  ConvOptions options_;
  SpectralState<T> state_;
  Tensor<T> sigma_;  // (1), mirrors state_.sigma for checkpointing
};

struct GeneratorConfig {
  int base_width = 48;
  int depth = 2;  // stride-2 stages in each encoder
  std::vector<int> dilations{2, 4, 8, 16};
  bool contextual_attention = false;  // CA layer in the refinement bottleneck (baseline only)
  int patch = 3;
  int stride = 1;
  double alpha = 10.0;

  static GeneratorConfig toy() {
    GeneratorConfig c;
    c.base_width = 16;
    c.dilations = {2, 4, 8};
    return c;
  }
  static GeneratorConfig paper_scale() { return GeneratorConfig{}; }
};

/// Gated encoder / dilated bottleneck / decoder shared by the coarse and refinement stages.
template <typename T>
class InpaintBranch {
 public:
  InpaintBranch() = default;
  InpaintBranch(int in_channels, const GeneratorConfig& config, bool attention, Initializer& init);

  /// `mask` is only consulted by the attention layer.
  Var<T> operator()(const Var<T>& x, const Tensor<T>& mask) const;
  /// Bottleneck features and the attention similarity, for the jigsaw protocol.
  Var<T> bottleneck(const Var<T>& x) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);

 private:
  GeneratorConfig config_;
  bool attention_ = false;
  std::vector<GatedConv2d<T>> encoder_;
  std::vector<GatedConv2d<T>> bottleneck_;
  GatedConv2d<T> attention_merge_;
  std::vector<GatedConv2d<T>> decoder_;  // pairs after each upsampling
  GatedConv2d<T> head_;
  Conv2d<T> out_;
};

/// Y (x) M + U. Throws if M is not binary.
template <typename T>
Var<T> compose(const Var<T>& y, const Var<T>& u, const Tensor<T>& mask);

template <typename T>
struct GeneratorOutput {
  Var<T> coarse;
  Var<T> refined;
};

/// Attention-free coarse-to-fine generator (optionally with a CA layer for the baseline).
template <typename T>
class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& config, std::uint64_t seed);

  Var<T> coarse_forward(const Var<T>& u, const Tensor<T>& mask) const;
  /// Refines a coarse prediction; the coarse output is pasted into the hole of U first.
  Var<T> refine_forward(const Var<T>& coarse, const Var<T>& u, const Tensor<T>& mask) const;
  /// With `detach_coarse` the refinement losses do not reach the coarse stage.
  GeneratorOutput<T> forward(const Var<T>& u, const Tensor<T>& mask, bool detach_coarse = false) const;
  /// Composited result with no graph recorded.
  Tensor<T> inpaint(const Tensor<T>& u, const Tensor<T>& mask) const;
  /// Coarse stage at half resolution, bilinearly upsampled, refined at full resolution.
  Tensor<T> highres_inpaint(const Tensor<T>& u, const Tensor<T>& mask) const;
  /// Similarity used by the refinement CA layer (requires contextual_attention).
  SimilarityMap<T> attention_similarity(const Tensor<T>& u, const Tensor<T>& mask) const;

  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);
  const GeneratorConfig& config() const { return config_; }
  int size_multiple() const { return 1 << config_.depth; }

 private:
  GeneratorConfig config_;
  InpaintBranch<T> coarse_;
  InpaintBranch<T> refine_;
};

struct DiscriminatorConfig {
  int base_width = 64;
  int layers = 6;  // stride-2 5x5 layers
  static DiscriminatorConfig toy() { return {16, 4}; }
};

/// Spectrally normalised PatchGAN; emits a (N,1,h',w') score map.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

  /// `update_estimate` advances each layer's power iteration by one step (training forward of D).
  Var<T> forward(const Var<T>& image, bool update_estimate);
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);
  void visit_buffers(const std::string& prefix, const BufferVisitor<T>& visit);
  std::vector<SNConv2d<T>>& layers() { return layers_; }

 private:
  std::vector<SNConv2d<T>> layers_;
};

/// Feature scale of the similarity and auxiliary bottleneck grids.
inline constexpr int kContextScale = 4;

/// Maps (composite, mask) to features at 1/4 resolution whose patch cosines drive patch borrowing.
template <typename T>
class SimilarityEncoder {
 public:
  SimilarityEncoder() = default;
  SimilarityEncoder(int base_width, std::uint64_t seed);

  Var<T> forward(const Var<T>& composite, const Tensor<T>& mask) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);

 private:
  std::vector<Conv2d<T>> layers_;
};

/// Encoder-decoder that rebuilds the image from known feature patches only.
template <typename T>
class AuxiliaryNet {
 public:
  AuxiliaryNet() = default;
  AuxiliaryNet(int base_width, std::uint64_t seed);

  /// Bottleneck features F(U) at 1/4 resolution.
  Var<T> encode(const Var<T>& u, const Tensor<T>& mask) const;
  /// Aux(U): patch replacement with `sim` at the bottleneck, then decoding with known-only skips.
  Var<T> reconstruct(const Var<T>& u, const Tensor<T>& mask, const SimilarityMap<T>& sim, T alpha, int patch,
                     int stride) const;
  void visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit);

 private:
  struct Features {
    Var<T> skip_full;
    Var<T> skip_half;
    Var<T> bottleneck;
  };
  Features run_encoder(const Var<T>& u, const Tensor<T>& mask) const;

  Conv2d<T> enc_full_, enc_half_, enc_quarter_, enc_bottleneck_;
  Conv2d<T> dec_bottleneck_, dec_half_, dec_full_, dec_out_;
};

/// All trainable parameters of a network, in visiting order.
template <typename T, typename Net>
std::vector<Var<T>> parameters_of(Net& net) {
  std::vector<Var<T>> out;
  net.visit_parameters("", [&out](const std::string&, Var<T>& p) { out.push_back(p); });
  return out;
}

/// Input tensor (N, 4, H, W) = concat(image, mask).
template <typename T>
Var<T> with_mask_channel(const Var<T>& image, const Tensor<T>& mask);

}  // namespace crfill
