#include "crfill/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace crfill {

namespace {

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

template <typename T>
void require_mask_for(const Var<T>& image, const Tensor<T>& mask, const char* what) {
  const Tensor<T>& v = image.value();
  if (v.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != v.dim(0) || mask.dim(2) != v.dim(2) ||
      mask.dim(3) != v.dim(3)) {
    throw DimensionError(std::string(what) + ": image " + to_string(v.shape()) + " and mask " +
                         to_string(mask.shape()) + " disagree");
  }
}

template <typename T>
Tensor<T> known_of(const Tensor<T>& mask) {
  Tensor<T> k = mask;
  for (auto& v : k.storage()) v = T(1) - v;
  return k;
}

template <typename T>
Tensor<T> pad_tensor(const Tensor<T>& t, int h, int w) {
  if (t.dim(2) == h && t.dim(3) == w) return t;
  NoGradGuard guard;
  return pad_to(Var<T>(t), h, w).value();
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

template <typename T>
Var<T> with_mask_channel(const Var<T>& image, const Tensor<T>& mask) {
  require_mask_for(image, mask, "with_mask_channel");
  return concat_channels<T>({image, Var<T>(mask)});
}

// ---- layers ---------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride, int dilation, Initializer& init)
    : weight(Var<T>::parameter(init.normal<T>({out_channels, in_channels, kernel, kernel},
                                              he_std(in_channels * kernel * kernel)))),
      bias(Var<T>::parameter(Tensor<T>({out_channels}))),
      options{stride, dilation * (kernel - 1) / 2, dilation} {}

template <typename T>
void Conv2d<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  visit(prefix + ".weight", weight);
  visit(prefix + ".bias", bias);
}

template <typename T>
GatedConv2d<T>::GatedConv2d(int in_channels, int out_channels, int kernel, int stride, int dilation, Activation act,
                            Initializer& init)
    : conv_(in_channels, 2 * out_channels, kernel, stride, dilation, init), activation_(act) {}

template <typename T>
SNConv2d<T>::SNConv2d(int in_channels, int out_channels, int kernel, int stride, Initializer& init)
    : weight_(Var<T>::parameter(init.normal<T>({out_channels, in_channels, kernel, kernel},
                                               he_std(in_channels * kernel * kernel)))),
      bias_(Var<T>::parameter(Tensor<T>({out_channels}))),
      options_{stride, (kernel - 1) / 2, 1},
      sigma_({1}, T(1)) {
  Tensor<T> u = init.normal<T>({out_channels}, 1.0);
  T norm = 0;
  for (T v : u.values()) norm += v * v;
  norm = std::sqrt(norm);
  for (auto& v : u.storage()) v /= norm;
  state_.u = std::move(u);
}

template <typename T>
Var<T> SNConv2d<T>::operator()(const Var<T>& x, bool update_estimate) {
  Var<T> w = spectral_normalize(weight_, state_, update_estimate);
  sigma_[0] = state_.sigma;
  return conv2d(x, w, bias_, options_);
}

template <typename T>
void SNConv2d<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  visit(prefix + ".weight", weight_);
  visit(prefix + ".bias", bias_);
}

template <typename T>
void SNConv2d<T>::visit_buffers(const std::string& prefix, const BufferVisitor<T>& visit) {
  if (state_.v.empty()) {
    // v is derived from u on the first forward; materialise it so archives always carry it.
    NoGradGuard guard;
    spectral_normalize(weight_, state_, false);
  }
  visit(prefix + ".sn_u", state_.u);
  visit(prefix + ".sn_v", state_.v);
  sigma_[0] = state_.sigma;
  visit(prefix + ".sn_sigma", sigma_);
  state_.sigma = sigma_[0];
}

// ---- generator ------------------------------------------------------------

template <typename T>
InpaintBranch<T>::InpaintBranch(int in_channels, const GeneratorConfig& config, bool attention, Initializer& init)
    : config_(config), attention_(attention) {
  const int c = config.base_width;
  if (c < 2 || config.depth < 1) throw std::invalid_argument("generator: base width >= 2 and depth >= 1 required");
  encoder_.emplace_back(in_channels, c, 5, 1, 1, Activation::kElu, init);
  int width = c;
  for (int d = 0; d < config.depth; ++d) {
    encoder_.emplace_back(width, 2 * width, 3, 2, 1, Activation::kElu, init);
    encoder_.emplace_back(2 * width, 2 * width, 3, 1, 1, Activation::kElu, init);
    width *= 2;
  }
  for (int rate : config.dilations) bottleneck_.emplace_back(width, width, 3, 1, rate, Activation::kElu, init);
  bottleneck_.emplace_back(width, width, 3, 1, 1, Activation::kElu, init);
  if (attention_) attention_merge_ = GatedConv2d<T>(2 * width, width, 3, 1, 1, Activation::kElu, init);
  for (int d = 0; d < config.depth; ++d) {
    decoder_.emplace_back(width, width / 2, 3, 1, 1, Activation::kElu, init);
    decoder_.emplace_back(width / 2, width / 2, 3, 1, 1, Activation::kElu, init);
    width /= 2;
  }
  head_ = GatedConv2d<T>(width, width / 2, 3, 1, 1, Activation::kElu, init);
  out_ = Conv2d<T>(width / 2, 3, 3, 1, 1, init);
}

template <typename T>
Var<T> InpaintBranch<T>::bottleneck(const Var<T>& x) const {
  Var<T> h = x;
  for (const auto& layer : encoder_) h = layer(h);
  for (const auto& layer : bottleneck_) h = layer(h);
  return h;
}

template <typename T>
Var<T> InpaintBranch<T>::operator()(const Var<T>& x, const Tensor<T>& mask) const {
  Var<T> h = bottleneck(x);
  if (attention_) {
    Var<T> attended = contextual_attention(h, mask, static_cast<T>(config_.alpha), config_.patch, config_.stride);
    h = attention_merge_(concat_channels<T>({h, attended}));
  }
  for (std::size_t i = 0; i < decoder_.size(); i += 2) {
    h = decoder_[i](upsample_nearest2x(h));
    h = decoder_[i + 1](h);
  }
  return activate(out_(head_(h)), Activation::kTanh);
}

template <typename T>
void InpaintBranch<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].visit_parameters(prefix + ".enc" + std::to_string(i), visit);
  for (std::size_t i = 0; i < bottleneck_.size(); ++i) {
    bottleneck_[i].visit_parameters(prefix + ".mid" + std::to_string(i), visit);
  }
  if (attention_) attention_merge_.visit_parameters(prefix + ".attn_merge", visit);
  for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].visit_parameters(prefix + ".dec" + std::to_string(i), visit);
  head_.visit_parameters(prefix + ".head", visit);
  out_.visit_parameters(prefix + ".out", visit);
}

template <typename T>
Var<T> compose(const Var<T>& y, const Var<T>& u, const Tensor<T>& mask) {
  require_mask_for(y, mask, "compose");
  if (y.shape() != u.shape()) {
    throw DimensionError("compose: Y " + to_string(y.shape()) + " and U " + to_string(u.shape()) + " disagree");
  }
  for (T v : mask.values()) {
    if (v != T(0) && v != T(1)) throw std::invalid_argument("compose: mask is not binary");
  }
  return add(mul_const(y, mask), u);
}

template <typename T>
Generator<T>::Generator(const GeneratorConfig& config, std::uint64_t seed) : config_(config) {
  Initializer init(seed);
  coarse_ = InpaintBranch<T>(4, config, false, init);
  refine_ = InpaintBranch<T>(4, config, config.contextual_attention, init);
}

template <typename T>
Var<T> Generator<T>::coarse_forward(const Var<T>& u, const Tensor<T>& mask) const {
  require_mask_for(u, mask, "coarse_forward");
  if (u.dim(1) != 3) throw DimensionError("coarse_forward: expected 3 channels, got " + to_string(u.shape()));
  const int h = u.dim(2), w = u.dim(3), ph = round_up(h, size_multiple()), pw = round_up(w, size_multiple());
  const Tensor<T> m = pad_tensor(mask, ph, pw);
  Var<T> out = coarse_(with_mask_channel(pad_to(u, ph, pw), m), m);
  return crop(out, 0, 0, h, w);
}

template <typename T>
Var<T> Generator<T>::refine_forward(const Var<T>& coarse, const Var<T>& u, const Tensor<T>& mask) const {
  require_mask_for(u, mask, "refine_forward");
  if (coarse.shape() != u.shape()) throw DimensionError("refine_forward: coarse output and U disagree");
  const int h = u.dim(2), w = u.dim(3), ph = round_up(h, size_multiple()), pw = round_up(w, size_multiple());
  const Tensor<T> m = pad_tensor(mask, ph, pw);
  Var<T> pasted = pad_to(compose(coarse, u, mask), ph, pw);
  Var<T> out = refine_(with_mask_channel(pasted, m), m);
  return crop(out, 0, 0, h, w);
}

template <typename T>
GeneratorOutput<T> Generator<T>::forward(const Var<T>& u, const Tensor<T>& mask, bool detach_coarse) const {
  GeneratorOutput<T> out;
  out.coarse = coarse_forward(u, mask);
  out.refined = refine_forward(detach_coarse ? detach(out.coarse) : out.coarse, u, mask);
  return out;
}

template <typename T>
Tensor<T> Generator<T>::inpaint(const Tensor<T>& u, const Tensor<T>& mask) const {
  NoGradGuard guard;
  Var<T> uv(u);
  return compose(forward(uv, mask).refined, uv, mask).value();
}

template <typename T>
Tensor<T> Generator<T>::highres_inpaint(const Tensor<T>& u, const Tensor<T>& mask) const {
  if (u.rank() != 4 || u.dim(2) % 4 != 0 || u.dim(3) % 4 != 0) {
    throw DimensionError("highres_inpaint: side lengths must be divisible by 4, got " + to_string(u.shape()));
  }
  NoGradGuard guard;
  const int h = u.dim(2), w = u.dim(3);
  Var<T> uv(u);
  const Tensor<T> half_mask = downsample_mask(mask, 2);
  // Cells touching the hole are masked at half scale, so zero out their mixed-in values too.
  Var<T> half_u = mul_const(resize_bilinear(uv, h / 2, w / 2), known_of(half_mask));
  Var<T> coarse = resize_bilinear(coarse_forward(half_u, half_mask), h, w);
  return compose(refine_forward(coarse, uv, mask), uv, mask).value();
}

template <typename T>
SimilarityMap<T> Generator<T>::attention_similarity(const Tensor<T>& u, const Tensor<T>& mask) const {
  if (!config_.contextual_attention) throw std::logic_error("attention_similarity: generator has no attention layer");
  const int scale = size_multiple();
  if (u.dim(2) % scale != 0 || u.dim(3) % scale != 0) {
    throw DimensionError("attention_similarity: sides must be divisible by " + std::to_string(scale));
  }
  NoGradGuard guard;
  Var<T> uv(u);
  Var<T> coarse = coarse_forward(uv, mask);
  Var<T> features = refine_.bottleneck(with_mask_channel(compose(coarse, uv, mask), mask));
  SimilarityMap<T> sim = cosine_similarity(extract_patches(features, config_.patch, config_.stride));
  sim.known = known_sets(mask, config_.patch, config_.stride, scale);
  return sim;
}

template <typename T>
void Generator<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  coarse_.visit_parameters(prefix + "coarse", visit);
  refine_.visit_parameters(prefix + "refine", visit);
}

// ---- discriminator ----------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed) {
  if (config.layers < 1 || config.base_width < 1) throw std::invalid_argument("discriminator: bad config");
  Initializer init(seed);
  int in = 3;
  for (int i = 0; i < config.layers; ++i) {
    const int out = config.base_width * (1 << std::min(i, 2));
    layers_.emplace_back(in, out, 5, 2, init);
    in = out;
  }
  layers_.emplace_back(in, 1, 3, 1, init);
}

template <typename T>
Var<T> Discriminator<T>::forward(const Var<T>& image, bool update_estimate) {
  if (image.value().rank() != 4 || image.dim(1) != 3) {
    throw DimensionError("discriminate: expected (N,3,H,W), got " + to_string(image.shape()));
  }
  Var<T> h = image;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    h = activate(layers_[i](h, update_estimate), Activation::kLeakyRelu, T(0.2));
  }
  return layers_.back()(h, update_estimate);
}

template <typename T>
void Discriminator<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit_parameters(prefix + "disc" + std::to_string(i), visit);
}

template <typename T>
void Discriminator<T>::visit_buffers(const std::string& prefix, const BufferVisitor<T>& visit) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit_buffers(prefix + "disc" + std::to_string(i), visit);
}

// ---- CR branch --------------------------------------------------------------

template <typename T>
SimilarityEncoder<T>::SimilarityEncoder(int base_width, std::uint64_t seed) {
  Initializer init(seed);
  const int c = base_width;
  layers_.emplace_back(4, c, 5, 1, 1, init);
  layers_.emplace_back(c, 2 * c, 3, 2, 1, init);
  layers_.emplace_back(2 * c, 2 * c, 3, 1, 1, init);
  layers_.emplace_back(2 * c, 4 * c, 3, 2, 1, init);
  layers_.emplace_back(4 * c, 4 * c, 3, 1, 1, init);
}

template <typename T>
Var<T> SimilarityEncoder<T>::forward(const Var<T>& composite, const Tensor<T>& mask) const {
  if (composite.value().rank() != 4 || composite.dim(2) % kContextScale != 0 ||
      composite.dim(3) % kContextScale != 0) {
    throw DimensionError("similarity_encode: sides must be divisible by 4, got " + to_string(composite.shape()));
  }
  Var<T> h = with_mask_channel(composite, mask);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = activate(h, Activation::kElu);
  }
  return h;
}

template <typename T>
void SimilarityEncoder<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit_parameters(prefix + "sim" + std::to_string(i), visit);
}

template <typename T>
AuxiliaryNet<T>::AuxiliaryNet(int base_width, std::uint64_t seed) {
  Initializer init(seed);
  const int c = base_width;
  enc_full_ = Conv2d<T>(4, c, 5, 1, 1, init);
  enc_half_ = Conv2d<T>(c, 2 * c, 3, 2, 1, init);
  enc_quarter_ = Conv2d<T>(2 * c, 4 * c, 3, 2, 1, init);
  enc_bottleneck_ = Conv2d<T>(4 * c, 4 * c, 3, 1, 1, init);
  dec_bottleneck_ = Conv2d<T>(4 * c, 4 * c, 3, 1, 1, init);
  dec_half_ = Conv2d<T>(6 * c, 2 * c, 3, 1, 1, init);
  dec_full_ = Conv2d<T>(3 * c, c, 3, 1, 1, init);
  dec_out_ = Conv2d<T>(c, 3, 3, 1, 1, init);
}

template <typename T>
typename AuxiliaryNet<T>::Features AuxiliaryNet<T>::run_encoder(const Var<T>& u, const Tensor<T>& mask) const {
  require_mask_for(u, mask, "auxiliary_reconstruct");
  if (u.dim(2) % kContextScale != 0 || u.dim(3) % kContextScale != 0) {
    throw DimensionError("auxiliary_reconstruct: sides must be divisible by 4, got " + to_string(u.shape()));
  }
  Features f;
  f.skip_full = activate(enc_full_(with_mask_channel(u, mask)), Activation::kElu);
  f.skip_half = activate(enc_half_(f.skip_full), Activation::kElu);
  f.bottleneck = activate(enc_bottleneck_(activate(enc_quarter_(f.skip_half), Activation::kElu)), Activation::kElu);
  return f;
}

template <typename T>
Var<T> AuxiliaryNet<T>::encode(const Var<T>& u, const Tensor<T>& mask) const {
  return run_encoder(u, mask).bottleneck;
}

template <typename T>
Var<T> AuxiliaryNet<T>::reconstruct(const Var<T>& u, const Tensor<T>& mask, const SimilarityMap<T>& sim, T alpha,
                                    int patch, int stride) const {
  Features f = run_encoder(u, mask);
  Var<T> replaced = soft_replace(extract_patches(f.bottleneck, patch, stride), sim, alpha);
  Var<T> h = activate(dec_bottleneck_(replaced), Activation::kElu);
  // Skips carry known-region features only, so the hole must be filled through the replacement.
  const Tensor<T> known_half = known_of(downsample_mask(mask, 2));
  h = concat_channels<T>({upsample_nearest2x(h), mul_const(f.skip_half, known_half)});
  h = activate(dec_half_(h), Activation::kElu);
  h = concat_channels<T>({upsample_nearest2x(h), mul_const(f.skip_full, known_of(mask))});
  h = activate(dec_full_(h), Activation::kElu);
  return activate(dec_out_(h), Activation::kTanh);
}

template <typename T>
void AuxiliaryNet<T>::visit_parameters(const std::string& prefix, const ParamVisitor<T>& visit) {
  enc_full_.visit_parameters(prefix + "aux.enc_full", visit);
  enc_half_.visit_parameters(prefix + "aux.enc_half", visit);
  enc_quarter_.visit_parameters(prefix + "aux.enc_quarter", visit);
  enc_bottleneck_.visit_parameters(prefix + "aux.enc_bottleneck", visit);
  dec_bottleneck_.visit_parameters(prefix + "aux.dec_bottleneck", visit);
  dec_half_.visit_parameters(prefix + "aux.dec_half", visit);
  dec_full_.visit_parameters(prefix + "aux.dec_full", visit);
  dec_out_.visit_parameters(prefix + "aux.dec_out", visit);
}

#define CRFILL_INSTANTIATE_NETS(T)                                                   \
  template class Conv2d<T>;                                                          \
  template class GatedConv2d<T>;                                                     \
  template class SNConv2d<T>;                                                        \
  template class InpaintBranch<T>;                                                   \
  template class Generator<T>;                                                       \
  template class Discriminator<T>;                                                   \
  template class SimilarityEncoder<T>;                                               \
  template class AuxiliaryNet<T>;                                                    \
  template Var<T> compose(const Var<T>&, const Var<T>&, const Tensor<T>&);           \
  template Var<T> with_mask_channel(const Var<T>&, const Tensor<T>&);

CRFILL_INSTANTIATE_NETS(float)
CRFILL_INSTANTIATE_NETS(double)

}  // namespace crfill
