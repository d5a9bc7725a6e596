#include "robomamba/vision.hpp"

#include <cmath>

#include "robomamba/binio.hpp"

namespace robomamba {

namespace {
constexpr std::string_view kImageMagic = "RMIM";
constexpr std::uint32_t kImageVersion = 1;
}  // namespace

void Image::validate() const {
  if (width == 0 || height == 0) throw DataError("image has zero extent");
  if (rgb.size() != width * height * 3) {
    throw DataError("image rgb buffer has " + std::to_string(rgb.size()) + " values, expected " +
                    std::to_string(width * height * 3));
  }
  if (!depth.empty() && depth.size() != width * height) {
    throw DataError("image depth buffer has " + std::to_string(depth.size()) +
                    " values, expected " + std::to_string(width * height));
  }
  for (float d : depth) {
    if (!(d >= 0.0f) || !std::isfinite(d)) throw DataError("image depth must be finite and >= 0");
  }
}

std::vector<unsigned char> encode_rmim(const Image& image) {
  image.validate();
  const std::uint8_t channels = image.has_depth() ? 4 : 3;
  binio::Writer w;
  w.raw(kImageMagic);
  w.u32(kImageVersion);
  w.u32(static_cast<std::uint32_t>(image.width));
  w.u32(static_cast<std::uint32_t>(image.height));
  w.u8(channels);
  for (std::size_t i = 0; i < image.width * image.height; ++i) {
    for (std::size_t c = 0; c < 3; ++c) w.f32(image.rgb[i * 3 + c]);
    if (channels == 4) w.f32(image.depth[i]);
  }
  return w.take();
}

Image decode_rmim(std::span<const unsigned char> bytes) {
  binio::Reader r(bytes);
  std::string magic;
  if (!r.raw(4, magic) || magic != kImageMagic) throw DataError("RMIM: bad magic");
  std::uint32_t version = 0, w = 0, h = 0;
  std::uint8_t channels = 0;
  if (!r.u32(version) || !r.u32(w) || !r.u32(h) || !r.u8(channels)) {
    throw DataError("RMIM: truncated header");
  }
  if (version != kImageVersion) throw DataError("RMIM: unsupported version " + std::to_string(version));
  if (channels != 3 && channels != 4) {
    throw DataError("RMIM: channels must be 3 or 4, got " + std::to_string(channels));
  }
  const std::uint64_t values = std::uint64_t(w) * h * channels;
  if (r.remaining() != values * 4) {
    throw DataError("RMIM: payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                    std::to_string(values * 4));
  }
  Image image(w, h, channels == 4);
  for (std::size_t i = 0; i < std::size_t(w) * h; ++i) {
    for (std::size_t c = 0; c < 3; ++c) r.f32(image.rgb[i * 3 + c]);
    if (channels == 4) r.f32(image.depth[i]);
  }
  image.validate();
  return image;
}

void write_rmim(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_rmim(image);
  binio::write_file_atomic(path, bytes);
}

Image read_rmim(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  try {
    return decode_rmim(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void VisionConfig::validate() const {
  if (patch == 0 || image_size == 0 || image_size % patch != 0) {
    throw ShapeError("vision config: image size " + std::to_string(image_size) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
  if (d_vis == 0) throw ShapeError("vision config: d_vis must be positive");
  if (!(pixel_std > 0) || !std::isfinite(pixel_mean)) {
    throw DataError("vision config: pixel_std must be positive and pixel_mean finite");
  }
  if (!(position_std >= 0) || !std::isfinite(position_std)) {
    throw DataError("vision config: position_std must be finite and non-negative");
  }
}

template <typename T>
Tensor<T> extract_patches(const Image& image, std::size_t p) {
  image.validate();
  if (p == 0 || image.width % p != 0 || image.height % p != 0) {
    throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " is not divisible by patch size " + std::to_string(p));
  }
  const auto gx = image.width / p;
  const auto gy = image.height / p;
  const auto dim = p * p * 3;
  std::vector<T> out(gx * gy * dim);
  for (std::size_t py = 0; py < gy; ++py) {
    for (std::size_t px = 0; px < gx; ++px) {
      T* dst = out.data() + (py * gx + px) * dim;
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          const float* src = image.rgb.data() + ((py * p + y) * image.width + px * p + x) * 3;
          for (std::size_t c = 0; c < 3; ++c) *dst++ = static_cast<T>(src[c]);
        }
      }
    }
  }
  return Tensor<T>(Shape{gx * gy, dim}, std::move(out));
}

template <typename T>
PatchEncoder<T>::PatchEncoder(const VisionConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  weight = nn::uniform_param<T>(rng, Shape{config_.patch_dim(), config_.d_vis},
                                1.0 / std::sqrt(double(config_.patch_dim())));
  bias = nn::filled_param<T>(Shape{config_.d_vis}, T(0));
  position = nn::normal_param<T>(rng, Shape{config_.tokens(), config_.d_vis}, config_.position_std);
}

template <typename T>
Tensor<T> PatchEncoder<T>::encode(const Image& image) const {
  if (image.width != config_.image_size || image.height != config_.image_size) {
    throw ShapeError("encoder expects " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + " images, got " +
                     std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  auto patches = extract_patches<T>(image, config_.patch);
  std::vector<T> values(patches.data().begin(), patches.data().end());
  const T mean = T(config_.pixel_mean), inv = T(1.0 / config_.pixel_std);
  for (auto& v : values) v = (v - mean) * inv;
  const Tensor<T> normalized(patches.shape(), std::move(values));
  return add(add(matmul(normalized, weight), bias), position);
}

template <typename T>
ParamList<T> PatchEncoder<T>::parameters() const {
  return {{"encoder.weight", ParamGroup::encoder, weight},
          {"encoder.bias", ParamGroup::encoder, bias},
          {"encoder.position", ParamGroup::encoder, position}};
}

template <typename T>
std::size_t PatchEncoder<T>::parameter_count(const VisionConfig& c) {
  return c.patch_dim() * c.d_vis + c.d_vis + c.tokens() * c.d_vis;
}

template <typename T>
Projector<T>::Projector(std::size_t d_vis, std::size_t hidden, std::size_t d_model, Rng& rng) {
  w1 = nn::uniform_param<T>(rng, Shape{d_vis, hidden}, 1.0 / std::sqrt(double(d_vis)));
  b1 = nn::filled_param<T>(Shape{hidden}, T(0));
  w2 = nn::uniform_param<T>(rng, Shape{hidden, d_model}, 1.0 / std::sqrt(double(hidden)));
  b2 = nn::filled_param<T>(Shape{d_model}, T(0));
}

template <typename T>
Tensor<T> Projector<T>::forward(const Tensor<T>& f) const {
  if (f.rank() != 2 || f.dim(1) != w1.dim(0)) {
    throw ShapeError("projector expects [N, " + std::to_string(w1.dim(0)) + "], got " +
                     shape_string(f.shape()));
  }
  return nn::linear(silu(nn::linear(f, w1, b1)), w2, b2);
}

template <typename T>
ParamList<T> Projector<T>::parameters() const {
  return {{"projector.w1", ParamGroup::projector, w1},
          {"projector.b1", ParamGroup::projector, b1},
          {"projector.w2", ParamGroup::projector, w2},
          {"projector.b2", ParamGroup::projector, b2}};
}

template <typename T>
std::size_t Projector<T>::parameter_count(std::size_t d_vis, std::size_t hidden,
                                          std::size_t d_model) {
  return d_vis * hidden + hidden + hidden * d_model + d_model;
}

template <typename T>
VisionLanguageModel<T>::VisionLanguageModel(const VisionConfig& vision, const LMConfig& lm_config,
                                            Rng& rng)
    : vision_(vision) {
  vision_.validate();
  const auto d = lm_config.block.d_model;
  if (vision_.projector_hidden == 0) vision_.projector_hidden = d;
  encoder = PatchEncoder<T>(vision_, rng);
  projector = Projector<T>(vision_.d_vis, vision_.projector_hidden, d, rng);
  lm = LanguageModel<T>(lm_config, rng);
}

template <typename T>
Tensor<T> VisionLanguageModel<T>::visual_tokens(const Image& image) const {
  auto features = encoder.encode(image);
  notify("encode");
  auto projected = projector.forward(features);
  notify("project");
  return projected;
}

template <typename T>
Tensor<T> VisionLanguageModel<T>::sequence(const Image& image, std::span<const TokenId> text) const {
  if (text.empty()) throw DataError("prompt must contain at least one token");
  const Tensor<T> parts[2] = {visual_tokens(image), lm.embed(text)};
  auto seq = concat<T>(parts, 0);
  notify("concat");
  return seq;
}

template <typename T>
MultimodalOutput<T> VisionLanguageModel<T>::forward(const Image& image,
                                                    std::span<const TokenId> text) const {
  MultimodalOutput<T> out;
  out.visual_tokens = vision_.tokens();
  out.hidden = lm.hidden(sequence(image, text));
  const auto total = out.hidden.dim(0);
  out.logits = lm.logits_from_hidden(slice(out.hidden, 0, out.visual_tokens, total));
  notify("lm");
  return out;
}

template <typename T>
std::vector<TokenId> VisionLanguageModel<T>::generate(const Image& image,
                                                      std::span<const TokenId> prompt,
                                                      std::size_t max_new,
                                                      std::optional<TokenId> eos) const {
  Tensor<T> prefix;
  {
    NoGradGuard no_grad;
    prefix = sequence(image, prompt);
  }
  auto out = lm.generate_from_embeddings(prefix, max_new, eos);
  notify("lm");
  return out;
}

template <typename T>
ParamList<T> VisionLanguageModel<T>::parameters() const {
  ParamList<T> out = encoder.parameters();
  for (auto& p : projector.parameters()) out.push_back(p);
  for (auto& p : lm.parameters()) out.push_back(p);
  return out;
}

template Tensor<float> extract_patches(const Image&, std::size_t);
template Tensor<double> extract_patches(const Image&, std::size_t);
template class PatchEncoder<float>;
template class PatchEncoder<double>;
template class Projector<float>;
template class Projector<double>;
template class VisionLanguageModel<float>;
template class VisionLanguageModel<double>;

}  // namespace robomamba
