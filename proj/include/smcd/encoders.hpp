#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "smcd/error.hpp"
#include "smcd/rng.hpp"
#include "smcd/tensor.hpp"

namespace smcd {

/// 8-bit RGB image, row-major, interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float value(int y, int x, int c) const { return static_cast<float>(at(y, x, c)) / 255.0f; }

  friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t to_byte(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

// Latent layout: a frame is [C, H, W] with C = 3*k*k. The pixel at
// (y, x, ch) maps to cell (y/k, x/k), channel ch*k*k + (y%k)*k + (x%k).
inline int latent_channel(int ch, int dy, int dx, int k) { return ch * k * k + dy * k + dx; }

/// Space-to-depth "codec" standing in for a VAE: lossless, values mapped
/// from [0,1] to [-1,1].
template <typename T>
Tensor<T> encode_frame(const Image& img, int k) {
  SMCD_REQUIRE(k >= 1, ConfigError, "patch factor must be >= 1");
  SMCD_REQUIRE(img.height % k == 0 && img.width % k == 0, ConfigError,
               "image size " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                   " not divisible by patch factor " + std::to_string(k));
  const int h = img.height / k, w = img.width / k, c = 3 * k * k;
  Tensor<T> out(Shape{c, h, w});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const T v = static_cast<T>(img.at(y, x, ch)) / T(255);
        out.at({latent_channel(ch, y % k, x % k, k), y / k, x / k}) = T(2) * v - T(1);
      }
  return out;
}

template <typename T>
Image decode_frame(const Tensor<T>& latent, int k) {
  SMCD_REQUIRE(latent.rank() == 3 && latent.dim(0) == 3 * k * k, ContractViolation,
               "decode_frame: expected " + std::to_string(3 * k * k) + " channels, got latent " +
                   shape_str(latent.shape()));
  const int h = latent.dim(1), w = latent.dim(2);
  Image img(h * k, w * k);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const double l = latent.at({latent_channel(ch, y % k, x % k, k), y / k, x / k});
        img.at(y, x, ch) = to_byte((l + 1.0) / 2.0);
      }
  return img;
}

/// Stacks per-frame latents into a video latent [F, C, H, W].
template <typename T>
Tensor<T> encode_video(const std::vector<Image>& frames, int k) {
  SMCD_REQUIRE(!frames.empty(), ContractViolation, "encode_video: no frames");
  std::vector<T> data;
  Shape fs;
  for (const auto& f : frames) {
    Tensor<T> l = encode_frame<T>(f, k);
    if (fs.empty()) fs = l.shape();
    SMCD_REQUIRE(fs == l.shape(), ShapeError, "encode_video: frame sizes differ");
    data.insert(data.end(), l.vec().begin(), l.vec().end());
  }
  return Tensor<T>(Shape{static_cast<int>(frames.size()), fs[0], fs[1], fs[2]}, std::move(data));
}

template <typename T>
std::vector<Image> decode_video(const Tensor<T>& video, int k) {
  SMCD_REQUIRE(video.rank() == 4, ContractViolation, "decode_video: expected [F,C,H,W]");
  const int f = video.dim(0);
  const std::size_t per = video.size() / static_cast<std::size_t>(f);
  std::vector<Image> out;
  for (int i = 0; i < f; ++i) {
    std::vector<T> slice(video.data() + i * per, video.data() + (i + 1) * per);
    out.push_back(decode_frame(Tensor<T>(Shape{video.dim(1), video.dim(2), video.dim(3)}, std::move(slice)), k));
  }
  return out;
}

/// Token vectors of a caption, or the marker for "no text" (null), which the
/// denoiser replaces by its learned null embedding.
template <typename T>
struct TextEmbedding {
  Tensor<T> tokens;  // [L, D]
  bool is_null = true;

  static TextEmbedding null() { return {}; }
  int length() const { return is_null ? 0 : tokens.dim(0); }
};

inline std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

/// Frozen text encoder: each whitespace token maps to a unit-Gaussian vector
/// seeded by (embedder seed, token). Vectors for a loaded vocabulary are
/// cached at construction; anything else is regenerated on demand, so
/// lookups never mutate shared state.
class TextEmbedder {
 public:
  TextEmbedder(int dim, std::uint64_t seed, const std::vector<std::string>& vocabulary = {})
      : dim_(dim), seed_(seed) {
    SMCD_REQUIRE(dim >= 1, ConfigError, "text embedding dimension must be >= 1");
    for (const auto& tok : vocabulary)
      if (!tok.empty() && !cache_.count(tok)) cache_.emplace(tok, generate(tok));
  }

  static std::vector<std::string> load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file '" + path + "'");
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) out.push_back(line);
    }
    return out;
  }

  int dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t cached_tokens() const noexcept { return cache_.size(); }

  std::vector<double> token_vector(const std::string& token) const {
    auto it = cache_.find(token);
    return it != cache_.end() ? it->second : generate(token);
  }

  template <typename T>
  TextEmbedding<T> embed_text(const std::string& text) const {
    const auto toks = tokenize(text);
    if (toks.empty()) return TextEmbedding<T>::null();
    Tensor<T> out(Shape{static_cast<int>(toks.size()), dim_});
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const auto v = token_vector(toks[i]);
      for (int j = 0; j < dim_; ++j) out[i * dim_ + j] = static_cast<T>(v[j]);
    }
    return TextEmbedding<T>{std::move(out), false};
  }

  /// Mean of the label's token vectors; zeros for an empty label.
  template <typename T>
  Tensor<T> embed_label(const std::string& label) const {
    const auto toks = tokenize(label);
    Tensor<T> out(Shape{dim_});
    if (toks.empty()) return out;
    std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
    for (const auto& tok : toks) {
      const auto v = token_vector(tok);
      for (int j = 0; j < dim_; ++j) acc[j] += v[j];
    }
    for (int j = 0; j < dim_; ++j) out[j] = static_cast<T>(acc[j] / static_cast<double>(toks.size()));
    return out;
  }

 private:
  std::vector<double> generate(const std::string& token) const {
    Rng rng = Rng::substream(seed_, fnv1a64(token));
    std::vector<double> v(static_cast<std::size_t>(dim_));
    for (auto& x : v) x = rng.normal();
    return v;
  }

  int dim_;
  std::uint64_t seed_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

}  // namespace smcd
