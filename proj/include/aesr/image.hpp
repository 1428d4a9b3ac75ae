#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "aesr/rng.hpp"
#include "aesr/tensor.hpp"

namespace aesr {

/// B x C x H x W image with nominal values in [0, 1]; C is 1 or 3.
using ImageTensor = Tensor<float>;

enum class ResizeMode { nearest, bilinear, bicubic, area };

ResizeMode parse_resize_mode(std::string_view name);
std::string_view to_string(ResizeMode mode);

/// Throws ShapeError / ArgumentError if `img` breaks the ImageTensor invariants
/// (channels in {1,3}, non-empty spatial dims, finite values).
void validate_image(const ImageTensor& img, std::string_view what = "image");

/// Loads a PNG or JPEG as a (1, 3, H, W) tensor; grayscale files are expanded to RGB.
ImageTensor load_image(const std::filesystem::path& path);
ImageTensor decode_image(std::span<const std::uint8_t> bytes);

/// Writes batch item `index` as an 8-bit PNG, clamping to [0, 1].
void save_png(const ImageTensor& img, const std::filesystem::path& path, int index = 0);
std::vector<std::uint8_t> encode_png(const ImageTensor& img, int index = 0);

/// Baseline JPEG with 4:4:4 sampling; quality in [1, 100].
std::vector<std::uint8_t> encode_jpeg(const ImageTensor& img, int quality, int index = 0);
ImageTensor decode_jpeg(std::span<const std::uint8_t> bytes);

/// Encodes and decodes every batch item at `quality`.
ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality);

/// Rounds to the nearest 8-bit level, as a save/load cycle would.
ImageTensor quantize8(const ImageTensor& img);

/// Resizes to (round(H*scale), round(W*scale)). Half-pixel-centre sampling for
/// bilinear and bicubic (a = -0.5), exact fractional box coverage for area.
ImageTensor resize(const ImageTensor& img, double scale, ResizeMode mode);
ImageTensor resize_to(const ImageTensor& img, int out_h, int out_w, ResizeMode mode);

/// Random size x size window; offsets are uniform over every valid position.
ImageTensor extract_patch(const ImageTensor& img, int size, Rng& rng);
ImageTensor crop(const ImageTensor& img, int y, int x, int h, int w);

/// 2-D correlation of every plane with an odd square kernel, reflect-101 borders.
ImageTensor filter2d(const ImageTensor& img, const Tensor<double>& kernel);

/// ITU-R 601 luma of batch item `index`, as a (1,1,H,W) tensor in [0,1].
ImageTensor to_luminance(const ImageTensor& img, int index = 0);

/// Replicates a single-channel image into three channels.
ImageTensor gray_to_rgb(const ImageTensor& img);

/// Image files (png/jpg/jpeg, case-insensitive) directly inside `dir`, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace aesr
