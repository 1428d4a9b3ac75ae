#include "aesr/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace aesr {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

ResizeMode parse_resize_mode(std::string_view name) {
  if (name == "nearest") return ResizeMode::nearest;
  if (name == "bilinear") return ResizeMode::bilinear;
  if (name == "bicubic") return ResizeMode::bicubic;
  if (name == "area") return ResizeMode::area;
  throw ArgumentError("unknown resize mode '" + std::string(name) + "'");
}

std::string_view to_string(ResizeMode mode) {
  switch (mode) {
    case ResizeMode::nearest: return "nearest";
    case ResizeMode::bilinear: return "bilinear";
    case ResizeMode::bicubic: return "bicubic";
    case ResizeMode::area: return "area";
  }
  return "?";
}

void validate_image(const ImageTensor& img, std::string_view what) {
  const Shape& s = img.shape();
  if (s.n < 1 || s.h < 1 || s.w < 1) throw ShapeError(std::string(what) + ": empty image " + s.str());
  if (s.c != 1 && s.c != 3) throw ShapeError(std::string(what) + ": expected 1 or 3 channels, got " + s.str());
  if (!img.all_finite()) throw ArgumentError(std::string(what) + ": non-finite pixel values");
}

namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

ImageTensor from_interleaved(const std::uint8_t* px, int h, int w, int channels) {
  ImageTensor out(Shape{1, channels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        out.at(0, c, y, x) = static_cast<float>(px[(static_cast<std::size_t>(y) * w + x) * channels + c]) / 255.0f;
  return out;
}

std::vector<std::uint8_t> to_interleaved(const ImageTensor& img, int index) {
  const int h = img.height(), w = img.width(), ch = img.channels();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * w * ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c)
        px[(static_cast<std::size_t>(y) * w + x) * ch + c] = to_byte(img.at(index, c, y, x));
  return px;
}

void check_index(const ImageTensor& img, int index) {
  validate_image(img);
  if (index < 0 || index >= img.batch()) throw ArgumentError("batch index out of range");
}

// --- JPEG -------------------------------------------------------------------

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_silent(j_common_ptr, int) {}

}  // namespace

std::vector<std::uint8_t> encode_jpeg(const ImageTensor& img, int quality, int index) {
  check_index(img, index);
  if (quality < 1 || quality > 100) throw ArgumentError("jpeg quality must be in [1, 100]");
  const std::vector<std::uint8_t> px = to_interleaved(img, index);

  jpeg_compress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw FormatError(std::string("jpeg encode failed: ") + jerr.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width());
  cinfo.image_height = static_cast<JDIMENSION>(img.height());
  cinfo.input_components = img.channels();
  cinfo.in_color_space = img.channels() == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  for (int c = 0; c < cinfo.num_components; ++c) {
    cinfo.comp_info[c].h_samp_factor = 1;
    cinfo.comp_info[c].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  const int stride = img.width() * img.channels();
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(px.data() + static_cast<std::size_t>(cinfo.next_scanline) * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

ImageTensor decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  jerr.base.emit_message = jpeg_silent;
  std::vector<std::uint8_t> px;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("jpeg decode failed: ") + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  const bool gray = cinfo.jpeg_color_space == JCS_GRAYSCALE;
  cinfo.out_color_space = gray ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width), h = static_cast<int>(cinfo.output_height);
  const int ch = cinfo.output_components;
  px.resize(static_cast<std::size_t>(w) * h * ch);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * ch;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(px.data(), h, w, ch);
}

ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality) {
  validate_image(img);
  ImageTensor out(img.shape());
  for (int n = 0; n < img.batch(); ++n) {
    const ImageTensor dec = decode_jpeg(encode_jpeg(img, quality, n));
    std::copy(dec.values().begin(), dec.values().end(), out.plane(n, 0));
  }
  return out;
}

ImageTensor quantize8(const ImageTensor& img) {
  ImageTensor out = img;
  for (float& v : out.values()) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

// --- PNG --------------------------------------------------------------------

std::vector<std::uint8_t> encode_png(const ImageTensor& img, int index) {
  check_index(img, index);
  const std::vector<std::uint8_t> px = to_interleaved(img, index);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw FormatError(std::string("png encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw FormatError(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

void save_png(const ImageTensor& img, const std::filesystem::path& path, int index) {
  const std::vector<std::uint8_t> bytes = encode_png(img, index);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(std::string("png decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(std::string("png decode failed: ") + image.message);
  }
  return from_interleaved(px.data(), static_cast<int>(image.height), static_cast<int>(image.width), 3);
}

}  // namespace

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::array<std::uint8_t, 8> kPngMagic{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(kPngMagic.begin(), kPngMagic.end(), bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) {
    ImageTensor img = decode_jpeg(bytes);
    return img.channels() == 1 ? gray_to_rgb(img) : img;
  }
  throw FormatError("unrecognized image format (expected PNG or JPEG)");
}

ImageTensor load_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// --- resampling ---------------------------------------------------------------

namespace {

struct Tap {
  int index;
  double weight;
};

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

// One tap list per output coordinate along a single axis.
std::vector<std::vector<Tap>> axis_taps(int in, int out, ResizeMode mode) {
  std::vector<std::vector<Tap>> taps(out);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    auto& t = taps[i];
    switch (mode) {
      case ResizeMode::nearest: {
        const int src = std::min(static_cast<int>(std::floor(i * ratio)), in - 1);
        t.push_back({src, 1.0});
        break;
      }
      case ResizeMode::bilinear: {
        const double src = std::max((i + 0.5) * ratio - 0.5, 0.0);
        const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
        const int i1 = std::min(i0 + 1, in - 1);
        const double l = src - i0;
        t.push_back({i0, 1.0 - l});
        t.push_back({i1, l});
        break;
      }
      case ResizeMode::bicubic: {
        const double src = (i + 0.5) * ratio - 0.5;
        const int base = static_cast<int>(std::floor(src));
        const double frac = src - base;
        for (int k = -1; k <= 2; ++k) {
          t.push_back({std::clamp(base + k, 0, in - 1), cubic_weight(k - frac)});
        }
        break;
      }
      case ResizeMode::area: {
        const double lo = i * ratio, hi = (i + 1) * ratio;
        for (int j = static_cast<int>(std::floor(lo)); j < std::min(static_cast<int>(std::ceil(hi)), in); ++j) {
          const double overlap = std::min(hi, j + 1.0) - std::max(lo, static_cast<double>(j));
          if (overlap > 0) t.push_back({j, overlap / ratio});
        }
        break;
      }
    }
  }
  return taps;
}

}  // namespace

ImageTensor resize_to(const ImageTensor& img, int out_h, int out_w, ResizeMode mode) {
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize: non-positive output size");
  if (img.height() < 1 || img.width() < 1) throw ShapeError("resize: empty input " + img.shape().str());
  const Shape s = img.shape();
  if (out_h == s.h && out_w == s.w) return img;
  const auto ty = axis_taps(s.h, out_h, mode);
  const auto tx = axis_taps(s.w, out_w, mode);
  ImageTensor out(Shape{s.n, s.c, out_h, out_w});
  std::vector<double> rows(static_cast<std::size_t>(s.h) * out_w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* src = img.plane(n, c);
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < out_w; ++x) {
          double acc = 0;
          for (const Tap& t : tx[x]) acc += t.weight * src[static_cast<std::size_t>(y) * s.w + t.index];
          rows[static_cast<std::size_t>(y) * out_w + x] = acc;
        }
      float* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
          double acc = 0;
          for (const Tap& t : ty[y]) acc += t.weight * rows[static_cast<std::size_t>(t.index) * out_w + x];
          dst[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>(acc);
        }
    }
  }
  return out;
}

ImageTensor resize(const ImageTensor& img, double scale, ResizeMode mode) {
  if (!(scale > 0) || !std::isfinite(scale)) throw ArgumentError("resize: scale must be positive");
  const long oh = std::lround(img.height() * scale);
  const long ow = std::lround(img.width() * scale);
  if (oh < 1 || ow < 1) throw ArgumentError("resize: scale produces an empty image");
  return resize_to(img, static_cast<int>(oh), static_cast<int>(ow), mode);
}

ImageTensor crop(const ImageTensor& img, int y, int x, int h, int w) {
  const Shape s = img.shape();
  if (y < 0 || x < 0 || h < 1 || w < 1 || y + h > s.h || x + w > s.w) {
    throw ArgumentError("crop window out of bounds for " + s.str());
  }
  ImageTensor out(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int r = 0; r < h; ++r) {
        const float* src = img.plane(n, c) + static_cast<std::size_t>(y + r) * s.w + x;
        std::copy(src, src + w, out.plane(n, c) + static_cast<std::size_t>(r) * w);
      }
  return out;
}

ImageTensor extract_patch(const ImageTensor& img, int size, Rng& rng) {
  if (size < 1) throw ArgumentError("extract_patch: size must be positive");
  if (size > img.height() || size > img.width()) {
    throw ArgumentError("extract_patch: size " + std::to_string(size) + " exceeds image " + img.shape().str());
  }
  const int y = static_cast<int>(rng.uniform_int(0, img.height() - size));
  const int x = static_cast<int>(rng.uniform_int(0, img.width() - size));
  return crop(img, y, x, size, size);
}

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

}  // namespace

ImageTensor filter2d(const ImageTensor& img, const Tensor<double>& kernel) {
  const int k = kernel.height();
  if (k != kernel.width() || k % 2 == 0) throw ArgumentError("filter2d: kernel must be odd and square");
  const Shape s = img.shape();
  const int r = k / 2;
  ImageTensor out(s);
  std::vector<int> ys(static_cast<std::size_t>(s.h + 2 * r)), xs(static_cast<std::size_t>(s.w + 2 * r));
  for (int i = -r; i < s.h + r; ++i) ys[i + r] = reflect101(i, s.h);
  for (int i = -r; i < s.w + r; ++i) xs[i + r] = reflect101(i, s.w);
  const double* kv = kernel.data();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* src = img.plane(n, c);
      float* dst = out.plane(n, c);
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          double acc = 0;
          for (int dy = 0; dy < k; ++dy) {
            const float* row = src + static_cast<std::size_t>(ys[y + dy]) * s.w;
            for (int dx = 0; dx < k; ++dx) acc += kv[dy * k + dx] * row[xs[x + dx]];
          }
          dst[static_cast<std::size_t>(y) * s.w + x] = static_cast<float>(acc);
        }
    }
  return out;
}

ImageTensor to_luminance(const ImageTensor& img, int index) {
  check_index(img, index);
  ImageTensor out(Shape{1, 1, img.height(), img.width()});
  const std::size_t plane = img.shape().plane();
  if (img.channels() == 1) {
    std::copy(img.plane(index, 0), img.plane(index, 0) + plane, out.data());
    return out;
  }
  const float* r = img.plane(index, 0);
  const float* g = img.plane(index, 1);
  const float* b = img.plane(index, 2);
  for (std::size_t i = 0; i < plane; ++i) out[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  return out;
}

ImageTensor gray_to_rgb(const ImageTensor& img) {
  if (img.channels() != 1) throw ShapeError("gray_to_rgb expects one channel");
  const Shape s = img.shape();
  ImageTensor out(Shape{s.n, 3, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < 3; ++c) std::copy(img.plane(n, 0), img.plane(n, 0) + s.plane(), out.plane(n, c));
  return out;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace aesr
