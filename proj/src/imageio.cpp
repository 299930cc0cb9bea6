#include "wmlab/imageio.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstring>
#include <stdexcept>

#include "wmlab/util.hpp"

namespace wmlab {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PngReadCursor {
  const std::vector<unsigned char>* bytes;
  std::size_t pos;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(out, cur->bytes->data() + cur->pos, n);
  cur->pos += n;
}

void png_write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void png_flush_cb(png_structp) {}

[[noreturn]] void png_error_cb(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

void png_warn_cb(png_structp, png_const_charp) {}

ImageTensor convert_channels(const ImageTensor& img, int channels) {
  if (channels == 0 || channels == img.channels()) return img;
  const Shape s = img.shape();
  std::vector<double> out(static_cast<std::size_t>(s.height) * s.width * channels);
  const auto d = img.data();
  for (std::size_t p = 0; p < static_cast<std::size_t>(s.height) * s.width; ++p) {
    if (channels == 1) {
      // Rec. 601 luma.
      out[p] = std::clamp(0.299 * d[3 * p] + 0.587 * d[3 * p + 1] + 0.114 * d[3 * p + 2],
                          0.0, 1.0);
    } else {
      for (int c = 0; c < 3; ++c) out[3 * p + c] = d[p];
    }
  }
  return ImageTensor({s.height, s.width, channels}, std::move(out));
}

}  // namespace

namespace {

// The libpng and libjpeg calls below live in functions whose locals are all
// plain pointers or scalars set before setjmp, so longjmp cannot clobber them.
// Buffers belong to the caller.

bool png_encode_raw(const unsigned char* px, int w, int h, int c,
                    std::vector<unsigned char>* out, std::string* err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err,
                                            png_error_cb, png_warn_cb);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, px + static_cast<std::size_t>(y) * w * c);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct PngRaw {
  png_uint_32 w = 0, h = 0;
  int c = 0;
  std::size_t stride = 0;
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
};

bool png_decode_raw(PngReadCursor* cur, PngRaw* raw, std::string* err) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err,
                                           png_error_cb, png_warn_cb);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, cur, png_read_cb);
  png_read_info(png, info);
  raw->w = png_get_image_width(png, info);
  raw->h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  raw->c = png_get_channels(png, info);
  raw->stride = png_get_rowbytes(png, info);
  raw->pixels.resize(raw->stride * raw->h);
  raw->rows.resize(raw->h);
  for (png_uint_32 y = 0; y < raw->h; ++y) raw->rows[y] = raw->pixels.data() + y * raw->stride;
  png_read_image(png, raw->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

}  // namespace

std::vector<unsigned char> encode_png(const ImageTensor& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw std::invalid_argument("encode_png: need 1 or 3 channels, got " +
                                img.shape().str());
  }
  std::vector<unsigned char> px(img.size());
  const auto d = img.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(d[i]);
  std::vector<unsigned char> out;
  std::string err;
  if (!png_encode_raw(px.data(), img.width(), img.height(), img.channels(), &out, &err)) {
    throw std::runtime_error("encode_png: " + err);
  }
  return out;
}

ImageTensor decode_png(const std::vector<unsigned char>& bytes, int channels) {
  if (channels != 0 && channels != 1 && channels != 3) {
    throw std::invalid_argument("decode_png: channels must be 0, 1 or 3");
  }
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw std::invalid_argument("decode_png: not a PNG stream");
  }
  PngReadCursor cur{&bytes, 0};
  PngRaw raw;
  std::string err;
  if (!png_decode_raw(&cur, &raw, &err)) throw std::invalid_argument("decode_png: " + err);
  const std::size_t row = static_cast<std::size_t>(raw.w) * raw.c;
  std::vector<double> d(row * raw.h);
  for (png_uint_32 y = 0; y < raw.h; ++y) {
    for (std::size_t i = 0; i < row; ++i) d[y * row + i] = raw.rows[y][i] / 255.0;
  }
  ImageTensor img({static_cast<int>(raw.h), static_cast<int>(raw.w), raw.c}, std::move(d));
  return convert_channels(img, channels);
}

void write_png(const std::filesystem::path& file, const ImageTensor& img) {
  const auto bytes = encode_png(img);
  write_file(file, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                    bytes.size()));
}

ImageTensor read_png(const std::filesystem::path& file, int channels) {
  const std::string raw = read_file(file);
  return decode_png(std::vector<unsigned char>(raw.begin(), raw.end()), channels);
}

std::string png_base64(const ImageTensor& img) {
  return base64_encode(encode_png(img));
}

ImageTensor png_from_base64(const std::string& text, int channels) {
  return decode_png(base64_decode(text), channels);
}

namespace {

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* e = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, e->message);
  std::longjmp(e->jump, 1);
}

}  // namespace

namespace {

bool jpeg_encode_raw(const unsigned char* px, int w, int h, int c, int quality,
                     unsigned char** buf, unsigned long* len, JpegErr* err) {
  jpeg_compress_struct cinfo{};
  cinfo.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  if (setjmp(err->jump)) {
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buf, len);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = c;
  cinfo.in_color_space = c == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  if (c == 3) {
    // 4:2:0
    cinfo.comp_info[0].h_samp_factor = 2;
    cinfo.comp_info[0].v_samp_factor = 2;
    cinfo.comp_info[1].h_samp_factor = cinfo.comp_info[1].v_samp_factor = 1;
    cinfo.comp_info[2].h_samp_factor = cinfo.comp_info[2].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<unsigned char*>(px) +
                   static_cast<std::size_t>(cinfo.next_scanline) * w * c;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

bool jpeg_decode_raw(const unsigned char* buf, unsigned long len, int w, int h, int c,
                     unsigned char* px, JpegErr* err) {
  jpeg_decompress_struct dinfo{};
  dinfo.err = jpeg_std_error(&err->mgr);
  err->mgr.error_exit = jpeg_error_exit;
  if (setjmp(err->jump)) {
    jpeg_destroy_decompress(&dinfo);
    return false;
  }
  jpeg_create_decompress(&dinfo);
  jpeg_mem_src(&dinfo, buf, len);
  jpeg_read_header(&dinfo, TRUE);
  dinfo.out_color_space = c == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_start_decompress(&dinfo);
  if (static_cast<int>(dinfo.output_width) != w ||
      static_cast<int>(dinfo.output_height) != h) {
    jpeg_destroy_decompress(&dinfo);
    std::snprintf(err->message, sizeof err->message, "decoded size differs");
    return false;
  }
  while (dinfo.output_scanline < dinfo.output_height) {
    JSAMPROW r = px + static_cast<std::size_t>(dinfo.output_scanline) * w * c;
    jpeg_read_scanlines(&dinfo, &r, 1);
  }
  jpeg_finish_decompress(&dinfo);
  jpeg_destroy_decompress(&dinfo);
  return true;
}

}  // namespace

ImageTensor jpeg_roundtrip(const ImageTensor& img, int quality) {
  if (quality < 1 || quality > 100) {
    throw std::invalid_argument("jpeg quality must be in 1..100, got " +
                                std::to_string(quality));
  }
  const int c = img.channels();
  if (c != 1 && c != 3) throw std::invalid_argument("jpeg: need 1 or 3 channels");
  std::vector<unsigned char> px(img.size());
  const auto d = img.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(d[i]);

  unsigned char* buf = nullptr;
  unsigned long len = 0;
  JpegErr err{};
  const bool encoded =
      jpeg_encode_raw(px.data(), img.width(), img.height(), c, quality, &buf, &len, &err);
  const bool decoded =
      encoded && jpeg_decode_raw(buf, len, img.width(), img.height(), c, px.data(), &err);
  std::free(buf);
  if (!decoded) throw std::runtime_error(std::string("jpeg: ") + err.message);

  std::vector<double> out(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) out[i] = px[i] / 255.0;
  return ImageTensor(img.shape(), std::move(out));
}

ImageTensor quantize8(const ImageTensor& img) {
  std::vector<double> d(img.size());
  const auto s = img.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = to_byte(s[i]) / 255.0;
  return ImageTensor(img.shape(), std::move(d));
}

}  // namespace wmlab
