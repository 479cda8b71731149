#pragma once

// Minimal raster IO: binary PPM/PGM parsed directly, JPEG and PNG through
// their reference libraries. Pixels are 8-bit, row-major, interleaved.

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "errors.hpp"
#include "feature_map.hpp"
#include "tensor.hpp"

namespace dfft {

struct Image {
  int w = 0, h = 0, c = 0;  // c is 1 or 3
  std::vector<std::uint8_t> pix;

  std::uint8_t at(int y, int x, int ch) const {
    return pix[static_cast<std::size_t>((y * w + x) * c + ch)];
  }
};

namespace detail {

inline int pnm_token(std::istream& in) {
  // skips whitespace and # comments, reads one non-negative integer
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      while (in.get(ch) && ch != '\n') {
      }
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      in.unget();
      break;
    }
  }
  int v = -1;
  in >> v;
  if (!in || v < 0) throw ParseError("bad numeric field in pnm header");
  return v;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char msg[JMSG_LENGTH_MAX] = {0};
};

inline void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->msg);
  std::longjmp(err->jump, 1);
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw ParseError(path + ": not a binary pgm/ppm file");
  Image img;
  img.c = magic[1] == '6' ? 3 : 1;
  img.w = detail::pnm_token(in);
  img.h = detail::pnm_token(in);
  int maxval = detail::pnm_token(in);
  if (img.w < 1 || img.h < 1 || maxval != 255)
    throw ParseError(path + ": unsupported pnm geometry or depth");
  in.get();  // single whitespace after header
  img.pix.resize(static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h) *
                 static_cast<std::size_t>(img.c));
  in.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pix.size())
    throw ParseError(path + ": truncated pixel data");
  return img;
}

inline void write_pnm(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw ValueError("pnm wants 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.c == 3 ? "P6\n" : "P5\n") << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pix.data()),
            static_cast<std::streamsize>(img.pix.size()));
  if (!out) throw IoError("short write to " + path);
}

inline Image read_jpeg(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  jpeg_decompress_struct cinfo;
  detail::JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_fail;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw ParseError(path + ": " + err.msg);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.w = static_cast<int>(cinfo.output_width);
  img.h = static_cast<int>(cinfo.output_height);
  img.c = cinfo.output_components;
  img.pix.resize(static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h) *
                 static_cast<std::size_t>(img.c));
  auto row_bytes = static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.c);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pix.data() + static_cast<std::size_t>(cinfo.output_scanline) * row_bytes;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return img;
}

inline void write_jpeg(const std::string& path, const Image& img, int quality = 92) {
  if (img.c != 1 && img.c != 3) throw ValueError("jpeg wants 1 or 3 channels");
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  jpeg_compress_struct cinfo;
  detail::JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_fail;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::fclose(f);
    throw IoError(path + ": " + err.msg);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(img.w);
  cinfo.image_height = static_cast<JDIMENSION>(img.h);
  cinfo.input_components = img.c;
  cinfo.in_color_space = img.c == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  auto row_bytes = static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.c);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(img.pix.data() +
                                        static_cast<std::size_t>(cinfo.next_scanline) * row_bytes);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

inline Image read_png(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    throw IoError("png reader setup failed");
  }
  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    throw ParseError(path + ": png decode failed");
  }
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.w = static_cast<int>(png_get_image_width(png, info));
  img.h = static_cast<int>(png_get_image_height(png, info));
  img.c = png_get_channels(png, info) >= 3 ? 3 : 1;
  auto row_bytes = png_get_rowbytes(png, info);
  if (row_bytes != static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.c)) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    throw ParseError(path + ": unsupported png layout");
  }
  img.pix.resize(static_cast<std::size_t>(img.h) * row_bytes);
  rows.resize(static_cast<std::size_t>(img.h));
  for (int y = 0; y < img.h; ++y) rows[static_cast<std::size_t>(y)] = img.pix.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(f);
  return img;
}

inline void write_png(const std::string& path, const Image& img) {
  if (img.c != 1 && img.c != 3) throw ValueError("png wants 1 or 3 channels");
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw IoError("png writer setup failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw IoError(path + ": png encode failed");
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto row_bytes = static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.c);
  for (int y = 0; y < img.h; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pix.data() + y * row_bytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

// Dispatch on file magic.
inline Image read_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  unsigned char head[4] = {0, 0, 0, 0};
  probe.read(reinterpret_cast<char*>(head), 4);
  probe.close();
  if (head[0] == 'P' && (head[1] == '5' || head[1] == '6')) return read_pnm(path);
  if (head[0] == 0xFF && head[1] == 0xD8) return read_jpeg(path);
  if (head[0] == 0x89 && head[1] == 'P' && head[2] == 'N' && head[3] == 'G') return read_png(path);
  throw ParseError(path + ": unrecognized image format");
}

// [1, H, W, 3] tensor in [0, 1]; grayscale replicates its channel.
inline FeatureMap image_to_map(const Image& img) {
  if (img.w < 1 || img.h < 1) throw ValueError("empty image");
  std::vector<double> v(static_cast<std::size_t>(img.h) * static_cast<std::size_t>(img.w) * 3);
  std::size_t n = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        v[n++] = img.at(y, x, img.c == 3 ? ch : 0) / 255.0;
  return FeatureMap(Tensor::from({1, img.h, img.w, 3}, std::move(v)), 1);
}

}  // namespace dfft
