#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mscn/common.hpp"

namespace mscn {
namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Writes an 8-bit RGB PNG; rgb is row-major, 3 bytes per pixel.
inline void write_png_rgb8(const std::filesystem::path& path, std::size_t height, std::size_t width,
                           const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != height * width * 3) throw UsageError("write_png_rgb8: buffer size mismatch");
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) {
        rows[y] = const_cast<png_bytep>(rgb.data() + y * width * 3);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads an 8-bit RGB PNG (strictly that color type and depth).
inline void read_png_rgb8(const std::filesystem::path& path, std::size_t& height, std::size_t& width,
                          std::vector<std::uint8_t>& rgb) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("undecodable PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) != 8 || png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("expected 8-bit RGB PNG: " + path.string());
    }
    height = png_get_image_height(png, info);
    width = png_get_image_width(png, info);
    rgb.assign(height * width * 3, 0);
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = rgb.data() + y * width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
}

/// Writes a 16-bit grayscale PNG. PNG stores 16-bit samples big-endian; the
/// rows are packed by hand so the on-disk bytes never depend on host order.
inline void write_png_gray16(const std::filesystem::path& path, std::size_t height, std::size_t width,
                             const std::vector<std::uint16_t>& gray) {
    if (gray.size() != height * width) throw UsageError("write_png_gray16: buffer size mismatch");
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> row(width * 2);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const std::uint16_t v = gray[y * width + x];
            row[2 * x] = static_cast<std::uint8_t>(v >> 8);
            row[2 * x + 1] = static_cast<std::uint8_t>(v & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void read_png_gray16(const std::filesystem::path& path, std::size_t& height, std::size_t& width,
                            std::vector<std::uint16_t>& gray) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("undecodable PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) != 16 || png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("expected 16-bit grayscale PNG: " + path.string());
    }
    height = png_get_image_height(png, info);
    width = png_get_image_width(png, info);
    gray.assign(height * width, 0);
    std::vector<std::uint8_t> row(width * 2);
    for (std::size_t y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t x = 0; x < width; ++x) {
            gray[y * width + x] = static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
}

}  // namespace mscn
