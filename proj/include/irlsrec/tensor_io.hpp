#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "irlsrec/tensor.hpp"

namespace irlsrec {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Image file metadata: bit depth (8 or 16), channel count (1 or 3).
/// Pixel data is always carried in [0,1].
struct ImageMeta {
    int bit_depth = 8;
    std::size_t channels = 1;

    void validate() const {
        if (bit_depth != 8 && bit_depth != 16)
            throw std::invalid_argument("ImageMeta: bit depth must be 8 or 16");
        if (channels != 1 && channels != 3)
            throw std::invalid_argument("ImageMeta: channel count must be 1 or 3");
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "LTSR I/O assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("LTSR: truncated header");
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw IoError("LTSR: truncated header");
    return v;
}

constexpr std::uint32_t kMaxRank = 16;

inline void write_tensor_stream(const Tensor& t, std::ostream& os) {
    os.write("LTSR", 4);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u64(os, e);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!os) throw IoError("LTSR: write failure");
}

inline Tensor read_tensor_stream(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "LTSR", 4) != 0)
        throw IoError("LTSR: bad magic");
    const std::uint32_t rank = get_u32(is);
    if (rank > kMaxRank) throw IoError("LTSR: rank too large");
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t e = get_u64(is);
        if (e == 0 || e > (std::uint64_t{1} << 40) / total)
            throw IoError("LTSR: extent overflow");
        shape[i] = static_cast<std::size_t>(e);
        total *= shape[i];
    }
    std::vector<double> data(total);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(total * sizeof(double))))
        throw IoError("LTSR: truncated payload");
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) throw IoError("LTSR: non-finite values in payload");
    return t;
}

}  // namespace detail

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    detail::write_tensor_stream(t, os);
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    Tensor t = detail::read_tensor_stream(is);
    // reject trailing garbage so truncation tests are symmetric
    is.peek();
    if (!is.eof()) throw IoError("LTSR: trailing bytes after payload: " + path.string());
    return t;
}

namespace detail {

struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

}  // namespace detail

/// Reads an 8- or 16-bit grayscale/RGB PNG into a (c,H,W) tensor in [0,1].
inline Tensor read_image(const std::filesystem::path& path, ImageMeta* meta_out = nullptr) {
    detail::PngReadCloser ctx;
    ctx.fp = std::fopen(path.string().c_str(), "rb");
    if (!ctx.fp) throw IoError("cannot open image: " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, ctx.fp) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());

    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("png_create_read_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw IoError("PNG decode error: " + path.string());

    png_init_io(ctx.png, ctx.fp);
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);

    const png_uint_32 width = png_get_image_width(ctx.png, ctx.info);
    const png_uint_32 height = png_get_image_height(ctx.png, ctx.info);
    const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
    const int color_type = png_get_color_type(ctx.png, ctx.info);

    if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_RGB)
        throw IoError("unsupported PNG color type (need grayscale or RGB): " + path.string());
    if (bit_depth != 8 && bit_depth != 16)
        throw IoError("unsupported PNG bit depth (need 8 or 16): " + path.string());

    if (bit_depth == 16) png_set_swap(ctx.png);  // stored big-endian in the file
    png_read_update_info(ctx.png, ctx.info);

    const std::size_t channels = (color_type == PNG_COLOR_TYPE_RGB) ? 3 : 1;
    const std::size_t row_bytes = png_get_rowbytes(ctx.png, ctx.info);
    std::vector<png_byte> raster(row_bytes * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = raster.data() + y * row_bytes;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    Tensor t({channels, height, width});
    const double maxval = (bit_depth == 8) ? 255.0 : 65535.0;
    for (std::size_t y = 0; y < height; ++y) {
        const png_byte* row = raster.data() + y * row_bytes;
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t ch = 0; ch < channels; ++ch) {
                double v;
                if (bit_depth == 8) {
                    v = row[x * channels + ch];
                } else {
                    std::uint16_t u;
                    std::memcpy(&u, row + 2 * (x * channels + ch), 2);
                    v = u;
                }
                t.at3(ch, y, x) = v / maxval;
            }
        }
    }
    if (meta_out) *meta_out = ImageMeta{bit_depth, channels};
    return t;
}

/// Quantizes a [0,1] value to an integer code, rounding half away from zero.
inline std::uint32_t quantize_unit(double v, double maxval) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint32_t>(std::floor(v * maxval + 0.5));
}

/// Writes a (c,H,W) tensor as PNG. Values are clamped to [0,1] and quantized
/// with round-half-away-from-zero.
inline void write_image(const Tensor& t, const std::filesystem::path& path,
                        const ImageMeta& meta) {
    meta.validate();
    if (t.rank() != 3) throw std::invalid_argument("write_image: tensor must be (c,H,W)");
    if (t.extent(0) != meta.channels)
        throw std::invalid_argument("write_image: channel count mismatch");
    const std::size_t channels = meta.channels, height = t.extent(1), width = t.extent(2);

    detail::PngWriteCloser ctx;
    ctx.fp = std::fopen(path.string().c_str(), "wb");
    if (!ctx.fp) throw IoError("cannot open image for writing: " + path.string());
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("png_create_write_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw IoError("PNG encode error: " + path.string());

    png_init_io(ctx.png, ctx.fp);
    png_set_compression_level(ctx.png, 6);  // fixed so output bytes are reproducible
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(width),
                 static_cast<png_uint_32>(height), meta.bit_depth,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    if (meta.bit_depth == 16) png_set_swap(ctx.png);

    const double maxval = (meta.bit_depth == 8) ? 255.0 : 65535.0;
    const std::size_t bytes_per_sample = meta.bit_depth / 8;
    std::vector<png_byte> row(width * channels * bytes_per_sample);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t ch = 0; ch < channels; ++ch) {
                const std::uint32_t q = quantize_unit(t.at3(ch, y, x), maxval);
                if (meta.bit_depth == 8) {
                    row[x * channels + ch] = static_cast<png_byte>(q);
                } else {
                    const std::uint16_t u = static_cast<std::uint16_t>(q);
                    std::memcpy(row.data() + 2 * (x * channels + ch), &u, 2);
                }
            }
        }
        png_write_row(ctx.png, row.data());
    }
    png_write_end(ctx.png, nullptr);
}

}  // namespace irlsrec
