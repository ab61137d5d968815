#include "openseg/image_io.hpp"

#include <cstdio>
#include <memory>

#include <png.h>

#include "openseg/errors.hpp"

namespace openseg {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IntegrityError("cannot open '" + path.string() + "'");
    return f;
}

void write_rows(const std::filesystem::path& path, int width, int height, int color_type,
                const std::vector<std::array<std::uint8_t, 3>>* palette,
                const std::vector<png_bytep>& rows) {
    auto file = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IntegrityError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IntegrityError("failed to write '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_color> colors;
    if (palette) {
        for (const auto& c : *palette) colors.push_back(png_color{c[0], c[1], c[2]});
        png_set_PLTE(png, info, colors.data(), static_cast<int>(colors.size()));
    }
    png_write_info(png, info);
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

torch::Tensor read_png(const std::filesystem::path& path) {
    auto file = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IntegrityError("'" + path.string() + "' is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IntegrityError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("failed to decode '" + path.string() + "'");
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    auto hwc = torch::empty({height, width, channels}, torch::kUInt8);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = hwc[y].data_ptr<std::uint8_t>();
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return hwc.permute({2, 0, 1}).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& pixels) {
    if (pixels.dim() != 3 || (pixels.size(0) != 1 && pixels.size(0) != 3) || pixels.scalar_type() != torch::kUInt8)
        throw ShapeError("write_png expects a uint8 1xHxW or 3xHxW tensor");
    auto hwc = pixels.permute({1, 2, 0}).contiguous();
    const int height = static_cast<int>(hwc.size(0)), width = static_cast<int>(hwc.size(1));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = hwc[y].data_ptr<std::uint8_t>();
    write_rows(path, width, height, pixels.size(0) == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, nullptr, rows);
}

void write_indexed_png(const std::filesystem::path& path, const torch::Tensor& indices,
                       const std::vector<std::array<std::uint8_t, 3>>& palette) {
    if (indices.dim() != 2) throw ShapeError("write_indexed_png expects an H x W grid");
    if (palette.empty() || palette.size() > 256) throw ValidationError("palette must hold 1..256 colors");
    if (indices.numel() > 0 && (indices.min().item<std::int64_t>() < 0 ||
                                indices.max().item<std::int64_t>() >= static_cast<std::int64_t>(palette.size())))
        throw ValidationError("index outside the palette");
    auto grid = indices.to(torch::kUInt8).contiguous();
    const int height = static_cast<int>(grid.size(0)), width = static_cast<int>(grid.size(1));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = grid[y].data_ptr<std::uint8_t>();
    write_rows(path, width, height, PNG_COLOR_TYPE_PALETTE, &palette, rows);
}

torch::Tensor to_float_image(const torch::Tensor& pixels) {
    auto img = pixels.to(torch::kFloat32) / 255.0;
    if (img.size(0) == 1) img = img.expand({3, img.size(1), img.size(2)}).contiguous();
    return img;
}

torch::Tensor to_uint8_image(const torch::Tensor& image) {
    return (image.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
}

std::vector<std::array<std::uint8_t, 3>> label_palette() {
    std::vector<std::array<std::uint8_t, 3>> p(256);
    // bit-interleaved palette in the style of the PASCAL VOC color map
    for (int i = 0; i < 256; ++i) {
        int r = 0, g = 0, b = 0, c = i;
        for (int j = 0; j < 8; ++j) {
            r |= ((c >> 0) & 1) << (7 - j);
            g |= ((c >> 1) & 1) << (7 - j);
            b |= ((c >> 2) & 1) << (7 - j);
            c >>= 3;
        }
        p[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                          static_cast<std::uint8_t>(b)};
    }
    return p;
}

}  // namespace openseg
