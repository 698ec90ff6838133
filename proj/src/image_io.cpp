#include "panda/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <csetjmp>
#include <filesystem>
#include <memory>
#include <vector>

#include "panda/error.hpp"

namespace panda {

namespace {

std::string lower_ext(const std::string& path) {
    std::string ext = std::filesystem::path(path).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext;
}

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

// interleaved rows -> planar [C, H, W]
ImageU8 planarize(const std::vector<uint8_t>& rows, int w, int h, int c) {
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.data.resize(size_t(int64_t(c) * w * h));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                img.at(ch, y, x) = rows[size_t((int64_t(y) * w + x) * c + ch)];
    return img;
}

ImageU8 load_png_file(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise(ErrorCode::FileNotFound, path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        raise(ErrorCode::Internal, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        raise(ErrorCode::UndecodableImage, path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        raise(ErrorCode::UndecodableImage, path + " (unsupported channel layout)");
    }

    std::vector<uint8_t> rows(size_t(int64_t(w) * h * channels));
    std::vector<png_bytep> row_ptrs(h);
    for (png_uint_32 y = 0; y < h; ++y)
        row_ptrs[y] = rows.data() + size_t(int64_t(y) * w * channels);
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return planarize(rows, int(w), int(h), channels);
}

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    longjmp(mgr->jump, 1);
}

ImageU8 load_jpeg_file(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise(ErrorCode::FileNotFound, path);

    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        raise(ErrorCode::UndecodableImage, path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f.get());
    jpeg_read_header(&cinfo, TRUE);
    jpeg_start_decompress(&cinfo);

    int w = int(cinfo.output_width), h = int(cinfo.output_height);
    int c = cinfo.output_components;
    if (c != 1 && c != 3) {
        jpeg_destroy_decompress(&cinfo);
        raise(ErrorCode::UndecodableImage, path + " (unsupported channel layout)");
    }
    std::vector<uint8_t> rows(size_t(int64_t(w) * h * c));
    while (cinfo.output_scanline < cinfo.output_height) {
        uint8_t* row = rows.data() + size_t(int64_t(cinfo.output_scanline) * w * c);
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return planarize(rows, w, h, c);
}

}  // namespace

bool is_supported_image(const std::string& path) {
    std::string ext = lower_ext(path);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

ImageU8 load_image(const std::string& path) {
    if (!std::filesystem::exists(path)) raise(ErrorCode::FileNotFound, path);
    std::string ext = lower_ext(path);
    if (ext == ".png") return load_png_file(path);
    if (ext == ".jpg" || ext == ".jpeg") return load_jpeg_file(path);
    raise(ErrorCode::UndecodableImage, path + " (supported: .png .jpg .jpeg)");
}

void save_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        raise(ErrorCode::ShapeMismatch, "save_png: 1 or 3 channels required");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise(ErrorCode::IoError, "cannot open for write: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        raise(ErrorCode::Internal, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        raise(ErrorCode::IoError, "png write failed: " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(size_t(int64_t(img.width) * img.channels));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[size_t(int64_t(x) * img.channels + c)] = img.at(c, y, x);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace panda
