#include "thermosr/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "thermosr/errors.hpp"

namespace thermosr {

namespace {

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

// Gray pixels short-circuit: the coefficients do not sum to exactly 1.0 in
// binary, and grayscale data stored as RGB must round-trip losslessly.
double luma(double r, double g, double b) {
    if (r == g && g == b) return r;
    return kLumaR * r + kLumaG * g + kLumaB * b;
}

int quantize(double v, int max_value) {
    v = std::clamp(v, 0.0, 1.0);
    // Round half up; floor(x + 0.5) keeps .5 cases going to the larger code.
    const int q = static_cast<int>(std::floor(v * max_value + 0.5));
    return std::clamp(q, 0, max_value);
}

// ---- BMP ----

std::uint32_t rd_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::int32_t rd_i32(const unsigned char* p) { return static_cast<std::int32_t>(rd_u32(p)); }
std::uint16_t rd_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}
void wr_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

Image load_bmp(const std::vector<unsigned char>& buf, const std::string& path) {
    if (buf.size() < 54) throw io_error("BMP too short: " + path);
    const std::uint32_t pixel_offset = rd_u32(&buf[10]);
    const std::uint32_t header_size = rd_u32(&buf[14]);
    if (header_size < 40) throw io_error("unsupported BMP header: " + path);
    const std::int32_t width = rd_i32(&buf[18]);
    const std::int32_t height_raw = rd_i32(&buf[22]);
    const std::uint16_t bpp = rd_u16(&buf[28]);
    const std::uint32_t compression = rd_u32(&buf[30]);
    if (compression != 0) throw io_error("compressed BMP unsupported: " + path);
    if (width <= 0 || height_raw == 0) throw validation_error("zero-size BMP: " + path);
    const bool bottom_up = height_raw > 0;
    const int height = bottom_up ? height_raw : -height_raw;
    if (bpp != 8 && bpp != 24) throw io_error("BMP bit depth must be 8 or 24: " + path);

    // Palette (8-bit only): BGRA quads between header and pixel data.
    std::vector<double> pal_luma(256, 0.0);
    if (bpp == 8) {
        std::uint32_t colors = rd_u32(&buf[46]);
        if (colors == 0) colors = 256;
        const std::size_t pal_off = 14 + header_size;
        if (pal_off + colors * 4 > buf.size()) throw io_error("BMP palette truncated: " + path);
        for (std::uint32_t i = 0; i < colors; ++i) {
            const unsigned char* q = &buf[pal_off + i * 4];
            pal_luma[i] = luma(q[2] / 255.0, q[1] / 255.0, q[0] / 255.0);
        }
    }

    const std::size_t row_stride = (static_cast<std::size_t>(width) * bpp / 8 + 3) & ~std::size_t{3};
    if (pixel_offset + row_stride * static_cast<std::size_t>(height) > buf.size())
        throw io_error("BMP pixel data truncated: " + path);

    Image img(height, width);
    img.bit_depth_src = 8;
    for (int r = 0; r < height; ++r) {
        const int src_row = bottom_up ? height - 1 - r : r;
        const unsigned char* row = &buf[pixel_offset + row_stride * static_cast<std::size_t>(src_row)];
        for (int c = 0; c < width; ++c) {
            if (bpp == 8) {
                img.at(r, c) = pal_luma[row[c]];
            } else {
                img.at(r, c) = luma(row[c * 3 + 2] / 255.0, row[c * 3 + 1] / 255.0,
                                    row[c * 3 + 0] / 255.0);
            }
        }
    }
    return img;
}

void save_bmp(const Image& img, const std::string& path) {
    const int h = img.h, w = img.w;
    const std::size_t row_stride = (static_cast<std::size_t>(w) + 3) & ~std::size_t{3};
    const std::uint32_t pixel_offset = 14 + 40 + 256 * 4;
    const std::uint32_t file_size =
        pixel_offset + static_cast<std::uint32_t>(row_stride * static_cast<std::size_t>(h));

    std::vector<unsigned char> out;
    out.reserve(file_size);
    out.push_back('B');
    out.push_back('M');
    wr_u32(out, file_size);
    wr_u32(out, 0);
    wr_u32(out, pixel_offset);
    wr_u32(out, 40);  // BITMAPINFOHEADER
    wr_u32(out, static_cast<std::uint32_t>(w));
    wr_u32(out, static_cast<std::uint32_t>(h));  // positive: bottom-up
    wr_u16(out, 1);
    wr_u16(out, 8);
    wr_u32(out, 0);  // BI_RGB
    wr_u32(out, static_cast<std::uint32_t>(row_stride * static_cast<std::size_t>(h)));
    wr_u32(out, 2835);  // 72 dpi
    wr_u32(out, 2835);
    wr_u32(out, 256);
    wr_u32(out, 0);
    for (int i = 0; i < 256; ++i) {
        out.push_back(static_cast<unsigned char>(i));
        out.push_back(static_cast<unsigned char>(i));
        out.push_back(static_cast<unsigned char>(i));
        out.push_back(0);
    }
    for (int r = h - 1; r >= 0; --r) {
        for (int c = 0; c < w; ++c)
            out.push_back(static_cast<unsigned char>(quantize(img.at(r, c), 255)));
        for (std::size_t p = static_cast<std::size_t>(w); p < row_stride; ++p) out.push_back(0);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw io_error("write failed: " + path);
}

// ---- PNG ----

struct PngReadCtx {
    const unsigned char* data;
    std::size_t size;
    std::size_t pos;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
    auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
    if (ctx->pos + n > ctx->size) png_error(png, "read past end");
    std::memcpy(out, ctx->data + ctx->pos, n);
    ctx->pos += n;
}

Image load_png(const std::vector<unsigned char>& buf, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw io_error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw io_error("libpng init failed");
    }
    std::vector<png_bytep> row_ptrs;
    std::vector<unsigned char> raster;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("malformed PNG: " + path);
    }
    PngReadCtx ctx{buf.data(), buf.size(), 0};
    png_set_read_fn(png, &ctx, png_mem_read);
    png_read_info(png, info);

    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (width == 0 || height == 0) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw validation_error("zero-size PNG: " + path);
    }
    if ((color_type & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw validation_error("PNG with alpha unsupported (expect 1- or 3-channel): " + path);
    }

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    color_type = png_get_color_type(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw validation_error("PNG must be 1- or 3-channel: " + path);
    }

    const std::size_t rowbytes = png_get_rowbytes(png, info);
    raster.resize(rowbytes * height);
    row_ptrs.resize(height);
    for (png_uint_32 r = 0; r < height; ++r) row_ptrs[r] = raster.data() + r * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(static_cast<int>(height), static_cast<int>(width));
    img.bit_depth_src = bit_depth;
    const double denom = bit_depth == 16 ? 65535.0 : 255.0;
    for (int r = 0; r < img.h; ++r) {
        const unsigned char* row = raster.data() + static_cast<std::size_t>(r) * rowbytes;
        for (int c = 0; c < img.w; ++c) {
            double v;
            if (bit_depth == 16) {
                // PNG stores 16-bit samples big-endian.
                auto sample = [&](int ch) {
                    const std::size_t o = (static_cast<std::size_t>(c) * channels + ch) * 2;
                    return static_cast<double>((row[o] << 8) | row[o + 1]) / denom;
                };
                v = channels == 1 ? sample(0) : luma(sample(0), sample(1), sample(2));
            } else {
                auto sample = [&](int ch) {
                    return static_cast<double>(row[static_cast<std::size_t>(c) * channels + ch]) /
                           denom;
                };
                v = channels == 1 ? sample(0) : luma(sample(0), sample(1), sample(2));
            }
            img.at(r, c) = v;
        }
    }
    return img;
}

void save_png(const Image& img, const std::string& path, int bit_depth) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw io_error("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw io_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw io_error("PNG write failed: " + path);
    }
    png_init_io(png, fp);
    // Fixed settings keep output bytes identical across runs.
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h),
                 bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const int maxv = bit_depth == 16 ? 65535 : 255;
    std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * (bit_depth == 16 ? 2 : 1));
    for (int r = 0; r < img.h; ++r) {
        for (int c = 0; c < img.w; ++c) {
            const int q = quantize(img.at(r, c), maxv);
            if (bit_depth == 16) {
                row[static_cast<std::size_t>(c) * 2] = static_cast<unsigned char>(q >> 8);
                row[static_cast<std::size_t>(c) * 2 + 1] = static_cast<unsigned char>(q & 0xff);
            } else {
                row[static_cast<std::size_t>(c)] = static_cast<unsigned char>(q);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(fp) != 0) throw io_error("close failed: " + path);
}

// ---- resampling ----

// Symmetric (edge-inclusive) reflection of an out-of-range index.
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::fabs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return a * (((x - 5.0) * x + 8.0) * x - 4.0);
    return 0.0;
}

struct ResampleTap {
    int idx[4];
    double w[4];
};

std::vector<ResampleTap> bicubic_taps(int in_n, int out_n) {
    std::vector<ResampleTap> taps(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in_n) / out_n;
    for (int o = 0; o < out_n; ++o) {
        const double src = (o + 0.5) * scale - 0.5;
        const int base = static_cast<int>(std::floor(src));
        const double t = src - base;
        auto& tap = taps[static_cast<std::size_t>(o)];
        for (int k = 0; k < 4; ++k) {
            const int raw = base - 1 + k;
            tap.idx[k] = reflect_index(raw, in_n);
            tap.w[k] = cubic_weight(static_cast<double>(raw) - src);
        }
        // Kernel weights at unit-spaced taps sum to 1 analytically; normalize
        // anyway to absorb floating point residue.
        const double s = tap.w[0] + tap.w[1] + tap.w[2] + tap.w[3];
        for (double& wv : tap.w) wv /= s;
        (void)t;
    }
    return taps;
}

Image resize_bicubic(const Image& img, int out_h, int out_w) {
    const auto col_taps = bicubic_taps(img.w, out_w);
    const auto row_taps = bicubic_taps(img.h, out_h);

    // Horizontal pass, unclamped intermediate.
    std::vector<double> tmp(static_cast<std::size_t>(img.h) * out_w);
    for (int r = 0; r < img.h; ++r) {
        for (int c = 0; c < out_w; ++c) {
            const auto& tap = col_taps[static_cast<std::size_t>(c)];
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += tap.w[k] * img.at(r, tap.idx[k]);
            tmp[static_cast<std::size_t>(r) * out_w + c] = acc;
        }
    }
    // Vertical pass with final clamp.
    Image out(out_h, out_w);
    out.bit_depth_src = img.bit_depth_src;
    for (int r = 0; r < out_h; ++r) {
        const auto& tap = row_taps[static_cast<std::size_t>(r)];
        for (int c = 0; c < out_w; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += tap.w[k] * tmp[static_cast<std::size_t>(tap.idx[k]) * out_w + c];
            out.at(r, c) = std::clamp(acc, 0.0, 1.0);
        }
    }
    return out;
}

Image resize_nearest(const Image& img, int out_h, int out_w) {
    Image out(out_h, out_w);
    out.bit_depth_src = img.bit_depth_src;
    const double sy = static_cast<double>(img.h) / out_h;
    const double sx = static_cast<double>(img.w) / out_w;
    for (int r = 0; r < out_h; ++r) {
        const int sr = std::min(img.h - 1, static_cast<int>(std::floor((r + 0.5) * sy)));
        for (int c = 0; c < out_w; ++c) {
            const int sc = std::min(img.w - 1, static_cast<int>(std::floor((c + 0.5) * sx)));
            out.at(r, c) = img.at(sr, sc);
        }
    }
    return out;
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open: " + path);
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw io_error("read failed: " + path);
    return buf;
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    if (s.size() < suffix.size()) return false;
    std::string tail = s.substr(s.size() - suffix.size());
    std::transform(tail.begin(), tail.end(), tail.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return tail == suffix;
}

}  // namespace

Image::Image(int h_, int w_, double fill)
    : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_), fill) {
    if (h_ <= 0 || w_ <= 0) throw validation_error("Image: dimensions must be positive");
}

Image load_image(const std::string& path) {
    const auto buf = read_file(path);
    if (buf.size() >= 8 && buf[0] == 0x89 && buf[1] == 'P' && buf[2] == 'N' && buf[3] == 'G')
        return load_png(buf, path);
    if (buf.size() >= 2 && buf[0] == 'B' && buf[1] == 'M') return load_bmp(buf, path);
    throw io_error("unrecognized image format (expected PNG or BMP): " + path);
}

void save_image(const Image& img, const std::string& path, int bit_depth) {
    if (img.h <= 0 || img.w <= 0) throw validation_error("save_image: empty image");
    if (bit_depth != 8 && bit_depth != 16)
        throw validation_error("save_image: bit depth must be 8 or 16");
    if (has_suffix(path, ".png")) {
        save_png(img, path, bit_depth);
    } else if (has_suffix(path, ".bmp")) {
        if (bit_depth != 8) throw validation_error("save_image: BMP output is 8-bit only");
        save_bmp(img, path);
    } else {
        throw validation_error("save_image: unknown extension (use .png or .bmp): " + path);
    }
}

Image resize(const Image& img, int out_h, int out_w, ResizeMode mode) {
    if (out_h < 1 || out_w < 1) throw validation_error("resize: output size must be >= 1");
    if (img.h <= 0 || img.w <= 0) throw validation_error("resize: empty input");
    switch (mode) {
        case ResizeMode::bicubic:
            return resize_bicubic(img, out_h, out_w);
        case ResizeMode::nearest:
            return resize_nearest(img, out_h, out_w);
    }
    throw validation_error("resize: unknown mode");
}

Tensor to_chw(const Image& img) {
    Tensor t({1, img.h, img.w});
    std::copy(img.pix.begin(), img.pix.end(), t.data.begin());
    return t;
}

Image image_from_chw(const Tensor& t) {
    int h = 0, w = 0;
    if (t.ndim() == 3 && t.shape[0] == 1) {
        h = t.shape[1];
        w = t.shape[2];
    } else if (t.ndim() == 2) {
        h = t.shape[0];
        w = t.shape[1];
    } else {
        throw validation_error("image_from_chw: expected [1,H,W] or [H,W], got " + t.shape_str());
    }
    Image img(h, w);
    for (std::size_t i = 0; i < img.pix.size(); ++i)
        img.pix[i] = std::clamp(t.data[i], 0.0, 1.0);
    return img;
}

}  // namespace thermosr
