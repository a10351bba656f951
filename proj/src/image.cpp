#include "ctrlora/core/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

namespace {

struct FileCloser {
    std::FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f) throw DataError("cannot open for write: " + path.string());
    FileCloser closer{f};

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng alloc failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("png write failed: " + path.string());
    }
    png_init_io(png, f);
    // Fixed settings keep file bytes reproducible across runs.
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + 3 * static_cast<size_t>(y) * img.w);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.string().c_str(), "rb");
    if (!f) throw DataError("cannot open: " + path.string());
    FileCloser closer{f};

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng alloc failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("png read failed: " + path.string());
    }
    png_init_io(png, f);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    Image img(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)));
    if (png_get_rowbytes(png, info) != static_cast<size_t>(img.w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("unexpected png channel layout: " + path.string());
    }
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    for (int y = 0; y < img.h; ++y) rows[static_cast<size_t>(y)] = img.rgb.data() + 3 * static_cast<size_t>(y) * img.w;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Tensor image_to_tensor(const Image& img) {
    Tensor t({3, img.h, img.w});
    const int64_t hw = static_cast<int64_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const uint8_t* p = img.px(x, y);
            const int64_t s = static_cast<int64_t>(y) * img.w + x;
            for (int c = 0; c < 3; ++c) t.data[c * hw + s] = static_cast<double>(p[c]) / 127.5 - 1.0;
        }
    return t;
}

Image tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_image: expected (3, H, W), got " + t.shape_str());
    const int h = static_cast<int>(t.dim(1)), w = static_cast<int>(t.dim(2));
    Image img(w, h);
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            uint8_t* p = img.px(x, y);
            const int64_t s = static_cast<int64_t>(y) * w + x;
            for (int c = 0; c < 3; ++c) {
                double v = (t.data[c * hw + s] + 1.0) * 127.5;
                v = std::min(255.0, std::max(0.0, std::round(v)));
                p[c] = static_cast<uint8_t>(v);
            }
        }
    return img;
}

Tensor batch_slice(const Tensor& batch, int64_t i) {
    if (batch.ndim() != 4) throw ShapeError("batch_slice: expected 4-d tensor");
    const int64_t per = batch.numel() / batch.dim(0);
    Tensor out({batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy(batch.ptr() + i * per, batch.ptr() + (i + 1) * per, out.ptr());
    return out;
}

double psnr_u8(const Image& a, const Image& b, double cap_db) {
    if (!a.same_dims(b)) throw ShapeError("psnr: image size mismatch");
    double se = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = (static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i])) / 255.0;
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.rgb.size());
    if (mse <= 0.0) return cap_db;
    return std::min(cap_db, -10.0 * std::log10(mse));
}

Image make_grid(const std::vector<Image>& imgs, int cols) {
    if (imgs.empty()) throw DataError("make_grid: no images");
    const int sep = 2;
    const int rows = (static_cast<int>(imgs.size()) + cols - 1) / cols;
    const int w = imgs[0].w, h = imgs[0].h;
    Image grid(cols * w + (cols - 1) * sep, rows * h + (rows - 1) * sep);
    std::fill(grid.rgb.begin(), grid.rgb.end(), 32);
    for (size_t i = 0; i < imgs.size(); ++i) {
        const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
        for (int y = 0; y < h; ++y)
            std::memcpy(grid.px(c * (w + sep), r * (h + sep) + y), imgs[i].px(0, y), static_cast<size_t>(w) * 3);
    }
    return grid;
}

namespace {

void draw_hline(Image& img, int x0, int x1, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (y < 0 || y >= img.h) return;
    for (int x = std::max(0, x0); x <= std::min(img.w - 1, x1); ++x) {
        uint8_t* p = img.px(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }
}

void draw_dot(Image& img, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= img.w || yy >= img.h) continue;
            uint8_t* p = img.px(xx, yy);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
}

void draw_line(Image& img, int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        if (x0 >= 0 && y0 >= 0 && x0 < img.w && y0 < img.h) {
            uint8_t* p = img.px(x0, y0);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

}  // namespace

Image render_line_chart(const std::vector<ChartSeries>& series, double threshold, bool has_threshold,
                        const std::string& title, int w, int h) {
    (void)title;
    Image img(w, h);
    std::fill(img.rgb.begin(), img.rgb.end(), 250);

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (first) {
                xmin = xmax = s.x[i];
                ymin = ymax = s.y[i];
                first = false;
            }
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (has_threshold) {
        ymin = std::min(ymin, threshold);
        ymax = std::max(ymax, threshold);
    }
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;

    const int margin = 24;
    auto px = [&](double x) { return margin + static_cast<int>((x - xmin) / (xmax - xmin) * (w - 2 * margin)); };
    auto py = [&](double y) { return h - margin - static_cast<int>((y - ymin) / (ymax - ymin) * (h - 2 * margin)); };

    draw_hline(img, margin, w - margin, h - margin, 0, 0, 0);
    draw_line(img, margin, margin, margin, h - margin, 0, 0, 0);
    if (has_threshold) draw_hline(img, margin, w - margin, py(threshold), 200, 60, 60);

    static const uint8_t colors[][3] = {{40, 90, 200}, {40, 160, 70}, {200, 130, 30}, {130, 60, 180}};
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const auto* c = colors[si % 4];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), c[0], c[1], c[2]);
        for (size_t i = 0; i < s.x.size(); ++i) draw_dot(img, px(s.x[i]), py(s.y[i]), c[0], c[1], c[2]);
    }
    return img;
}

}  // namespace ctrlora
