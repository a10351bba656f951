#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctrlora/core/tensor.hpp"

namespace ctrlora {

// 8-bit interleaved RGB.
struct Image {
    int w = 0, h = 0;
    std::vector<uint8_t> rgb;

    Image() = default;
    Image(int w_, int h_) : w(w_), h(h_), rgb(static_cast<size_t>(w_) * h_ * 3, 0) {}

    uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<size_t>(y) * w + x); }
    const uint8_t* px(int x, int y) const { return rgb.data() + 3 * (static_cast<size_t>(y) * w + x); }
    bool same_dims(const Image& o) const { return w == o.w && h == o.h; }
};

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// [-1, 1] float tensor (3, H, W) <-> 8-bit image. to_image clamps.
Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

// Batch (N, 3, H, W) -> single (3, H, W) slice.
Tensor batch_slice(const Tensor& batch, int64_t i);

// PSNR between two images over [0,1]-scaled channels, capped (zero-MSE pairs
// report the cap instead of infinity).
double psnr_u8(const Image& a, const Image& b, double cap_db = 99.0);

// Tile images row-major into a grid with a 2px separator.
Image make_grid(const std::vector<Image>& imgs, int cols);

// Minimal line chart used by the report command.
struct ChartSeries {
    std::vector<double> x, y;
};
Image render_line_chart(const std::vector<ChartSeries>& series, double threshold, bool has_threshold,
                        const std::string& title, int w = 640, int h = 360);

}  // namespace ctrlora
