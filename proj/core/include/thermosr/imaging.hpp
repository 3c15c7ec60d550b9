#pragma once

#include <string>
#include <vector>

#include "thermosr/tensor.hpp"

namespace thermosr {

// Single-channel image with pixels in [0,1]. Infrared is radiometrically
// scalar, so 3-channel sources are collapsed to BT.601 luma at load time and
// everything downstream is grayscale. bit_depth_src records the container
// depth for provenance; it does not affect processing.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<double> pix;  // row-major, h*w
    int bit_depth_src = 8;

    Image() = default;
    Image(int h_, int w_, double fill = 0.0);

    double& at(int i, int j) { return pix[static_cast<std::size_t>(i) * w + j]; }
    double at(int i, int j) const { return pix[static_cast<std::size_t>(i) * w + j]; }
};

// Reads BMP (uncompressed 8-bit palettized or 24-bit) or PNG (8/16-bit,
// gray or RGB). The format is sniffed from magic bytes, not the extension.
// Values are normalized by (2^depth - 1). Alpha channels are rejected.
Image load_image(const std::string& path);

// Writes by extension: .png (8- or 16-bit grayscale) or .bmp (8-bit
// palettized grayscale; 16-bit BMP is not supported). Quantization rounds
// half up; pixels are clamped to [0,1] first. Output bytes are deterministic
// for identical inputs.
void save_image(const Image& img, const std::string& path, int bit_depth = 8);

enum class ResizeMode { bicubic, nearest };

// Separable resampling with half-pixel centers. Bicubic uses the
// Catmull-Rom-style kernel (a = -0.5) with symmetric (edge-inclusive)
// padding and clamps the result to [0,1]. Nearest at the original size is
// the identity.
Image resize(const Image& img, int out_h, int out_w, ResizeMode mode);

// [1,H,W] feature view of an image.
Tensor to_chw(const Image& img);
// Converts a [1,H,W] or [H,W] tensor back to an image, clamping to [0,1].
Image image_from_chw(const Tensor& t);

}  // namespace thermosr
