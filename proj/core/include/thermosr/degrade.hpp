#pragma once

#include <cstdint>
#include <string>

#include "thermosr/imaging.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr {

enum class DegradationKind { defocus, motion };

const char* to_string(DegradationKind k);
DegradationKind degradation_from_string(const std::string& s);

// Parameters of one simulated acquisition. The seed makes the noise (and the
// optional sub-pixel jitter) reproducible per sample.
struct DegradationSpec {
    DegradationKind kind = DegradationKind::defocus;
    double defocus_radius = 2.0;  // px, [0.5, 6.0]
    double motion_length = 7.0;   // px, [3, 15]
    double motion_angle = 0.0;    // radians, [0, pi)
    double noise_sigma = 0.01;
    int scale = 4;
    std::uint64_t seed = 0;
    // Sub-pixel LR-vs-HR misalignment in LR pixels (<= 1): the HR frame is
    // translated before blurring so the stored HR and the LR disagree
    // slightly, mimicking uncorrected registration error. 0 disables.
    double misalign_px = 0.0;

    void validate() const;
};

// Anti-aliased disk point-spread function. Every entry >= 0, entries sum to
// 1 within 1e-9. Coverage is rasterized at 4x supersampling per axis
// (16 points per cell), so the array is exactly 4-fold rotation symmetric.
Tensor defocus_kernel(double radius);

// Anti-aliased line-segment PSF through the kernel center: points within
// 0.5 px of a segment of the given total length at the given angle.
// Same normalization and supersampling as defocus_kernel.
Tensor motion_kernel(double length, double angle);

// Correlation with symmetric (edge-inclusive) padding. The kernels above are
// centrally symmetric, so correlation and convolution coincide.
Image convolve_reflect(const Image& img, const Tensor& kernel);

struct DegradedPair {
    Image lr;
    Image hr;
    DegradationKind kind;
};

// LR = clip(bicubic_down(hr (x) kernel, H/s, W/s) + N(0, sigma), 0, 1).
// The returned HR is the untouched input; misalignment only shifts the
// frame the LR is derived from.
DegradedPair degrade_pair(const Image& hr, const DegradationSpec& spec);

// Synthetic infrared-like scene: cool background gradient, 1-3 sharp-edged
// polygons at intermediate intensity, 1-4 Gaussian heat blobs. Blob centers
// deliberately sit near, not on, polygon structure so heat peaks and edges
// misalign. Rejection-resampled until the scene has at least one pixel
// above 0.9 and one below 0.1.
Image synth_scene(std::uint64_t seed, int h, int w);

}  // namespace thermosr
