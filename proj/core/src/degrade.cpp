#include "thermosr/degrade.hpp"

#include <algorithm>
#include <cmath>

#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"

namespace thermosr {

namespace {

constexpr int kSupersample = 4;  // per axis: 16 points per cell
constexpr double kPi = 3.14159265358979323846;

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

// Integer hit counts per cell, normalized at the end; equal counts stay
// exactly equal, which keeps the symmetry properties bit-exact.
Tensor normalize_counts(const std::vector<long>& counts, int size) {
    long total = 0;
    for (long c : counts) total += c;
    if (total <= 0) throw validation_error("kernel rasterization produced an empty kernel");
    Tensor k({size, size});
    for (int i = 0; i < size * size; ++i)
        k.data[static_cast<std::size_t>(i)] =
            static_cast<double>(counts[static_cast<std::size_t>(i)]) / static_cast<double>(total);
    return k;
}

double supersample_offset(int s) {
    return (s + 0.5) / kSupersample - 0.5;
}

}  // namespace

const char* to_string(DegradationKind k) {
    return k == DegradationKind::defocus ? "defocus" : "motion";
}

DegradationKind degradation_from_string(const std::string& s) {
    if (s == "defocus") return DegradationKind::defocus;
    if (s == "motion") return DegradationKind::motion;
    throw validation_error("unknown degradation kind: " + s);
}

void DegradationSpec::validate() const {
    if (scale < 2) throw validation_error("DegradationSpec: scale must be >= 2");
    if (kind == DegradationKind::defocus) {
        if (defocus_radius < 0.5 || defocus_radius > 6.0)
            throw validation_error("DegradationSpec: defocus radius must lie in [0.5, 6.0]");
    } else {
        if (motion_length < 3.0 || motion_length > 15.0)
            throw validation_error("DegradationSpec: motion length must lie in [3, 15]");
        if (motion_angle < 0.0 || motion_angle >= kPi)
            throw validation_error("DegradationSpec: motion angle must lie in [0, pi)");
    }
    if (noise_sigma < 0.0) throw validation_error("DegradationSpec: negative noise sigma");
    if (misalign_px < 0.0 || misalign_px > 1.0)
        throw validation_error("DegradationSpec: misalignment must lie in [0, 1] LR px");
}

Tensor defocus_kernel(double radius) {
    if (radius < 0.5) throw validation_error("defocus_kernel: radius must be >= 0.5");
    const int half = static_cast<int>(std::ceil(radius + 0.5));
    const int size = 2 * half + 1;
    std::vector<long> counts(static_cast<std::size_t>(size) * size, 0);
    const double r2 = radius * radius;
    for (int i = -half; i <= half; ++i) {
        for (int j = -half; j <= half; ++j) {
            long c = 0;
            for (int si = 0; si < kSupersample; ++si) {
                const double y = i + supersample_offset(si);
                for (int sj = 0; sj < kSupersample; ++sj) {
                    const double x = j + supersample_offset(sj);
                    if (x * x + y * y <= r2) ++c;
                }
            }
            counts[static_cast<std::size_t>(i + half) * size + (j + half)] = c;
        }
    }
    return normalize_counts(counts, size);
}

Tensor motion_kernel(double length, double angle) {
    if (length < 1.0) throw validation_error("motion_kernel: length must be >= 1");
    // Coverage region is a rectangle of length L and width 1 centered at the
    // origin and oriented along the motion direction; hard caps keep the
    // axis-aligned case exactly uniform (L taps of 1/L for integer L).
    const double half_len = length / 2.0;
    const int half = static_cast<int>(std::ceil(half_len + 0.5));
    const int size = 2 * half + 1;
    const double dx = std::cos(angle), dy = std::sin(angle);
    std::vector<long> counts(static_cast<std::size_t>(size) * size, 0);
    for (int i = -half; i <= half; ++i) {
        for (int j = -half; j <= half; ++j) {
            long c = 0;
            for (int si = 0; si < kSupersample; ++si) {
                const double y = i + supersample_offset(si);
                for (int sj = 0; sj < kSupersample; ++sj) {
                    const double x = j + supersample_offset(sj);
                    const double along = x * dx + y * dy;
                    const double perp = y * dx - x * dy;
                    if (std::abs(along) <= half_len && std::abs(perp) <= 0.5) ++c;
                }
            }
            counts[static_cast<std::size_t>(i + half) * size + (j + half)] = c;
        }
    }
    return normalize_counts(counts, size);
}

Image convolve_reflect(const Image& img, const Tensor& kernel) {
    if (kernel.ndim() != 2 || kernel.shape[0] % 2 == 0 || kernel.shape[1] % 2 == 0)
        throw validation_error("convolve_reflect: kernel must be odd-sized 2-D");
    const int kh = kernel.shape[0], kw = kernel.shape[1];
    const int ch = kh / 2, cw = kw / 2;
    Image out(img.h, img.w);
    out.bit_depth_src = img.bit_depth_src;
    for (int i = 0; i < img.h; ++i) {
        for (int j = 0; j < img.w; ++j) {
            double acc = 0.0;
            for (int u = 0; u < kh; ++u) {
                const int ii = reflect_index(i + u - ch, img.h);
                for (int v = 0; v < kw; ++v) {
                    const double kv = kernel.at(u, v);
                    if (kv == 0.0) continue;
                    acc += kv * img.at(ii, reflect_index(j + v - cw, img.w));
                }
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

namespace {

// Sub-pixel translation with bilinear sampling and symmetric padding.
Image translate_bilinear(const Image& img, double dy, double dx) {
    Image out(img.h, img.w);
    out.bit_depth_src = img.bit_depth_src;
    for (int i = 0; i < img.h; ++i) {
        for (int j = 0; j < img.w; ++j) {
            const double sy = i - dy, sx = j - dx;
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            const double fy = sy - y0, fx = sx - x0;
            auto px = [&](int y, int x) {
                return img.at(reflect_index(y, img.h), reflect_index(x, img.w));
            };
            out.at(i, j) = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
        }
    }
    return out;
}

}  // namespace

DegradedPair degrade_pair(const Image& hr, const DegradationSpec& spec) {
    spec.validate();
    if (hr.h % spec.scale != 0 || hr.w % spec.scale != 0)
        throw validation_error("degrade_pair: HR dims must be divisible by the scale factor");

    const Image* src = &hr;
    Image shifted;
    if (spec.misalign_px > 0.0) {
        Rng jr(derive_seed(spec.seed, "misalign"));
        const double m = spec.misalign_px * spec.scale;  // LR px -> HR px
        shifted = translate_bilinear(hr, jr.uniform(-m, m), jr.uniform(-m, m));
        src = &shifted;
    }

    const Tensor kernel = spec.kind == DegradationKind::defocus
                              ? defocus_kernel(spec.defocus_radius)
                              : motion_kernel(spec.motion_length, spec.motion_angle);
    const Image blurred = convolve_reflect(*src, kernel);
    Image lr = resize(blurred, hr.h / spec.scale, hr.w / spec.scale, ResizeMode::bicubic);

    if (spec.noise_sigma > 0.0) {
        Rng nr(derive_seed(spec.seed, "noise"));
        for (double& v : lr.pix)
            v = std::clamp(v + nr.normal(0.0, spec.noise_sigma), 0.0, 1.0);
    }
    return {std::move(lr), hr, spec.kind};
}

namespace {

struct Point {
    double x, y;
};

// Crossing-number point-in-polygon; vertices are angle-sorted around the
// centroid so the polygon is simple (star-shaped).
bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
    bool in = false;
    const std::size_t n = poly.size();
    for (std::size_t a = 0, b = n - 1; a < n; b = a++) {
        const bool crosses = (poly[a].y > y) != (poly[b].y > y);
        if (!crosses) continue;
        const double xint =
            poly[b].x + (y - poly[b].y) / (poly[a].y - poly[b].y) * (poly[a].x - poly[b].x);
        if (x < xint) in = !in;
    }
    return in;
}

Image compose_scene(Rng& r, int h, int w) {
    Image img(h, w);
    const double dim = std::min(h, w);

    // Cool background plane.
    const double theta = r.uniform(0.0, 2.0 * kPi);
    const double lo = r.uniform(0.02, 0.07);
    const double hi = r.uniform(0.18, 0.32);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double proj = (j / (w - 1.0) - 0.5) * ct + (i / (h - 1.0) - 0.5) * st;
            img.at(i, j) = lo + (hi - lo) * std::clamp(0.5 + proj, 0.0, 1.0);
        }

    // Sharp-edged structures at intermediate intensity, painted opaquely.
    const int n_poly = 1 + r.uniform_int(3);
    std::vector<Point> all_vertices;
    for (int pidx = 0; pidx < n_poly; ++pidx) {
        const double cx = r.uniform(0.15, 0.85) * w;
        const double cy = r.uniform(0.15, 0.85) * h;
        const double radius = r.uniform(0.10, 0.22) * dim;
        const int nv = 3 + r.uniform_int(4);
        std::vector<double> angles(static_cast<std::size_t>(nv));
        for (double& a : angles) a = r.uniform(0.0, 2.0 * kPi);
        std::sort(angles.begin(), angles.end());
        std::vector<Point> poly;
        for (double a : angles) {
            const double vr = radius * r.uniform(0.7, 1.3);
            poly.push_back({cx + vr * std::cos(a), cy + vr * std::sin(a)});
        }
        const double fill = r.uniform(0.35, 0.60);
        // Conservative bounding box keeps the inclusion test cheap.
        double bx0 = w, bx1 = 0, by0 = h, by1 = 0;
        for (const auto& p : poly) {
            bx0 = std::min(bx0, p.x);
            bx1 = std::max(bx1, p.x);
            by0 = std::min(by0, p.y);
            by1 = std::max(by1, p.y);
        }
        for (int i = std::max(0, static_cast<int>(by0)); i <= std::min(h - 1, static_cast<int>(by1)); ++i)
            for (int j = std::max(0, static_cast<int>(bx0)); j <= std::min(w - 1, static_cast<int>(bx1)); ++j)
                if (inside_polygon(poly, j + 0.0, i + 0.0)) img.at(i, j) = fill;
        all_vertices.insert(all_vertices.end(), poly.begin(), poly.end());
    }

    // Heat blobs. The first is guaranteed hot; one sits near a polygon
    // vertex (jittered off it) so peaks and edges misalign by design.
    const int n_blob = 1 + r.uniform_int(4);
    for (int b = 0; b < n_blob; ++b) {
        double cx, cy;
        if (b == 0 && !all_vertices.empty()) {
            const auto& v = all_vertices[static_cast<std::size_t>(
                r.uniform_int(static_cast<int>(all_vertices.size())))];
            cx = v.x + r.uniform(-0.05, 0.05) * dim;
            cy = v.y + r.uniform(-0.05, 0.05) * dim;
        } else {
            cx = r.uniform(0.1, 0.9) * w;
            cy = r.uniform(0.1, 0.9) * h;
        }
        const double sigma = r.uniform(dim / 16.0, dim / 7.0);
        const double amp = b == 0 ? r.uniform(0.85, 1.0) : r.uniform(0.25, 0.6);
        const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double dx = j - cx, dy = i - cy;
                img.at(i, j) += amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
    }

    for (double& v : img.pix) v = std::clamp(v, 0.0, 1.0);
    return img;
}

}  // namespace

Image synth_scene(std::uint64_t seed, int h, int w) {
    if (h < 32 || w < 32) throw validation_error("synth_scene: dimensions must be >= 32");
    for (int attempt = 0; attempt < 200; ++attempt) {
        Rng r(derive_seed(seed, "scene", static_cast<std::uint64_t>(attempt)));
        Image img = compose_scene(r, h, w);
        double mn = 1.0, mx = 0.0;
        for (double v : img.pix) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        if (mx > 0.9 && mn < 0.1) return img;
    }
    // 200 independent draws each succeed with high probability; reaching
    // this line indicates a broken generator, not bad luck.
    throw std::runtime_error("synth_scene: rejection sampling failed to satisfy contrast bounds");
}

}  // namespace thermosr
