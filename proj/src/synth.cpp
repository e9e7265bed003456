#include <algorithm>
#include <cmath>
#include <utility>

#include "biasmap/data.hpp"

namespace biasmap {

namespace {

struct Pt {
    float x, y;
};

using Stroke = std::vector<Pt>;

Stroke arc(float cx, float cy, float r, float deg0, float deg1, int segs) {
    Stroke s;
    for (int i = 0; i <= segs; ++i) {
        const float a = (deg0 + (deg1 - deg0) * i / segs) * 3.14159265f / 180.0f;
        s.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    return s;
}

Stroke circle(float cx, float cy, float r) { return arc(cx, cy, r, 0.0f, 360.0f, 18); }

// Digit skeletons in unit coordinates, y pointing down.
std::vector<Stroke> digit_template(int d) {
    switch (d) {
        case 0:
            return {arc(0.50f, 0.50f, 1.0f, 0.0f, 360.0f, 20)};  // scaled to ellipse below
        case 1:
            return {{{0.40f, 0.27f}, {0.54f, 0.14f}}, {{0.54f, 0.14f}, {0.54f, 0.86f}}};
        case 2:
            return {arc(0.50f, 0.30f, 0.22f, 180.0f, 395.0f, 10),
                    {{0.68f, 0.43f}, {0.26f, 0.84f}},
                    {{0.26f, 0.84f}, {0.76f, 0.84f}}};
        case 3:
            return {arc(0.47f, 0.32f, 0.20f, 200.0f, 410.0f, 10),
                    arc(0.46f, 0.67f, 0.23f, 280.0f, 520.0f, 12)};
        case 4:
            return {{{0.63f, 0.12f}, {0.24f, 0.58f}},
                    {{0.24f, 0.58f}, {0.80f, 0.58f}},
                    {{0.66f, 0.32f}, {0.66f, 0.88f}}};
        case 5:
            return {{{0.72f, 0.14f}, {0.32f, 0.14f}},
                    {{0.32f, 0.14f}, {0.30f, 0.46f}},
                    arc(0.47f, 0.63f, 0.24f, 240.0f, 480.0f, 12)};
        case 6:
            return {{{0.66f, 0.13f}, {0.52f, 0.20f}, {0.42f, 0.33f}, {0.36f, 0.48f}, {0.35f, 0.62f}},
                    circle(0.51f, 0.67f, 0.16f)};
        case 7:
            return {{{0.26f, 0.15f}, {0.76f, 0.15f}}, {{0.76f, 0.15f}, {0.42f, 0.86f}}};
        case 8:
            return {circle(0.50f, 0.31f, 0.165f), circle(0.50f, 0.685f, 0.195f)};
        case 9:
            return {circle(0.50f, 0.33f, 0.175f),
                    {{0.675f, 0.36f}, {0.66f, 0.60f}, {0.56f, 0.86f}}};
        default:
            throw std::invalid_argument("digit_template: digit out of range");
    }
}

float dist_point_segment(float px, float py, Pt a, Pt b) {
    const float dx = b.x - a.x, dy = b.y - a.y;
    const float len2 = dx * dx + dy * dy;
    float t = len2 > 0.0f ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0f;
    t = std::clamp(t, 0.0f, 1.0f);
    const float ex = px - (a.x + t * dx), ey = py - (a.y + t * dy);
    return std::sqrt(ex * ex + ey * ey);
}

Tensor render_digit(int digit, Rng& rng) {
    // Jitter parameters; draw order is fixed so output is reproducible.
    const float rot = rng.uniform(-0.16f, 0.16f);
    const float scl = rng.uniform(0.82f, 1.08f);
    const float shear = rng.uniform(-0.13f, 0.13f);
    const float tx = rng.uniform(-1.6f, 1.6f);
    const float ty = rng.uniform(-1.6f, 1.6f);
    const float halfwidth = rng.uniform(0.75f, 1.25f);
    const float peak = rng.uniform(0.72f, 1.0f);

    const float ca = std::cos(rot), sa = std::sin(rot);
    // Digits live in a centered 20x20 box, borders stay blank like MNIST.
    const float box = 20.0f, cx = 14.0f, cy = 14.0f;

    std::vector<Stroke> strokes = digit_template(digit);
    for (Stroke& s : strokes) {
        for (Pt& p : s) {
            float ux = p.x, uy = p.y;
            if (digit == 0) {  // template holds a unit circle; make it an ellipse
                ux = 0.5f + (ux - 0.5f) * 0.26f;
                uy = 0.5f + (uy - 0.5f) * 0.36f;
            }
            // Point wobble gives handwriting-like variation.
            ux += rng.uniform(-0.022f, 0.022f);
            uy += rng.uniform(-0.022f, 0.022f);
            float x = (ux - 0.5f) * box, y = (uy - 0.5f) * box;
            x += shear * y;
            const float rx = ca * x - sa * y, ry = sa * x + ca * y;
            p.x = cx + scl * rx + tx;
            p.y = cy + scl * ry + ty;
        }
    }

    Tensor img = Tensor::zeros({1, kImageRows, kImageCols});
    const float aa = 0.9f;
    for (const Stroke& s : strokes) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const Pt a = s[i], b = s[i + 1];
            const float reach = halfwidth + aa;
            const int r0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - reach)));
            const int r1 = std::min(kImageRows - 1,
                                    static_cast<int>(std::ceil(std::max(a.y, b.y) + reach)));
            const int c0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - reach)));
            const int c1 = std::min(kImageCols - 1,
                                    static_cast<int>(std::ceil(std::max(a.x, b.x) + reach)));
            for (int r = r0; r <= r1; ++r) {
                for (int c = c0; c <= c1; ++c) {
                    const float d = dist_point_segment(static_cast<float>(c), static_cast<float>(r), a, b);
                    const float v = peak * std::clamp((halfwidth + aa - d) / aa, 0.0f, 1.0f);
                    float& px = img.data[r * kImageCols + c];
                    px = std::max(px, v);
                }
            }
        }
    }
    return img;
}

}  // namespace

LabeledDataset synthesize_digits(int count, std::uint64_t seed) {
    LabeledDataset ds;
    ds.images.reserve(count);
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
        const int digit = i % kCategories;
        ds.push(render_digit(digit, rng), digit);
    }
    // Decorrelate sample order from the label cycle.
    std::vector<int> perm(count);
    for (int i = 0; i < count; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 0x0bfu));
    rng.shuffle(perm);
    LabeledDataset out;
    out.images.reserve(count);
    for (int i : perm) out.push(std::move(ds.images[i]), ds.labels[i]);
    return out;
}

}  // namespace biasmap
