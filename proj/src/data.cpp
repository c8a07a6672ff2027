#include "dacnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dacnet::data {

namespace {

// 5x7 digit glyphs, row-major, one bit per cell.
constexpr uint8_t kGlyphs[10][7] = {
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
};

float glyph_cell(int digit, int gx, int gy) {
    if (gx < 0 || gx >= 5 || gy < 0 || gy >= 7) return 0.0f;
    return (kGlyphs[digit][gy] >> (4 - gx)) & 1 ? 1.0f : 0.0f;
}

// Bilinear sample of the glyph bitmap at continuous cell coordinates.
float glyph_sample(int digit, float u, float v) {
    float fu = std::floor(u), fv = std::floor(v);
    int x0 = static_cast<int>(fu), y0 = static_cast<int>(fv);
    float ax = u - fu, ay = v - fv;
    float v00 = glyph_cell(digit, x0, y0), v10 = glyph_cell(digit, x0 + 1, y0);
    float v01 = glyph_cell(digit, x0, y0 + 1), v11 = glyph_cell(digit, x0 + 1, y0 + 1);
    return (v00 * (1 - ax) + v10 * ax) * (1 - ay) + (v01 * (1 - ax) + v11 * ax) * ay;
}

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

float smoothstep01(float t) {
    t = clamp01(t);
    return t * t * (3.0f - 2.0f * t);
}

struct GlyphParams {
    int digit = 0;
    float angle = 0.0f;      // radians
    float shear = 0.0f;
    float scl = 1.0f;
    float tx = 0.0f, ty = 0.0f;  // pixels
    float thresh = 0.45f;
    float soft = 0.25f;
    float fg = 0.95f;
    float bg = 0.04f;
};

// Grayscale glyph rendering: inverse-affine map from image pixels into glyph
// cell space, thresholded softly so stroke thickness varies per sample.
void render_glyph(const GlyphParams& p, int size, float* out) {
    float center = 0.5f * static_cast<float>(size);
    // glyph height (7 cells) spans about 62% of the image
    float cell = 0.62f * static_cast<float>(size) / 7.0f * p.scl;
    float cos_a = std::cos(p.angle), sin_a = std::sin(p.angle);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            float px = static_cast<float>(x) + 0.5f - center - p.tx;
            float py = static_cast<float>(y) + 0.5f - center - p.ty;
            float rx = px * cos_a + py * sin_a;
            float ry = -px * sin_a + py * cos_a;
            rx -= p.shear * ry;
            float u = rx / cell + 2.5f - 0.5f;
            float v = ry / cell + 3.5f - 0.5f;
            float field = glyph_sample(p.digit, u, v);
            float ink = smoothstep01((field - p.thresh) / (2.0f * p.soft) + 0.5f);
            out[y * size + x] = p.bg + (p.fg - p.bg) * ink;
        }
    }
}

void hsv_to_rgb(float h, float s, float v, float* rgb) {
    h = h - std::floor(h);
    float c = v * s;
    float hp = h * 6.0f;
    float xval = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = xval; }
    else if (hp < 2) { r = xval; g = c; }
    else if (hp < 3) { g = c; b = xval; }
    else if (hp < 4) { g = xval; b = c; }
    else if (hp < 5) { r = xval; b = c; }
    else { r = c; b = xval; }
    float m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

void separable_blur(float* img, int size, float sigma, std::vector<float>& scratch) {
    int radius = std::max(1, static_cast<int>(std::ceil(2.0f * sigma)));
    std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
    float acc = 0.0f;
    for (int i = -radius; i <= radius; ++i) {
        float w = std::exp(-0.5f * static_cast<float>(i * i) / (sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = w;
        acc += w;
    }
    for (float& w : kernel) w /= acc;
    scratch.resize(static_cast<size_t>(size * size));
    auto clampi = [size](int v) { return v < 0 ? 0 : (v >= size ? size - 1 : v); };
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float s = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[static_cast<size_t>(i + radius)] * img[y * size + clampi(x + i)];
            scratch[static_cast<size_t>(y * size + x)] = s;
        }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float s = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                s += kernel[static_cast<size_t>(i + radius)] * scratch[static_cast<size_t>(clampi(y + i) * size + x)];
            img[y * size + x] = s;
        }
}

// Applies the domain transform to a 3-channel image (channel-planar layout).
void apply_transform(const DomainRecipe& recipe, int size, Rng& rng, float* img) {
    int64_t plane = static_cast<int64_t>(size) * size;
    switch (recipe.transform) {
        case DomainTransform::clean:
            break;
        case DomainTransform::inverted:
            for (int64_t i = 0; i < 3 * plane; ++i) img[i] = 1.0f - img[i];
            break;
        case DomainTransform::gaussian_noise: {
            for (int64_t i = 0; i < plane; ++i) {
                float n = rng.normal(0.0f, recipe.noise_sigma);
                for (int ch = 0; ch < 3; ++ch)
                    img[ch * plane + i] = clamp01(img[ch * plane + i] + n);
            }
            break;
        }
        case DomainTransform::stripe_background: {
            float theta = rng.uniform(0.0f, 3.14159265f);
            float period = rng.uniform(4.0f, 9.0f);
            float phase = rng.uniform(0.0f, 1.0f);
            float cth = std::cos(theta), sth = std::sin(theta);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    float t = (static_cast<float>(x) * cth + static_cast<float>(y) * sth) / period + phase;
                    float stripe = (t - std::floor(t)) < 0.5f ? 1.0f : 0.0f;
                    for (int ch = 0; ch < 3; ++ch) {
                        int64_t off = ch * plane + y * size + x;
                        img[off] = clamp01(img[off] + recipe.stripe_amp * stripe);
                    }
                }
            break;
        }
        case DomainTransform::hue_shift: {
            float hue = recipe.hue_base + rng.uniform(-0.08f, 0.08f);
            float rgb[3];
            hsv_to_rgb(hue, 0.85f, 1.0f, rgb);
            for (int64_t i = 0; i < plane; ++i) {
                float g = img[i];  // channels identical before colorization
                for (int ch = 0; ch < 3; ++ch) img[ch * plane + i] = g * rgb[ch];
            }
            break;
        }
        case DomainTransform::blur: {
            float sigma = recipe.blur_sigma * rng.uniform(0.8f, 1.2f);
            std::vector<float> scratch;
            for (int ch = 0; ch < 3; ++ch) separable_blur(img + ch * plane, size, sigma, scratch);
            break;
        }
    }
}

uint64_t transform_tag(const DomainRecipe& r) {
    return hash_tag("transform-" + std::to_string(static_cast<int>(r.transform)));
}

}  // namespace

DomainRecipe recipe_from_name(const std::string& name) {
    DomainRecipe r;
    r.name = name;
    if (name == "clean") r.transform = DomainTransform::clean;
    else if (name == "inverted") r.transform = DomainTransform::inverted;
    else if (name == "noise") r.transform = DomainTransform::gaussian_noise;
    else if (name == "stripes") r.transform = DomainTransform::stripe_background;
    else if (name == "hue") r.transform = DomainTransform::hue_shift;
    else if (name == "blur") r.transform = DomainTransform::blur;
    else
        throw UsageError("unknown domain recipe '" + name +
                         "' (valid: clean, inverted, noise, stripes, hue, blur)");
    return r;
}

std::vector<std::string> recipe_names() {
    return {"clean", "inverted", "noise", "stripes", "hue", "blur"};
}

std::vector<DomainDataset> generate_synthetic(const std::vector<DomainRecipe>& recipes,
                                              int n_per_domain, int num_classes, int image_size,
                                              uint64_t seed) {
    if (num_classes < 2 || num_classes > 10)
        throw ConfigError("generate_synthetic: num_classes must be in [2, 10], got " +
                          std::to_string(num_classes));
    if (image_size != 28 && image_size != 32)
        throw ConfigError("generate_synthetic: image_size must be 28 or 32, got " +
                          std::to_string(image_size));
    if (n_per_domain < 1) throw ConfigError("generate_synthetic: n_per_domain must be >= 1");

    int64_t plane = static_cast<int64_t>(image_size) * image_size;
    std::vector<float> gray(static_cast<size_t>(plane));

    std::vector<DomainDataset> out(recipes.size());
    for (size_t d = 0; d < recipes.size(); ++d) {
        out[d].domain_id = static_cast<int>(d);
        out[d].name = recipes[d].name;
        out[d].num_classes = num_classes;
        out[d].images = Tensor::zeros({n_per_domain, 3, image_size, image_size});
        out[d].labels = std::vector<int>(static_cast<size_t>(n_per_domain));
    }

    for (int i = 0; i < n_per_domain; ++i) {
        int digit = i % num_classes;
        // Content stream: identical across domains so every domain renders
        // the same glyph population.
        Rng content(mix_seed(seed, hash_tag("content"), static_cast<uint64_t>(i)));
        GlyphParams p;
        p.digit = digit;
        p.angle = content.uniform(-0.26f, 0.26f);  // about +/-15 degrees
        p.shear = content.uniform(-0.15f, 0.15f);
        p.scl = content.uniform(0.85f, 1.15f);
        float max_shift = 0.06f * static_cast<float>(image_size);
        p.tx = content.uniform(-max_shift, max_shift);
        p.ty = content.uniform(-max_shift, max_shift);
        p.thresh = content.uniform(0.30f, 0.55f);
        p.fg = content.uniform(0.80f, 1.00f);
        p.bg = content.uniform(0.00f, 0.08f);
        render_glyph(p, image_size, gray.data());

        for (size_t d = 0; d < recipes.size(); ++d) {
            float* dst = out[d].images.raw_data().data() + static_cast<int64_t>(i) * 3 * plane;
            for (int ch = 0; ch < 3; ++ch)
                std::memcpy(dst + ch * plane, gray.data(), sizeof(float) * gray.size());
            Rng trng(mix_seed(seed, transform_tag(recipes[d]), static_cast<uint64_t>(i)));
            apply_transform(recipes[d], image_size, trng, dst);
            (*out[d].labels)[static_cast<size_t>(i)] = digit;
        }
    }
    return out;
}

// ---- augmentation ----------------------------------------------------------

namespace {

// Bilinear lookup with clamp-to-edge; exact copy for integral coordinates.
float sample_clamped(const float* plane, int64_t h, int64_t w, float sy, float sx) {
    float fx = std::floor(sx), fy = std::floor(sy);
    int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
    float ax = sx - fx, ay = sy - fy;
    auto cx = [w](int64_t v) { return v < 0 ? 0 : (v >= w ? w - 1 : v); };
    auto cy = [h](int64_t v) { return v < 0 ? 0 : (v >= h ? h - 1 : v); };
    float v00 = plane[cy(y0) * w + cx(x0)];
    float v10 = plane[cy(y0) * w + cx(x0 + 1)];
    float v01 = plane[cy(y0 + 1) * w + cx(x0)];
    float v11 = plane[cy(y0 + 1) * w + cx(x0 + 1)];
    return (v00 * (1 - ax) + v10 * ax) * (1 - ay) + (v01 * (1 - ax) + v11 * ax) * ay;
}

enum StrongOp { kContrast = 0, kBrightness, kCutout, kInvert, kNoise, kStrongOpCount };

}  // namespace

void augment_into(const float* src, float* dst, int64_t c, int64_t h, int64_t w,
                  const AugmentationPolicy& policy, Rng& rng) {
    int64_t plane = h * w;
    if (policy.magnitude == 0.0f) {
        std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(c * plane));
        return;
    }
    bool strong = policy.kind == AugmentationPolicy::Kind::strong;
    float mag = policy.magnitude;
    float shift_range = (strong ? 0.25f : 0.125f) * mag * static_cast<float>(w);
    float rot_range = (strong ? 20.0f : 10.0f) * mag * 3.14159265f / 180.0f;

    float tx = rng.uniform(-shift_range, shift_range);
    float ty = rng.uniform(-shift_range, shift_range);
    float angle = rng.uniform(-rot_range, rot_range);
    float cos_a = std::cos(angle), sin_a = std::sin(angle);
    float cxm = 0.5f * static_cast<float>(w), cym = 0.5f * static_cast<float>(h);
    for (int64_t ch = 0; ch < c; ++ch) {
        const float* sp = src + ch * plane;
        float* dp = dst + ch * plane;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                float px = static_cast<float>(x) + 0.5f - cxm - tx;
                float py = static_cast<float>(y) + 0.5f - cym - ty;
                float rx = px * cos_a + py * sin_a + cxm - 0.5f;
                float ry = -px * sin_a + py * cos_a + cym - 0.5f;
                dp[y * w + x] = sample_clamped(sp, h, w, ry, rx);
            }
    }

    if (strong) {
        // two distinct ops from the menu, applied in menu order
        int first = rng.uniform_int(kStrongOpCount);
        int second = rng.uniform_int(kStrongOpCount - 1);
        if (second >= first) ++second;
        // parameters are always drawn in menu order so the stream stays
        // aligned regardless of which ops were chosen
        float contrast = rng.uniform(1.0f - 0.4f * mag, 1.0f + 0.4f * mag);
        float brightness = rng.uniform(-0.25f * mag, 0.25f * mag);
        int64_t cut_w = static_cast<int64_t>(rng.uniform(0.25f, 0.5f) * mag * static_cast<float>(w));
        int64_t cut_h = static_cast<int64_t>(rng.uniform(0.25f, 0.5f) * mag * static_cast<float>(h));
        int64_t cut_x = cut_w < w ? rng.uniform_int(static_cast<int>(w - cut_w + 1)) : 0;
        int64_t cut_y = cut_h < h ? rng.uniform_int(static_cast<int>(h - cut_h + 1)) : 0;
        float noise_sigma = rng.uniform(0.0f, 0.1f * mag);
        std::vector<float> noise(static_cast<size_t>(plane));
        for (auto& nv : noise) nv = rng.normal(0.0f, 1.0f);

        for (int op : {std::min(first, second), std::max(first, second)}) {
            switch (op) {
                case kContrast:
                    for (int64_t i = 0; i < c * plane; ++i)
                        dst[i] = (dst[i] - 0.5f) * contrast + 0.5f;
                    break;
                case kBrightness:
                    for (int64_t i = 0; i < c * plane; ++i) dst[i] += brightness;
                    break;
                case kCutout:
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t y = cut_y; y < std::min(h, cut_y + cut_h); ++y)
                            for (int64_t x = cut_x; x < std::min(w, cut_x + cut_w); ++x)
                                dst[ch * plane + y * w + x] = 0.0f;
                    break;
                case kInvert:
                    for (int64_t i = 0; i < c * plane; ++i) dst[i] = 1.0f - dst[i];
                    break;
                case kNoise:
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t i = 0; i < plane; ++i)
                            dst[ch * plane + i] += noise_sigma * noise[static_cast<size_t>(i)];
                    break;
                default:
                    break;
            }
        }
    }
    for (int64_t i = 0; i < c * plane; ++i) dst[i] = clamp01(dst[i]);
}

Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng) {
    if (image.rank() != 3)
        throw DimensionError("augment: expected C x H x W image, got " + shape_str(image.shape()));
    Tensor out = Tensor::zeros(image.shape());
    augment_into(image.data().data(), out.raw_data().data(), image.dim(0), image.dim(1),
                 image.dim(2), policy, rng);
    return out;
}

// ---- IDX ------------------------------------------------------------------

namespace {

uint32_t read_u32_be(std::ifstream& in, const std::string& path, int64_t& offset) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in)
        throw FormatError(path + ": unexpected end of file at byte " + std::to_string(offset));
    offset += 4;
    return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
           (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

void write_u32_be(std::ofstream& out, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(buf), 4);
}

}  // namespace

DomainDataset load_idx(const std::string& images_path, const std::string& labels_path,
                       int channels) {
    std::ifstream in(images_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + images_path);
    int64_t offset = 0;
    uint32_t magic = read_u32_be(in, images_path, offset);
    if (magic != 0x00000803u)
        throw FormatError(images_path + ": bad image magic 0x" +
                          [&] {
                              char buf[16];
                              std::snprintf(buf, sizeof buf, "%08x", magic);
                              return std::string(buf);
                          }() +
                          " at byte 0 (expected 0x00000803)");
    uint32_t count = read_u32_be(in, images_path, offset);
    uint32_t rows = read_u32_be(in, images_path, offset);
    uint32_t cols = read_u32_be(in, images_path, offset);
    int64_t n = count, h = rows, w = cols;
    std::vector<unsigned char> raw(static_cast<size_t>(n * h * w));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in)
        throw FormatError(images_path + ": unexpected end of file at byte " +
                          std::to_string(offset + in.gcount()));

    DomainDataset ds;
    ds.name = images_path;
    ds.images = Tensor::zeros({n, channels, h, w});
    float* dst = ds.images.raw_data().data();
    int64_t plane = h * w;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t px = 0; px < plane; ++px) {
            float v = static_cast<float>(raw[static_cast<size_t>(i * plane + px)]) / 255.0f;
            for (int ch = 0; ch < channels; ++ch) dst[(i * channels + ch) * plane + px] = v;
        }
    }

    if (!labels_path.empty()) {
        std::ifstream lin(labels_path, std::ios::binary);
        if (!lin) throw IoError("cannot open " + labels_path);
        int64_t loffset = 0;
        uint32_t lmagic = read_u32_be(lin, labels_path, loffset);
        if (lmagic != 0x00000801u)
            throw FormatError(labels_path + ": bad label magic at byte 0 (expected 0x00000801)");
        uint32_t lcount = read_u32_be(lin, labels_path, loffset);
        if (lcount != count)
            throw FormatError(labels_path + ": label count " + std::to_string(lcount) +
                              " does not match image count " + std::to_string(count));
        std::vector<unsigned char> lraw(static_cast<size_t>(lcount));
        lin.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
        if (!lin)
            throw FormatError(labels_path + ": unexpected end of file at byte " +
                              std::to_string(loffset + lin.gcount()));
        std::vector<int> labels(lraw.begin(), lraw.end());
        int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
        ds.num_classes = max_label + 1;
        ds.labels = std::move(labels);
    }
    return ds;
}

void write_idx_images(const std::string& path, const Tensor& images) {
    if (images.rank() != 4)
        throw DimensionError("write_idx_images: expected N x C x H x W, got " +
                             shape_str(images.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    write_u32_be(out, 0x00000803u);
    write_u32_be(out, static_cast<uint32_t>(n));
    write_u32_be(out, static_cast<uint32_t>(h));
    write_u32_be(out, static_cast<uint32_t>(w));
    const float* src = images.data().data();
    int64_t plane = h * w;
    std::vector<unsigned char> raw(static_cast<size_t>(plane));
    for (int64_t i = 0; i < n; ++i) {
        // first channel only; IDX is grayscale
        const float* p = src + i * c * plane;
        for (int64_t px = 0; px < plane; ++px)
            raw[static_cast<size_t>(px)] =
                static_cast<unsigned char>(std::lround(clamp01(p[px]) * 255.0f));
        out.write(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    }
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_u32_be(out, 0x00000801u);
    write_u32_be(out, static_cast<uint32_t>(labels.size()));
    for (int l : labels) {
        unsigned char b = static_cast<unsigned char>(l);
        out.write(reinterpret_cast<char*>(&b), 1);
    }
}

// ---- native container -------------------------------------------------------

namespace {

constexpr uint16_t kDatasetVersion = 1;
constexpr uint16_t kUnlabeled = 0xFFFF;

void write_u16_le(std::ofstream& out, uint16_t v) {
    unsigned char buf[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<char*>(buf), 2);
}
void write_u32_le(std::ofstream& out, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(buf), 4);
}
uint16_t read_u16_le(std::ifstream& in) {
    unsigned char buf[2];
    in.read(reinterpret_cast<char*>(buf), 2);
    return static_cast<uint16_t>(buf[0]) | (static_cast<uint16_t>(buf[1]) << 8);
}
uint32_t read_u32_le(std::ifstream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

}  // namespace

void save_dataset(const std::string& path, const DomainDataset& ds) {
    if (!ds.images.defined() || ds.images.rank() != 4)
        throw DimensionError("save_dataset: dataset images must be N x C x H x W");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    int64_t n = ds.images.dim(0), c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    out.write("DACD", 4);
    write_u16_le(out, kDatasetVersion);
    write_u32_le(out, static_cast<uint32_t>(n));
    unsigned char dims[3] = {static_cast<unsigned char>(c), static_cast<unsigned char>(h),
                             static_cast<unsigned char>(w)};
    out.write(reinterpret_cast<char*>(dims), 3);
    write_u16_le(out, static_cast<uint16_t>(ds.num_classes));
    unsigned char pad = 0;
    out.write(reinterpret_cast<char*>(&pad), 1);

    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(ds.images.data().data()),
              static_cast<std::streamsize>(sizeof(float) * ds.images.data().size()));
    for (int64_t i = 0; i < n; ++i) {
        uint16_t label = kUnlabeled;
        if (ds.labels) label = static_cast<uint16_t>((*ds.labels)[static_cast<size_t>(i)]);
        write_u16_le(out, label);
    }
    if (!out) throw IoError("write failed for " + path);
}

DomainDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DACD", 4) != 0)
        throw FormatError(path + ": bad dataset magic at byte 0 (expected \"DACD\")");
    uint16_t version = read_u16_le(in);
    if (version != kDatasetVersion)
        throw FormatError(path + ": unsupported dataset version " + std::to_string(version));
    uint32_t n = read_u32_le(in);
    unsigned char dims[3];
    in.read(reinterpret_cast<char*>(dims), 3);
    uint16_t num_classes = read_u16_le(in);
    char pad;
    in.read(&pad, 1);
    if (!in) throw FormatError(path + ": truncated header at byte 16");

    int64_t c = dims[0], h = dims[1], w = dims[2];
    DomainDataset ds;
    ds.name = path;
    ds.num_classes = num_classes;
    ds.images = Tensor::zeros({static_cast<int64_t>(n), c, h, w});
    in.read(reinterpret_cast<char*>(ds.images.raw_data().data()),
            static_cast<std::streamsize>(sizeof(float) * ds.images.data().size()));
    if (!in)
        throw FormatError(path + ": truncated pixel data (expected " +
                          std::to_string(sizeof(float) * ds.images.data().size()) + " bytes)");
    std::vector<int> labels(static_cast<size_t>(n));
    bool any_labeled = false;
    for (uint32_t i = 0; i < n; ++i) {
        uint16_t label = read_u16_le(in);
        if (!in) throw FormatError(path + ": truncated label block");
        labels[i] = label == kUnlabeled ? -1 : static_cast<int>(label);
        if (label != kUnlabeled) any_labeled = true;
    }
    if (any_labeled) ds.labels = std::move(labels);
    return ds;
}

DomainDataset subset_dataset(const DomainDataset& ds, float fraction, uint64_t seed) {
    if (fraction <= 0.0f || fraction > 1.0f)
        throw ConfigError("subset_dataset: fraction must be in (0, 1], got " +
                          std::to_string(fraction));
    int64_t n = ds.size();
    int64_t keep = static_cast<int64_t>(std::ceil(static_cast<double>(n) * fraction));
    if (keep >= n) return ds;
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed, hash_tag("target-fraction")));
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);

    DomainDataset out;
    out.domain_id = ds.domain_id;
    out.name = ds.name;
    out.num_classes = ds.num_classes;
    int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
    int64_t stride = c * h * w;
    out.images = Tensor::zeros({keep, c, h, w});
    if (ds.labels) out.labels = std::vector<int>(static_cast<size_t>(keep));
    for (int64_t i = 0; i < keep; ++i) {
        int64_t src = order[static_cast<size_t>(i)];
        std::memcpy(out.images.raw_data().data() + i * stride,
                    ds.images.data().data() + src * stride, sizeof(float) * stride);
        if (ds.labels) (*out.labels)[static_cast<size_t>(i)] = (*ds.labels)[static_cast<size_t>(src)];
    }
    return out;
}

DomainDataset strip_labels(const DomainDataset& ds) {
    DomainDataset out = ds;
    out.labels.reset();
    return out;
}

// ---- sampler ----------------------------------------------------------------

Sampler::Sampler(const std::vector<DomainDataset>* sources, const DomainDataset* target,
                 int batch_size, uint64_t seed, AugmentationPolicy weak_policy,
                 AugmentationPolicy strong_policy, bool augment_sources)
    : sources_(sources),
      target_(target),
      batch_size_(batch_size),
      seed_(seed),
      weak_(weak_policy),
      strong_(strong_policy),
      augment_sources_(augment_sources) {
    if (batch_size < 1) throw ConfigError("sampler: batch size must be >= 1");
    int64_t max_size = target_->size();
    for (const auto& s : *sources_) max_size = std::max(max_size, s.size());
    if (max_size == 0) throw ValidationError("sampler: all datasets are empty");
    for (const auto& s : *sources_)
        if (s.size() == 0) throw ValidationError("sampler: source dataset '" + s.name + "' is empty");
    if (target_->size() == 0) throw ValidationError("sampler: target dataset is empty");
    steps_per_epoch_ = (max_size + batch_size - 1) / batch_size;
    order_cache_.resize(sources_->size() + 1);
}

const std::vector<int>& Sampler::epoch_order(int64_t epoch, int64_t stream_index, int64_t size) {
    if (cached_epoch_ != epoch) {
        for (auto& v : order_cache_) v.clear();
        cached_epoch_ = epoch;
    }
    auto& order = order_cache_[static_cast<size_t>(stream_index)];
    if (order.empty()) {
        int64_t needed = steps_per_epoch_ * batch_size_;
        Rng rng(mix_seed(seed_, hash_tag("sampler"), static_cast<uint64_t>(epoch),
                         static_cast<uint64_t>(stream_index)));
        std::vector<int> perm(static_cast<size_t>(size));
        while (static_cast<int64_t>(order.size()) < needed) {
            for (int64_t i = 0; i < size; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);
            for (int64_t i = size - 1; i > 0; --i)
                std::swap(perm[static_cast<size_t>(i)],
                          perm[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
            for (int v : perm) {
                order.push_back(v);
                if (static_cast<int64_t>(order.size()) == needed) break;
            }
        }
    }
    return order;
}

StepBatches Sampler::batches(int64_t epoch, int64_t step) {
    if (step < 0 || step >= steps_per_epoch_)
        throw UsageError("sampler: step " + std::to_string(step) + " outside epoch of " +
                         std::to_string(steps_per_epoch_) + " steps");
    StepBatches result;
    int64_t c = target_->images.dim(1), h = target_->images.dim(2), w = target_->images.dim(3);
    int64_t stride = c * h * w;

    auto assemble = [&](const DomainDataset& ds, int64_t stream_index, bool is_target) {
        const std::vector<int>& order = epoch_order(epoch, stream_index, ds.size());
        DomainBatch batch;
        batch.domain_id = ds.domain_id;
        batch.images = Tensor::zeros({batch_size_, c, h, w});
        if (is_target) batch.strong = Tensor::zeros({batch_size_, c, h, w});
        if (!is_target && ds.labels) batch.labels = std::vector<int>(static_cast<size_t>(batch_size_));

        Rng weak_rng(mix_seed(seed_, hash_tag("aug-weak"),
                              static_cast<uint64_t>(epoch * steps_per_epoch_ + step),
                              static_cast<uint64_t>(stream_index)));
        Rng strong_rng(mix_seed(seed_, hash_tag("aug-strong"),
                                static_cast<uint64_t>(epoch * steps_per_epoch_ + step),
                                static_cast<uint64_t>(stream_index)));
        for (int i = 0; i < batch_size_; ++i) {
            int idx = order[static_cast<size_t>(step * batch_size_ + i)];
            const float* src = ds.images.data().data() + static_cast<int64_t>(idx) * stride;
            float* weak_dst = batch.images.raw_data().data() + static_cast<int64_t>(i) * stride;
            if (is_target || augment_sources_)
                augment_into(src, weak_dst, c, h, w, weak_, weak_rng);
            else
                std::memcpy(weak_dst, src, sizeof(float) * static_cast<size_t>(stride));
            if (is_target) {
                float* strong_dst =
                    batch.strong->raw_data().data() + static_cast<int64_t>(i) * stride;
                augment_into(src, strong_dst, c, h, w, strong_, strong_rng);
            }
            if (batch.labels) (*batch.labels)[static_cast<size_t>(i)] = (*ds.labels)[static_cast<size_t>(idx)];
        }
        return batch;
    };

    for (size_t k = 0; k < sources_->size(); ++k)
        result.sources.push_back(assemble((*sources_)[k], static_cast<int64_t>(k), false));
    result.target = assemble(*target_, static_cast<int64_t>(sources_->size()), true);
    return result;
}

}  // namespace dacnet::data
