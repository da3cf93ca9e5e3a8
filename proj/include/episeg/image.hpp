#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "episeg/error.hpp"

namespace episeg {

// Row-major interleaved raster. Channel count is runtime (1 = gray/mask,
// 3 = RGB). Pixel (x, y) channel c lives at data[(y*w + x)*ch + c].
template <typename T>
struct Image {
    int w = 0;
    int h = 0;
    int ch = 1;
    std::vector<T> data;

    Image() = default;
    Image(int w_, int h_, int ch_ = 1, T fill = T(0))
        : w(w_), h(h_), ch(ch_), data(static_cast<size_t>(w_) * h_ * ch_, fill) {}

    bool empty() const { return w == 0 || h == 0; }
    size_t pixels() const { return static_cast<size_t>(w) * h; }
    size_t size() const { return data.size(); }

    T& at(int x, int y, int c = 0) { return data[(static_cast<size_t>(y) * w + x) * ch + c]; }
    const T& at(int x, int y, int c = 0) const {
        return data[(static_cast<size_t>(y) * w + x) * ch + c];
    }

    bool same_shape(const Image& o) const { return w == o.w && h == o.h && ch == o.ch; }

    Image crop(int x0, int y0, int cw, int chh) const {
        if (x0 < 0 || y0 < 0 || cw <= 0 || chh <= 0 || x0 + cw > w || y0 + chh > h)
            raise(Errc::out_of_bounds, "crop outside raster");
        Image out(cw, chh, ch);
        for (int y = 0; y < chh; ++y)
            std::copy_n(&data[((static_cast<size_t>(y0) + y) * w + x0) * ch],
                        static_cast<size_t>(cw) * ch, &out.data[static_cast<size_t>(y) * cw * ch]);
        return out;
    }

    void paste(const Image& src, int x0, int y0) {
        if (src.ch != ch || x0 < 0 || y0 < 0 || x0 + src.w > w || y0 + src.h > h)
            raise(Errc::out_of_bounds, "paste outside raster");
        for (int y = 0; y < src.h; ++y)
            std::copy_n(&src.data[static_cast<size_t>(y) * src.w * ch],
                        static_cast<size_t>(src.w) * ch,
                        &data[((static_cast<size_t>(y0) + y) * w + x0) * ch]);
    }

    template <typename U>
    Image<U> cast() const {
        Image<U> out(w, h, ch);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool operator==(const Image& o) const {
        return w == o.w && h == o.h && ch == o.ch && data == o.data;
    }
};

using ImageU8 = Image<uint8_t>;
using ImageF = Image<float>;
using ImageD = Image<double>;

inline uint8_t clamp_u8(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

// 2x2 box-mean downsample, partial blocks averaged over the pixels present,
// rounded to nearest (half away from zero). Used for image pyramids.
inline ImageU8 downsample_mean(const ImageU8& img) {
    int ow = (img.w + 1) / 2, oh = (img.h + 1) / 2;
    ImageU8 out(ow, oh, img.ch);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int c = 0; c < img.ch; ++c) {
                int sum = 0, n = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        int sx = 2 * x + dx, sy = 2 * y + dy;
                        if (sx < img.w && sy < img.h) {
                            sum += img.at(sx, sy, c);
                            ++n;
                        }
                    }
                }
                out.at(x, y, c) = static_cast<uint8_t>((2 * sum + n) / (2 * n));
            }
        }
    }
    return out;
}

// Majority-vote downsample for binary masks; ties go to 0.
inline ImageU8 downsample_majority(const ImageU8& img) {
    int ow = (img.w + 1) / 2, oh = (img.h + 1) / 2;
    ImageU8 out(ow, oh, img.ch);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int c = 0; c < img.ch; ++c) {
                int ones = 0, n = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        int sx = 2 * x + dx, sy = 2 * y + dy;
                        if (sx < img.w && sy < img.h) {
                            ones += img.at(sx, sy, c) != 0;
                            ++n;
                        }
                    }
                }
                out.at(x, y, c) = 2 * ones > n ? 1 : 0;
            }
        }
    }
    return out;
}

inline ImageF downsample_mean_f(const ImageF& img) {
    int ow = (img.w + 1) / 2, oh = (img.h + 1) / 2;
    ImageF out(ow, oh, img.ch);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int c = 0; c < img.ch; ++c) {
                float sum = 0;
                int n = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        int sx = 2 * x + dx, sy = 2 * y + dy;
                        if (sx < img.w && sy < img.h) {
                            sum += img.at(sx, sy, c);
                            ++n;
                        }
                    }
                }
                out.at(x, y, c) = sum / n;
            }
        }
    }
    return out;
}

}  // namespace episeg
