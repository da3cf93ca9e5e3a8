#include "episeg/stain.hpp"

#include <cmath>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace episeg {

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    if (n == 0) raise(Errc::bad_config, "cannot normalize zero stain vector");
    return {a[0] / n, a[1] / n, a[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// mat[j] is column j; entry (i,j) = mat[j][i].
double det3(const Mat3& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[2][1] * m[1][2]) -
           m[1][0] * (m[0][1] * m[2][2] - m[2][1] * m[0][2]) +
           m[2][0] * (m[0][1] * m[1][2] - m[1][1] * m[0][2]);
}

double frob(const Mat3& m) {
    double s = 0;
    for (const auto& col : m) s += dot(col, col);
    return std::sqrt(s);
}

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
}

}  // namespace

double StainModel::condition_number() const {
    double d = det3(columns);
    if (d == 0 || !std::isfinite(d)) return std::numeric_limits<double>::infinity();
    // Adjugate-based inverse without the validation round-trip.
    Mat3 inv;
    const Mat3& m = columns;
    inv[0] = {(m[1][1] * m[2][2] - m[2][1] * m[1][2]) / d,
              (m[2][1] * m[0][2] - m[0][1] * m[2][2]) / d,
              (m[0][1] * m[1][2] - m[1][1] * m[0][2]) / d};
    inv[1] = {(m[2][0] * m[1][2] - m[1][0] * m[2][2]) / d,
              (m[0][0] * m[2][2] - m[2][0] * m[0][2]) / d,
              (m[1][0] * m[0][2] - m[0][0] * m[1][2]) / d};
    inv[2] = {(m[1][0] * m[2][1] - m[2][0] * m[1][1]) / d,
              (m[2][0] * m[0][1] - m[0][0] * m[2][1]) / d,
              (m[0][0] * m[1][1] - m[1][0] * m[0][1]) / d};
    return frob(columns) * frob(inv);
}

void StainModel::validate() const {
    for (int j = 0; j < 3; ++j) {
        double n = norm(columns[j]);
        if (std::abs(n - 1.0) > 1e-6)
            raise(Errc::bad_config, "stain column " + std::to_string(j) + " not unit norm");
    }
    if (!(condition_number() <= 1e8))
        raise(Errc::singular_stain_matrix, "condition number exceeds 1e8");
}

Mat3 StainModel::inverse() const {
    validate();
    double d = det3(columns);
    const Mat3& m = columns;
    Mat3 inv;
    inv[0] = {(m[1][1] * m[2][2] - m[2][1] * m[1][2]) / d,
              (m[2][1] * m[0][2] - m[0][1] * m[2][2]) / d,
              (m[0][1] * m[1][2] - m[1][1] * m[0][2]) / d};
    inv[1] = {(m[2][0] * m[1][2] - m[1][0] * m[2][2]) / d,
              (m[0][0] * m[2][2] - m[2][0] * m[0][2]) / d,
              (m[1][0] * m[0][2] - m[0][0] * m[1][2]) / d};
    inv[2] = {(m[1][0] * m[2][1] - m[2][0] * m[1][1]) / d,
              (m[2][0] * m[0][1] - m[0][0] * m[2][1]) / d,
              (m[0][0] * m[1][1] - m[1][0] * m[0][1]) / d};
    return inv;
}

StainModel default_ihc_model() {
    StainModel m;
    Vec3 chromogen = normalized({0.65, 0.70, 0.29});
    Vec3 hema = {0.644, 0.717, 0.267};
    double proj = dot(hema, chromogen);
    Vec3 counter = normalized(
        {hema[0] - proj * chromogen[0], hema[1] - proj * chromogen[1], hema[2] - proj * chromogen[2]});
    m.columns = {chromogen, counter, normalized(cross(chromogen, counter))};
    m.names = {"DAB+NovaRED combined", "hematoxylin", "residual"};
    return m;
}

StainModel default_he_model() {
    StainModel m;
    Vec3 h = normalized({0.644, 0.717, 0.267});
    Vec3 e = normalized({0.093, 0.954, 0.283});
    m.columns = {h, e, normalized(cross(h, e))};
    m.names = {"hematoxylin", "eosin", "residual"};
    return m;
}

StainModel load_stains_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(Errc::io_failure, "cannot open stains file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        raise(Errc::io_failure, std::string("bad stains json: ") + e.what());
    }
    StainModel m;
    try {
        m.names[0] = j.value("name", "custom");
        auto cols = j.at("columns");
        if (cols.size() != 3) raise(Errc::bad_config, "stains.json needs 3 columns");
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i) m.columns[c][i] = cols[c][i].get<double>();
        if (j.contains("names"))
            for (int c = 0; c < 3; ++c) m.names[c] = j["names"][c].get<std::string>();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        raise(Errc::bad_config, std::string("bad stains schema: ") + e.what());
    }
    m.validate();
    return m;
}

void save_stains_json(const StainModel& model, const std::string& path) {
    nlohmann::json j;
    j["name"] = model.names[0];
    j["names"] = model.names;
    j["columns"] = model.columns;
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) raise(Errc::io_failure, "cannot write stains file: " + path);
}

Vec3 rgb_to_od(const Vec3& rgb, double background_intensity) {
    Vec3 od;
    double denom = background_intensity + 1.0;
    for (int c = 0; c < 3; ++c) od[c] = -std::log10((rgb[c] + 1.0) / denom);
    return od;
}

Vec3 deconvolve(const Vec3& od, const StainModel& model) {
    return mat_vec(model.inverse(), od);
}

ImageF deconvolve_raster(const ImageU8& rgb, const StainModel& model) {
    if (rgb.ch != 3) raise(Errc::bad_config, "deconvolve_raster needs RGB input");
    Mat3 inv = model.inverse();
    ImageF out(rgb.w, rgb.h, 3);
    double denom = model.background_intensity + 1.0;
    for (size_t p = 0; p < rgb.pixels(); ++p) {
        Vec3 od;
        for (int c = 0; c < 3; ++c) od[c] = -std::log10((rgb.data[p * 3 + c] + 1.0) / denom);
        Vec3 conc = mat_vec(inv, od);
        for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = static_cast<float>(conc[c]);
    }
    return out;
}

ImageU8 he_recompose(const ImageF& concentrations, const StainModel& model) {
    if (concentrations.ch != 3) raise(Errc::bad_config, "he_recompose needs 3 channels");
    model.validate();
    ImageU8 out(concentrations.w, concentrations.h, 3);
    double i0p1 = model.background_intensity + 1.0;
    for (size_t p = 0; p < concentrations.pixels(); ++p) {
        Vec3 c = {concentrations.data[p * 3], concentrations.data[p * 3 + 1],
                  concentrations.data[p * 3 + 2]};
        Vec3 od = mat_vec(model.columns, c);
        for (int i = 0; i < 3; ++i)
            out.data[p * 3 + i] = clamp_u8(i0p1 * std::pow(10.0, -od[i]) - 1.0);
    }
    return out;
}

namespace {

std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> off;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) off.emplace_back(dx, dy);
    return off;
}

ImageU8 pad_replicate(const ImageU8& m, int pad) {
    ImageU8 out(m.w + 2 * pad, m.h + 2 * pad, 1);
    for (int y = 0; y < out.h; ++y) {
        int sy = std::clamp(y - pad, 0, m.h - 1);
        for (int x = 0; x < out.w; ++x)
            out.at(x, y) = m.at(std::clamp(x - pad, 0, m.w - 1), sy);
    }
    return out;
}

// Close then open on a replicate-padded canvas, so uniform masks are fixed
// points instead of eroding at the raster border.
ImageU8 morph_cleanup(const ImageU8& mask, int radius) {
    if (radius <= 0) return mask;
    int pad = 2 * radius;
    ImageU8 padded = pad_replicate(mask, pad);
    padded = binary_open(binary_close(padded, radius), radius);
    return padded.crop(pad, pad, mask.w, mask.h);
}

}  // namespace

ImageU8 binary_dilate(const ImageU8& mask, int radius) {
    if (mask.ch != 1) raise(Errc::bad_config, "morphology operates on single-channel masks");
    if (radius <= 0) return mask;
    auto off = disk_offsets(radius);
    ImageU8 out(mask.w, mask.h, 1);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            uint8_t v = 0;
            for (auto [dx, dy] : off) {
                int sx = x + dx, sy = y + dy;
                if (sx >= 0 && sy >= 0 && sx < mask.w && sy < mask.h && mask.at(sx, sy)) {
                    v = 1;
                    break;
                }
            }
            out.at(x, y) = v;
        }
    }
    return out;
}

ImageU8 binary_erode(const ImageU8& mask, int radius) {
    if (mask.ch != 1) raise(Errc::bad_config, "morphology operates on single-channel masks");
    if (radius <= 0) return mask;
    auto off = disk_offsets(radius);
    ImageU8 out(mask.w, mask.h, 1);
    for (int y = 0; y < mask.h; ++y) {
        for (int x = 0; x < mask.w; ++x) {
            uint8_t v = 1;
            for (auto [dx, dy] : off) {
                int sx = x + dx, sy = y + dy;
                if (sx < 0 || sy < 0 || sx >= mask.w || sy >= mask.h || !mask.at(sx, sy)) {
                    v = 0;
                    break;
                }
            }
            out.at(x, y) = v;
        }
    }
    return out;
}

ImageU8 binary_close(const ImageU8& mask, int radius) {
    return binary_erode(binary_dilate(mask, radius), radius);
}

ImageU8 binary_open(const ImageU8& mask, int radius) {
    return binary_dilate(binary_erode(mask, radius), radius);
}

ImageU8 remove_small_components(const ImageU8& mask, int min_px) {
    if (min_px <= 1) return mask;
    ImageU8 out = mask;
    std::vector<int> label(mask.pixels(), 0);
    std::vector<size_t> stack;
    int next_label = 0;
    for (size_t start = 0; start < mask.pixels(); ++start) {
        if (!mask.data[start] || label[start]) continue;
        ++next_label;
        stack.assign(1, start);
        label[start] = next_label;
        std::vector<size_t> members;
        while (!stack.empty()) {
            size_t p = stack.back();
            stack.pop_back();
            members.push_back(p);
            int x = static_cast<int>(p % mask.w), y = static_cast<int>(p / mask.w);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    int nx = x + dx, ny = y + dy;
                    if (nx < 0 || ny < 0 || nx >= mask.w || ny >= mask.h) continue;
                    size_t q = static_cast<size_t>(ny) * mask.w + nx;
                    if (mask.data[q] && !label[q]) {
                        label[q] = next_label;
                        stack.push_back(q);
                    }
                }
            }
        }
        if (members.size() < static_cast<size_t>(min_px))
            for (size_t p : members) out.data[p] = 0;
    }
    return out;
}

ImageU8 positivity_mask(const ImageF& channel, const StainConfig& cfg) {
    if (channel.ch != 1) raise(Errc::bad_config, "positivity_mask takes one concentration channel");
    ImageU8 m(channel.w, channel.h, 1);
    for (size_t i = 0; i < channel.pixels(); ++i)
        m.data[i] = channel.data[i] >= cfg.channel_threshold ? 1 : 0;
    m = morph_cleanup(m, cfg.morph_radius);
    return remove_small_components(m, cfg.min_object_px);
}

ImageU8 tissue_mask(const ImageU8& rgb, const StainConfig& cfg) {
    if (rgb.ch != 3) raise(Errc::bad_config, "tissue_mask needs RGB input");
    ImageU8 m(rgb.w, rgb.h, 1);
    for (size_t p = 0; p < rgb.pixels(); ++p) {
        double mean_od = 0;
        for (int c = 0; c < 3; ++c)
            mean_od += -std::log10((rgb.data[p * 3 + c] + 1.0) / 256.0);
        mean_od /= 3.0;
        m.data[p] = mean_od >= cfg.tissue_od_threshold ? 1 : 0;
    }
    return morph_cleanup(m, cfg.morph_radius);
}

}  // namespace episeg
