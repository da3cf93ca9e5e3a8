#include "episeg/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace episeg {

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::string& out, const char type[4], const std::string& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    size_t start = out.size();
    out.append(type, 4);
    out.append(payload);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(out.data() + start), static_cast<uInt>(out.size() - start));
    put_u32(out, static_cast<uint32_t>(crc));
}

std::string zlib_deflate(const std::string& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string out(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        raise(Errc::io_failure, "zlib compress failed");
    out.resize(bound);
    return out;
}

std::string zlib_inflate(const std::string& comp, size_t expected) {
    std::string out(expected, '\0');
    uLongf len = static_cast<uLongf>(expected);
    int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &len,
                        reinterpret_cast<const Bytef*>(comp.data()), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || len != expected) raise(Errc::io_failure, "zlib inflate failed");
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.empty()) raise(Errc::empty_raster, "write_png: empty image");
    if (img.ch != 1 && img.ch != 3)
        raise(Errc::bad_config, "write_png supports 1 or 3 channels");

    std::string file("\x89PNG\r\n\x1a\n", 8);

    std::string ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);                            // bit depth
    ihdr.push_back(img.ch == 1 ? 0 : 2);          // color type
    ihdr.push_back(0);                            // compression
    ihdr.push_back(0);                            // filter
    ihdr.push_back(0);                            // no interlace
    append_chunk(file, "IHDR", ihdr);

    size_t stride = static_cast<size_t>(img.w) * img.ch;
    std::string raw;
    raw.reserve((stride + 1) * img.h);
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0);  // filter type none
        raw.append(reinterpret_cast<const char*>(&img.data[static_cast<size_t>(y) * stride]), stride);
    }
    append_chunk(file, "IDAT", zlib_deflate(raw));
    append_chunk(file, "IEND", "");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) raise(Errc::io_failure, "cannot open for write: " + path);
    f.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!f) raise(Errc::io_failure, "short write: " + path);
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) raise(Errc::io_failure, "cannot open: " + path);
    std::string file((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (file.size() < 8 || std::memcmp(file.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        raise(Errc::io_failure, "not a PNG file: " + path);

    size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::string idat;
    while (pos + 8 <= file.size()) {
        uint32_t len = get_u32(reinterpret_cast<const unsigned char*>(file.data() + pos));
        std::string type = file.substr(pos + 4, 4);
        if (pos + 12 + len > file.size()) raise(Errc::io_failure, "truncated PNG: " + path);
        const char* payload = file.data() + pos + 8;
        if (type == "IHDR") {
            const unsigned char* p = reinterpret_cast<const unsigned char*>(payload);
            w = static_cast<int>(get_u32(p));
            h = static_cast<int>(get_u32(p + 4));
            bit_depth = p[8];
            color_type = p[9];
            interlace = p[12];
        } else if (type == "IDAT") {
            idat.append(payload, len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0) raise(Errc::io_failure, "bad PNG header: " + path);
    if (bit_depth != 8 || interlace != 0)
        raise(Errc::io_failure, "unsupported PNG (need 8-bit non-interlaced): " + path);
    int src_ch;
    switch (color_type) {
        case 0: src_ch = 1; break;
        case 2: src_ch = 3; break;
        case 4: src_ch = 2; break;
        case 6: src_ch = 4; break;
        default: raise(Errc::io_failure, "unsupported PNG color type: " + path);
    }

    size_t stride = static_cast<size_t>(w) * src_ch;
    std::string raw = zlib_inflate(idat, (stride + 1) * h);

    std::vector<uint8_t> cur(stride, 0), prev(stride, 0);
    int out_ch = src_ch >= 3 ? 3 : 1;
    ImageU8 img(w, h, out_ch);
    int bpp = src_ch;  // bytes per pixel at 8 bits
    for (int y = 0; y < h; ++y) {
        const unsigned char* line = reinterpret_cast<const unsigned char*>(raw.data() + y * (stride + 1));
        int filter = line[0];
        for (size_t i = 0; i < stride; ++i) {
            int x = line[1 + i];
            int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
            int b = prev[i];
            int c = i >= static_cast<size_t>(bpp) ? prev[i - bpp] : 0;
            int v;
            switch (filter) {
                case 0: v = x; break;
                case 1: v = x + a; break;
                case 2: v = x + b; break;
                case 3: v = x + (a + b) / 2; break;
                case 4: v = x + paeth(a, b, c); break;
                default: raise(Errc::io_failure, "bad PNG filter: " + path);
            }
            cur[i] = static_cast<uint8_t>(v & 0xff);
        }
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < out_ch; ++ci)
                img.at(x, y, ci) = cur[static_cast<size_t>(x) * src_ch + ci];
        std::swap(cur, prev);
    }
    return img;
}

}  // namespace episeg
