#pragma once

#include <string>

#include "episeg/image.hpp"

namespace episeg {

// Minimal PNG support for interop and debug overlays: 8-bit gray and RGB,
// non-interlaced. Reading also accepts RGBA (alpha is dropped).
void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

}  // namespace episeg
