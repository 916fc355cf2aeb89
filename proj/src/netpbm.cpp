#include "hcseg/netpbm.hpp"

#include <fstream>
#include <iterator>
#include <string>

namespace hcseg {

namespace {

struct Header {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t maxval = 0;
    std::size_t data_offset = 0;
};

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
public:
    explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (is_space(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t read_uint(const char* what) {
        skip_space_and_comments();
        if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated header: missing ") + what, pos_);
        if (bytes_[pos_] < '0' || bytes_[pos_] > '9') {
            throw ParseError(std::string("expected decimal ") + what, pos_);
        }
        std::size_t value = 0;
        const std::size_t start = pos_;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            value = value * 10 + (bytes_[pos_] - '0');
            if (pos_ - start > 9) throw ParseError(std::string(what) + " too large", start);
            ++pos_;
        }
        return value;
    }

    std::size_t pos() const { return pos_; }
    void advance() { ++pos_; }
    bool at_end() const { return pos_ >= bytes_.size(); }
    std::uint8_t peek() const { return bytes_[pos_]; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

Header parse_header(std::span<const std::uint8_t> bytes, char kind, std::size_t max_maxval) {
    if (bytes.size() < 2) throw ParseError("truncated header: missing magic number", 0);
    if (bytes[0] != 'P' || bytes[1] != static_cast<std::uint8_t>(kind)) {
        throw ParseError(std::string("bad magic number, expected P") + kind, 0);
    }
    HeaderReader r(bytes.subspan(0));
    r.advance();
    r.advance();
    if (r.at_end() || !(is_space(r.peek()) || r.peek() == '#')) throw ParseError("missing whitespace after magic", 2);
    Header h;
    h.width = r.read_uint("width");
    h.height = r.read_uint("height");
    const std::size_t maxval_pos = r.pos();
    h.maxval = r.read_uint("maxval");
    if (h.width == 0 || h.height == 0) throw ParseError("zero image dimension", maxval_pos);
    if (h.maxval == 0 || h.maxval > max_maxval) {
        throw ParseError("unsupported maxval " + std::to_string(h.maxval), maxval_pos);
    }
    if (r.at_end() || !is_space(r.peek())) throw ParseError("missing single whitespace before raster", r.pos());
    r.advance();
    h.data_offset = r.pos();
    return h;
}

} // namespace

RgbImage parse_ppm(std::span<const std::uint8_t> bytes) {
    const Header h = parse_header(bytes, '6', 255);
    const std::size_t need = h.width * h.height * 3;
    if (bytes.size() - h.data_offset < need) {
        throw ParseError("truncated raster: need " + std::to_string(need) + " bytes", bytes.size());
    }
    RgbImage img(h.height, h.width);
    for (std::size_t i = 0; i < need; ++i) {
        const std::size_t v = bytes[h.data_offset + i];
        if (v > h.maxval) throw ParseError("sample exceeds maxval", h.data_offset + i);
        img.pixels[i] = static_cast<std::uint8_t>(h.maxval == 255 ? v : (v * 255 + h.maxval / 2) / h.maxval);
    }
    return img;
}

LabelMap parse_pgm(std::span<const std::uint8_t> bytes) {
    const Header h = parse_header(bytes, '5', 65535);
    const std::size_t bps = h.maxval > 255 ? 2 : 1;
    const std::size_t need = h.width * h.height * bps;
    if (bytes.size() - h.data_offset < need) {
        throw ParseError("truncated raster: need " + std::to_string(need) + " bytes", bytes.size());
    }
    LabelMap out(h.height, h.width);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t off = h.data_offset + i * bps;
        const std::size_t v = bps == 2 ? (std::size_t{bytes[off]} << 8) | bytes[off + 1] : bytes[off];
        if (v > h.maxval) throw ParseError("sample exceeds maxval", off);
        out.labels[i] = static_cast<std::int32_t>(v);
    }
    return out;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
    if (image.pixels.size() != image.width * image.height * 3) throw DimensionError("encode_ppm: pixel buffer size");
    const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.pixels.begin(), image.pixels.end());
    return out;
}

std::vector<std::uint8_t> encode_pgm(const LabelMap& labels) {
    std::int32_t maxv = 0;
    for (std::int32_t v : labels.labels) {
        if (v < 0 || v > 65535) throw DomainError("encode_pgm: label " + std::to_string(v) + " outside [0, 65535]");
        maxv = std::max(maxv, v);
    }
    const bool wide = maxv > 255;
    const std::string header = "P5\n" + std::to_string(labels.width) + " " + std::to_string(labels.height) + "\n" +
                               (wide ? "65535" : "255") + "\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (std::int32_t v : labels.labels) {
        if (wide) out.push_back(static_cast<std::uint8_t>(v >> 8));
        out.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Tensor image_to_tensor(const RgbImage& image) {
    const std::size_t h = image.height, w = image.width;
    std::vector<double> data(3 * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) data[(c * h + y) * w + x] = image.pixels[(y * w + x) * 3 + c] / 255.0;
    return Tensor::from({3, h, w}, std::move(data));
}

RgbImage load_rgb(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return parse_ppm(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

Tensor load_image(const std::filesystem::path& path) { return image_to_tensor(load_rgb(path)); }

LabelMap load_labels(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return parse_pgm(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

void save_labels(const LabelMap& labels, const std::filesystem::path& path) { write_file(path, encode_pgm(labels)); }

void save_rgb(const RgbImage& image, const std::filesystem::path& path) { write_file(path, encode_ppm(image)); }

RgbImage make_overlay(const RgbImage& base, std::span<const std::uint8_t> boundary,
                      std::span<const std::uint8_t> leakage) {
    const std::size_t n = base.width * base.height;
    if ((!boundary.empty() && boundary.size() != n) || (!leakage.empty() && leakage.size() != n)) {
        throw DimensionError("make_overlay: mask size differs from image");
    }
    RgbImage out = base;
    for (std::size_t j = 0; j < n; ++j) {
        if (!boundary.empty() && boundary[j]) {
            out.pixels[3 * j] = out.pixels[3 * j + 1] = out.pixels[3 * j + 2] = 0;
        }
        if (!leakage.empty() && leakage[j]) {
            out.pixels[3 * j] = 255;
            out.pixels[3 * j + 1] = 0;
            out.pixels[3 * j + 2] = 0;
        }
    }
    return out;
}

RgbImage colorize(const LabelMap& labels) {
    RgbImage out(labels.height, labels.width);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        const std::uint32_t v = static_cast<std::uint32_t>(labels.labels[j]) * 2654435761u;
        out.pixels[3 * j] = static_cast<std::uint8_t>(64 + (v >> 24) % 192);
        out.pixels[3 * j + 1] = static_cast<std::uint8_t>(64 + (v >> 16) % 192);
        out.pixels[3 * j + 2] = static_cast<std::uint8_t>(64 + (v >> 8) % 192);
    }
    return out;
}

} // namespace hcseg
