#include "dfa/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dfa {

namespace {

// ---- PNM parsing -----------------------------------------------------------

struct PnmHeader {
    int64_t width = 0, height = 0, maxval = 0;
    size_t payload_offset = 0;
};

[[noreturn]] void parse_fail(const std::string& path, size_t offset, const std::string& what) {
    throw ParseError(path + ": " + what + " at byte offset " + std::to_string(offset));
}

// Reads "P6"/"P5", width, height, maxval with '#' comments, then exactly one
// whitespace byte before the payload.
PnmHeader parse_pnm_header(const std::string& path, const std::string& bytes,
                           const char* want_magic) {
    size_t pos = 0;
    auto skip_ws_comments = [&]() {
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) {
        skip_ws_comments();
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
            parse_fail(path, pos, std::string("expected ") + what);
        int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
        }
        return v;
    };

    if (bytes.size() < 2 || bytes[0] != want_magic[0] || bytes[1] != want_magic[1])
        parse_fail(path, 0, std::string("expected magic ") + want_magic);
    pos = 2;
    PnmHeader h;
    h.width = read_int("width");
    h.height = read_int("height");
    h.maxval = read_int("maxval");
    if (h.maxval != 255) parse_fail(path, pos, "maxval must be 255");
    if (pos >= bytes.size() || !(bytes[pos] == ' ' || bytes[pos] == '\t' || bytes[pos] == '\r' ||
                                 bytes[pos] == '\n'))
        parse_fail(path, pos, "expected single whitespace before payload");
    ++pos;
    h.payload_offset = pos;
    if (h.width < 1 || h.height < 1) parse_fail(path, 2, "non-positive image extents");
    return h;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for '" + path + "'");
}

uint8_t to_byte(double v) {
    const double x = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(x * 255.0));
}

}  // namespace

Tensor load_image_ppm(const std::string& path) {
    const std::string bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(path, bytes, "P6");
    const size_t need = static_cast<size_t>(h.width * h.height * 3);
    if (bytes.size() - h.payload_offset < need)
        parse_fail(path, bytes.size(), "truncated payload (need " + std::to_string(need) + " bytes)");
    Tensor img = Tensor::zeros({1, 3, h.height, h.width});
    auto d = img.data<float>();
    const auto* p = reinterpret_cast<const uint8_t*>(bytes.data() + h.payload_offset);
    const int64_t plane = h.height * h.width;
    for (int64_t i = 0; i < plane; ++i)
        for (int64_t c = 0; c < 3; ++c)
            d[static_cast<size_t>(c * plane + i)] = static_cast<float>(p[i * 3 + c]) / 255.0f;
    return img;
}

void save_image_ppm(const Tensor& image, const std::string& path) {
    const Shape4& s = image.shape();
    if (s.n != 1 || s.c != 3) throw ContractError("save_image_ppm expects (1,3,H,W), got " + s.str());
    std::string out = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
    const int64_t plane = s.h * s.w;
    out.reserve(out.size() + static_cast<size_t>(plane * 3));
    for (int64_t i = 0; i < plane; ++i)
        for (int64_t c = 0; c < 3; ++c)
            out.push_back(static_cast<char>(to_byte(image.flat(c * plane + i))));
    write_file(path, out);
}

LabelMap load_labels_pgm(const std::string& path) {
    const std::string bytes = read_file(path);
    const PnmHeader h = parse_pnm_header(path, bytes, "P5");
    const size_t need = static_cast<size_t>(h.width * h.height);
    if (bytes.size() - h.payload_offset < need)
        parse_fail(path, bytes.size(), "truncated payload (need " + std::to_string(need) + " bytes)");
    LabelMap labels(1, h.height, h.width);
    const auto* p = reinterpret_cast<const uint8_t*>(bytes.data() + h.payload_offset);
    for (int64_t i = 0; i < h.height * h.width; ++i)
        labels.data[static_cast<size_t>(i)] = static_cast<int32_t>(p[i]);
    return labels;
}

void save_labels_pgm(const LabelMap& labels, const std::string& path) {
    if (labels.n != 1) throw ContractError("save_labels_pgm expects a single label plane");
    std::string out = "P5\n" + std::to_string(labels.w) + " " + std::to_string(labels.h) + "\n255\n";
    for (const int32_t v : labels.data) {
        if (v < 0 || v > 255) throw DataError("label value " + std::to_string(v) + " not storable");
        out.push_back(static_cast<char>(static_cast<uint8_t>(v)));
    }
    write_file(path, out);
}

std::array<uint8_t, 3> palette_color(int k) {
    uint8_t r = 0, g = 0, b = 0;
    int id = k;
    for (int j = 0; j < 8 && id != 0; ++j) {
        r = static_cast<uint8_t>(r | (((id >> 0) & 1) << (7 - j)));
        g = static_cast<uint8_t>(g | (((id >> 1) & 1) << (7 - j)));
        b = static_cast<uint8_t>(b | (((id >> 2) & 1) << (7 - j)));
        id >>= 3;
    }
    return {r, g, b};
}

void save_mask_ppm(const LabelMap& mask, const std::string& path) {
    if (mask.n != 1) throw ContractError("save_mask_ppm expects a single mask");
    std::string out = "P6\n" + std::to_string(mask.w) + " " + std::to_string(mask.h) + "\n255\n";
    for (const int32_t v : mask.data) {
        const auto rgb = palette_color(v);
        out.push_back(static_cast<char>(rgb[0]));
        out.push_back(static_cast<char>(rgb[1]));
        out.push_back(static_cast<char>(rgb[2]));
    }
    write_file(path, out);
}

LabelMap mask_from_palette_ppm(const std::string& path, int num_classes) {
    Tensor img = load_image_ppm(path);
    const Shape4& s = img.shape();
    LabelMap mask(1, s.h, s.w);
    const int64_t plane = s.h * s.w;
    for (int64_t i = 0; i < plane; ++i) {
        const uint8_t r = to_byte(img.flat(0 * plane + i));
        const uint8_t g = to_byte(img.flat(1 * plane + i));
        const uint8_t b = to_byte(img.flat(2 * plane + i));
        int found = -1;
        for (int k = 0; k < num_classes; ++k) {
            const auto rgb = palette_color(k);
            if (rgb[0] == r && rgb[1] == g && rgb[2] == b) {
                found = k;
                break;
            }
        }
        if (found < 0)
            throw DataError(path + ": pixel color not in the " + std::to_string(num_classes) +
                            "-entry palette");
        mask.data[static_cast<size_t>(i)] = found;
    }
    return mask;
}

namespace {

constexpr double kToyClassColors[8][3] = {
    {0.15, 0.15, 0.15}, {0.85, 0.20, 0.20}, {0.20, 0.85, 0.20}, {0.20, 0.20, 0.85},
    {0.85, 0.85, 0.20}, {0.85, 0.20, 0.85}, {0.20, 0.85, 0.85}, {0.70, 0.50, 0.30},
};

}  // namespace

std::vector<SegSample> generate_toy_dataset(uint64_t seed, int count, int size, int num_classes) {
    if (num_classes < 2 || num_classes > 8)
        throw ConfigError("toy dataset supports 2..8 classes, got " + std::to_string(num_classes));
    if (size < 16) throw ConfigError("toy dataset size must be >= 16");
    if (count < 0) throw ConfigError("toy dataset count must be >= 0");

    std::vector<SegSample> out;
    out.reserve(static_cast<size_t>(count));
    const int shapes = num_classes - 1;
    const int cells = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(shapes))));
    const int cell = size / cells;

    for (int idx = 0; idx < count; ++idx) {
        Rng rng = make_rng(mix_seed(seed, static_cast<uint64_t>(idx)));
        SegSample s;
        s.image = Tensor::zeros({1, 3, size, size});
        s.labels = LabelMap(1, size, size, 0);

        // Each class gets one shape in its own grid cell, so every class is
        // present in every sample.
        std::vector<int> cell_of(static_cast<size_t>(shapes));
        for (int i = 0; i < shapes; ++i) cell_of[static_cast<size_t>(i)] = i;
        std::shuffle(cell_of.begin(), cell_of.end(), rng);

        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int k = 1; k <= shapes; ++k) {
            const int ci = cell_of[static_cast<size_t>(k - 1)];
            const int cy = (ci / cells) * cell;
            const int cx = (ci % cells) * cell;
            std::uniform_int_distribution<int> center_off(cell / 3, 2 * cell / 3);
            std::uniform_int_distribution<int> half_extent(cell / 6, cell / 3);
            const int yc = cy + center_off(rng);
            const int xc = cx + center_off(rng);
            const int ry = half_extent(rng);
            const int rx = half_extent(rng);
            const bool disc = unit(rng) < 0.5;
            for (int y = std::max(0, yc - ry); y < std::min(size, yc + ry + 1); ++y)
                for (int x = std::max(0, xc - rx); x < std::min(size, xc + rx + 1); ++x) {
                    if (disc) {
                        const double dy = static_cast<double>(y - yc) / ry;
                        const double dx = static_cast<double>(x - xc) / rx;
                        if (dy * dy + dx * dx > 1.0) continue;
                    }
                    s.labels.at(0, y, x) = k;
                }
        }

        std::normal_distribution<double> noise(0.0, 0.05);
        auto img = s.image.data<float>();
        const int64_t plane = static_cast<int64_t>(size) * size;
        for (int64_t i = 0; i < plane; ++i) {
            const int32_t k = s.labels.data[static_cast<size_t>(i)];
            for (int64_t c = 0; c < 3; ++c) {
                const double v = kToyClassColors[k][c] + noise(rng);
                img[static_cast<size_t>(c * plane + i)] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::string sample_name(int idx, const char* ext) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d%s", idx, ext);
    return buf;
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<SegSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");
    for (size_t i = 0; i < samples.size(); ++i) {
        save_image_ppm(samples[i].image,
                       (fs::path(dir) / "images" / sample_name(static_cast<int>(i), ".ppm")).string());
        save_labels_pgm(samples[i].labels,
                        (fs::path(dir) / "labels" / sample_name(static_cast<int>(i), ".pgm")).string());
    }
}

std::vector<SegSample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<SegSample> out;
    for (int i = 0;; ++i) {
        const auto img = fs::path(dir) / "images" / sample_name(i, ".ppm");
        const auto lab = fs::path(dir) / "labels" / sample_name(i, ".pgm");
        if (!fs::exists(img)) break;
        if (!fs::exists(lab)) throw IoError("dataset: missing " + lab.string());
        SegSample s;
        s.image = load_image_ppm(img.string());
        s.labels = load_labels_pgm(lab.string());
        if (s.image.shape().h != s.labels.h || s.image.shape().w != s.labels.w)
            throw DataError("dataset: image/label extents differ for index " + std::to_string(i));
        out.push_back(std::move(s));
    }
    if (out.empty()) throw IoError("dataset: no samples under '" + dir + "'");
    return out;
}

void AugmentConfig::validate() const {
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ConfigError("hflip_prob must be in [0,1]");
    if (scale_lo <= 0.0 || scale_hi < scale_lo)
        throw ConfigError("scale range must satisfy 0 < lo <= hi");
    if (crop_h < 0 || crop_w < 0) throw ConfigError("crop extents must be non-negative");
}

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w) {
    const Shape4& s = image.shape();
    Tensor out = Tensor::zeros({s.n, s.c, out_h, out_w}, image.dtype());
    const double ry = static_cast<double>(s.h) / static_cast<double>(out_h);
    const double rx = static_cast<double>(s.w) / static_cast<double>(out_w);
    for (int64_t nc = 0; nc < s.n * s.c; ++nc)
        for (int64_t oy = 0; oy < out_h; ++oy) {
            double sy = (static_cast<double>(oy) + 0.5) * ry - 0.5;
            sy = std::clamp(sy, 0.0, static_cast<double>(s.h - 1));
            const int64_t y0 = static_cast<int64_t>(std::floor(sy));
            const int64_t y1 = std::min(y0 + 1, s.h - 1);
            const double fy = sy - static_cast<double>(y0);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                double sx = (static_cast<double>(ox) + 0.5) * rx - 0.5;
                sx = std::clamp(sx, 0.0, static_cast<double>(s.w - 1));
                const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                const int64_t x1 = std::min(x0 + 1, s.w - 1);
                const double fx = sx - static_cast<double>(x0);
                const double v00 = image.flat(nc * s.h * s.w + y0 * s.w + x0);
                const double v01 = image.flat(nc * s.h * s.w + y0 * s.w + x1);
                const double v10 = image.flat(nc * s.h * s.w + y1 * s.w + x0);
                const double v11 = image.flat(nc * s.h * s.w + y1 * s.w + x1);
                const double top = v00 + fx * (v01 - v00);
                const double bot = v10 + fx * (v11 - v10);
                out.set_flat(nc * out_h * out_w + oy * out_w + ox, top + fy * (bot - top));
            }
        }
    return out;
}

LabelMap resize_nearest(const LabelMap& labels, int64_t out_h, int64_t out_w) {
    LabelMap out(labels.n, out_h, out_w);
    for (int64_t n = 0; n < labels.n; ++n)
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const int64_t sy =
                std::clamp<int64_t>((2 * oy + 1) * labels.h / (2 * out_h), 0, labels.h - 1);
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const int64_t sx =
                    std::clamp<int64_t>((2 * ox + 1) * labels.w / (2 * out_w), 0, labels.w - 1);
                out.at(n, oy, ox) = labels.at(n, sy, sx);
            }
        }
    return out;
}

SegSample augment(const SegSample& sample, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    const Shape4& s = sample.image.shape();

    // mean subtraction
    Tensor img = sample.image.clone();
    {
        auto d = img.data<float>();
        const int64_t plane = s.h * s.w;
        for (int64_t c = 0; c < 3; ++c) {
            const float m = static_cast<float>(cfg.mean[static_cast<size_t>(c)]);
            for (int64_t i = 0; i < plane; ++i) d[static_cast<size_t>(c * plane + i)] -= m;
        }
    }
    LabelMap labels = sample.labels;

    // horizontal flip
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (unit(rng) < cfg.hflip_prob) {
        Tensor flipped = Tensor::zeros(s, img.dtype());
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t y = 0; y < s.h; ++y)
                for (int64_t x = 0; x < s.w; ++x)
                    flipped.set(0, c, y, x, img.at(0, c, y, s.w - 1 - x));
        img = flipped;
        LabelMap lf(labels.n, labels.h, labels.w);
        for (int64_t y = 0; y < labels.h; ++y)
            for (int64_t x = 0; x < labels.w; ++x) lf.at(0, y, x) = labels.at(0, y, labels.w - 1 - x);
        labels = lf;
    }

    // uniform scale
    std::uniform_real_distribution<double> sdist(cfg.scale_lo, cfg.scale_hi);
    const double scale = sdist(rng);
    const int64_t sh = std::max<int64_t>(1, std::llround(static_cast<double>(s.h) * scale));
    const int64_t sw = std::max<int64_t>(1, std::llround(static_cast<double>(s.w) * scale));
    if (sh != s.h || sw != s.w) {
        img = resize_bilinear(img, sh, sw);
        labels = resize_nearest(labels, sh, sw);
    }

    // random crop with padding; padded image pixels are 0 (= mean), labels 255
    const int64_t ch = cfg.crop_h > 0 ? cfg.crop_h : sh;
    const int64_t cw = cfg.crop_w > 0 ? cfg.crop_w : sw;
    const int64_t canvas_h = std::max(ch, sh);
    const int64_t canvas_w = std::max(cw, sw);
    std::uniform_int_distribution<int64_t> ydist(0, canvas_h - ch);
    std::uniform_int_distribution<int64_t> xdist(0, canvas_w - cw);
    const int64_t y0 = ydist(rng);
    const int64_t x0 = xdist(rng);

    SegSample out;
    out.image = Tensor::zeros({1, 3, ch, cw});
    out.labels = LabelMap(1, ch, cw, kIgnoreLabel);
    for (int64_t y = 0; y < ch; ++y) {
        const int64_t sy = y + y0;
        if (sy >= sh) continue;
        for (int64_t x = 0; x < cw; ++x) {
            const int64_t sx = x + x0;
            if (sx >= sw) continue;
            for (int64_t c = 0; c < 3; ++c) out.image.set(0, c, y, x, img.at(0, c, sy, sx));
            out.labels.at(0, y, x) = labels.at(0, sy, sx);
        }
    }
    return out;
}

// ---- checkpoint container ---------------------------------------------------

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'F', 'A', 'C'};
constexpr uint32_t kCheckpointVersion = 1;

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint16_t get_u16(const std::string& b, size_t& pos) {
    if (pos + 2 > b.size()) throw ParseError("checkpoint truncated reading u16");
    const auto* p = reinterpret_cast<const uint8_t*>(b.data() + pos);
    pos += 2;
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

uint32_t get_u32(const std::string& b, size_t& pos) {
    if (pos + 4 > b.size()) throw ParseError("checkpoint truncated reading u32");
    const auto* p = reinterpret_cast<const uint8_t*>(b.data() + pos);
    pos += 4;
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void append_tensor_entry(std::string& out, const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw ContractError("parameter name too long");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(t.dtype()));
    const Shape4& s = t.shape();
    for (int i = 0; i < 4; ++i) put_u32(out, static_cast<uint32_t>(s[i]));
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        out.append(reinterpret_cast<const char*>(d.data()), d.size() * 4);
    } else {
        auto d = t.data<double>();
        out.append(reinterpret_cast<const char*>(d.data()), d.size() * 8);
    }
}

std::map<std::string, std::string> parse_config_block(const std::string& text) {
    std::map<std::string, std::string> cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("bad checkpoint config line '" + line + "'");
        cfg[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return cfg;
}

std::string model_config_text(const ModelSpec& spec,
                              const std::map<std::string, std::string>& extra) {
    std::map<std::string, std::string> cfg = extra;
    cfg["variant"] = variant_name(spec.variant);
    cfg["num_backbones"] = std::to_string(spec.num_backbones);
    cfg["num_classes"] = std::to_string(spec.num_classes);
    cfg["decoder_width"] = std::to_string(spec.decoder_width);
    cfg["dtype"] = dtype_name(spec.dtype);
    std::string text;
    for (const auto& [k, v] : cfg) text += k + "=" + v + "\n";
    return text;
}

ModelSpec spec_from_config(const std::map<std::string, std::string>& cfg) {
    ModelSpec spec;
    auto need = [&](const char* key) {
        const auto it = cfg.find(key);
        if (it == cfg.end()) throw ParseError(std::string("checkpoint config missing '") + key + "'");
        return it->second;
    };
    const std::string v = need("variant");
    if (v == "A")
        spec.variant = Variant::A;
    else if (v == "B")
        spec.variant = Variant::B;
    else
        throw ParseError("checkpoint config has unknown variant '" + v + "'");
    spec.num_backbones = std::stoi(need("num_backbones"));
    spec.num_classes = std::stoll(need("num_classes"));
    spec.decoder_width = std::stoll(need("decoder_width"));
    const std::string dt = need("dtype");
    if (dt == "f32")
        spec.dtype = DType::F32;
    else if (dt == "f64")
        spec.dtype = DType::F64;
    else
        throw ParseError("checkpoint config has unknown dtype '" + dt + "'");
    return spec;
}

struct RawCheckpoint {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

RawCheckpoint read_checkpoint_file(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16) throw ParseError(path + ": too short for a checkpoint");
    const uint32_t stored_crc = [&] {
        size_t pos = bytes.size() - 4;
        return get_u32(bytes, pos);
    }();
    const uint32_t actual_crc =
        crc32(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size() - 4);
    if (stored_crc != actual_crc)
        throw DataError(path + ": checkpoint CRC mismatch (stored " + std::to_string(stored_crc) +
                        ", computed " + std::to_string(actual_crc) + ")");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw ParseError(path + ": bad checkpoint magic");
    size_t pos = 4;
    const uint32_t version = get_u32(bytes, pos);
    if (version != kCheckpointVersion)
        throw ParseError(path + ": unknown checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = get_u32(bytes, pos);
    if (pos + cfg_len > bytes.size() - 4) throw ParseError(path + ": truncated config block");
    RawCheckpoint raw;
    raw.config = parse_config_block(bytes.substr(pos, cfg_len));
    pos += cfg_len;

    const size_t end = bytes.size() - 4;
    while (pos < end) {
        const uint16_t name_len = get_u16(bytes, pos);
        if (pos + name_len > end) throw ParseError(path + ": truncated tensor name");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        if (pos >= end) throw ParseError(path + ": truncated tensor header");
        const uint8_t dtype_code = static_cast<uint8_t>(bytes[pos++]);
        if (dtype_code > 1) throw ParseError(path + ": bad dtype code for '" + name + "'");
        Shape4 s;
        s.n = get_u32(bytes, pos);
        s.c = get_u32(bytes, pos);
        s.h = get_u32(bytes, pos);
        s.w = get_u32(bytes, pos);
        Tensor t = Tensor::zeros(s, static_cast<DType>(dtype_code));
        const size_t payload = static_cast<size_t>(s.numel()) * dtype_size(t.dtype());
        if (pos + payload > end) throw ParseError(path + ": truncated payload for '" + name + "'");
        if (t.dtype() == DType::F32)
            std::memcpy(t.data<float>().data(), bytes.data() + pos, payload);
        else
            std::memcpy(t.data<double>().data(), bytes.data() + pos, payload);
        pos += payload;
        raw.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (pos != end) throw ParseError(path + ": misaligned tensor section");
    return raw;
}

void fill_model_from(DfaNet& model, const RawCheckpoint& raw, const std::string& path) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : raw.tensors) {
        if (!by_name.emplace(name, &t).second)
            throw ParseError(path + ": duplicate tensor entry '" + name + "'");
    }
    auto restore = [&](const std::string& name, Tensor& dst) {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw ConfigError(path + ": checkpoint is missing parameter '" + name + "'");
        const Tensor& src = *it->second;
        if (!(src.shape() == dst.shape()) || src.dtype() != dst.dtype())
            throw ConfigError(path + ": parameter '" + name + "' has shape " + src.shape().str() +
                              "/" + dtype_name(src.dtype()) + ", model expects " +
                              dst.shape().str() + "/" + dtype_name(dst.dtype()));
        if (dst.dtype() == DType::F32)
            std::copy_n(src.data<float>().data(), src.numel(), dst.data<float>().data());
        else
            std::copy_n(src.data<double>().data(), src.numel(), dst.data<double>().data());
        by_name.erase(it);
    };
    for (auto& [name, t] : model.registry().params) restore(name, t);
    for (auto& [name, t] : model.registry().buffers) restore(name, t);
    if (!by_name.empty())
        throw ConfigError(path + ": checkpoint has unknown parameter '" +
                          by_name.begin()->first + "'");
}

}  // namespace

void save_checkpoint(const DfaNet& model, const std::string& path,
                     const std::map<std::string, std::string>& extra) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    const std::string cfg = model_config_text(model.spec(), extra);
    put_u32(out, static_cast<uint32_t>(cfg.size()));
    out.append(cfg);
    for (const auto& [name, t] : model.registry().params) append_tensor_entry(out, name, t);
    for (const auto& [name, t] : model.registry().buffers) append_tensor_entry(out, name, t);
    put_u32(out, crc32(reinterpret_cast<const uint8_t*>(out.data()), out.size()));
    write_file(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    RawCheckpoint raw = read_checkpoint_file(path);
    LoadedCheckpoint result;
    result.config = raw.config;
    result.model = std::make_unique<DfaNet>(spec_from_config(raw.config), 0);
    fill_model_from(*result.model, raw, path);
    return result;
}

std::map<std::string, std::string> load_checkpoint_into(DfaNet& model, const std::string& path) {
    RawCheckpoint raw = read_checkpoint_file(path);
    const ModelSpec stored = spec_from_config(raw.config);
    const ModelSpec& want = model.spec();
    if (stored.variant != want.variant || stored.num_backbones != want.num_backbones ||
        stored.num_classes != want.num_classes || stored.decoder_width != want.decoder_width ||
        stored.dtype != want.dtype)
        throw ConfigError(path + ": checkpoint spec (variant " +
                          std::string(variant_name(stored.variant)) + ", N=" +
                          std::to_string(stored.num_backbones) + ", K=" +
                          std::to_string(stored.num_classes) + ") does not match the model");
    fill_model_from(model, raw, path);
    return raw.config;
}

}  // namespace dfa
