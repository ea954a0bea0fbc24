#include "mim/data.h"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "binary_io.h"
#include "mim/error.h"

namespace mim {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'C', 'O', 'R', 'P', '1'};

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

bool inside_shape(std::size_t cls, double x, double y, double cx, double cy, double r) {
    const double dx = x - cx, dy = y - cy;
    switch (cls % 4) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::abs(dx) <= 0.9 * r && std::abs(dy) <= 0.9 * r;
        case 2: {  // upward triangle
            if (dy < -r || dy > r) return false;
            const double t = (dy + r) / (2.0 * r);  // 0 at apex, 1 at base
            return std::abs(dx) <= t * r;
        }
        default:  // cross
            return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) ||
                   (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
    }
}

void check_image(const Tensor& image) {
    if (image.rank() != 3) throw ContractError("image must be H x W x C, got " + image.shape_str());
}

}  // namespace

bool Corpus::labeled() const {
    if (images.empty()) return false;
    for (std::uint32_t l : labels)
        if (l == kNoLabel) return false;
    return true;
}

Corpus synth_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                     std::size_t image_size, std::size_t channels) {
    if (classes < 2) throw UserError("synthetic dataset needs at least 2 classes");
    if (classes > 4) throw UserError("synthetic dataset supports at most 4 shape classes");
    if (image_size < 8) throw UserError("synthetic images must be at least 8x8");
    if (channels == 0) throw UserError("synthetic images need at least 1 channel");

    Corpus corpus;
    corpus.images.reserve(count);
    corpus.labels.reserve(count);
    corpus.seg.reserve(count);
    const double s = static_cast<double>(image_size);

    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t label = static_cast<std::uint32_t>(i % classes);
        Rng rng(substream(seed, "synth-image", i));

        std::vector<float> base(channels);
        for (std::size_t c = 0; c < channels; ++c)
            base[c] = static_cast<float>(0.05 + 0.40 * rng.uniform());

        Tensor img({image_size, image_size, channels});
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x)
                for (std::size_t c = 0; c < channels; ++c)
                    img[(y * image_size + x) * channels + c] = clamp01(
                        base[c] + static_cast<float>(0.08 * (2.0 * rng.uniform() - 1.0)));

        const double cx = s * (0.5 + 0.30 * (rng.uniform() - 0.5));
        const double cy = s * (0.5 + 0.30 * (rng.uniform() - 0.5));
        const double r = s * (0.15 + 0.15 * rng.uniform());
        std::vector<float> color(channels);
        for (std::size_t c = 0; c < channels; ++c)
            color[c] = static_cast<float>(0.55 + 0.45 * rng.uniform());

        Tensor mask({image_size, image_size, 1});
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x)
                if (inside_shape(label, x + 0.5, y + 0.5, cx, cy, r)) {
                    for (std::size_t c = 0; c < channels; ++c)
                        img[(y * image_size + x) * channels + c] = color[c];
                    mask[y * image_size + x] = 1.0f;
                }

        corpus.images.push_back(std::move(img));
        corpus.labels.push_back(label);
        corpus.seg.push_back(std::move(mask));
    }
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    if (corpus.labels.size() != corpus.images.size())
        throw ContractError("corpus has " + std::to_string(corpus.images.size()) + " images but " +
                            std::to_string(corpus.labels.size()) + " labels");
    io::Writer w(path);
    w.bytes(kMagic, 8);
    w.u32(static_cast<std::uint32_t>(corpus.size()));
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Tensor& img = corpus.images[i];
        check_image(img);
        w.u32(static_cast<std::uint32_t>(img.shape()[0]));
        w.u32(static_cast<std::uint32_t>(img.shape()[1]));
        w.u32(static_cast<std::uint32_t>(img.shape()[2]));
        w.u32(corpus.labels[i]);
        w.f32_payload(img.data(), img.size());
    }
    if (!w.good()) throw UserError("write failure on " + path);
}

namespace {

Corpus load_corpus_file(const std::string& path) {
    io::Reader r(path, "corpus");
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad magic in " + path, 0);
    const std::uint32_t count = r.u32();
    Corpus corpus;
    corpus.images.reserve(count);
    corpus.labels.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint64_t header_at = r.offset();
        const std::uint32_t h = r.u32();
        const std::uint32_t w32 = r.u32();
        const std::uint32_t c = r.u32();
        if (h == 0 || w32 == 0 || c == 0 || h > 1u << 16 || w32 > 1u << 16 || c > 64)
            throw FormatError("invalid image header in " + path, header_at);
        const std::uint32_t label = r.u32();
        const std::size_t n = std::size_t(h) * w32 * c;
        std::vector<float> pix(n);
        r.f32_payload(pix.data(), n);
        Tensor img = Tensor::from({h, w32, c}, std::move(pix));
        if (!img.all_finite())
            throw FormatError("non-finite pixel in image " + std::to_string(i) + " of " + path,
                              r.offset() - n * 4);
        corpus.images.push_back(std::move(img));
        corpus.labels.push_back(label);
    }
    return corpus;
}

// P5/P6 header: token stream with '#' comments, then a single whitespace
// before the raw payload.
struct PnmHeader {
    int channels;
    std::size_t width, height, maxval;
    std::size_t payload_at;
};

PnmHeader parse_pnm_header(const std::string& path, const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("not a P5/P6 raster file: " + path, 0);
    PnmHeader hdr;
    hdr.channels = bytes[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    std::size_t fields[3];
    for (int f = 0; f < 3; ++f) {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        std::size_t v = 0;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
        if (pos == start) throw FormatError("malformed raster header in " + path, start);
        fields[f] = v;
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError("malformed raster header in " + path, pos);
    ++pos;
    hdr.width = fields[0];
    hdr.height = fields[1];
    hdr.maxval = fields[2];
    hdr.payload_at = pos;
    if (hdr.width == 0 || hdr.height == 0)
        throw FormatError("empty raster dimensions in " + path, 2);
    if (hdr.maxval == 0 || hdr.maxval > 255)
        throw FormatError("unsupported raster maxval in " + path, 2);
    return hdr;
}

}  // namespace

Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UserError("cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const PnmHeader hdr = parse_pnm_header(path, bytes);
    const std::size_t n = hdr.width * hdr.height * static_cast<std::size_t>(hdr.channels);
    if (bytes.size() - hdr.payload_at < n)
        throw FormatError("truncated raster payload in " + path, bytes.size());
    Tensor img({hdr.height, hdr.width, static_cast<std::size_t>(hdr.channels)});
    const float scale = 1.0f / static_cast<float>(hdr.maxval);
    for (std::size_t i = 0; i < n; ++i)
        img[i] = scale * static_cast<float>(static_cast<unsigned char>(bytes[hdr.payload_at + i]));
    return img;
}

Corpus load_corpus(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (!entry.is_regular_file()) continue;
            const std::string ext = entry.path().extension().string();
            if (ext == ".pgm" || ext == ".ppm" || ext == ".PGM" || ext == ".PPM")
                files.push_back(entry.path().string());
        }
        std::sort(files.begin(), files.end());
        Corpus corpus;
        for (const std::string& f : files) {
            corpus.images.push_back(read_pnm(f));
            corpus.labels.push_back(kNoLabel);
        }
        return corpus;
    }
    return load_corpus_file(path);
}

void normalize_corpus(Corpus& corpus, const std::vector<float>& mean,
                      const std::vector<float>& std_dev) {
    if (mean.size() != std_dev.size())
        throw ContractError("normalization mean/std sizes differ");
    for (float s : std_dev)
        if (!(s > 0.0f)) throw ContractError("normalization std must be positive");
    for (Tensor& img : corpus.images) {
        check_image(img);
        const std::size_t channels = img.shape()[2];
        if (channels != mean.size())
            throw ContractError("normalization expects " + std::to_string(mean.size()) +
                                " channels, image has " + std::to_string(channels));
        for (std::size_t i = 0; i < img.size(); ++i) {
            const std::size_t c = i % channels;
            img[i] = (img[i] - mean[c]) / std_dev[c];
        }
    }
}

Tensor random_crop_flip(const Tensor& image, std::size_t pad, Rng& rng, Tensor* mask,
                        bool allow_flip) {
    check_image(image);
    const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    if (mask != nullptr && (mask->rank() != 3 || mask->shape()[0] != h || mask->shape()[1] != w))
        throw ContractError("mask shape does not match image");

    const std::size_t dy = static_cast<std::size_t>(rng.below(2 * pad + 1));
    const std::size_t dx = static_cast<std::size_t>(rng.below(2 * pad + 1));
    const bool flip = allow_flip && rng.bernoulli(0.5);

    const auto src_index = [&](std::size_t y, std::size_t x) {
        // Position in the replicate-padded image, clamped back to the frame.
        const auto clamp_ax = [](std::ptrdiff_t v, std::size_t hi) {
            if (v < 0) return std::size_t{0};
            if (static_cast<std::size_t>(v) >= hi) return hi - 1;
            return static_cast<std::size_t>(v);
        };
        const std::size_t sy = clamp_ax(static_cast<std::ptrdiff_t>(y + dy) -
                                            static_cast<std::ptrdiff_t>(pad), h);
        std::size_t sx = clamp_ax(static_cast<std::ptrdiff_t>(x + dx) -
                                      static_cast<std::ptrdiff_t>(pad), w);
        if (flip) sx = w - 1 - sx;
        return sy * w + sx;
    };

    Tensor out({h, w, c});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t s = src_index(y, x);
            for (std::size_t k = 0; k < c; ++k)
                out[(y * w + x) * c + k] = image[s * c + k];
        }
    if (mask != nullptr) {
        const std::size_t mc = mask->shape()[2];
        Tensor m({h, w, mc});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t s = src_index(y, x);
                for (std::size_t k = 0; k < mc; ++k)
                    m[(y * w + x) * mc + k] = (*mask)[s * mc + k];
            }
        *mask = std::move(m);
    }
    return out;
}

void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) throw ContractError("graymap must be rank 2, got " + gray.shape_str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UserError("cannot open for writing: " + path);
    out << "P5\n" << gray.cols() << " " << gray.rows() << "\n255\n";
    std::vector<unsigned char> row(gray.cols());
    for (std::size_t r = 0; r < gray.rows(); ++r) {
        for (std::size_t c = 0; c < gray.cols(); ++c)
            row[c] = static_cast<unsigned char>(std::lround(255.0f * clamp01(gray.at(r, c))));
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw UserError("write failure on " + path);
}

}  // namespace mim
