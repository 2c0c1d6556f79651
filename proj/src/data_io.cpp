#include "dpe/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "dpe/errors.hpp"

namespace fs = std::filesystem;

namespace dpe {

namespace {

std::uint32_t read_be_u32(std::istream& in, const std::string& path, std::size_t& offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in)
        throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
    offset += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::vector<unsigned char> read_exact(std::istream& in, std::size_t n,
                                      const std::string& path, std::size_t& offset) {
    std::vector<unsigned char> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n));
    if (std::size_t(in.gcount()) != n)
        throw FormatError(path + ": truncated at byte offset " +
                          std::to_string(offset + std::size_t(in.gcount())));
    offset += n;
    return buf;
}

std::ifstream open_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open");
    return in;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    Dataset ds;
    {
        std::ifstream in = open_binary(images_path);
        std::size_t off = 0;
        const std::uint32_t magic = read_be_u32(in, images_path, off);
        if (magic != 0x00000803u)
            throw FormatError(images_path + ": bad image magic at byte offset 0");
        const std::uint32_t n = read_be_u32(in, images_path, off);
        const std::uint32_t h = read_be_u32(in, images_path, off);
        const std::uint32_t w = read_be_u32(in, images_path, off);
        if (h == 0 || w == 0)
            throw FormatError(images_path + ": zero image dimension at byte offset 8");
        for (std::uint32_t i = 0; i < n; ++i) {
            auto raw = read_exact(in, std::size_t(h) * w, images_path, off);
            Tensor img({1, h, w});
            for (std::size_t j = 0; j < raw.size(); ++j) img[j] = raw[j] / 255.0;
            ds.inputs.push_back(std::move(img));
        }
    }
    {
        std::ifstream in = open_binary(labels_path);
        std::size_t off = 0;
        const std::uint32_t magic = read_be_u32(in, labels_path, off);
        if (magic != 0x00000801u)
            throw FormatError(labels_path + ": bad label magic at byte offset 0");
        const std::uint32_t n = read_be_u32(in, labels_path, off);
        if (n != ds.inputs.size())
            throw FormatError(labels_path + ": label count " + std::to_string(n) +
                              " does not match image count " + std::to_string(ds.inputs.size()));
        auto raw = read_exact(in, n, labels_path, off);
        int maxlab = 0;
        for (unsigned char v : raw) {
            ds.labels.push_back(int(v));
            maxlab = std::max(maxlab, int(v));
        }
        ds.num_classes = maxlab + 1;
    }
    return ds;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths) {
    constexpr std::size_t kRecord = 3073;
    Dataset ds;
    ds.num_classes = 10;
    for (const std::string& path : paths) {
        std::ifstream in = open_binary(path);
        std::size_t off = 0;
        in.seekg(0, std::ios::end);
        const std::size_t size = std::size_t(in.tellg());
        in.seekg(0);
        if (size == 0 || size % kRecord != 0)
            throw FormatError(path + ": size " + std::to_string(size) +
                              " is not a multiple of the 3073-byte record");
        const std::size_t n = size / kRecord;
        for (std::size_t i = 0; i < n; ++i) {
            auto rec = read_exact(in, kRecord, path, off);
            if (rec[0] >= 10)
                throw DataError(path + ": record " + std::to_string(i) + " has label " +
                                std::to_string(int(rec[0])) + " >= 10");
            ds.labels.push_back(int(rec[0]));
            Tensor img({3, 32, 32});
            for (std::size_t j = 0; j < 3072; ++j) img[j] = rec[1 + j] / 255.0;
            ds.inputs.push_back(std::move(img));
        }
    }
    return ds;
}

namespace {

// Reads one PNM header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(char(c));
    }
    if (tok.empty()) throw FormatError(path + ": truncated PNM header");
    return tok;
}

void read_pnm_header(std::istream& in, const std::string& path, const std::string& magic,
                     std::size_t& w, std::size_t& h) {
    if (pnm_token(in, path) != magic)
        throw FormatError(path + ": expected " + magic + " magic");
    w = std::stoul(pnm_token(in, path));
    h = std::stoul(pnm_token(in, path));
    const unsigned long maxval = std::stoul(pnm_token(in, path));
    if (w == 0 || h == 0) throw FormatError(path + ": zero dimension");
    if (maxval != 255) throw FormatError(path + ": only maxval 255 supported");
}

}  // namespace

Dataset load_seg_pairs(const std::string& dir, int num_classes) {
    std::map<std::string, std::pair<fs::path, fs::path>> stems;  // stem -> (ppm, pgm)
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const fs::path p = entry.path();
        if (p.extension() == ".ppm")
            stems[p.stem().string()].first = p;
        else if (p.extension() == ".pgm")
            stems[p.stem().string()].second = p;
    }
    if (stems.empty()) throw DataError(dir + ": no .ppm/.pgm pairs found");

    Dataset ds;
    ds.segmentation = true;
    ds.num_classes = num_classes;
    for (const auto& [stem, pair] : stems) {
        if (pair.first.empty())
            throw DataError(dir + ": mask '" + stem + ".pgm' has no paired image");
        if (pair.second.empty())
            throw DataError(dir + ": image '" + stem + ".ppm' has no paired mask");
        const std::string ipath = pair.first.string(), mpath = pair.second.string();
        std::ifstream iin = open_binary(ipath);
        std::size_t w, h;
        read_pnm_header(iin, ipath, "P6", w, h);
        std::size_t off = 0;
        auto raw = read_exact(iin, w * h * 3, ipath, off);
        Tensor img({3, h, w});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    img.vec()[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] / 255.0;

        std::ifstream min = open_binary(mpath);
        std::size_t mw, mh;
        read_pnm_header(min, mpath, "P5", mw, mh);
        if (mw != w || mh != h)
            throw DataError(mpath + ": mask size does not match image");
        off = 0;
        auto mraw = read_exact(min, w * h, mpath, off);
        std::vector<int> mask(w * h);
        for (std::size_t j = 0; j < mraw.size(); ++j) {
            if (int(mraw[j]) >= num_classes)
                throw DataError(mpath + ": mask value " + std::to_string(int(mraw[j])) +
                                " >= K=" + std::to_string(num_classes));
            mask[j] = int(mraw[j]);
        }
        ds.inputs.push_back(std::move(img));
        ds.masks.push_back(std::move(mask));
    }
    return ds;
}

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ConfigError("write_ppm: expected (3,H,W) image");
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    out << "P6\n" << w << " " << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image.vec()[(c * h + y) * w + x], 0.0, 1.0);
                out.put(char(std::lround(v * 255.0)));
            }
}

void write_pgm(const std::string& path, const std::vector<int>& mask, int h, int w) {
    if (mask.size() != std::size_t(h) * std::size_t(w))
        throw ConfigError("write_pgm: mask size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    out << "P5\n" << w << " " << h << "\n255\n";
    for (int v : mask) out.put(char(v));
}

Dataset synth_blobs(int num_classes, int n, int dim, std::uint64_t seed,
                    double radius, double spread) {
    if (num_classes < 2) throw ConfigError("synth_blobs: need K >= 2");
    if (dim < 2) throw ConfigError("synth_blobs: need dim >= 2");
    Dataset ds;
    ds.num_classes = num_classes;
    if (n == 0) return ds;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spread);
    for (int i = 0; i < n; ++i) {
        const int k = int(rng() % std::uint64_t(num_classes));
        const double ang = 2.0 * 3.14159265358979323846 * k / num_classes;
        Tensor x({std::size_t(dim)});
        x[0] = radius * std::cos(ang) + noise(rng);
        x[1] = radius * std::sin(ang) + noise(rng);
        for (int d = 2; d < dim; ++d) x[d] = noise(rng);
        ds.inputs.push_back(std::move(x));
        ds.labels.push_back(k);
    }
    return ds;
}

Dataset synth_shapes_seg(int n, int height, int width, std::uint64_t seed,
                         double rare_image_fraction) {
    Dataset ds;
    ds.segmentation = true;
    ds.num_classes = 4;
    if (n == 0) return ds;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> pix_noise(0.0, 0.05);
    const double base[4][3] = {
        {0.10, 0.15, 0.20},  // background
        {0.55, 0.35, 0.20},  // rectangle
        {0.20, 0.60, 0.35},  // disk
        {0.95, 0.90, 0.30},  // rare square
    };
    auto randint = [&](int lo, int hi) {  // inclusive
        return lo + int(rng() % std::uint64_t(hi - lo + 1));
    };
    for (int i = 0; i < n; ++i) {
        std::vector<int> mask(std::size_t(height) * width, 0);
        auto set_rect = [&](int y0, int x0, int h, int w, int cls) {
            for (int y = y0; y < std::min(y0 + h, height); ++y)
                for (int x = x0; x < std::min(x0 + w, width); ++x)
                    mask[std::size_t(y) * width + x] = cls;
        };
        // several rectangles and disks: boundary-dense common classes
        for (int shape = 0; shape < 3; ++shape) {
            const int h = randint(height / 6, height / 3), w = randint(width / 6, width / 3);
            set_rect(randint(0, height - h), randint(0, width - w), h, w, 1);
        }
        for (int shape = 0; shape < 3; ++shape) {
            const int r = randint(std::max(2, std::min(height, width) / 12),
                                  std::min(height, width) / 6);
            const int cy = randint(r, height - 1 - r), cx = randint(r, width - 1 - r);
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                        mask[std::size_t(y) * width + x] = 2;
        }
        // rare small square in a fraction of the images; scaled so it can
        // dominate at least part of a coarse prediction grid
        if (uni(rng) < rare_image_fraction) {
            const int s = std::max(2, std::min(height, width) / 4);
            set_rect(randint(0, height - s), randint(0, width - s), s, s, 3);
        }
        Tensor img({3, std::size_t(height), std::size_t(width)});
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const int cls = mask[std::size_t(y) * width + x];
                for (int c = 0; c < 3; ++c)
                    img.vec()[(std::size_t(c) * height + y) * width + x] =
                        std::clamp(base[cls][c] + pix_noise(rng), 0.0, 1.0);
            }
        ds.inputs.push_back(std::move(img));
        ds.masks.push_back(std::move(mask));
    }
    return ds;
}

std::vector<std::pair<double, double>> channel_statistics(const Dataset& ds) {
    if (ds.inputs.empty()) throw ConfigError("channel_statistics: empty dataset");
    const std::size_t channels = ds.inputs[0].dim(0);
    std::vector<double> sum(channels, 0.0), sumsq(channels, 0.0);
    std::vector<std::size_t> count(channels, 0);
    for (const Tensor& t : ds.inputs) {
        if (t.dim(0) != channels) throw ConfigError("channel_statistics: channel mismatch");
        const std::size_t per = t.numel() / channels;
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t j = 0; j < per; ++j) {
                const double v = t[c * per + j];
                sum[c] += v;
                sumsq[c] += v * v;
                count[c]++;
            }
    }
    std::vector<std::pair<double, double>> stats(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double mean = sum[c] / double(count[c]);
        const double var = sumsq[c] / double(count[c]) - mean * mean;
        const double sd = std::sqrt(std::max(var, 0.0));
        if (sd <= 0.0)
            throw ConfigError("normalize: channel " + std::to_string(c) + " is constant");
        stats[c] = {mean, sd};
    }
    return stats;
}

Dataset normalize_with(const Dataset& ds,
                       const std::vector<std::pair<double, double>>& stats) {
    Dataset out = ds;
    out.channel_stats = stats;
    for (Tensor& t : out.inputs) {
        if (t.dim(0) != stats.size()) throw ConfigError("normalize: channel mismatch");
        const std::size_t per = t.numel() / stats.size();
        for (std::size_t c = 0; c < stats.size(); ++c)
            for (std::size_t j = 0; j < per; ++j)
                t[c * per + j] = (t[c * per + j] - stats[c].first) / stats[c].second;
    }
    return out;
}

Dataset normalize(const Dataset& ds) { return normalize_with(ds, channel_statistics(ds)); }

namespace {

// Reflection index into [0, n): mirrors without repeating the border pixel.
int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

}  // namespace

AugmentedBatch augment(const Dataset& ds, const std::vector<std::uint32_t>& indices,
                       const AugmentPolicy& policy, std::uint64_t seed) {
    AugmentedBatch out;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (std::uint32_t idx : indices) {
        const Tensor& src = ds.inputs.at(idx);
        if (src.ndim() != 3) {  // vectors pass through untouched
            out.inputs.push_back(src);
            if (ds.segmentation) out.masks.push_back(ds.masks.at(idx));
            continue;
        }
        const int C = int(src.dim(0)), H = int(src.dim(1)), W = int(src.dim(2));
        const int p = policy.pad;
        const int dy = p > 0 ? int(rng() % std::uint64_t(2 * p + 1)) : 0;
        const int dx = p > 0 ? int(rng() % std::uint64_t(2 * p + 1)) : 0;
        const bool flip = uni(rng) < policy.hflip_prob;
        auto src_y = [&](int y) { return reflect(y + dy - p, H); };
        auto src_x = [&](int x) {
            const int xx = flip ? W - 1 - x : x;
            return reflect(xx + dx - p, W);
        };
        Tensor img({std::size_t(C), std::size_t(H), std::size_t(W)});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    img.vec()[(std::size_t(c) * H + y) * W + x] =
                        src.vec()[(std::size_t(c) * H + src_y(y)) * W + src_x(x)];
        out.inputs.push_back(std::move(img));
        if (ds.segmentation) {
            const std::vector<int>& smask = ds.masks.at(idx);
            std::vector<int> mask(std::size_t(H) * W);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    mask[std::size_t(y) * W + x] = smask[std::size_t(src_y(y)) * W + src_x(x)];
            out.masks.push_back(std::move(mask));
        }
    }
    return out;
}

Tensor make_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw ConfigError("make_batch: empty batch");
    std::vector<std::size_t> shape{items.size()};
    for (std::size_t d : items[0].shape()) shape.push_back(d);
    Tensor out(shape);
    const std::size_t per = items[0].numel();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!items[i].same_shape(items[0])) throw ConfigError("make_batch: shape mismatch");
        std::copy(items[i].vec().begin(), items[i].vec().end(), out.data() + i * per);
    }
    return out;
}

Tensor make_batch(const Dataset& ds, const std::vector<std::uint32_t>& indices) {
    std::vector<Tensor> items;
    items.reserve(indices.size());
    for (std::uint32_t i : indices) items.push_back(ds.inputs.at(i));
    return make_batch(items);
}

}  // namespace dpe
