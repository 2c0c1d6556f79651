#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "dpe/data_io.hpp"
#include "dpe/errors.hpp"

using namespace dpe;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void put_u32be(std::ostream& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.put(char((v >> (8 * i)) & 0xff));
}

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::uint32_t n, std::uint32_t h, std::uint32_t w,
                      std::uint32_t magic = 0x00000803) {
    std::ofstream f(path, std::ios::binary);
    put_u32be(f, magic);
    put_u32be(f, n);
    put_u32be(f, h);
    put_u32be(f, w);
    f.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels,
                      std::uint32_t magic = 0x00000801) {
    std::ofstream f(path, std::ios::binary);
    put_u32be(f, magic);
    put_u32be(f, std::uint32_t(labels.size()));
    f.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
}

}  // namespace

TEST_CASE("idx loader") {
    const fs::path dir = temp_dir("dpe_idx");
    const std::string imgs = (dir / "imgs.idx").string();
    const std::string labs = (dir / "labs.idx").string();
    std::vector<std::uint8_t> pixels(2 * 2 * 3);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t(i * 20);
    write_idx_images(imgs, pixels, 2, 2, 3);
    write_idx_labels(labs, {4, 9});

    SUBCASE("fixture round-trip") {
        const Dataset ds = load_idx(imgs, labs);
        REQUIRE(ds.size() == 2);
        CHECK(ds.inputs[0].shape() == std::vector<std::size_t>{1, 2, 3});
        CHECK(ds.labels == std::vector<int>{4, 9});
        CHECK(ds.num_classes == 10);
        CHECK(ds.inputs[0][0] == doctest::Approx(0.0));
        CHECK(ds.inputs[0][1] == doctest::Approx(20.0 / 255.0));
        CHECK(ds.inputs[1][0] == doctest::Approx(120.0 / 255.0));
    }
    SUBCASE("wrong magic") {
        write_idx_images(imgs, pixels, 2, 2, 3, 0xdeadbeef);
        CHECK_THROWS_AS(load_idx(imgs, labs), FormatError);
    }
    SUBCASE("count mismatch") {
        write_idx_labels(labs, {4, 9, 1});
        CHECK_THROWS_AS(load_idx(imgs, labs), FormatError);
    }
    SUBCASE("truncation") {
        std::ofstream f(imgs, std::ios::binary);
        put_u32be(f, 0x00000803);
        put_u32be(f, 2);
        put_u32be(f, 2);
        put_u32be(f, 3);
        f.write("abc", 3);
        f.close();
        CHECK_THROWS_AS(load_idx(imgs, labs), FormatError);
    }
    fs::remove_all(dir);
}

TEST_CASE("cifar binary loader") {
    const fs::path dir = temp_dir("dpe_cifar");
    const std::string path = (dir / "batch.bin").string();
    std::vector<std::uint8_t> rec(3073, 0);
    rec[0] = 7;  // label
    for (std::size_t i = 1; i < rec.size(); ++i) rec[i] = std::uint8_t(i % 251);
    {
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(rec.data()), 3073);
    }

    SUBCASE("single-record round-trip") {
        const Dataset ds = load_cifar_binary({path});
        REQUIRE(ds.size() == 1);
        CHECK(ds.labels[0] == 7);
        CHECK(ds.inputs[0].shape() == std::vector<std::size_t>{3, 32, 32});
        CHECK(ds.inputs[0][0] == doctest::Approx(rec[1] / 255.0));
        CHECK(ds.num_classes == 10);
    }
    SUBCASE("truncated record") {
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(rec.data()), 3000);
        f.close();
        CHECK_THROWS_AS(load_cifar_binary({path}), FormatError);
    }
    SUBCASE("label out of range") {
        rec[0] = 10;
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(rec.data()), 3073);
        f.close();
        CHECK_THROWS_AS(load_cifar_binary({path}), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("ppm/pgm segmentation pairs") {
    const fs::path dir = temp_dir("dpe_seg_pairs");
    Tensor img({3, 4, 5});
    for (std::size_t i = 0; i < img.numel(); ++i) img[i] = double(i) / double(img.numel());
    std::vector<int> mask(4 * 5, 1);
    mask[0] = 0;
    mask[7] = 2;
    write_ppm((dir / "a.ppm").string(), img);
    write_pgm((dir / "a.pgm").string(), mask, 4, 5);
    write_ppm((dir / "b.ppm").string(), img);
    write_pgm((dir / "b.pgm").string(), mask, 4, 5);

    SUBCASE("two-pair fixture round-trip") {
        const Dataset ds = load_seg_pairs(dir.string(), 3);
        REQUIRE(ds.size() == 2);
        CHECK(ds.segmentation);
        CHECK(ds.inputs[0].shape() == std::vector<std::size_t>{3, 4, 5});
        CHECK(ds.masks[0] == mask);
        // 8-bit quantized image payload
        for (std::size_t i = 0; i < img.numel(); ++i)
            CHECK(std::abs(ds.inputs[0][i] - img[i]) < 1.0 / 255.0 + 1e-9);
    }
    SUBCASE("missing mask is a data error") {
        fs::remove(dir / "b.pgm");
        CHECK_THROWS_AS(load_seg_pairs(dir.string(), 3), DataError);
    }
    SUBCASE("mask value >= K is a data error") {
        CHECK_THROWS_AS(load_seg_pairs(dir.string(), 2), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("synthetic blobs") {
    const Dataset a = synth_blobs(4, 100, 2, 5);
    const Dataset b = synth_blobs(4, 100, 2, 5);
    REQUIRE(a.size() == 100);
    CHECK(a.num_classes == 4);
    for (std::size_t i = 0; i < 100; ++i) {
        CHECK(a.labels[i] == b.labels[i]);
        for (std::size_t j = 0; j < 2; ++j) CHECK(a.inputs[i][j] == b.inputs[i][j]);
    }
    CHECK(synth_blobs(4, 0, 2, 5).size() == 0);
    // every class appears
    std::vector<int> counts(4, 0);
    for (int label : a.labels) counts[label]++;
    for (int c : counts) CHECK(c > 0);
}

TEST_CASE("synthetic shapes are class-imbalanced with a rare class") {
    const Dataset ds = synth_shapes_seg(40, 24, 32, 3);
    REQUIRE(ds.size() == 40);
    CHECK(ds.num_classes == 4);
    CHECK(ds.segmentation);
    std::vector<long> pix(4, 0);
    long total = 0;
    for (const auto& m : ds.masks)
        for (int v : m) {
            REQUIRE(v >= 0);
            REQUIRE(v < 4);
            pix[v]++;
            total++;
        }
    CHECK(pix[0] > total / 2);           // background dominates
    CHECK(pix[3] > 0);                   // rare class exists
    CHECK(double(pix[3]) / total < 0.02);  // and is rare (< 2% of pixels)
    // reproducibility
    const Dataset again = synth_shapes_seg(40, 24, 32, 3);
    CHECK(again.masks == ds.masks);
}

TEST_CASE("normalization") {
    Dataset ds = synth_blobs(3, 500, 2, 9);
    const Dataset norm = normalize(ds);
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (const Tensor& t : norm.inputs) mean += t[c];
        mean /= double(norm.size());
        double var = 0.0;
        for (const Tensor& t : norm.inputs) var += (t[c] - mean) * (t[c] - mean);
        var /= double(norm.size());
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
    }
    SUBCASE("re-applying the stored stats is idempotent-equivalent") {
        const Dataset twice = normalize_with(ds, norm.channel_stats);
        for (std::size_t i = 0; i < norm.size(); ++i)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(std::abs(twice.inputs[i][j] - norm.inputs[i][j]) < 1e-9);
    }
    SUBCASE("constant channel is an error") {
        Dataset flat;
        flat.num_classes = 2;
        for (int i = 0; i < 4; ++i) {
            flat.inputs.push_back(Tensor({2}, {1.0, double(i)}));
            flat.labels.push_back(0);
        }
        CHECK_THROWS_AS(normalize(flat), ConfigError);
    }
}

TEST_CASE("augmentation") {
    Dataset ds = synth_shapes_seg(4, 16, 16, 21);
    SUBCASE("no-op policy is the identity") {
        AugmentPolicy id{0, 0.0};
        const AugmentedBatch out = augment(ds, {0, 1}, id, 5);
        for (std::size_t n = 0; n < 2; ++n) {
            for (std::size_t i = 0; i < ds.inputs[n].numel(); ++i)
                CHECK(out.inputs[n][i] == ds.inputs[n][i]);
            CHECK(out.masks[n] == ds.masks[n]);
        }
    }
    SUBCASE("seeded reproducibility") {
        AugmentPolicy pol{2, 0.5};
        const AugmentedBatch a = augment(ds, {0, 1, 2}, pol, 9);
        const AugmentedBatch b = augment(ds, {0, 1, 2}, pol, 9);
        for (std::size_t n = 0; n < 3; ++n) {
            for (std::size_t i = 0; i < a.inputs[n].numel(); ++i)
                CHECK(a.inputs[n][i] == b.inputs[n][i]);
            CHECK(a.masks[n] == b.masks[n]);
        }
    }
    SUBCASE("image and mask receive the identical spatial transform") {
        // encode the mask into an image channel; they must stay aligned
        Dataset enc = ds;
        for (std::size_t n = 0; n < enc.size(); ++n)
            for (std::size_t p = 0; p < enc.masks[n].size(); ++p)
                enc.inputs[n][p] = double(enc.masks[n][p]);
        AugmentPolicy pol{3, 1.0};
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const AugmentedBatch out = augment(enc, {0, 1, 2, 3}, pol, seed);
            for (std::size_t n = 0; n < 4; ++n)
                for (std::size_t p = 0; p < out.masks[n].size(); ++p)
                    CHECK(out.inputs[n][p] == doctest::Approx(double(out.masks[n][p])));
        }
    }
    SUBCASE("classification vectors pass through untouched") {
        Dataset blobs = synth_blobs(3, 5, 2, 2);
        AugmentPolicy pol{4, 0.5};
        const AugmentedBatch out = augment(blobs, {0, 1}, pol, 3);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t j = 0; j < 2; ++j)
                CHECK(out.inputs[n][j] == blobs.inputs[n][j]);
    }
}
