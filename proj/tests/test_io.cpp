#include <gtest/gtest.h>

#include <png.h>

#include <filesystem>
#include <random>
#include <set>

#include "consensus/io.hpp"
#include "consensus/numeric.hpp"

using namespace consensus;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("consensus_io_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_attr(bytes);
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "decode succeeded";
    return ErrorCode::Io;
}

std::vector<std::uint8_t> header(std::uint8_t kind, std::vector<std::uint32_t> dims) {
    std::vector<std::uint8_t> b{'A', 'T', 'T', 'R', '1', kind, static_cast<std::uint8_t>(dims.size())};
    for (auto d : dims)
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(d >> (8 * i)));
    return b;
}

}  // namespace

TEST(Rng, DeterministicPerSeed) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x, b.next());
        differs |= x != c.next();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, UniformRangeAndMoments) {
    Rng r(1);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
    }
    EXPECT_NEAR(s / n, 0.5, 0.005);
    s = 0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
    Rng r(7);
    for (std::size_t n : {1u, 5u, 20u}) {
        for (std::size_t k = 0; k <= n + 2; ++k) {
            const auto idx = r.sample_without_replacement(n, k);
            EXPECT_EQ(idx.size(), std::min(k, n));
            std::set<std::size_t> s(idx.begin(), idx.end());
            EXPECT_EQ(s.size(), idx.size());
            for (auto i : idx) EXPECT_LT(i, n);
        }
    }
}

TEST(Rng, BelowIsRoughlyUniform) {
    Rng r(9);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(DeriveSeed, DistinctStagesAndIndices) {
    EXPECT_NE(derive_seed(1, "lime"), derive_seed(1, "sg"));
    EXPECT_NE(derive_seed(1, std::uint64_t{0}), derive_seed(1, std::uint64_t{1}));
    EXPECT_EQ(derive_seed(5, "x"), derive_seed(5, "x"));
}

TEST(CompensatedSum, BeatsNaiveSummation) {
    std::vector<double> v{1e16, 1.0, -1e16, 1.0};
    EXPECT_EQ(compensated_sum(v), 2.0);
}

TEST(ParallelFor, VisitsEveryIndexAndRethrows) {
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                     if (i == 5) fail(ErrorCode::Io, "boom");
                 }),
                 Error);
}

TEST(Attr, ZerosRoundTrip) {
    const auto path = scratch("zeros.attr");
    const AttributionMap m{{3, 3}, std::vector<double>(9, 0.0)};
    write_attr(path, m);
    EXPECT_EQ(fs::file_size(path), 5u + 1 + 1 + 8 + 36);
    EXPECT_EQ(read_attr(path), m);
}

TEST(AttrProperty, RandomPayloadsRoundTripBitExact) {
    std::mt19937_64 gen(3);
    for (int t = 0; t < 200; ++t) {
        AttrPayload p;
        p.kind = t % 2 ? PayloadKind::int32 : PayloadKind::float32;
        const std::size_t rank = 1 + gen() % 3;
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank; ++i) {
            p.dims.push_back(static_cast<std::uint32_t>(1 + gen() % 6));
            n *= p.dims.back();
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto bits = static_cast<std::uint32_t>(gen());
            if (p.kind == PayloadKind::int32)
                p.ints.push_back(std::bit_cast<std::int32_t>(bits));
            else
                p.floats.push_back(std::bit_cast<float>(bits & 0xBF7FFFFFu));  // finite
        }
        const auto q = decode_attr(encode_attr(p));
        EXPECT_EQ(q.kind, p.kind);
        EXPECT_EQ(q.dims, p.dims);
        EXPECT_EQ(q.ints, p.ints);
        ASSERT_EQ(q.floats.size(), p.floats.size());
        for (std::size_t i = 0; i < p.floats.size(); ++i)
            EXPECT_EQ(std::bit_cast<std::uint32_t>(q.floats[i]), std::bit_cast<std::uint32_t>(p.floats[i]));
    }
}

TEST(Attr, DecodeErrors) {
    auto bytes = header(0, {2});
    bytes.resize(bytes.size() + 8, 0);
    auto bad_magic = bytes;
    bad_magic[4] = '2';
    EXPECT_EQ(decode_error(bad_magic), ErrorCode::BadMagic);
    EXPECT_EQ(decode_error({'A', 'T'}), ErrorCode::BadMagic);

    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_EQ(decode_error(truncated), ErrorCode::TruncatedFile);
    EXPECT_EQ(decode_error(header(0, {2, 2, 2})), ErrorCode::TruncatedFile);
    auto short_dims = header(0, {4});
    short_dims.resize(short_dims.size() - 2);
    EXPECT_EQ(decode_error(short_dims), ErrorCode::TruncatedFile);

    EXPECT_EQ(decode_error(header(0, {65536, 65536, 2})), ErrorCode::DimOverflow);
    EXPECT_EQ(decode_error(header(7, {1})), ErrorCode::ParseError);
    EXPECT_EQ(decode_error(header(0, {})), ErrorCode::ParseError);

    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_EQ(decode_error(trailing), ErrorCode::ParseError);
}

TEST(Attr, LabelsRoundTripAndValidate) {
    const auto path = scratch("labels.attr");
    const SuperpixelSegmentation seg{2, 3, 3, {0, 0, 1, 2, 2, 1}};
    write_labels(path, seg);
    EXPECT_EQ(read_labels(path), seg);
    EXPECT_THROW(read_attr(path), Error);
}

TEST(Masks, CheckerboardHasTwoForegroundPixels) {
    const auto path = scratch("checker.pgm");
    Image img(2, 2, 1, 0.0);
    img.at(0, 0, 0) = 1.0;
    img.at(1, 1, 0) = 1.0;
    write_pnm(path, img);
    const auto m = load_mask(path);
    EXPECT_EQ(m.foreground_count(), 2u);
    EXPECT_EQ(m.foreground, (std::vector<std::uint8_t>{1, 0, 0, 1}));
}

TEST(Masks, AllForegroundAndEmpty) {
    const auto path = scratch("full.pgm");
    write_pnm(path, Image(3, 4, 1, 1.0));
    EXPECT_EQ(load_mask(path).foreground_count(), 12u);
    write_pnm(path, Image(3, 4, 1, 0.0));
    try {
        load_mask(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyMask);
    }
}

TEST(Masks, SixteenBitPngIsUnsupported) {
    const auto path = scratch("deep.png");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = 2;
    img.height = 2;
    img.format = PNG_FORMAT_LINEAR_Y;
    const std::vector<std::uint16_t> px{0, 65535, 65535, 0};
    ASSERT_NE(png_image_write_to_file(&img, path.c_str(), 0, px.data(), 0, nullptr), 0);
    try {
        load_mask(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnsupportedFormat);
    }
}

TEST(Masks, RoundTripThroughPgm) {
    const auto path = scratch("mask.pgm");
    SegmentationMask m{2, 3, {1, 0, 1, 0, 0, 1}};
    write_mask_pgm(path, m);
    const auto back = load_mask(path);
    EXPECT_EQ(back.height, 2);
    EXPECT_EQ(back.width, 3);
    EXPECT_EQ(back.foreground, m.foreground);
}

TEST(Images, PnmRoundTripIn8Bits) {
    const auto path = scratch("rgb.ppm");
    Image img(3, 2, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i * 13 % 256) / 255.0;
    write_pnm(path, img);
    const auto back = read_image(path);
    ASSERT_EQ(back.shape, img.shape);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-12);
}

TEST(Images, MissingAndUnknownFormats) {
    try {
        read_image(scratch("nope.ppm"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
    const auto path = scratch("junk.bmp");
    write_text_atomic(path, "BM....");
    EXPECT_THROW(read_image(path), Error);
}

TEST(LabelPng, RoundTrip) {
    const auto path = scratch("labels.png");
    SuperpixelSegmentation seg{3, 3, 4, {0, 0, 1, 2, 2, 1, 3, 3, 3}};
    write_labels_png(path, seg);
    EXPECT_EQ(read_labels_png(path), seg);
}

TEST(AtomicWrite, LeavesNoTemporaries) {
    const auto path = scratch("atomic/out.txt");
    write_text_atomic(path, "one");
    write_text_atomic(path, "two");
    EXPECT_EQ(read_text(path), "two");
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(path.parent_path())) ++entries;
    EXPECT_EQ(entries, 1u);
}
