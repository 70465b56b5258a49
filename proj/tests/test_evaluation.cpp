#include <gtest/gtest.h>

#include <openssl/evp.h>

#include <fstream>
#include <random>
#include <regex>

#include "consensus/evaluation.hpp"
#include "consensus/tables.hpp"
#include "oracles.hpp"

using namespace consensus;

namespace {

const fs::path kSource = CONSENSUS_SOURCE_DIR;

double ap(std::vector<double> s, std::vector<std::uint8_t> m) { return average_precision(s, m); }

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::Io;
}

std::string sha256_hex(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

TEST(AveragePrecision, Examples) {
    EXPECT_DOUBLE_EQ(ap({0.9, 0.8, 0.1}, {1, 0, 1}), 5.0 / 6.0);
    EXPECT_DOUBLE_EQ(ap({0.9, 0.8, 0.7, 0.1}, {0, 0, 0, 1}), 0.25);
    EXPECT_EQ(ap({5, 4, 1, 0}, {1, 1, 0, 0}), 1.0);
}

TEST(AveragePrecision, TiesFormOneBlock) {
    // Both orders of a tied pair give the same AP: one positive credited
    // with precision 1/2.
    EXPECT_DOUBLE_EQ(ap({0.5, 0.5}, {1, 0}), 0.5);
    EXPECT_DOUBLE_EQ(ap({0.5, 0.5}, {0, 1}), 0.5);
    EXPECT_DOUBLE_EQ(ap({1, 1, 1, 1}, {1, 0, 1, 0}), 0.5);
}

TEST(AveragePrecision, Errors) {
    EXPECT_EQ(code_of([] { ap({0.1, 0.2}, {0, 0}); }), ErrorCode::NoPositives);
    EXPECT_EQ(code_of([] { ap({0.1, 0.2}, {1}); }), ErrorCode::DimensionMismatch);
}

TEST(AveragePrecisionProperty, MatchesExhaustivePrCurveExactly) {
    std::mt19937_64 gen(41);
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 1 + gen() % 20;
        std::vector<double> s(n);
        std::vector<std::uint8_t> m(n);
        // Few distinct values so ties are common.
        for (auto& v : s) v = static_cast<double>(gen() % 6) / 5.0;
        for (auto& v : m) v = gen() % 2;
        m[gen() % n] = 1;
        const auto want = oracle::average_precision(s, m);
        EXPECT_EQ(ap(s, m), want.value()) << t;
    }
}

TEST(AveragePrecisionProperty, InvariantUnderMonotoneTransforms) {
    std::mt19937_64 gen(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + gen() % 30;
        std::vector<double> s(n), e(n), c(n);
        std::vector<std::uint8_t> m(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = std::round(u(gen) * 8) / 8;
            m[i] = gen() % 3 == 0;
            e[i] = std::exp(3 * s[i]);
            c[i] = s[i] * s[i] * s[i] - 7;
        }
        m[0] = 1;
        EXPECT_EQ(ap(s, m), ap(e, m));
        EXPECT_EQ(ap(s, m), ap(c, m));
    }
}

TEST(AveragePrecisionProperty, OwnMaskScoresOne) {
    std::mt19937_64 gen(43);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::uint8_t> m(1 + gen() % 40);
        for (auto& v : m) v = gen() % 2;
        m[0] = 1;
        const std::vector<double> s(m.begin(), m.end());
        EXPECT_EQ(ap(s, m), 1.0);
    }
}

TEST(MeanAp, Examples) {
    const SegmentationMask m{1, 3, {1, 0, 1}};
    const std::vector<double> s{0.9, 0.8, 0.1};
    const auto r = mean_ap({s, s, s}, {m, m, m});
    EXPECT_DOUBLE_EQ(r.map, 5.0 / 6.0);
    const SegmentationMask m2{1, 2, {1, 0}};
    EXPECT_DOUBLE_EQ(mean_ap({{1, 0}, {0, 1}}, {m2, m2}).map, 0.75);
}

TEST(MeanAp, SkipsSamplesWithoutPositives) {
    const SegmentationMask full{1, 2, {1, 0}}, empty{1, 2, {0, 0}};
    const auto r = mean_ap({{1, 0}, {1, 0}}, {full, empty});
    EXPECT_EQ(r.map, 1.0);
    EXPECT_EQ(r.skipped, 1u);
    EXPECT_TRUE(std::isnan(r.per_sample[1]));
    EXPECT_EQ(code_of([&] { mean_ap({{1, 0}}, {empty}); }), ErrorCode::EmptyDataset);
    EXPECT_EQ(code_of([] { mean_ap({}, {}); }), ErrorCode::EmptyDataset);
}

TEST(MeanAp, MatchesLoopOracle) {
    std::mt19937_64 gen(44);
    std::vector<std::vector<double>> maps;
    std::vector<SegmentationMask> masks;
    double total = 0;
    for (int i = 0; i < 12; ++i) {
        std::vector<double> s(16);
        SegmentationMask m{4, 4, std::vector<std::uint8_t>(16)};
        for (auto& v : s) v = static_cast<double>(gen() % 1000);
        for (auto& v : m.foreground) v = gen() % 2;
        m.foreground[3] = 1;
        total += oracle::average_precision(s, m.foreground).value();
        maps.push_back(s);
        masks.push_back(m);
    }
    EXPECT_NEAR(mean_ap(maps, masks).map, total / 12, 1e-15);
}

// ---------------------------------------------------------------------------
// Pearson
// ---------------------------------------------------------------------------

TEST(Pearson, Examples) {
    const std::vector<double> x{1, 2, 3, 4, 5};
    std::vector<double> y, z;
    for (double v : x) {
        y.push_back(2 * v + 1);
        z.push_back(-v);
    }
    const auto a = pearson(x, y);
    EXPECT_DOUBLE_EQ(a.r, 1.0);
    EXPECT_LT(a.p_value, 1e-12);
    EXPECT_DOUBLE_EQ(pearson(x, z).r, -1.0);

    // r = 0.98198; t = r sqrt(1 / (1 - r^2)) = 5.196 with one degree of freedom.
    const auto b = pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4});
    EXPECT_NEAR(b.r, 0.98198, 1e-5);
    EXPECT_NEAR(b.p_value, 0.1210, 1e-4);
    EXPECT_NEAR(b.p_value, oracle::pearson_p_df1(b.r), 1e-12);
    EXPECT_EQ(b.n, 3u);
}

TEST(Pearson, Errors) {
    EXPECT_EQ(code_of([] { pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}); }), ErrorCode::TooFewPoints);
    EXPECT_EQ(code_of([] { pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}); }),
              ErrorCode::ZeroVariance);
    EXPECT_EQ(code_of([] { pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}); }),
              ErrorCode::DimensionMismatch);
}

TEST(PearsonProperty, PValuesMatchClosedForms) {
    std::mt19937_64 gen(45);
    for (int t = 0; t < 200; ++t) {
        const auto rows3 = oracle::random_rows(gen, 2, 3, false);
        const auto a = pearson(rows3[0], rows3[1]);
        EXPECT_NEAR(a.p_value, oracle::pearson_p_df1(a.r), 1e-10);
        const auto rows4 = oracle::random_rows(gen, 2, 4, false);
        const auto b = pearson(rows4[0], rows4[1]);
        EXPECT_NEAR(b.p_value, oracle::pearson_p_df2(b.r), 1e-10);
    }
}

TEST(PearsonProperty, SymmetricAndAffineInvariant) {
    std::mt19937_64 gen(46);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 3 + gen() % 30;
        const auto rows = oracle::random_rows(gen, 2, n, false);
        const auto a = pearson(rows[0], rows[1]);
        const auto b = pearson(rows[1], rows[0]);
        EXPECT_EQ(a.r, b.r);
        EXPECT_EQ(a.p_value, b.p_value);
        EXPECT_NEAR(a.r, oracle::pearson_r(rows[0], rows[1]), 1e-12);
        std::vector<double> scaled(rows[0]);
        for (auto& v : scaled) v = 4.0 * v + 2.5;
        const auto c = pearson(scaled, rows[1]);
        EXPECT_NEAR(c.r, a.r, 1e-12);
        EXPECT_NEAR(c.p_value, a.p_value, 1e-10);
    }
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

TEST(Ensemble, SingleModelIsItsOwnAccuracy) {
    const std::vector<std::vector<std::vector<double>>> probs{{{0.9, 0.1}, {0.3, 0.7}, {0.6, 0.4}, {0.2, 0.8}}};
    const std::vector<int> labels{0, 1, 1, 1};
    EXPECT_DOUBLE_EQ(ensemble_accuracy(probs, labels, EnsembleMode::avg), 0.75);
    EXPECT_DOUBLE_EQ(ensemble_accuracy(probs, labels, EnsembleMode::vote), 0.75);
}

TEST(Ensemble, OpposingModelsAverageByMass) {
    const std::vector<std::vector<std::vector<double>>> probs{{{0.95, 0.05}}, {{0.4, 0.6}}};
    EXPECT_EQ(ensemble_accuracy(probs, std::vector<int>{0}, EnsembleMode::avg), 1.0);
    // One vote each; the tie goes to the larger mean probability.
    EXPECT_EQ(ensemble_accuracy(probs, std::vector<int>{0}, EnsembleMode::vote), 1.0);
}

TEST(Ensemble, MatchesBruteForceOracle) {
    std::mt19937_64 gen(47);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < 50; ++t) {
        const std::size_t M = 3, N = 5, C = 3;
        std::vector<std::vector<std::vector<double>>> probs(M, std::vector<std::vector<double>>(N, std::vector<double>(C)));
        for (auto& model : probs)
            for (auto& p : model) {
                double s = 0;
                for (auto& v : p) s += (v = u(gen));
                for (auto& v : p) v /= s;
            }
        std::vector<int> labels(N);
        for (auto& l : labels) l = static_cast<int>(gen() % C);
        int avg_ok = 0, vote_ok = 0;
        for (std::size_t n = 0; n < N; ++n) {
            double best = -1;
            int avg_pick = 0;
            std::vector<int> votes(C, 0);
            std::vector<double> mass(C, 0);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t j = 0; j < M; ++j) mass[c] += probs[j][n][c];
                if (mass[c] > best) best = mass[c], avg_pick = static_cast<int>(c);
            }
            for (std::size_t j = 0; j < M; ++j) {
                std::size_t a = 0;
                for (std::size_t c = 1; c < C; ++c)
                    if (probs[j][n][c] > probs[j][n][a]) a = c;
                ++votes[a];
            }
            int vote_pick = -1;
            for (std::size_t c = 0; c < C; ++c) {
                const bool better = vote_pick < 0 || votes[c] > votes[static_cast<std::size_t>(vote_pick)] ||
                                    (votes[c] == votes[static_cast<std::size_t>(vote_pick)] &&
                                     mass[c] > mass[static_cast<std::size_t>(vote_pick)]);
                if (better) vote_pick = static_cast<int>(c);
            }
            avg_ok += avg_pick == labels[n];
            vote_ok += vote_pick == labels[n];
        }
        EXPECT_DOUBLE_EQ(ensemble_accuracy(probs, labels, EnsembleMode::avg), avg_ok / 5.0);
        EXPECT_DOUBLE_EQ(ensemble_accuracy(probs, labels, EnsembleMode::vote), vote_ok / 5.0);
    }
}

TEST(Ensemble, ShapeErrors) {
    EXPECT_EQ(code_of([] { ensemble_accuracy({}, std::vector<int>{0}, EnsembleMode::avg); }), ErrorCode::ShapeMismatch);
    EXPECT_EQ(code_of([] {
                  ensemble_accuracy({{{0.5, 0.5}}, {{0.5, 0.5}, {0.1, 0.9}}}, std::vector<int>{0}, EnsembleMode::avg);
              }),
              ErrorCode::ShapeMismatch);
    EXPECT_EQ(code_of([] { ensemble_accuracy({{{0.5, 0.5}}}, std::vector<int>{2}, EnsembleMode::vote); }),
              ErrorCode::ShapeMismatch);
}

// ---------------------------------------------------------------------------
// Fixture tables
// ---------------------------------------------------------------------------

TEST(Fixtures, RowCountsAndSpotValues) {
    const auto imagenet = load_fixture_table(kSource / "data/fixtures/imagenet_models.csv");
    EXPECT_EQ(imagenet.row_count(), 81u);
    EXPECT_FALSE(imagenet.consensus.has_value());
    const auto& a = imagenet.find("AlexNet");
    EXPECT_DOUBLE_EQ(a.performance, 0.575);
    EXPECT_DOUBLE_EQ(a.score_lime, 0.594);
    EXPECT_DOUBLE_EQ(a.score_sg, 0.0214);
    EXPECT_TRUE(std::isnan(a.map_lime));

    const auto cub = load_fixture_table(kSource / "data/fixtures/cub_models.csv");
    EXPECT_EQ(cub.models.size(), 85u);
    ASSERT_TRUE(cub.consensus.has_value());
    EXPECT_TRUE(std::isnan(cub.consensus->score_lime));
    const auto& b = cub.find("AlexNet");
    EXPECT_DOUBLE_EQ(b.performance, 0.507);
    EXPECT_DOUBLE_EQ(b.map_lime, 0.343);
    EXPECT_DOUBLE_EQ(b.map_sg, 0.571);
}

TEST(Fixtures, ChecksumsMatchDocumentation) {
    const std::string doc = read_text(kSource / "docs/fixtures.md");
    for (const char* name : {"imagenet_models.csv", "cub_models.csv"}) {
        const std::regex line(std::string("([0-9a-f]{64})\\s+data/fixtures/") + name);
        std::smatch m;
        ASSERT_TRUE(std::regex_search(doc, m, line)) << name;
        EXPECT_EQ(m[1].str(), sha256_hex(kSource / "data/fixtures" / name)) << name;
    }
}

TEST(Fixtures, MissingRequiredColumn) {
    const auto dir = fs::temp_directory_path() / ("consensus_eval_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    write_text_atomic(dir / "bad.csv", "model_id,score_lime,score_sg\nA,0.5,0.02\n");
    EXPECT_EQ(code_of([&] { load_fixture_table(dir / "bad.csv"); }), ErrorCode::SchemaMismatch);
}

TEST(Tables, ReportCsvRoundTrips) {
    ResultTable t;
    t.models.push_back({"a", 0.5, 0.6, 0.02, 0.3, std::nan("")});
    t.consensus = ModelResultRow{"consensus", 0.7, std::nan(""), std::nan(""), 0.4, 0.5};
    const auto dir = fs::temp_directory_path() / ("consensus_eval_" + std::to_string(::getpid()));
    write_text_atomic(dir / "report.csv", report_csv(t));
    const auto back = load_fixture_table(dir / "report.csv");
    ASSERT_EQ(back.models.size(), 1u);
    EXPECT_EQ(back.models[0].score_lime, 0.6);
    EXPECT_TRUE(std::isnan(back.models[0].map_sg));
    EXPECT_EQ(back.consensus->map_sg, 0.5);
}

TEST(Spearman, AverageRanksAndMonotoneInvariance) {
    EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
    const std::vector<double> x{1, 2, 3, 4, 5}, y{1, 8, 27, 64, 125};
    EXPECT_DOUBLE_EQ(spearman(x, y).r, 1.0);
    EXPECT_LT(pearson(x, y).r, 1.0);
}

TEST(Correlate, CubScoreVersusPerformance) {
    const auto t = read_csv(kSource / "data/fixtures/cub_models.csv");
    const auto [x, y] = paired_columns(t, "performance", "score_lime");
    EXPECT_EQ(x.size(), 85u);
    EXPECT_NEAR(correlate(x, y, CorrelationMethod::pearson).r, 0.908, 0.01);
    const auto [xc, yc] = paired_columns(t, "performance", "map_lime", true);
    EXPECT_EQ(xc.size(), 86u);
}
