// Acceptance checks. One PASS/FAIL line per criterion; the exit status is the
// number of failed criteria among those expected to hold at desk scale.
//
//   acceptance             run every criterion
//   acceptance --only 7    run one criterion
//   acceptance --freeze    rerun the synthetic-alignment Monte Carlo and
//                          rewrite tests/fixtures/synthetic_alignment.json

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "consensus/experiments.hpp"
#include "consensus/remote.hpp"
#include "consensus/tables.hpp"
#include "oracles.hpp"

using namespace consensus;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = CONSENSUS_SOURCE_DIR;
const fs::path kAlignmentFixture = kSource / "tests/fixtures/synthetic_alignment.json";

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

ExplanationMatrix matrix_of(std::vector<std::vector<double>> rows, const std::string& sample) {
    ExplanationMatrix L;
    L.sample_id = sample;
    L.granularity = Granularity::pixel;
    for (std::size_t i = 0; i < rows.size(); ++i) L.model_ids.push_back("m" + std::to_string(i));
    L.rows = std::move(rows);
    return L;
}

// ---------------------------------------------------------------------------

Outcome fixture_correlations() {
    const auto t0 = Clock::now();
    struct Case {
        const char* table;
        const char* x;
        const char* y;
        CorrelationMethod method;
        double r;
        double p = 0.0;  // 0: not published
    };
    // Score-vs-mAP coefficients are rank correlations: Pearson on the same
    // columns gives 0.955 and 0.934.
    const std::vector<Case> cases{
        {"cub", "performance", "score_lime", CorrelationMethod::pearson, 0.908},
        {"cub", "performance", "score_sg", CorrelationMethod::pearson, 0.880},
        {"cub", "score_lime", "score_sg", CorrelationMethod::pearson, 0.854},
        {"cub", "performance", "map_lime", CorrelationMethod::pearson, 0.927, 4e-37},
        {"cub", "performance", "map_sg", CorrelationMethod::pearson, 0.916},
        {"cub", "score_lime", "map_lime", CorrelationMethod::spearman, 0.885, 3e-29},
        {"cub", "score_sg", "map_sg", CorrelationMethod::spearman, 0.906},
        {"imagenet", "performance", "score_lime", CorrelationMethod::pearson, 0.8087},
        {"imagenet", "performance", "score_sg", CorrelationMethod::pearson, 0.783},
        {"imagenet", "score_lime", "score_sg", CorrelationMethod::pearson, 0.825},
    };
    Outcome o;
    double worst = 0.0;
    for (const auto& c : cases) {
        const auto table = read_csv(kSource / "data/fixtures" / (std::string(c.table) + "_models.csv"));
        const auto [xs, ys] = paired_columns(table, c.x, c.y, false);
        const auto r = correlate(xs, ys, c.method);
        worst = std::max(worst, std::abs(r.r - c.r));
        if (std::abs(r.r - c.r) > 0.01) {
            o.pass = false;
            o.detail += std::string(" ") + c.table + ":" + c.x + "~" + c.y + " r=" + fmt("%.4f", r.r);
        }
        if (c.p > 0.0 && std::abs(std::log10(r.p_value) - std::log10(c.p)) >= 1.0) {
            o.pass = false;
            o.detail += std::string(" ") + c.x + "~" + c.y + " p=" + fmt("%.2g", r.p_value);
        }
    }
    const double dt = seconds_since(t0);
    if (dt >= 1.0) o.pass = false;
    o.detail = "10 coefficients, max |dr| " + fmt("%.4f", worst) + ", p within one decade, " + fmt("%.3f", dt) + " s" +
               o.detail;
    return o;
}

Outcome consensus_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(2024);
    double worst = 0.0;
    std::size_t perm_fail = 0, reduce_fail = 0;
    for (int t = 0; t < 1000; ++t) {
        const bool lime = t % 2 == 0;
        const VoteMode mode = lime ? VoteMode::lime : VoteMode::smoothgrad;
        const std::size_t m = 1 + gen() % 10, K = 2 + gen() % 49, N = 1 + gen() % 4;
        std::vector<std::vector<std::vector<double>>> raw;
        std::vector<ExplanationMatrix> L;
        for (std::size_t n = 0; n < N; ++n) {
            raw.push_back(oracle::random_rows(gen, m, K, !lime));
            L.push_back(matrix_of(raw.back(), "s" + std::to_string(n)));
        }
        const double sigma = std::sqrt(static_cast<double>(K)) / 10.0;
        const SimilarityConfig cfg = default_similarity(mode);

        const auto c = vote_consensus(L[0], mode).values;
        const auto want_c = oracle::vote(raw[0], lime);
        for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, oracle::rel_err(c[k], want_c[k]));

        // Scores are bounded by 1; their error is relative to max(1, |s|).
        const auto s = score_committee(L, mode, cfg).scores;
        const auto want_s = oracle::scores(raw, lime, sigma);
        for (std::size_t j = 0; j < m; ++j)
            worst = std::max(worst, std::abs(s[j] - want_s[j]) / std::max(1.0, std::abs(want_s[j])));

        auto shuffled = raw[0];
        std::shuffle(shuffled.begin(), shuffled.end(), gen);
        if (vote_consensus(matrix_of(shuffled, "s0"), mode).values != c) ++perm_fail;

        const auto& row = raw[0][0];
        if (vote_consensus(matrix_of({row}, "s0"), mode).values != normalize_row(row, mode)) ++reduce_fail;
        if (lime) {
            const std::vector<ExplanationMatrix> one{matrix_of({row}, "s0")};
            if (score_committee(one, mode, cfg).scores[0] != cosine_similarity(row, normalize_lime_row(row))) ++reduce_fail;
        }
    }
    const double dt = seconds_since(t0);
    Outcome o;
    o.pass = worst <= 1e-12 && perm_fail == 0 && reduce_fail == 0 && dt < 10.0;
    o.detail = "1000 instances, max rel err " + fmt("%.2e", worst) + ", permutation mismatches " + std::to_string(perm_fail) +
               ", m=1 mismatches " + std::to_string(reduce_fail) + ", " + fmt("%.2f", dt) + " s";
    return o;
}

Outcome similarity_kernels() {
    std::mt19937_64 gen(7);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    double scale_err = 0.0, rbf_err = 0.0;
    bool self_one = true;
    for (int t = 0; t < 1000; ++t) {
        const auto rows = oracle::random_rows(gen, 2, 1 + t % 50, false);
        const double a = scale(gen);
        std::vector<double> scaled = rows[0];
        for (auto& v : scaled) v *= a;
        scale_err = std::max(scale_err, std::abs(cosine_similarity(scaled, rows[1]) - cosine_similarity(rows[0], rows[1])));
        double d2 = 0.0;
        for (std::size_t i = 0; i < rows[0].size(); ++i) d2 += (rows[0][i] - rows[1][i]) * (rows[0][i] - rows[1][i]);
        if (d2 > 0) rbf_err = std::max(rbf_err, std::abs(rbf_similarity(rows[0], rows[1], std::sqrt(d2)) - std::exp(-0.5)));
        const double s = 0.01 + static_cast<double>(t % 100) / 10.0;
        self_one = self_one && rbf_similarity(rows[0], rows[0], s) == 1.0;
    }
    Outcome o;
    o.pass = scale_err <= 1e-12 && rbf_err <= 1e-12 && self_one;
    o.detail = "cosine scale err " + fmt("%.1e", scale_err) + ", rbf(d=sigma) err " + fmt("%.1e", rbf_err) +
               ", rbf(a,a)==1 " + (self_one ? "always" : "violated");
    return o;
}

Outcome ap_oracle() {
    std::mt19937_64 gen(99);
    std::size_t mismatches = 0, cases = 0;
    while (cases < 500) {
        const std::size_t n = 1 + gen() % 12;
        std::vector<double> scores(n);
        std::vector<std::uint8_t> mask(n);
        // Few distinct values so ties are common.
        const std::uint64_t levels = 1 + gen() % 6;
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(gen() % levels) / 3.0;
            mask[i] = gen() % 2;
        }
        if (std::count(mask.begin(), mask.end(), 1) == 0) continue;
        ++cases;
        if (average_precision(scores, mask) != oracle::average_precision(scores, mask).value()) ++mismatches;
    }
    Outcome o;
    o.pass = mismatches == 0;
    o.detail = "500 cases (n <= 12, tie-heavy), " + std::to_string(mismatches) + " inexact";
    return o;
}

Outcome lime_recovery() {
    const auto t0 = Clock::now();
    SuperpixelSegmentation seg{4, 10, 10, {}};
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 10; ++c) seg.labels.push_back(c);
    Image img(4, 10, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = 0.3 + 0.05 * static_cast<double>(i % 7);

    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(-0.04, 0.04);
    std::vector<double> truth(10);
    for (auto& c : truth) c = u(gen);
    AffineSegmentModel model("affine", img, seg, 0.5, truth);
    LimeConfig cfg;
    cfg.n_samples = 2000;
    cfg.ridge_lambda = 0.0;
    cfg.rng_seed = 11;
    const auto got = lime_explain(img, seg, model, 1, cfg).values;
    double err = 0.0;
    for (std::size_t k = 0; k < 10; ++k) err = std::max(err, std::abs(got[k] - truth[k]));
    const double r = oracle::pearson_r(got, truth);
    const double dt = seconds_since(t0);
    Outcome o;
    o.pass = err <= 1e-3 && r >= 0.999 && dt < 30.0;
    o.detail = "K=10, n=2000, max abs err " + fmt("%.2e", err) + ", r " + fmt("%.6f", r) + ", " + fmt("%.2f", dt) + " s";
    return o;
}

/// logit_1 = sum of squared inputs.
class QuadraticModel final : public SyntheticBackend {
public:
    QuadraticModel() : SyntheticBackend(BackendDescriptor{"quadratic", true, true, 2, {1, 1, 1}}) {}
    std::vector<double> logits(const Image& image) const override { return {0.0, dot(image.data, image.data)}; }
    Image logit_gradient(const Image& image, int target_class) const override {
        Image g(1, 1, 1, 0.0);
        if (target_class == 1) g.data[0] = 2.0 * image.data[0];
        return g;
    }
};

Outcome smoothgrad_consistency() {
    std::mt19937_64 gen(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Image w1(5, 6, 3), x(5, 6, 3);
    for (auto& v : w1.data) v = u(gen);
    for (auto& v : x.data) v = 0.5 + 0.5 * u(gen);
    LinearModel linear("lin", {Image(5, 6, 3, 0.0), w1});
    double lin_err = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SmoothGradConfig cfg;
        cfg.n_samples = 8;
        cfg.rng_seed = seed;
        const auto map = smoothgrad_explain(x, linear, 1, cfg).values;
        for (std::size_t p = 0; p < 30; ++p) {
            double want = 0.0;
            for (std::size_t ch = 0; ch < 3; ++ch) want += std::abs(w1.data[p * 3 + ch]);
            lin_err = std::max(lin_err, std::abs(map[p] - want));
        }
    }

    QuadraticModel quad;
    SmoothGradConfig cfg;
    cfg.n_samples = 10000;
    cfg.noise_sigma = 0.2;
    cfg.magnitude = false;
    cfg.rng_seed = 3;
    // E[2(x + e)] = 2x, standard error 2 sigma / sqrt(n).
    const double mean = smoothgrad_explain(Image(1, 1, 1, 0.5), quad, 1, cfg).values[0];
    const double se = 2.0 * 0.2 / std::sqrt(10000.0);
    Outcome o;
    o.pass = lin_err <= 1e-12 && std::abs(mean - 1.0) <= 3.0 * se;
    o.detail = "linear max err over 5 seeds " + fmt("%.1e", lin_err) + ", quadratic mean " + fmt("%.5f", mean) +
               " (expected 1, 3 SE = " + fmt("%.4f", 3.0 * se) + ")";
    return o;
}

SyntheticWorldConfig alignment_config(const json& fixture, std::uint64_t seed) {
    const auto& c = fixture.at("config");
    SyntheticWorldConfig cfg;
    cfg.n_models = c.at("n_models");
    cfg.n_samples = c.at("n_samples");
    cfg.image_size = c.at("image_size");
    cfg.jitter = c.at("jitter");
    cfg.lime.n_samples = c.at("lime_samples");
    cfg.run_smoothgrad = false;
    cfg.seed = seed;
    cfg.workers = workers();
    return cfg;
}

struct AlignmentPoint {
    double consensus, mean, max;
};

AlignmentPoint alignment_point(const SyntheticRun& run) {
    AlignmentPoint p{run.table.consensus->map_lime, 0.0, -1.0};
    for (const auto& row : run.table.models) {
        p.mean += row.map_lime / static_cast<double>(run.table.models.size());
        p.max = std::max(p.max, row.map_lime);
    }
    return p;
}

json default_alignment_fixture() {
    return json{{"config", {{"n_models", 8}, {"n_samples", 30}, {"image_size", 64}, {"jitter", 0.25}, {"lime_samples", 300}}},
                {"seeds", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}},
                {"thresholds", {{"beats_mean", 9}, {"beats_max", 6}}}};
}

int freeze_alignment() {
    json fx = fs::exists(kAlignmentFixture) ? json::parse(read_text(kAlignmentFixture)) : default_alignment_fixture();
    json observed = json::array();
    for (std::uint64_t seed : fx.at("seeds").get<std::vector<std::uint64_t>>()) {
        const auto p = alignment_point(synthetic_alignment_experiment(alignment_config(fx, seed)));
        observed.push_back({{"seed", seed}, {"consensus_map", p.consensus}, {"mean_map", p.mean}, {"max_map", p.max}});
        std::printf("seed %llu: consensus %.4f  mean %.4f  max %.4f\n", static_cast<unsigned long long>(seed), p.consensus,
                    p.mean, p.max);
    }
    fx["observed"] = observed;
    fs::create_directories(kAlignmentFixture.parent_path());
    write_text_atomic(kAlignmentFixture, fx.dump(2) + "\n");
    std::printf("wrote %s\n", kAlignmentFixture.string().c_str());
    return 0;
}

Outcome synthetic_alignment() {
    const auto t0 = Clock::now();
    if (!fs::exists(kAlignmentFixture)) return {false, "fixture " + kAlignmentFixture.string() + " missing; run --freeze"};
    const json fx = json::parse(read_text(kAlignmentFixture));
    const auto seeds = fx.at("seeds").get<std::vector<std::uint64_t>>();
    int beats_mean = 0, beats_max = 0;
    double drift = 0.0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const auto p = alignment_point(synthetic_alignment_experiment(alignment_config(fx, seeds[i])));
        beats_mean += p.consensus > p.mean;
        beats_max += p.consensus > p.max;
        if (fx.contains("observed")) drift = std::max(drift, std::abs(p.consensus - fx["observed"][i].at("consensus_map").get<double>()));
    }
    const int need_mean = fx.at("thresholds").at("beats_mean"), need_max = fx.at("thresholds").at("beats_max");
    const double dt = seconds_since(t0);
    Outcome o;
    o.pass = beats_mean >= need_mean && beats_max >= need_max && dt < 120.0;
    o.detail = "consensus > mean on " + std::to_string(beats_mean) + "/" + std::to_string(seeds.size()) + " seeds (need " +
               std::to_string(need_mean) + "), > max on " + std::to_string(beats_max) + " (need " + std::to_string(need_max) +
               "), drift from frozen run " + fmt("%.1e", drift) + ", " + fmt("%.1f", dt) + " s";
    return o;
}

Outcome convergence_trend() {
    const auto t0 = Clock::now();
    int ok = 0;
    std::string detail;
    const int n_seeds = 10;
    for (int seed = 0; seed < n_seeds; ++seed) {
        SyntheticWorldConfig cfg;
        cfg.n_models = 12;
        cfg.n_samples = 20;
        cfg.lime.n_samples = 200;
        cfg.run_smoothgrad = false;
        cfg.seed = 100 + static_cast<std::uint64_t>(seed);
        cfg.workers = workers();
        const auto run = synthetic_alignment_experiment(cfg);
        const auto curve = convergence_study(run.lime, {2, 8}, 20, ConvergenceMetric::map_vs_mask, &run.world.masks,
                                             derive_seed(cfg.seed, "convergence"), default_similarity(VoteMode::lime));
        if (curve.mean[1] >= curve.mean[0])
            ++ok;
        else
            detail += " seed " + std::to_string(cfg.seed) + ": " + fmt("%.4f", curve.mean[1]) + " < " + fmt("%.4f", curve.mean[0]);
    }
    Outcome o;
    o.pass = ok == n_seeds;
    o.detail = "pool 12, 20 trials: mean mAP(8) >= mean mAP(2) on " + std::to_string(ok) + "/" + std::to_string(n_seeds) +
               " seeds, " + fmt("%.1f", seconds_since(t0)) + " s" + detail;
    return o;
}

Outcome protocol_conformance() {
    namespace proto = protocol;
    std::size_t lines = 0, bad = 0;
    auto each_line = [&](const std::string& file, auto&& f) {
        std::ifstream in(kSource / "tests/conformance" / file);
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) {
                ++lines;
                if (!f(line)) ++bad;
            }
    };
    each_line("requests.ndjson", [](const std::string& l) { return proto::encode(proto::decode_request(l)) == l; });
    each_line("responses.ndjson", [](const std::string& l) { return proto::encode(proto::decode_response(l)) == l; });
    each_line("invalid_responses.ndjson", [](const std::string& l) {
        try {
            proto::decode_response(l);
        } catch (const Error& e) {
            return e.code() == ErrorCode::ProtocolError;
        }
        return false;
    });

    SyntheticBoxModel local("acceptance", {8, 8, 3}, Box{2, 2, 6, 6}, 10.0);
    RemoteBackend remote(std::make_unique<ProcessChannel>(std::vector<std::string>{CONSENSUS_SERVER, "--id", "acceptance"}),
                         Millis{10'000});
    bool served = remote.descriptor() == local.descriptor();
    Image x(8, 8, 3);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = static_cast<double>(i % 13) / 12.0;
    const auto p = remote.predict(x), q = local.predict(x);
    for (std::size_t c = 0; c < 2; ++c) served = served && std::abs(p[c] - q[c]) <= 1e-7;
    const auto g = remote.gradient(x, 1), h = local.gradient(x, 1);
    for (std::size_t i = 0; i < g.data.size(); ++i) served = served && std::abs(g.data[i] - h.data[i]) <= 1e-7;

    Outcome o;
    o.pass = bad == 0 && lines > 0 && served;
    o.detail = std::to_string(lines) + " corpus lines, " + std::to_string(bad) +
               " failures; reference server handshake/predict/gradient " + (served ? "match" : "MISMATCH");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    int only = 0;
    bool freeze = false;
    app.add_option("--only", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
    app.add_flag("--freeze", freeze, "Rerun the synthetic-alignment Monte Carlo and rewrite its fixture");
    CLI11_PARSE(app, argc, argv);
    if (freeze) return freeze_alignment();

    using Check = Outcome (*)();
    const std::vector<std::pair<const char*, Check>> checks{
        {"fixture correlations", fixture_correlations},
        {"consensus math oracles", consensus_oracles},
        {"similarity kernels", similarity_kernels},
        {"AP oracle equivalence", ap_oracle},
        {"LIME recovery", lime_recovery},
        {"SmoothGrad consistency", smoothgrad_consistency},
        {"synthetic alignment", synthetic_alignment},
        {"convergence trend", convergence_trend},
        {"protocol conformance", protocol_conformance},
    };
    int failed = 0;
    for (std::size_t i = 0; i < checks.size(); ++i) {
        if (only && only != static_cast<int>(i + 1)) continue;
        Outcome o;
        try {
            o = checks[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s [%zu] %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, checks[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    if (!only || only == 10)
        std::printf("FAIL [10] full-scale numbers: not reproducible at desk scale (absolute CUB/ImageNet mAP, "
                    "cross-committee consistency and the five-model ranking need the original trained models and "
                    "datasets); not counted in the exit status\n");
    return failed;
}
