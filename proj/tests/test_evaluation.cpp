// MMD, EM-GMM and baseline tests. Null/separated MMD expectations come
// from Monte-Carlo reasoning: the unbiased U-statistic is centered at 0
// under the null and bounded well away from 0 for far-apart Gaussians.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "falcon/evaluation.hpp"
#include "falcon/experiment.hpp"
#include "falcon/rng.hpp"
#include "falcon/toybench.hpp"

using namespace falcon;
using namespace falcon::eval;

namespace {

Tensor gaussian_samples(size_t n, size_t d, double shift, Rng& rng) {
    Tensor t = Tensor::zeros({n, d});
    for (double& v : t.data) v = rng.normal() + shift;
    return t;
}

}  // namespace

TEST_CASE("mmd: near zero under the null, large for separated distributions") {
    Rng rng(1);
    Tensor x = gaussian_samples(500, 10, 0.0, rng);
    Tensor y = gaussian_samples(500, 10, 0.0, rng);
    const double null_value = mmd_rbf(x, y);
    CHECK(std::fabs(null_value) <= 0.01);

    Tensor far = gaussian_samples(500, 10, 10.0, rng);
    CHECK(mmd_rbf(x, far) >= 0.5);
}

TEST_CASE("mmd: exact symmetry and input validation") {
    Rng rng(2);
    Tensor x = gaussian_samples(40, 5, 0.0, rng);
    Tensor y = gaussian_samples(60, 5, 0.5, rng);
    CHECK(mmd_rbf(x, y) == mmd_rbf(y, x));

    Tensor tiny = gaussian_samples(1, 5, 0.0, rng);
    CHECK_THROWS_AS(mmd_rbf(tiny, y), InvalidInputError);
    Tensor wrong = gaussian_samples(40, 4, 0.0, rng);
    CHECK_THROWS_AS(mmd_rbf(x, wrong), InvalidInputError);
}

TEST_CASE("mmd: fixed bandwidth and flattening") {
    Rng rng(3);
    SequenceDataset a, b;
    a.region_count = b.region_count = 1;
    a.dim = b.dim = 3;
    a.num_classes = b.num_classes = 2;
    for (int i = 0; i < 30; ++i) {
        TokenSequence s;
        s.label = 0;
        s.tokens = Tensor::zeros({2, 3});
        for (double& v : s.tokens.data) v = rng.normal();
        a.items.push_back(s);
        for (double& v : s.tokens.data) v = rng.normal() + 3.0;
        b.items.push_back(s);
    }
    MmdConfig cfg;
    cfg.bandwidth = MmdConfig::Bandwidth::Fixed;
    cfg.fixed_sigma2 = 2.0;
    const double v1 = mmd_between(a, b, cfg);
    CHECK(v1 > 0.1);
    // flattened dimensionality is (1+L)*d
    CHECK(flatten_sequences(a).cols() == 6);
    // max_samples limits both sides
    cfg.max_samples = 10;
    CHECK(flatten_sequences(a, 10).rows() == 10);
    CHECK(std::isfinite(mmd_between(a, b, cfg)));
}

TEST_CASE("fit_gmm_em: K=1 equals the closed-form Gaussian MLE") {
    Rng rng(4);
    Tensor data = gaussian_samples(200, 3, 1.5, rng);
    GmmBaselineConfig cfg;
    cfg.components = 1;
    Rng fit_rng(5);
    DiagGmm g = fit_gmm_em(data, cfg, fit_rng);
    REQUIRE(g.weights.size() == 1);
    CHECK(g.weights[0] == Catch::Approx(1.0).margin(1e-12));
    for (size_t j = 0; j < 3; ++j) {
        double mean = 0.0;
        for (size_t i = 0; i < 200; ++i) mean += data.at(i, j);
        mean /= 200.0;
        double var = 0.0;
        for (size_t i = 0; i < 200; ++i) var += (data.at(i, j) - mean) * (data.at(i, j) - mean);
        var /= 200.0;
        CHECK(g.means.at(0, j) == Catch::Approx(mean).margin(1e-9));
        CHECK(g.vars.at(0, j) == Catch::Approx(std::max(var, cfg.var_floor)).margin(1e-9));
    }
}

TEST_CASE("fit_gmm_em: recovers two well-separated clusters") {
    Rng rng(6);
    Tensor data = Tensor::zeros({400, 4});
    for (size_t i = 0; i < 400; ++i)
        for (size_t j = 0; j < 4; ++j)
            data.at(i, j) = 0.2 * rng.normal() + (i < 200 ? 2.0 : -2.0);
    GmmBaselineConfig cfg;
    cfg.components = 2;
    Rng fit_rng(7);
    std::vector<double> trace;
    DiagGmm g = fit_gmm_em(data, cfg, fit_rng, &trace);

    // match recovered means to the true cluster means
    const double m0 = g.means.at(0, 0);
    const size_t pos = m0 > 0.0 ? 0 : 1;
    const size_t neg = 1 - pos;
    for (size_t j = 0; j < 4; ++j) {
        CHECK(std::fabs(g.means.at(pos, j) - 2.0) <= 0.1);
        CHECK(std::fabs(g.means.at(neg, j) + 2.0) <= 0.1);
    }
    CHECK(g.weights[0] == Catch::Approx(0.5).margin(0.05));

    // monotone log-likelihood along the whole trace
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] >= trace[i - 1] - 1e-9);

    // count < K rejected
    Tensor small = gaussian_samples(3, 4, 0.0, rng);
    GmmBaselineConfig big;
    big.components = 5;
    CHECK_THROWS_AS(fit_gmm_em(small, big, fit_rng), InvalidInputError);
}

TEST_CASE("gmm_sample produces vectors of the fitted dimension") {
    Rng rng(8);
    Tensor data = gaussian_samples(50, 6, 0.0, rng);
    GmmBaselineConfig cfg;
    cfg.components = 2;
    Rng fit_rng(9);
    DiagGmm g = fit_gmm_em(data, cfg, fit_rng);
    Rng srng(10);
    auto x = gmm_sample(g, srng);
    CHECK(x.size() == 6);
    for (double v : x) CHECK(std::isfinite(v));
}

TEST_CASE("baseline upload size matches the per-class float count formula") {
    Rng rng(11);
    GmmUpload up;
    up.client_id = 3;
    const size_t seq = 3, d = 4;
    up.dim = seq * d;
    for (uint16_t label : {0, 2}) {
        ClassGmm cg;
        cg.label = label;
        cg.resample_count = 17;
        cg.gmm.weights = {0.5, 0.5};
        cg.gmm.means = gaussian_samples(2, seq * d, 0.0, rng);
        cg.gmm.vars = Tensor::full({2, seq * d}, 1.0);
        up.per_class.push_back(std::move(cg));
    }
    const auto bytes = serialize_gmm_upload(up);
    // header: magic+version+client+dim+nclasses = 4+2+4+2+2
    // per class: label+K+count = 8, then K*(1 + 2*seq*d) f32 values
    const size_t k = 2;
    const size_t per_class = 8 + 4 * (k * (1 + 2 * seq * d));
    CHECK(bytes.size() == 14 + 2 * per_class);
}

TEST_CASE("baseline matches the full pipeline on identically distributed clients") {
    // both methods see the same distribution, so their global accuracies
    // should agree within a few points at desk scale
    toy::SequenceTaskConfig task_cfg;
    task_cfg.num_classes = 3;
    task_cfg.token_dim = 6;
    task_cfg.region_count = 2;
    task_cfg.components = 2;
    task_cfg.seed = 13;
    toy::SequenceTask task(task_cfg);
    Rng data_rng(14);

    std::vector<SequenceDataset> clients;
    for (int k = 0; k < 2; ++k) clients.push_back(task.sample_dataset(120, data_rng));
    SequenceDataset test = task.sample_dataset(100, data_rng);

    cls::ClsConfig ccfg;
    ccfg.epochs = 40;
    ccfg.batch_size = 32;
    ccfg.lr = 2e-3;
    GmmBaselineConfig gcfg;
    gcfg.components = 3;
    BaselineResult baseline =
        run_fedpft_baseline(clients, test, gcfg, ccfg, task_cfg.num_classes, 15);
    CHECK(baseline.upload_bytes.size() == 2);
    CHECK(baseline.pseudo.items.size() == 2 * 3 * 120);
    CHECK(std::isfinite(baseline.accuracy));

    // pipeline counterpart: train clients on the same shards, distill
    gen::GenConfig gcfg2;
    gcfg2.token_dim = 6;
    gcfg2.region_count = 2;
    gcfg2.num_classes = 3;
    gcfg2.mixture_k = 3;
    gcfg2.layers = 1;
    gcfg2.heads = 2;
    gcfg2.hidden = 32;
    gcfg2.epochs = 60;
    gcfg2.batch_size = 32;
    gcfg2.lr = 2e-3;
    HseConfig hse;
    EncoderSpec enc;
    std::vector<fed::ClientPayload> payloads;
    for (size_t k = 0; k < clients.size(); ++k) {
        fed::ClientData data;
        data.imported = true;
        data.sequences = clients[k];
        payloads.push_back(fed::run_client(static_cast<uint32_t>(k), data, hse, enc, gcfg2, ccfg,
                                           fed::SampleSchedule{}, task_cfg.num_classes, 100 + k,
                                           nullptr)
                               .payload);
    }
    cls::KdConfig kd;
    kd.alpha_kd = 0.5;
    kd.temperature = 4.0;
    kd.epochs = 40;
    kd.batch_size = 32;
    kd.lr = 2e-3;
    fed::ServerResult server = fed::run_server(payloads, kd, 200, nullptr);
    const double falcon_acc = fed::evaluate_global(server.global, test).overall;
    CHECK(std::fabs(falcon_acc - baseline.accuracy) <= 0.05);
}

TEST_CASE("report emit/read round trip and timing strip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "falcon_eval_test";
    fs::create_directories(dir);
    const std::string path = (dir / "report.jsonl").string();

    std::vector<Json> records;
    records.push_back({{"record", "run_config"}, {"seed", 42}});
    records.push_back({{"record", "phase"}, {"name", "encode"}, {"wall_ms", 12.5}});
    records.push_back({{"record", "global"}, {"accuracy", 0.75}});
    emit_report(path, records);

    auto back = read_report(path);
    REQUIRE(back.size() == 3);
    CHECK(back[0]["seed"] == 42);
    CHECK(back[2]["accuracy"] == 0.75);

    // wall_ms never survives strip_timing
    auto stripped = strip_timing(back[1]);
    CHECK_FALSE(stripped.contains("wall_ms"));
    CHECK(stripped["name"] == "encode");

    fs::remove_all(dir);
}
