// Attention-pooling classifier tests. Pooling and the head are checked
// against brute-force matrix arithmetic written out longhand here.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "falcon/classifier.hpp"
#include "falcon/rng.hpp"

using namespace falcon;
using namespace falcon::cls;

namespace {

Tensor random_matrix(size_t r, size_t c, Rng& rng, double scale = 0.5) {
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

// class 0 centered at +mu, class 1 at -mu; margin is far above the noise,
// so a nearest-class-mean rule (the separability oracle below) is exact.
SequenceDataset separable_dataset(size_t n, size_t dim, uint64_t seed) {
    Rng rng(seed);
    SequenceDataset ds;
    ds.region_count = 2;
    ds.dim = dim;
    ds.num_classes = 2;
    for (size_t i = 0; i < n; ++i) {
        TokenSequence s;
        s.label = static_cast<uint16_t>(i % 2);
        const double mu = s.label == 0 ? 0.8 : -0.8;
        s.tokens = Tensor::zeros({3, dim});
        for (double& v : s.tokens.data) v = mu + 0.15 * rng.normal();
        ds.items.push_back(std::move(s));
    }
    return ds;
}

double nearest_mean_accuracy(const SequenceDataset& ds) {
    const size_t numel = ds.positions() * ds.dim;
    std::vector<std::vector<double>> means(ds.num_classes, std::vector<double>(numel, 0.0));
    std::vector<size_t> counts(ds.num_classes, 0);
    for (const auto& item : ds.items) {
        for (size_t j = 0; j < numel; ++j) means[item.label][j] += item.tokens.data[j];
        ++counts[item.label];
    }
    for (size_t c = 0; c < ds.num_classes; ++c)
        for (double& v : means[c]) v /= static_cast<double>(counts[c]);
    size_t correct = 0;
    for (const auto& item : ds.items) {
        size_t best = 0;
        double best_d = HUGE_VAL;
        for (size_t c = 0; c < ds.num_classes; ++c) {
            double dist = 0.0;
            for (size_t j = 0; j < numel; ++j) {
                const double diff = item.tokens.data[j] - means[c][j];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        if (best == item.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.items.size());
}

}  // namespace

TEST_CASE("attention_pool: single row reduces to row * W_v") {
    Rng rng(1);
    ClassifierModel m = ClassifierModel::init(4, 3, rng);
    Tensor seq = random_matrix(1, 4, rng);
    auto pooled = attention_pool(m, seq);
    const Tensor expect = matmul(seq, m.w_value);
    for (size_t j = 0; j < 4; ++j) CHECK(pooled[j] == Catch::Approx(expect.at(0, j)).margin(1e-15));
}

TEST_CASE("attention_pool: identical rows give uniform attention") {
    Rng rng(2);
    ClassifierModel m = ClassifierModel::init(5, 2, rng);
    Tensor seq = Tensor::zeros({4, 5});
    std::vector<double> row(5);
    for (double& v : row) v = rng.normal();
    for (size_t i = 0; i < 4; ++i) std::copy(row.begin(), row.end(), seq.row_ptr(i));
    auto pooled = attention_pool(m, seq);
    const Tensor expect = matmul(Tensor({1, 5}, row), m.w_value);
    for (size_t j = 0; j < 5; ++j) CHECK(pooled[j] == Catch::Approx(expect.at(0, j)).margin(1e-12));
}

TEST_CASE("attention_pool matches brute-force evaluation") {
    Rng rng(3);
    ClassifierModel m = ClassifierModel::init(4, 2, rng);
    Tensor seq = random_matrix(3, 4, rng, 1.0);

    // brute force: K = sWk, V = sWv, alpha = softmax(q K^T / sqrt(d)), out = alpha V
    const size_t rows = 3, d = 4;
    std::vector<double> scores(rows, 0.0);
    for (size_t i = 0; i < rows; ++i) {
        for (size_t a = 0; a < d; ++a) {
            double kia = 0.0;
            for (size_t b = 0; b < d; ++b) kia += seq.at(i, b) * m.w_key.at(b, a);
            scores[i] += m.query.data[a] * kia;
        }
        scores[i] /= std::sqrt(static_cast<double>(d));
    }
    double mx = std::max({scores[0], scores[1], scores[2]});
    double denom = 0.0;
    std::vector<double> alpha(rows);
    for (size_t i = 0; i < rows; ++i) denom += std::exp(scores[i] - mx);
    for (size_t i = 0; i < rows; ++i) alpha[i] = std::exp(scores[i] - mx) / denom;
    std::vector<double> expect(d, 0.0);
    for (size_t i = 0; i < rows; ++i)
        for (size_t a = 0; a < d; ++a) {
            double via = 0.0;
            for (size_t b = 0; b < d; ++b) via += seq.at(i, b) * m.w_value.at(b, a);
            expect[a] += alpha[i] * via;
        }

    auto pooled = attention_pool(m, seq);
    for (size_t j = 0; j < d; ++j) CHECK(pooled[j] == Catch::Approx(expect[j]).margin(1e-12));

    Tensor bad = random_matrix(3, 5, rng);
    CHECK_THROWS_AS(attention_pool(m, bad), ContractError);
}

TEST_CASE("attention_pool is invariant to row permutation") {
    Rng rng(4);
    ClassifierModel m = ClassifierModel::init(6, 3, rng);
    Tensor seq = random_matrix(5, 6, rng, 1.0);
    Tensor rotated = Tensor::zeros({5, 6});
    for (size_t i = 0; i < 5; ++i)
        std::copy(seq.row_ptr((i + 2) % 5), seq.row_ptr((i + 2) % 5) + 6, rotated.row_ptr(i));
    auto a = attention_pool(m, seq);
    auto b = attention_pool(m, rotated);
    for (size_t j = 0; j < 6; ++j) CHECK(a[j] == Catch::Approx(b[j]).margin(1e-12));
}

TEST_CASE("classify: zero head gives zero logits with lowest-index argmax") {
    Rng rng(5);
    ClassifierModel m = ClassifierModel::init(4, 5, rng);
    m.w1 = Tensor::zeros({4, 4});
    m.b1 = Tensor::zeros({4});
    m.w2 = Tensor::zeros({4, 5});
    m.b2 = Tensor::zeros({5});
    Tensor seq = random_matrix(3, 4, rng);
    auto logits = classify(m, seq);
    for (double v : logits) CHECK(v == 0.0);
    CHECK(argmax_class(logits) == 0);
}

TEST_CASE("classify: constant bias shift leaves argmax unchanged") {
    Rng rng(6);
    ClassifierModel m = ClassifierModel::init(4, 3, rng);
    Tensor seq = random_matrix(4, 4, rng, 1.0);
    auto base = classify(m, seq);
    ClassifierModel shifted = m;
    for (double& v : shifted.b2.data) v += 3.25;
    auto moved = classify(shifted, seq);
    for (size_t c = 0; c < 3; ++c) CHECK(moved[c] == Catch::Approx(base[c] + 3.25).margin(1e-12));
    CHECK(argmax_class(moved) == argmax_class(base));
}

TEST_CASE("classify matches brute-force head evaluation") {
    Rng rng(7);
    ClassifierModel m = ClassifierModel::init(3, 2, rng);
    Tensor seq = random_matrix(2, 3, rng, 1.0);
    auto pooled = attention_pool(m, seq);
    std::vector<double> h(3);
    for (size_t i = 0; i < 3; ++i) {
        double acc = m.b1.data[i];
        for (size_t j = 0; j < 3; ++j) acc += pooled[j] * m.w1.at(j, i);
        h[i] = gelu_scalar(acc);
    }
    std::vector<double> expect(2);
    for (size_t c = 0; c < 2; ++c) {
        expect[c] = m.b2.data[c];
        for (size_t j = 0; j < 3; ++j) expect[c] += h[j] * m.w2.at(j, c);
    }
    auto logits = classify(m, seq);
    CHECK(logits[0] == Catch::Approx(expect[0]).margin(1e-12));
    CHECK(logits[1] == Catch::Approx(expect[1]).margin(1e-12));
}

TEST_CASE("ensemble_teacher closed forms and order invariance") {
    // N=1: plain tempered softmax
    std::vector<double> z1 = {1.0, 0.0};
    auto p = ensemble_teacher({z1}, 2.0);
    Tensor sm = softmax_stable(Tensor::row_vector({0.5, 0.0}));
    CHECK(p[0] == Catch::Approx(sm.data[0]).margin(1e-15));
    CHECK(p[1] == Catch::Approx(sm.data[1]).margin(1e-15));

    // duplicate teachers average to the same distribution
    auto p2 = ensemble_teacher({z1, z1}, 2.0);
    CHECK(p2[0] == Catch::Approx(p[0]).margin(1e-15));

    // symmetric pair at T=1
    auto p3 = ensemble_teacher({{1.0, 0.0}, {0.0, 1.0}}, 1.0);
    CHECK(p3[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(p3[1] == Catch::Approx(0.5).margin(1e-12));

    // teacher order invariance
    Rng rng(8);
    std::vector<std::vector<double>> zs;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> z(3);
        for (double& v : z) v = rng.normal();
        zs.push_back(z);
    }
    auto fwd = ensemble_teacher(zs, 4.0);
    std::reverse(zs.begin(), zs.end());
    auto rev = ensemble_teacher(zs, 4.0);
    for (size_t c = 0; c < 3; ++c) CHECK(fwd[c] == Catch::Approx(rev[c]).margin(1e-15));

    double total = 0.0;
    for (double v : fwd) total += v;
    CHECK(std::fabs(total - 1.0) <= 1e-12);

    CHECK_THROWS_AS(ensemble_teacher({}, 4.0), ContractError);
    CHECK_THROWS_AS(ensemble_teacher({z1}, 0.0), ContractError);
}

TEST_CASE("kd_loss closed forms, positivity, and T^2 scaling") {
    // identical distributions -> zero (up to one ulp between the two
    // log-probability routes)
    std::vector<double> z = {0.3, -0.7, 1.2};
    Tensor sm = softmax_stable(Tensor::row_vector(z));
    std::vector<double> pt(sm.data.begin(), sm.data.end());
    CHECK(std::fabs(kd_loss(pt, z, 1.0)) <= 1e-15);

    // p_T=[1,0] vs p_S=[0.5,0.5] at T=1 -> ln 2
    CHECK(kd_loss({1.0, 0.0}, {0.0, 0.0}, 1.0) == Catch::Approx(std::log(2.0)).margin(1e-12));

    // the T^2 factor relative to the raw KL of the tempered distributions
    Rng rng(9);
    std::vector<double> zs(4), ptv;
    for (double& v : zs) v = rng.normal();
    {
        std::vector<double> zt(4);
        for (double& v : zt) v = rng.normal();
        Tensor tempered = Tensor::row_vector(zt);
        for (double& v : tempered.data) v /= 4.0;
        Tensor p = softmax_stable(tempered);
        ptv.assign(p.data.begin(), p.data.end());
    }
    Tensor studentT = Tensor::row_vector(zs);
    for (double& v : studentT.data) v /= 4.0;
    Tensor ps = softmax_stable(studentT);
    double raw_kl = 0.0;
    for (size_t c = 0; c < 4; ++c)
        if (ptv[c] > 0.0) raw_kl += ptv[c] * (std::log(ptv[c]) - std::log(ps.data[c]));
    CHECK(kd_loss(ptv, zs, 4.0) == Catch::Approx(16.0 * raw_kl).epsilon(1e-12));

    // non-negativity, strictly positive away from equality
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> zr(5);
        for (double& v : zr) v = rng.normal();
        Tensor pr = softmax_stable(Tensor::row_vector(zr));
        std::vector<double> prv(pr.data.begin(), pr.data.end());
        CHECK(kd_loss(prv, zr, 1.0) <= 1e-12);
        std::vector<double> perturbed = zr;
        perturbed[0] += 0.5;
        CHECK(kd_loss(prv, perturbed, 1.0) > 0.0);
    }
}

TEST_CASE("total_loss boundaries") {
    CHECK(total_loss(2.0, 4.0, 0.0) == 2.0);
    CHECK(total_loss(2.0, 4.0, 1.0) == 4.0);
    CHECK(total_loss(2.0, 4.0, 0.5) == 3.0);
    CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.5), ContractError);
}

TEST_CASE("tempered softmax approaches uniform as T grows") {
    Rng rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t c = 2 + rng.below(7);
        std::vector<double> z(c);
        double max_abs = 0.0;
        for (double& v : z) {
            v = rng.normal() * 1.5;
            max_abs = std::max(max_abs, std::fabs(v));
        }
        for (double temperature : {4.0, 40.0, 400.0}) {
            auto p = ensemble_teacher({z}, temperature);
            double max_dev = 0.0;
            for (double v : p) max_dev = std::max(max_dev, std::fabs(v - 1.0 / double(c)));
            CHECK(max_dev <= max_abs / temperature);
        }
    }
}

TEST_CASE("train_local reaches >= 99% on separable data; degenerate single class") {
    SequenceDataset ds = separable_dataset(120, 8, 42);
    CHECK(nearest_mean_accuracy(ds) == 1.0);  // separability oracle
    ClsConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 32;
    cfg.lr = 3e-3;
    ClassifierModel m = train_local(ds, cfg, 7);
    CHECK(accuracy(m, ds) >= 0.99);

    // single-class dataset: the model predicts that class everywhere and
    // cross-entropy collapses
    SequenceDataset one;
    one.region_count = 2;
    one.dim = 8;
    one.num_classes = 3;
    Rng rng(11);
    for (int i = 0; i < 40; ++i) {
        TokenSequence s;
        s.label = 2;
        s.tokens = Tensor::zeros({3, 8});
        for (double& v : s.tokens.data) v = rng.normal();
        one.items.push_back(std::move(s));
    }
    ClsConfig long_cfg = cfg;
    long_cfg.epochs = 200;
    ClassifierModel m1 = train_local(one, long_cfg, 9);
    double ce = 0.0;
    for (const auto& item : one.items) {
        auto logits = classify(m1, item.tokens);
        const double lse = log_sum_exp(logits.data(), logits.size());
        ce -= logits[2] - lse;
        CHECK(predict(m1, item.tokens) == 2);
    }
    CHECK(ce / 40.0 <= 0.05);

    // determinism
    ClassifierModel d1 = train_local(ds, cfg, 13);
    ClassifierModel d2 = train_local(ds, cfg, 13);
    auto p1 = d1.parameters();
    auto p2 = d2.parameters();
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->data == p2[i]->data);

    SequenceDataset empty;
    empty.dim = 8;
    empty.region_count = 2;
    empty.num_classes = 2;
    CHECK_THROWS_AS(train_local(empty, cfg, 1), InvalidInputError);
}

TEST_CASE("train_global with alpha 0 equals train_local bit-for-bit") {
    SequenceDataset ds = separable_dataset(60, 6, 17);
    ClsConfig lcfg;
    lcfg.epochs = 5;
    lcfg.batch_size = 16;
    lcfg.lr = 1e-3;
    KdConfig kcfg;
    kcfg.alpha_kd = 0.0;
    kcfg.temperature = 4.0;
    kcfg.epochs = 5;
    kcfg.batch_size = 16;
    kcfg.lr = 1e-3;
    Rng trng(19);
    ClassifierModel teacher = ClassifierModel::init(6, 2, trng);
    ClassifierModel a = train_local(ds, lcfg, 23);
    ClassifierModel b = train_global(ds, {teacher}, kcfg, 23);
    auto pa = a.parameters();
    auto pb = b.parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);

    CHECK_THROWS_AS(train_global(ds, {}, kcfg, 1), InvalidInputError);
}

TEST_CASE("uniform teachers push the student toward maximum entropy") {
    Rng rng(29);
    SequenceDataset train;
    train.region_count = 2;
    train.dim = 6;
    train.num_classes = 4;
    for (int i = 0; i < 200; ++i) {
        TokenSequence s;
        s.label = static_cast<uint16_t>(rng.below(4));
        s.tokens = Tensor::zeros({3, 6});
        for (double& v : s.tokens.data) v = rng.normal();
        train.items.push_back(std::move(s));
    }
    // a zero-head classifier emits all-zero logits -> uniform at any T
    ClassifierModel uniform_teacher = ClassifierModel::init(6, 4, rng);
    uniform_teacher.w2 = Tensor::zeros({6, 4});
    uniform_teacher.b2 = Tensor::zeros({4});

    KdConfig cfg;
    cfg.alpha_kd = 1.0;
    cfg.temperature = 4.0;
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.lr = 3e-3;
    ClassifierModel student = train_global(train, {uniform_teacher}, cfg, 31);

    double entropy_sum = 0.0;
    size_t count = 0;
    Rng held_rng(37);
    for (int i = 0; i < 100; ++i) {
        Tensor seq = Tensor::zeros({3, 6});
        for (double& v : seq.data) v = held_rng.normal();
        auto logits = classify(student, seq);
        Tensor p = softmax_stable(Tensor::row_vector(logits));
        double h = 0.0;
        for (double v : p.data)
            if (v > 0.0) h -= v * std::log(v);
        entropy_sum += h;
        ++count;
    }
    CHECK(entropy_sum / double(count) >= 0.95 * std::log(4.0));
}

TEST_CASE("FCLS round trip; serialized local classifiers work as teachers") {
    Rng rng(41);
    ClassifierModel m = ClassifierModel::init(5, 3, rng);
    auto bytes = serialize_classifier(m);
    ClassifierModel back = parse_classifier(bytes);
    CHECK(back.dim == 5);
    CHECK(back.num_classes == 3);
    CHECK(serialize_classifier(back) == bytes);
    const size_t header = 4 + 2 + 2 + 2;
    size_t n_params = 0;
    for (auto* p : m.parameters()) n_params += p->numel();
    CHECK(bytes.size() == header + 4 * n_params);

    // a round-tripped local classifier loads into the global training path
    SequenceDataset ds = separable_dataset(40, 5, 43);
    ds.num_classes = 3;  // widen label space to match the teacher
    KdConfig cfg;
    cfg.alpha_kd = 0.5;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.lr = 1e-3;
    ClassifierModel global = train_global(ds, {back}, cfg, 47);
    CHECK(global.dim == 5);

    auto bad = bytes;
    bad[0] = 'Z';
    CHECK_THROWS_AS(parse_classifier(bad), FormatError);
    bad = bytes;
    bad.pop_back();
    CHECK_THROWS_AS(parse_classifier(bad), FormatError);
}
