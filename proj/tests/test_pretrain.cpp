#include <cmath>

#include "bda/error.hpp"
#include "bda/data.hpp"
#include "bda/ops.hpp"
#include "bda/pretrain.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace bda;
using namespace bda::pretrain;

namespace {

PretrainConfigs tiny_configs() {
    PretrainConfigs c;
    c.encoder.patch_size = 2;
    c.encoder.stage_depths = {1, 1};
    c.encoder.stage_dims = {8, 16};
    c.encoder.num_heads = {1, 2};
    c.encoder.window_size = 2;
    c.encoder.input_size = 16;
    c.projector = {16, 16, 2};
    c.decoder.fusion_channels = 8;
    c.augment.output_size = 16;
    c.seed = 11;
    return c;
}

std::vector<Tensor> image_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t({3, size, size});
        const double base = rng.uniform(0.2, 0.8);
        for (auto& v : t.values()) v = std::clamp(base + 0.2 * rng.normal(), 0.0, 1.0);
        out.push_back(std::move(t));
    }
    return out;
}

double shannon(const Tensor& p) {
    double h = 0.0;
    for (double v : p.values()) h -= v * std::log(v);
    return h;
}

}  // namespace

TEST_CASE("sharpen examples") {
    auto p = sharpen(Tensor({2}, std::vector<double>{1.0, 2.0}), 0.5);
    const double e2 = std::exp(2.0);
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + e2)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(e2 / (1.0 + e2)).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.1192).epsilon(1e-3));

    Tensor center({2}, std::vector<double>{1.0, 2.0});
    auto q = sharpen(Tensor({2}, std::vector<double>{1.0, 2.0}), 0.07, &center);
    CHECK(q[0] == doctest::Approx(0.5));
    CHECK(q[1] == doctest::Approx(0.5));

    auto u = sharpen(Tensor({7}, 3.3), 0.04);
    for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 7.0));
    CHECK_THROWS_AS(sharpen(Tensor({2}, 0.0), 0.0), NumericError);
}

TEST_CASE("sharpening entropy grows with temperature and stays on the simplex") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits({32});
        for (auto& v : logits.values()) v = rng.normal();
        double prev = -1.0;
        for (double tau : {0.04, 0.1, 0.5, 1.0}) {
            auto p = sharpen(logits, tau);
            double s = 0.0;
            for (double v : p.values()) s += v;
            CHECK(std::abs(s - 1.0) < 1e-5);
            const double h = shannon(p);
            CHECK(h > prev);
            prev = h;
        }
    }
}

TEST_CASE("contrastive loss examples") {
    Tensor half({2}, 0.5);
    CHECK(contrastive_loss(half, half) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    Tensor onehot({3}, std::vector<double>{0.0, 1.0, 0.0});
    CHECK(std::abs(contrastive_loss(onehot, onehot)) < 1e-9);
    Tensor pt({3}, std::vector<double>{0.2, 0.5, 0.3});
    Tensor other({3}, std::vector<double>{0.3, 0.3, 0.4});
    CHECK(contrastive_loss(pt, pt) < contrastive_loss(other, pt));
    CHECK_THROWS(contrastive_loss(half, onehot));
}

TEST_CASE("cosine momentum endpoints and midpoint") {
    CHECK(cosine_momentum(0, 100, 0.996) == 0.996);
    CHECK(cosine_momentum(100, 100, 0.996) == 1.0);
    CHECK(cosine_momentum(50, 100, 0.996) == doctest::Approx(0.998).epsilon(1e-15));
    double prev = 0.0;
    for (int t = 0; t <= 100; ++t) {
        const double l = cosine_momentum(t, 100, 0.996);
        CHECK(l >= prev);
        prev = l;
    }
    CHECK_THROWS(cosine_momentum(101, 100, 0.996));
    CHECK_THROWS(cosine_momentum(-1, 100, 0.996));
}

TEST_CASE("ema update examples") {
    ParameterSet t, s;
    t.add("w", Tensor({1}, 2.0));
    s.add("w", Tensor({1}, 4.0));
    CHECK(ema_update_params(t, s, 0.5).at("w")[0] == 3.0);
    CHECK(ema_update_params(t, s, 1.0) == t);
    CHECK(ema_update_params(t, s, 0.0) == s);
    CHECK(s.at("w")[0] == 4.0);
    ParameterSet bad;
    bad.add("w", Tensor({2}, 0.0));
    CHECK_THROWS(ema_update_params(t, bad, 0.5));
}

TEST_CASE("center update examples") {
    Tensor c({2}, 0.0);
    Tensor batch({2, 2}, std::vector<double>{2.0, -1.0, 0.0, -1.0});
    auto next = update_center(c, batch, 0.9);
    CHECK(next[0] == doctest::Approx(0.1));
    CHECK(next[1] == doctest::Approx(-0.1));

    Tensor mu({1, 2}, std::vector<double>{0.1, -0.1});
    CHECK(max_abs_diff(update_center(next, mu, 0.9), next) < 1e-15);

    Tensor x({2}, std::vector<double>{5.0, -3.0});
    Tensor target({1, 2}, std::vector<double>{1.0, 1.0});
    for (int n = 1; n <= 20; ++n) {
        x = update_center(x, target, 0.9);
        CHECK(std::abs(x[0] - 1.0) == doctest::Approx(std::pow(0.9, n) * 4.0).epsilon(1e-9));
    }
    CHECK_THROWS(update_center(c, Tensor({1, 3}, 0.0), 0.9));
}

TEST_CASE("combined loss values and weight gradients") {
    CHECK(combine_losses(0.7, 0.4, 0.0, 0.0) == doctest::Approx(1.1));
    CHECK(combine_losses(0.0, 0.0, 0.3, -0.2) == doctest::Approx(0.1));
    CHECK_THROWS_AS(combine_losses(std::nan(""), 0.0, 0.0, 0.0), NumericError);

    for (double s1 : {-0.5, 0.0, std::log(0.8)}) {
        auto l1 = ag::constant(Tensor::scalar(0.8));
        auto l2 = ag::constant(Tensor::scalar(0.3));
        auto vs1 = ag::leaf(Tensor::scalar(s1), true);
        auto vs2 = ag::leaf(Tensor::scalar(0.1), true);
        ag::backward(combine_losses(l1, l2, vs1, vs2));
        CHECK(vs1.grad()[0] == doctest::Approx(1.0 - std::exp(-s1) * 0.8).epsilon(1e-12));
    }
}

TEST_CASE("projector output shape, zero map and gradient") {
    ProjectorConfig pc{32, 256, 3};
    auto p = init_projector_params(pc, 64, 1);
    for (auto& [name, t] : p)
        if (name.find("bias") != std::string::npos) CHECK(std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; }));
    auto out = project(ag::constant(Tensor({64, 8, 8}, 0.0)), pc, p.bind(false));
    CHECK(out.shape() == Shape{256});
    for (double v : out.value().values()) CHECK(v == 0.0);

    ProjectorConfig small{6, 5, 3};
    auto ps = init_projector_params(small, 4, 2);
    Rng rng(8);
    for (auto& [name, t] : ps)
        for (auto& v : t.values()) v += 0.5 * rng.normal();
    Tensor map({4, 3, 3});
    for (auto& v : map.values()) v = rng.normal();
    auto r = testing::gradcheck(ps, [&](const ag::VarTable& t) {
        return ag::sum(project(ag::constant(map), small, t));
    });
    CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("teacher starts as an exact copy of the student") {
    auto c = tiny_configs();
    auto s = init_state(c, PretrainHyper{}, 10);
    CHECK(s.teacher == s.student);
    CHECK(s.center.size() == c.projector.output_dim);
    CHECK(s.step == 0);
}

TEST_CASE("teacher receives no gradient") {
    auto c = tiny_configs();
    PretrainHyper h;
    h.batch_size = 2;
    auto s = init_state(c, h, 10);
    auto batch = image_batch(2, 16, 4);
    auto g = build_loss(s, batch, h, c, true);
    ag::backward(g.total);
    for (const auto& [name, t] : collect_gradients(g.teacher))
        for (double v : t.values()) REQUIRE(v == 0.0);
    double student_norm = 0.0;
    for (const auto& [name, t] : collect_gradients(g.student))
        for (double v : t.values()) student_norm += std::abs(v);
    CHECK(student_norm > 0.0);
}

TEST_CASE("a step applies the EMA rule to the new student") {
    auto c = tiny_configs();
    PretrainHyper h;
    h.batch_size = 2;
    h.learning_rate = 1e-3;
    auto s = init_state(c, h, 6);
    auto batch = image_batch(2, 16, 5);
    for (int i = 0; i < 3; ++i) {
        const ParameterSet before = s.teacher;
        const Tensor center_before = s.center;
        auto log = pretrain_step(s, batch, h, c);
        CHECK_FALSE(log.skipped);
        const double lam = cosine_momentum(i, 6, h.lambda_base);
        CHECK(log.lambda == lam);
        for (const auto& [name, t] : s.teacher) {
            const Tensor& tp = before.at(name);
            const Tensor& sn = s.student.at(name);
            for (std::size_t j = 0; j < t.size(); ++j) REQUIRE(std::abs(t[j] - (lam * tp[j] + (1 - lam) * sn[j])) < 1e-6);
        }
        CHECK_FALSE(s.center == center_before);
        CHECK(s.step == i + 1);
        CHECK(std::isfinite(log.entropy));
    }
    CHECK_FALSE(s.student == s.teacher);
}

TEST_CASE("zero learning rate leaves both networks unchanged") {
    auto c = tiny_configs();
    PretrainHyper h;
    h.batch_size = 2;
    auto s = init_state(c, h, 4);
    h.learning_rate = 0.0;
    const ParameterSet student = s.student;
    auto batch = image_batch(2, 16, 6);
    pretrain_step(s, batch, h, c);
    pretrain_step(s, batch, h, c);
    CHECK(s.student == student);
    for (const auto& [name, t] : s.teacher) CHECK(max_abs_diff(t, student.at(name)) < 1e-15);
}

TEST_CASE("disabling reconstruction keeps only the weighted contrastive branch") {
    auto c = tiny_configs();
    c.disable_reconstruction = true;
    PretrainHyper h;
    h.batch_size = 2;
    auto s = init_state(c, h, 4);
    const ParameterSet decoder = s.decoder;
    const double s2 = s.loss_weights.at(kWeightS2)[0];
    auto batch = image_batch(2, 16, 7);
    for (int i = 0; i < 2; ++i) {
        const double s1 = s.loss_weights.at(kWeightS1)[0];
        auto log = pretrain_step(s, batch, h, c);
        CHECK(log.l2 == 0.0);
        CHECK(log.total == doctest::Approx(std::exp(-s1) * log.l1 + s1).epsilon(1e-12));
    }
    CHECK(s.decoder == decoder);
    CHECK(s.loss_weights.at(kWeightS2)[0] == s2);
}

TEST_CASE("total loss gradient matches finite differences on a random subset") {
    auto c = tiny_configs();
    c.encoder.stage_dims = {4, 8};
    c.projector = {8, 8, 2};
    c.decoder.fusion_channels = 4;
    c.encoder.input_size = 8;
    c.augment.output_size = 8;
    PretrainHyper h;
    h.batch_size = 1;
    auto s = init_state(c, h, 4);
    s.loss_weights.at(kWeightS1)[0] = 0.2;
    auto batch = image_batch(1, 12, 9);

    auto g = build_loss(s, batch, h, c);
    ag::backward(g.total);
    ParameterSet analytic = collect_gradients(g.student);
    analytic.merge(collect_gradients(g.decoder));
    analytic.merge(collect_gradients(g.loss_weights));

    std::vector<std::pair<std::string, std::size_t>> entries;
    for (const auto& [name, t] : analytic)
        for (std::size_t i = 0; i < t.size(); ++i) entries.emplace_back(name, i);
    Rng rng(10);
    std::shuffle(entries.begin(), entries.end(), rng.engine());
    entries.resize(10);

    auto value_of = [&](TwinState& st, const std::string& name) -> Tensor& {
        if (st.student.contains(name)) return st.student.at(name);
        if (st.decoder.contains(name)) return st.decoder.at(name);
        return st.loss_weights.at(name);
    };
    for (const auto& [name, i] : entries) {
        TwinState work = s;
        const double eps = 1e-5;
        value_of(work, name)[i] += eps;
        const double up = build_loss(work, batch, h, c).total.item();
        value_of(work, name)[i] -= 2 * eps;
        const double down = build_loss(work, batch, h, c).total.item();
        const double numeric = (up - down) / (2 * eps);
        CHECK_MESSAGE(testing::relative_error(analytic.at(name)[i], numeric) < 1e-3, name, "[", i, "]");
    }
}

TEST_CASE("step log serialises the documented keys") {
    StepLog log;
    log.step = 3;
    log.l1 = 1.5;
    auto line = log.to_json_line();
    for (const char* key : {"\"step\"", "\"L1\"", "\"L2\"", "\"total\"", "\"lambda\"", "\"entropy\""})
        CHECK(line.find(key) != std::string::npos);
    CHECK(line.find('\n') == std::string::npos);
}

TEST_CASE("stepping past total_steps is an error") {
    auto c = tiny_configs();
    PretrainHyper h;
    h.batch_size = 1;
    auto s = init_state(c, h, 1);
    auto batch = image_batch(1, 16, 1);
    pretrain_step(s, batch, h, c);
    CHECK_THROWS(pretrain_step(s, batch, h, c));
}

TEST_CASE("200 steps on 32 synthetic images lower the total loss") {
    auto c = tiny_configs();
    c.encoder.input_size = 32;
    c.encoder.patch_size = 4;
    c.augment.output_size = 32;
    PretrainHyper h;
    auto s = init_state(c, h, 200);
    std::vector<Tensor> images;
    for (auto& p : data::generate_synthetic_set(16, 3, 32, 4)) {
        images.push_back(p.pre);
        images.push_back(p.post);
    }
    std::vector<double> totals;
    for (std::size_t t = 0; t < 200; ++t) {
        std::vector<Tensor> batch;
        for (std::size_t i = 0; i < h.batch_size; ++i) batch.push_back(images[(t * h.batch_size + i) % images.size()]);
        totals.push_back(pretrain_step(s, batch, h, c).total);
    }
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += totals[i];
        last += totals[180 + i];
    }
    CHECK(last < first);
}

TEST_CASE("center starts from the first batch and stays zero when disabled") {
    auto c = tiny_configs();
    PretrainHyper h;
    h.batch_size = 2;
    auto batch = image_batch(2, 16, 12);
    auto s = init_state(c, h, 5);
    auto g = build_loss(s, batch, h, c);
    const std::size_t k = c.projector.output_dim;
    for (std::size_t j = 0; j < k; ++j)
        CHECK(g.center[j] == doctest::Approx((g.teacher_logits[j] + g.teacher_logits[k + j]) / 2).epsilon(1e-12));
    pretrain_step(s, batch, h, c);
    // The seeded center is the batch mean, a fixed point of the first update.
    for (std::size_t j = 0; j < k; ++j) CHECK(s.center[j] == doctest::Approx(g.center[j]).epsilon(1e-12));

    c.disable_centering = true;
    auto z = init_state(c, h, 5);
    for (int i = 0; i < 3; ++i) pretrain_step(z, batch, h, c);
    for (double v : z.center.values()) CHECK(v == 0.0);
}
