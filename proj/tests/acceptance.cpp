// Acceptance run: one PASS/FAIL line per criterion. Bare numbers select which
// criteria run (e.g. `acceptance 1 6 7`). `--known-fail N` still runs and
// reports N but keeps its failure out of the exit status. Lines also go to
// acceptance_report.txt in the working directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bda/checkpoint.hpp"
#include "bda/data.hpp"
#include "bda/downstream.hpp"
#include "bda/log.hpp"
#include "bda/metrics.hpp"
#include "bda/ops.hpp"
#include "bda/pretrain.hpp"
#include "bda/recon.hpp"
#include "bda/rng.hpp"
#include "bda/runs.hpp"
#include "gradcheck.hpp"

using namespace bda;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Tensor random_image(std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t({3, size, size});
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

void jitter(ParameterSet& params, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params)
        for (auto& v : t.values()) v += 0.05 * rng.normal();
}

encoder::EncoderConfig tiny_encoder() {
    encoder::EncoderConfig e;
    e.patch_size = 2;
    e.stage_depths = {1, 1};
    e.stage_dims = {8, 16};
    e.num_heads = {1, 2};
    e.window_size = 2;
    e.input_size = 8;
    return e;
}

// ---------------------------------------------------------------- 1

Outcome gradient_fidelity() {
    const auto enc = tiny_encoder();
    std::ostringstream detail;
    bool pass = true;
    auto report = [&](const char* what, const ParameterSet& p, const testing::GradCheckResult& r) {
        pass = pass && p.parameter_count() <= 5000 && r.max_rel_error < 1e-3;
        detail << what << " " << r.checked << "/" << p.parameter_count() << " max rel " << fmt("%.2e", r.max_rel_error)
               << "; ";
    };

    {
        pretrain::ProjectorConfig proj{16, 16, 2};
        ParameterSet p = encoder::init_params(enc, 1);
        p.merge(pretrain::init_projector_params(proj, 16, 1));
        jitter(p, 2);
        const auto x = random_image(8, 3);
        Rng rng(4);
        Tensor t_logits({16});
        for (auto& v : t_logits.values()) v = rng.normal();
        const Tensor p_t = pretrain::sharpen(t_logits, 0.04);
        auto r = testing::gradcheck(p, [&](const ag::VarTable& t) {
            auto maps = encoder::encode(ag::constant(x), enc, t).maps;
            auto p_s = ag::tempered_softmax(pretrain::project(maps.back(), proj, t), 0.1);
            return ag::soft_cross_entropy(p_s, p_t);
        });
        report("contrastive", p, r);
    }
    {
        recon::DecoderConfig dc{8, 2};
        auto dp = recon::init_params(dc, enc.stage_dims, 5);
        jitter(dp, 6);
        const auto ep = encoder::init_params(enc, 7);
        const auto x = random_image(8, 8);
        const auto maps = encoder::encode(x, enc, ep).maps;
        auto r = testing::gradcheck(dp, [&](const ag::VarTable& t) {
            std::vector<ag::Var> pyr;
            for (const auto& m : maps) pyr.push_back(ag::constant(m));
            return ag::mean_abs_error(recon::decode(pyr, dc, t, 8), ag::constant(x));
        });
        report("reconstruction", dp, r);
    }
    {
        downstream::DownstreamConfigs dc;
        dc.encoder = enc;
        dc.encoder.stage_dims = {4, 8};
        dc.head.fusion_dim = 4;
        dc.head.ppm_bins = {1, 2};
        ParameterSet p = encoder::init_params(dc.encoder, 9);
        p.merge(downstream::init_head_params(dc, 10));
        jitter(p, 11);
        const auto pre = random_image(8, 12), post = random_image(8, 13);
        Rng rng(14);
        DamageMask target(8, 8);
        for (auto& v : target.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 4));
        auto r = testing::gradcheck(
            p,
            [&](const ag::VarTable& t) {
                return ag::dice_ce(downstream::siamese_forward(ag::constant(pre), ag::constant(post), dc, t, t),
                                   target.labels, {});
            },
            1e-5);
        report("dice+ce", p, r);
    }
    return {pass, detail.str()};
}

// ---------------------------------------------------------------- 2

Outcome twin_mechanics() {
    pretrain::PretrainConfigs c;
    c.encoder = tiny_encoder();
    c.encoder.input_size = 16;
    c.projector = {16, 16, 2};
    c.decoder.fusion_channels = 8;
    c.augment.output_size = 16;
    c.seed = 21;
    pretrain::PretrainHyper h;
    h.batch_size = 2;
    h.learning_rate = 1e-3;
    const std::int64_t total = 6;
    auto s = pretrain::init_state(c, h, total);
    const bool copied = s.teacher == s.student;
    double worst_ema = 0.0;
    bool zero_teacher_grad = true;
    for (std::int64_t step = 0; step < total; ++step) {
        std::vector<Tensor> batch{random_image(16, 100 + step), random_image(16, 200 + step)};
        auto g = pretrain::build_loss(s, batch, h, c, true);
        ag::backward(g.total);
        for (const auto& [name, t] : collect_gradients(g.teacher))
            for (double v : t.values()) zero_teacher_grad = zero_teacher_grad && v == 0.0;

        const ParameterSet before = s.teacher;
        const double lam = pretrain::cosine_momentum(s.step, s.total_steps, h.lambda_base);
        pretrain::pretrain_step(s, batch, h, c);
        for (const auto& [name, t] : s.teacher) {
            const auto& tb = before.at(name);
            const auto& ts = s.student.at(name);
            for (std::size_t i = 0; i < t.size(); ++i)
                worst_ema = std::max(worst_ema, std::abs(t[i] - (lam * tb[i] + (1 - lam) * ts[i])));
        }
    }
    const double b = 0.996;
    const bool schedule = pretrain::cosine_momentum(0, 300, b) == b && pretrain::cosine_momentum(300, 300, b) == 1.0 &&
                          pretrain::cosine_momentum(150, 300, b) == 1.0 - (1.0 - b) / 2.0;
    const bool pass = copied && worst_ema <= 1e-6 && zero_teacher_grad && schedule;
    std::ostringstream d;
    d << "initial copy " << (copied ? "bit-exact" : "differs") << "; max EMA deviation " << fmt("%.1e", worst_ema)
      << "; teacher grads zero " << (zero_teacher_grad ? "yes" : "no") << "; schedule endpoints "
      << (schedule ? "exact" : "wrong");
    return {pass, d.str()};
}

// ---------------------------------------------------------------- 3

// Max component of the teacher distribution averaged over the final fifth of
// a 300-step run.
double collapse_run(bool centering, std::uint64_t seed, const std::vector<Tensor>& images) {
    pretrain::PretrainConfigs c;
    c.encoder.patch_size = 4;
    c.encoder.stage_depths = {1, 1};
    c.encoder.stage_dims = {16, 32};
    c.encoder.num_heads = {1, 2};
    c.encoder.window_size = 4;
    c.encoder.input_size = 32;
    c.projector = {64, 64, 3};
    c.decoder.fusion_channels = 8;
    c.augment.output_size = 32;
    c.disable_centering = !centering;
    c.seed = seed;
    pretrain::PretrainHyper h;
    h.lambda_base = 0.9;
    const std::int64_t steps = 300;
    auto s = pretrain::init_state(c, h, steps);
    Tensor running({c.projector.output_dim}, 0.0);
    std::size_t n = 0;
    for (std::int64_t t = 0; t < steps; ++t) {
        std::vector<Tensor> batch;
        for (std::size_t i = 0; i < h.batch_size; ++i) batch.push_back(images[(t * h.batch_size + i) % images.size()]);
        auto log = pretrain::pretrain_step(s, batch, h, c);
        if (t >= steps * 4 / 5) {
            for (std::size_t k = 0; k < running.size(); ++k) running[k] += log.teacher_mean[k];
            ++n;
        }
    }
    double mx = 0.0;
    for (double v : running.values()) mx = std::max(mx, v / static_cast<double>(n));
    return mx;
}

Outcome collapse_diagnostic() {
    std::vector<Tensor> images;
    for (auto& p : data::generate_synthetic_set(32, 77, 32, 4)) {
        images.push_back(p.pre);
        images.push_back(p.post);
    }
    int centered_ok = 0, uncentered_ok = 0;
    std::ostringstream d;
    d << "max component with/without centering:";
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const double with = collapse_run(true, seed, images);
        const double without = collapse_run(false, seed, images);
        centered_ok += with < 0.5;
        uncentered_ok += without > 0.9;
        d << " " << fmt("%.3f", with) << "/" << fmt("%.3f", without);
    }
    return {centered_ok >= 2 && uncentered_ok >= 2, d.str()};
}

// ---------------------------------------------------------------- 4

Outcome decoder_fit() {
    encoder::EncoderConfig e;  // default encoder, frozen at its random init
    recon::DecoderConfig dc;
    dc.num_fusion_layers = e.stages();
    const auto ep = encoder::init_params(e, 1);
    auto dp = recon::init_params(dc, e.stage_dims, 1);
    std::vector<Tensor> images;
    std::vector<std::vector<Tensor>> pyramids;
    for (auto& p : data::generate_synthetic_set(20, 5, e.input_size, 4)) {
        pyramids.push_back(encoder::encode(p.pre, e, ep).maps);
        images.push_back(std::move(p.pre));
    }
    Adam opt(Adam::Options{1e-3});
    double first = 0.0, last = 0.0;
    for (int step = 0; step <= 200; ++step) {
        auto t = dp.bind(step < 200);
        std::vector<ag::Var> losses;
        for (std::size_t i = 0; i < images.size(); ++i) {
            std::vector<ag::Var> pyr;
            for (const auto& m : pyramids[i]) pyr.push_back(ag::constant(m));
            losses.push_back(ag::mean_abs_error(recon::decode(pyr, dc, t, e.input_size), ag::constant(images[i])));
        }
        ag::Var loss = ag::average(losses);
        if (step == 0) first = loss.item();
        if (step == 200) {
            last = loss.item();
            break;
        }
        ag::backward(loss);
        opt.step(dp, collect_gradients(t));
    }
    const double reduction = 1.0 - last / first;
    return {reduction >= 0.5, "L1 " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (" +
                                  fmt("%.1f", 100 * reduction) + "% reduction after 200 steps)"};
}

// ---------------------------------------------------------------- 5

struct ArmResult {
    double f1 = 0.0;
    double epoch5_loss = 0.0;
};

Outcome transfer_benefit(const fs::path& work) {
    double ssl_f1 = 0.0, rand_f1 = 0.0;
    int ssl_faster = 0;
    std::ostringstream d;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        cli::RunConfig c;
        c.run.seed = seed;
        c.data.synthetic_count = 200;
        c.pretrain.epochs = 10;
        c.finetune.epochs = 30;
        c.finetune.labeled_fraction = 0.1;

        auto ssl_cfg = c;
        ssl_cfg.run.out_dir = (work / ("ssl_" + std::to_string(seed))).string();
        auto pre = cli::run_pretrain(ssl_cfg);
        auto ssl = cli::run_finetune(ssl_cfg, {pre.checkpoint_path, nullptr});

        auto rand_cfg = c;
        rand_cfg.run.out_dir = (work / ("rand_" + std::to_string(seed))).string();
        rand_cfg.finetune.random_init = true;
        auto rnd = cli::run_finetune(rand_cfg);

        const ArmResult a{ssl.epochs.back().validation.localization, ssl.epochs[4].loss};
        const ArmResult b{rnd.epochs.back().validation.localization, rnd.epochs[4].loss};
        ssl_f1 += a.f1 / 3;
        rand_f1 += b.f1 / 3;
        ssl_faster += a.epoch5_loss < b.epoch5_loss;
        d << "seed " << seed << " F1 " << fmt("%.3f", a.f1) << " vs " << fmt("%.3f", b.f1) << ", epoch-5 loss "
          << fmt("%.3f", a.epoch5_loss) << " vs " << fmt("%.3f", b.epoch5_loss) << "; ";
    }
    d << "mean F1 ssl " << fmt("%.4f", ssl_f1) << " random " << fmt("%.4f", rand_f1) << "; lower epoch-5 loss in "
      << ssl_faster << "/3";
    return {ssl_f1 > rand_f1 && ssl_faster >= 2, d.str()};
}

// ---------------------------------------------------------------- 6

double brute_f1(const DamageMask& p, const DamageMask& g, const std::function<bool(int)>& positive) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
        const bool pp = positive(p.labels[i]), gg = positive(g.labels[i]);
        tp += pp && gg;
        fp += pp && !gg;
        fn += !pp && gg;
    }
    return 2 * tp + fp + fn == 0 ? std::nan("") : 2 * tp / (2 * tp + fp + fn);
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

Outcome metric_oracle() {
    Rng rng(61);
    int exact = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = rng.uniform_int(1, 24), w = rng.uniform_int(1, 24);
        // Restrict the label alphabet now and then so absent classes occur.
        const int top = static_cast<int>(rng.uniform_int(0, 4));
        DamageMask p(h, w), g(h, w);
        for (auto& v : p.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, top));
        for (auto& v : g.labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, top));
        const auto rep = metrics::evaluate(metrics::confusion_counts(p, g));
        bool ok = same(rep.localization, brute_f1(p, g, [](int v) { return v >= 1; }));
        std::vector<double> defined;
        bool any_zero = false;
        for (int c = 1; c <= 4; ++c) {
            const double f = brute_f1(p, g, [c](int v) { return v == c; });
            ok = ok && same(rep.class_f1[c - 1], f);
            if (!std::isnan(f)) {
                defined.push_back(f);
                any_zero = any_zero || f == 0.0;
            }
        }
        double hm = std::nan("");
        if (any_zero) {
            hm = 0.0;
        } else if (!defined.empty()) {
            double inv = 0.0;
            for (double f : defined) inv += 1.0 / f;
            hm = static_cast<double>(defined.size()) / inv;
        }
        ok = ok && (same(rep.damage, hm) || std::abs(rep.damage - hm) <= 1e-15);
        exact += ok;
    }
    DamageMask none(4, 4, 1);
    const auto rep = metrics::evaluate(metrics::confusion_counts(none, none));
    const bool nan_rule = rep.class_f1[0] == 1.0 && std::isnan(rep.class_f1[1]) && std::isnan(rep.class_f1[2]) &&
                          std::isnan(rep.class_f1[3]) && rep.damage == 1.0 &&
                          metrics::to_json(rep).find("\"minor\":null") != std::string::npos;
    return {exact == 100 && nan_rule, std::to_string(exact) + "/100 pairs match brute force; absent-class NaN rule " +
                                          (nan_rule ? "honored" : "violated")};
}

// ---------------------------------------------------------------- 7

Outcome mask_consistency() {
    Rng rng(71);
    int consistent = 0, invariant = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t h = rng.uniform_int(1, 20), w = rng.uniform_int(1, 20);
        downstream::PredictionMap m{Tensor({5, h, w})};
        for (auto& v : m.scores.values()) v = rng.normal() * std::pow(10.0, rng.uniform(-3, 3));
        // Force some exact ties.
        if (trial % 4 == 0)
            for (std::size_t i = 0; i < h * w; i += 3) m.scores[2 * h * w + i] = m.scores[i];
        const auto [dmg, loc] = downstream::predict_masks(m);
        bool ok = true;
        for (std::size_t i = 0; i < h * w; ++i) ok = ok && loc.labels[i] == (dmg.labels[i] >= 1 ? 1 : 0);
        consistent += ok;
        const double s = std::pow(10.0, rng.uniform(-3, 3));
        downstream::PredictionMap scaled{m.scores};
        for (auto& v : scaled.scores.values()) v *= s;
        invariant += downstream::predict_masks(scaled).first.labels == dmg.labels;
    }
    return {consistent == 100 && invariant == 100, std::to_string(consistent) + "/100 consistent, " +
                                                       std::to_string(invariant) + "/100 scale-invariant"};
}

// ---------------------------------------------------------------- 8

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

cli::RunConfig small_run(const fs::path& out) {
    cli::RunConfig c;
    c.run.out_dir = out.string();
    c.run.seed = 8;
    c.data.synthetic_count = 8;
    c.encoder.patch_size = 4;
    c.encoder.stage_depths = {1, 1};
    c.encoder.stage_dims = {8, 16};
    c.encoder.num_heads = {1, 2};
    c.encoder.window_size = 2;
    c.encoder.input_size = 32;
    c.projector = {16, 16, 2};
    c.decoder.fusion_channels = 8;
    c.head.fusion_dim = 8;
    c.pretrain.hyper.batch_size = 4;
    c.pretrain.epochs = 2;
    c.finetune.epochs = 2;
    c.finetune.labeled_fraction = 1.0;
    return c;
}

Outcome determinism(const fs::path& work) {
    std::vector<std::string> runs;
    for (int r = 0; r < 2; ++r) {
        auto c = small_run(work / "det");
        fs::remove_all(c.run.out_dir);
        cli::run_pretrain(c);
        cli::run_finetune(c, {fs::path(c.run.out_dir) / "pretrain.ckpt", nullptr});
        std::string all;
        for (const char* f : {"pretrain_log.jsonl", "pretrain.ckpt", "finetune_log.jsonl", "finetune.ckpt",
                              "pretrain_loss.png", "finetune_f1.png"})
            all += slurp(fs::path(c.run.out_dir) / f);
        runs.push_back(all);
    }
    const bool rerun = runs[0] == runs[1];

    const auto path = work / "det" / "finetune.ckpt";
    const auto loaded = cli::load_checkpoint(path);
    const bool roundtrip = cli::serialize_checkpoint(loaded) == slurp(path);

    auto straight = small_run(work / "straight");
    auto split = small_run(work / "split");
    auto a = cli::run_pretrain(straight);
    cli::run_pretrain(split, {"", 2, nullptr});
    auto b = cli::run_pretrain(split, {fs::path(split.run.out_dir) / "pretrain.ckpt", -1, nullptr});
    const bool resume = a.checkpoint.tensors == b.checkpoint.tensors &&
                        slurp(fs::path(straight.run.out_dir) / "pretrain_log.jsonl") ==
                            slurp(fs::path(split.run.out_dir) / "pretrain_log.jsonl");
    return {rerun && roundtrip && resume, std::string("reruns byte-identical ") + (rerun ? "yes" : "no") +
                                              "; checkpoint round trip bit-exact " + (roundtrip ? "yes" : "no") +
                                              "; resume at step 2 matches straight run " + (resume ? "yes" : "no")};
}

// ---------------------------------------------------------------- 9

Outcome data_oracle(const fs::path& work) {
    Rng rng(91);
    int exact = 0;
    const int polygons = 200;
    for (int trial = 0; trial < polygons; ++trial) {
        const std::size_t h = rng.uniform_int(4, 40), w = rng.uniform_int(4, 40);
        const double cx = rng.uniform(0, static_cast<double>(w)), cy = rng.uniform(0, static_cast<double>(h));
        const double r = rng.uniform(1, 15);
        const std::size_t n = rng.uniform_int(3, 9);
        std::vector<double> angles(n);
        for (auto& a : angles) a = rng.uniform(0, 2 * M_PI);
        std::sort(angles.begin(), angles.end());
        data::PolygonAnnotation poly;
        poly.damage_class = static_cast<int>(rng.uniform_int(1, 4));
        for (double a : angles) poly.vertices.emplace_back(cx + r * std::cos(a), cy + r * std::sin(a));
        const auto mask = data::rasterize_annotations({poly}, h, w);
        bool ok = true;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                bool inside = false;
                const auto& v = poly.vertices;
                for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                    if ((v[i].second > py) != (v[j].second > py) &&
                        px < (v[j].first - v[i].first) * (py - v[i].second) / (v[j].second - v[i].second) + v[i].first)
                        inside = !inside;
                }
                ok = ok && mask.at(y, x) == (inside ? poly.damage_class : 0);
            }
        }
        exact += ok;
    }

    const auto pairs = data::generate_synthetic_set(50, 92, 64, 6);
    data::export_dataset(data::manifest_from_pairs(pairs), work / "export");
    const auto loaded = data::load_dataset(work / "export");
    int round_trip = 0;
    for (const auto& p : pairs) {
        for (const auto& q : loaded.pairs) {
            if (q.id == p.id) round_trip += q.damage.labels == p.damage.labels && q.pre == p.pre && q.post == p.post;
        }
    }
    return {exact == polygons && round_trip == 50, std::to_string(exact) + "/" + std::to_string(polygons) +
                                                       " convex polygons exact; " + std::to_string(round_trip) +
                                                       "/50 exported pairs mask- and pixel-exact after reload"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = fs::temp_directory_path() / "bda_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);
    log::set_warning_sink([](const std::string&) {});

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient fidelity", gradient_fidelity},
        {"twin-network update mechanics", twin_mechanics},
        {"collapse diagnostic", collapse_diagnostic},
        {"reconstruction trainability", decoder_fit},
        {"transfer benefit of pre-training", [&] { return transfer_benefit(work / "transfer"); }},
        {"metric oracle", metric_oracle},
        {"mask consistency", mask_consistency},
        {"determinism and persistence", [&] { return determinism(work / "determinism"); }},
        {"data oracle", [&] { return data_oracle(work / "data"); }},
    };
    std::set<int> only, known;
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--known-fail" && i + 1 < argc) {
            known.insert(std::atoi(argv[++i]));
        } else {
            only.insert(std::atoi(argv[i]));
        }
    }

    std::ofstream report("acceptance_report.txt");
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool excused = !o.pass && known.count(id);
        char head[160];
        std::snprintf(head, sizeof head, "[%s] %d %s (%.1f s): ", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                      secs);
        const std::string line = head + o.detail + (excused ? " [known failure]" : "");
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
        report << line << '\n' << std::flush;
        failed += !o.pass && !excused;
    }
    fs::remove_all(work);
    return failed == 0 ? 0 : 1;
}
