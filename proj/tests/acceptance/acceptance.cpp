// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 1 5 8      only the listed ones

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include <torch/torch.h>

#include "openseg/config.hpp"
#include "openseg/errors.hpp"
#include "openseg/evaluate.hpp"
#include "openseg/metrics.hpp"
#include "openseg/training.hpp"

using namespace openseg;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
    std::printf("%s %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c, d);
    return buf;
}

// ---- 1 ---------------------------------------------------------------------

void matching_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 1 + static_cast<int>(rng() % 6);
        const int g = 1 + static_cast<int>(rng() % k);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(trial);
        auto cost = trial % 2 == 0 ? torch::rand({k, g}, gen, torch::kFloat64)
                                   : torch::randint(0, 4, {k, g}, gen, torch::kFloat64);
        const double fast = assignment_cost(cost, hungarian_match(cost));
        const double slow = assignment_cost(cost, brute_force_match(cost));
        if (fast != slow) ++mismatches;
    }
    const double secs = seconds_since(t0);
    report(1, "matching-oracle", mismatches == 0 && secs < 5.0,
           fmt("%.0f/200 cost mismatches, %.3f s", mismatches, secs));
}

// ---- shared tiny model -----------------------------------------------------

SegDecoderConfig tiny_decoder() {
    SegDecoderConfig c;
    c.width = 16;
    c.num_queries = 4;
    c.heads = 2;
    c.ffn_dim = 32;
    c.aligner_blocks = 1;
    c.decoder_blocks = 2;
    return c;
}

PoolConfig tiny_pool() { return PoolConfig{{{"p8", 8, 8, 11}}, "p8", 8, 7}; }

PromptTokens random_tokens(int n, int dim, Modality m, std::mt19937_64& rng) {
    PromptTokens t;
    t.embeddings = torch::randn({n, dim}, torch::kFloat64);
    for (int i = 0; i < n; ++i) t.class_ids.push_back(static_cast<int>(rng() % 3));
    t.modality = m;
    return t;
}

GroundTruthSet random_gt(int g, int side, int columns, std::mt19937_64& rng) {
    GroundTruthSet gt;
    gt.masks = (torch::rand({g, side, side}, torch::kFloat64) > 0.6).to(torch::kFloat64);
    for (int i = 0; i < g; ++i) {
        gt.masks[i][i % side][0] = 1.0;
        gt.prompt_columns.push_back(static_cast<int>(rng() % columns));
        gt.class_ids.push_back(0);
    }
    return gt;
}

// ---- 2 ---------------------------------------------------------------------

void gradient_check() {
    const auto t0 = Clock::now();
    torch::manual_seed(5);
    std::mt19937_64 rng(5);
    SegModel model(tiny_pool(), tiny_decoder(), torch::kFloat64, 5);
    auto image = torch::rand({3, 32, 32}, torch::kFloat64);  // 4 x 4 feature grid
    auto visual = random_tokens(2, 8, Modality::Visual, rng);
    auto text = random_tokens(2, 8, Modality::Text, rng);
    auto gt = random_gt(2, 16, 4, rng);
    for (int i = 0; i < gt.size(); ++i) {
        const int col = gt.prompt_columns[static_cast<std::size_t>(i)];
        gt.class_ids[static_cast<std::size_t>(i)] = col < 2 ? visual.class_ids[col] : text.class_ids[col - 2];
    }
    LossWeights w;
    auto loss_of = [&] { return total_loss(model.forward(image, visual, text, false), gt, w).loss; };

    auto params = model.decoder()->parameters();
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    loss_of().backward();

    struct Site {
        std::size_t param;
        std::int64_t index;
    };
    std::vector<Site> sites;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto n = params[pi].numel();
        for (int draw = 0; draw < 2; ++draw) sites.push_back({pi, static_cast<std::int64_t>(rng() % n)});
    }
    torch::NoGradGuard no_grad;
    const double h = 1e-6;
    double worst = 0.0;
    int checked = 0;
    for (const auto& s : sites) {
        auto flat = params[s.param].view({-1});
        const double an = params[s.param].grad().view({-1})[s.index].item<double>();
        const double orig = flat[s.index].item<double>();
        flat[s.index] = orig + h;
        const double up = loss_of().item<double>();
        flat[s.index] = orig - h;
        const double down = loss_of().item<double>();
        flat[s.index] = orig;
        const double fd = (up - down) / (2 * h);
        const double scale = std::max(std::abs(an), std::abs(fd));
        // both sides below the finite-difference noise floor: nothing to compare
        if (scale < 1e-7) continue;
        worst = std::max(worst, std::abs(fd - an) / scale);
        ++checked;
    }
    const double secs = seconds_since(t0);
    report(2, "gradient-check", checked >= 32 && worst <= 1e-4 && secs < 120.0,
           fmt("%.0f parameters, worst relative error %.2e, %.1f s", checked, worst, secs));
}

// ---- 3 ---------------------------------------------------------------------

void shape_equivariance() {
    torch::manual_seed(9);
    std::mt19937_64 rng(9);
    SegModel model(tiny_pool(), tiny_decoder(), torch::kFloat64, 9);
    torch::NoGradGuard no_grad;
    int shape_bad = 0, perm_bad = 0, gt_bad = 0, trials = 0;
    double worst_perm = 0.0, worst_gt = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
        const int side = 32 + 8 * static_cast<int>(rng() % 3);
        const int m = static_cast<int>(rng() % 4), n = static_cast<int>(rng() % 4);
        auto image = torch::rand({3, side, side}, torch::kFloat64);
        auto visual = random_tokens(m, 8, Modality::Visual, rng);
        auto text = random_tokens(n, 8, Modality::Text, rng);
        auto out = model.forward(image, visual, text, false);
        const auto grid = side / 8;
        ++trials;
        if (out.final.scores.logits.sizes() != torch::IntArrayRef({4, m + n + 1}) ||
            out.final.masks.logits.sizes() != torch::IntArrayRef({4, 4 * grid, 4 * grid}))
            ++shape_bad;
        if (m + n == 0) continue;

        // permute visual and text tokens independently
        std::vector<std::int64_t> pv(m), pt(n);
        std::iota(pv.begin(), pv.end(), 0);
        std::iota(pt.begin(), pt.end(), 0);
        std::shuffle(pv.begin(), pv.end(), rng);
        std::shuffle(pt.begin(), pt.end(), rng);
        auto permute = [](const PromptTokens& t, const std::vector<std::int64_t>& p) {
            PromptTokens r = t;
            if (p.empty()) return r;
            r.embeddings = t.embeddings.index_select(0, torch::tensor(p, torch::kLong));
            r.class_ids.clear();
            for (auto i : p) r.class_ids.push_back(t.class_ids[static_cast<std::size_t>(i)]);
            return r;
        };
        auto out2 = model.forward(image, permute(visual, pv), permute(text, pt), false);
        std::vector<std::int64_t> cols;
        for (auto i : pv) cols.push_back(i);
        for (auto i : pt) cols.push_back(m + i);
        cols.push_back(m + n);
        auto expected = out.final.scores.logits.index_select(1, torch::tensor(cols, torch::kLong));
        const double d = (expected - out2.final.scores.logits).abs().max().item<double>();
        worst_perm = std::max(worst_perm, d);
        if (d > 1e-9 || !torch::allclose(out.final.masks.logits, out2.final.masks.logits, 1e-9, 1e-9)) ++perm_bad;

        // ground-truth order must not matter
        const int g = 1 + static_cast<int>(rng() % 3);
        auto gt = random_gt(g, 4 * grid, m + n, rng);
        for (int i = 0; i < g; ++i) {
            const int col = gt.prompt_columns[static_cast<std::size_t>(i)];
            gt.class_ids[static_cast<std::size_t>(i)] = col < m ? visual.class_ids[col] : text.class_ids[col - m];
        }
        std::vector<int> order(g);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const double a = total_loss(out, gt, LossWeights{}).loss.item<double>();
        const double b = total_loss(out, gt.permuted(order), LossWeights{}).loss.item<double>();
        const double rel = std::abs(a - b) / std::max(std::abs(a), 1e-300);
        worst_gt = std::max(worst_gt, rel);
        if (rel > 1e-9) ++gt_bad;
    }
    report(3, "shape-equivariance", shape_bad == 0 && perm_bad == 0 && gt_bad == 0,
           fmt("%.0f trials; shape failures %.0f; column permutation max diff %.1e; gt permutation max rel %.1e",
               trials, shape_bad, worst_perm, worst_gt));
}

// ---- 4 ---------------------------------------------------------------------

Dataset small_dataset() {
    SceneSpec spec;
    spec.image_size = 64;
    spec.min_size = 12;
    spec.max_size = 24;
    spec.seed = 4;
    return generate_in_memory(spec, 40, 4);
}

TrainConfig small_train(int steps) {
    auto cfg = TrainConfig::desk();
    cfg.steps = steps;
    cfg.batch_size = 4;
    cfg.crop_size = 64;
    cfg.n_negatives = 1;
    cfg.warmup_steps = 5;
    cfg.base_lr = 1e-3;
    return cfg;
}

PoolConfig small_pool() { return PoolConfig{{{"p8", 8, 16, 5}}, "p8", 16, 7}; }

SegDecoderConfig small_decoder() {
    SegDecoderConfig c;
    c.width = 32;
    c.num_queries = 8;
    c.ffn_dim = 64;
    c.decoder_blocks = 2;
    return c;
}

void frozen_contract() {
    const auto data = small_dataset();
    auto model = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat32, 1);
    const auto before = model->pool().checksum();
    Trainer trainer(model, small_train(50));
    trainer.fit(data);
    const bool frozen = model->pool().checksum() == before && trainer.current_step() == 50;

    auto fresh = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat32, 2);
    Trainer probe(fresh, small_train(50));
    auto batch = make_batch(data, fresh->pool(), probe.config(), 0);
    auto params = fresh->decoder()->parameters();
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    Tensor total;
    for (const auto& e : batch) {
        auto l = probe.episode_loss(e).loss;
        total = total.defined() ? total + l : l;
    }
    total.backward();
    int dead = 0;
    for (const auto& p : params) {
        if (!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0) ++dead;
    }
    report(4, "frozen-contract", frozen && dead == 0,
           std::string("encoder checksum ") + (frozen ? "unchanged" : "CHANGED") +
               fmt(" after %.0f steps; %.0f of %.0f decoder tensors without gradient",
                   static_cast<double>(trainer.current_step()), dead, static_cast<double>(params.size())));
}

// ---- 5 ---------------------------------------------------------------------

void config_fidelity() {
    const auto c = RunConfig::profile_defaults("paper");
    const auto& t = c.train;
    const bool ok = t.base_lr == 1e-4 && t.warmup_steps == 100 && t.weight_decay == 0.05 && t.beta1 == 0.9 &&
                    t.beta2 == 0.999 && t.steps == 50000 && t.batch_size == 64 && t.scale_lo == 0.1 &&
                    t.scale_hi == 2.0 && c.model.aligner_blocks == 1 && c.model.decoder_blocks == 6 &&
                    lr_at_step(100, t) == 1e-4 && lr_at_step(0, t) == 0.0 && lr_at_step(50000, t) == 0.0;
    report(5, "config-fidelity", ok,
           fmt("lr %g warmup %.0f wd %g steps %.0f", t.base_lr, t.warmup_steps, t.weight_decay, t.steps) +
               fmt(" batch %.0f jitter (%g, %g) blocks %.0f", t.batch_size, t.scale_lo, t.scale_hi,
                   c.model.decoder_blocks) +
               fmt(" lr@0 %g lr@100 %g lr@50000 %g", lr_at_step(0, t), lr_at_step(100, t), lr_at_step(50000, t)));
}

// ---- 6, 7, 10 --------------------------------------------------------------

struct DeskRun {
    std::shared_ptr<SegModel> model;
    double train_seconds = 0.0;
    double final_loss = 0.0;
};

DeskRun train_desk(const RunConfig& cfg, const Dataset& data, TrainModalities modalities) {
    DeskRun run;
    run.model = std::make_shared<SegModel>(cfg.pool, cfg.model, cfg.torch_dtype(), cfg.seed);
    auto tc = cfg.train;
    tc.modalities = modalities;
    Trainer trainer(run.model, tc, cfg.loss);
    const auto t0 = Clock::now();
    trainer.fit(data, -1, [&](std::int64_t step, const StepResult& r) {
        run.final_loss = r.loss;
        if (step % 250 == 0)
            std::printf("  [%s] step %lld loss %.4f\n", to_string(modalities), static_cast<long long>(step), r.loss);
        std::fflush(stdout);
    });
    run.train_seconds = seconds_since(t0);
    return run;
}

void desk_learning(const std::set<int>& want) {
    const auto cfg = RunConfig::profile_defaults("desk");
    const auto data = generate_in_memory(cfg.data.scene, cfg.data.n_images, cfg.data.n_val);
    auto both = train_desk(cfg, data, TrainModalities::Both);
    const double text = evaluate(*both.model, data, EvalTask::Text, cfg.eval).report.miou;
    const double visual = evaluate(*both.model, data, EvalTask::Visual, cfg.eval).report.miou;
    std::printf("  co-trained: text %.4f visual %.4f (%.0f s)\n", text, visual, both.train_seconds);

    if (want.count(6)) {
        report(6, "desk-learning", text >= 0.80 && visual >= 0.70 && both.train_seconds <= 1800.0,
               fmt("text mIoU %.4f (>= 0.80), one-shot visual mIoU %.4f (>= 0.70), %.0f s training (<= 1800)", text,
                   visual, both.train_seconds));
    }
    if (want.count(7)) {
        const double fused = evaluate(*both.model, data, EvalTask::Fused, cfg.eval).report.miou;
        auto visual_only = train_desk(cfg, data, TrainModalities::VisualOnly);
        const double solo = evaluate(*visual_only.model, data, EvalTask::Visual, cfg.eval).report.miou;
        const bool a = visual - solo >= 0.02;
        const bool b = fused >= std::max(text, visual) - 0.05 && fused >= std::min(text, visual);
        report(7, "synergy", a && b,
               fmt("(a) co-trained visual %.4f vs visual-only %.4f (need +0.02); ", visual, solo) +
                   fmt("(b) fused %.4f vs text %.4f / visual %.4f", fused, text, visual));
    }
    if (want.count(10)) {
        auto eval = cfg.eval;
        const auto r = evaluate_vos(*both.model, cfg.data.scene, eval);
        report(10, "vos-smoke", r.vos_iou >= 0.7 && r.vos_max_bank <= eval.bank_capacity && r.vos_pinned,
               fmt("mean per-frame IoU %.4f (>= 0.7), max bank %.0f of %.0f, pinned entry ", r.vos_iou,
                   r.vos_max_bank, eval.bank_capacity) +
                   (r.vos_pinned ? "kept" : "LOST"));
    }
}

// ---- 8 ---------------------------------------------------------------------

Tensor rect(int h, int w, int r0, int r1, int c0, int c1) {
    auto m = torch::zeros({h, w}, torch::kBool);
    m.index_put_({torch::indexing::Slice(r0, r1), torch::indexing::Slice(c0, c1)}, true);
    return m;
}

void metric_fixtures() {
    auto gt_sem = torch::tensor({1, 1, kNoClass, kNoClass}, torch::kLong).reshape({2, 2});
    auto pred_sem = torch::tensor({1, kNoClass, 1, kNoClass}, torch::kLong).reshape({2, 2});
    const double m = miou(pred_sem, gt_sem, 2).miou;

    auto pq = panoptic_quality({{rect(4, 5, 0, 2, 0, 4), 0}, {rect(4, 5, 3, 4, 0, 2), 0}}, {{rect(4, 5, 0, 2, 0, 5), 0}}).pq;

    const double bce = mask_bce_loss(torch::zeros({1, 1}, torch::kFloat64), torch::ones({1, 1}, torch::kFloat64))
                           .item<double>();
    // p saturated at 1 on four pixels, two of them foreground: 1 - (2*2 + 1) / (4 + 2 + 1)
    auto logits = torch::full({2, 2}, 30.0, torch::kFloat64);
    auto g = torch::tensor({1.0, 1.0, 0.0, 0.0}, torch::kFloat64).reshape({2, 2});
    const double dice = dice_loss(logits, g).item<double>();

    auto gt = rect(4, 4, 0, 2, 0, 2), miss = rect(4, 4, 2, 4, 2, 4);
    ImageDetections img;
    img.ground_truth = {{gt, 0}};
    img.predictions = {{miss, 0, 0.9}, {gt, 0, 0.5}};
    const double ap = average_precision({img}, {0.5}).at(0.5);

    const bool ok = std::abs(m - 1.0 / 3.0) <= 1e-9 && std::abs(pq - 0.8 / 1.5) <= 1e-9 &&
                    std::abs(bce - std::log(2.0)) <= 1e-9 && std::abs(dice - 2.0 / 7.0) <= 1e-9 &&
                    std::abs(ap - 0.5) <= 1e-9;
    report(8, "metric-fixtures", ok,
           fmt("mIoU %.12f (1/3), PQ %.12f (0.8/1.5), BCE %.12f (ln 2), ", m, pq, bce) +
               fmt("Dice %.12f (2/7), AP %.12f (0.5)", dice, ap));
}

// ---- 9 ---------------------------------------------------------------------

void determinism_resume() {
    const auto data = small_dataset();
    auto cfg = small_train(6);
    auto run = [&](int steps, Trainer& t, std::vector<double>& out) {
        t.fit(data, steps, [&](std::int64_t, const StepResult& r) { out.push_back(r.loss); });
    };
    std::vector<double> a, b, resumed;
    auto ma = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat64, 3);
    Trainer ta(ma, cfg);
    run(-1, ta, a);
    auto mb = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat64, 3);
    Trainer tb(mb, cfg);
    run(-1, tb, b);

    auto mc = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat64, 3);
    Trainer tc(mc, cfg);
    run(3, tc, resumed);
    const auto path = std::filesystem::temp_directory_path() / "openseg_acceptance_resume.ckpt";
    save_checkpoint(path, tc, nlohmann::json::object());
    auto md = std::make_shared<SegModel>(small_pool(), small_decoder(), torch::kFloat64, 77);
    Trainer td(md, cfg);
    load_checkpoint(path, td);
    run(-1, td, resumed);
    std::filesystem::remove(path);

    const bool same = a == b;
    const bool resume_ok = resumed == a;
    report(9, "determinism-resume", same && resume_ok && a.size() == 6,
           std::string("repeat run ") + (same ? "bit-identical" : "DIFFERS") + ", resumed trajectory " +
               (resume_ok ? "bit-identical" : "DIFFERS") + fmt(" over %.0f steps", static_cast<double>(a.size())));
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    std::set<int> want;
    for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
    if (want.empty()) want = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    auto guarded = [](int id, const char* name, const std::function<void()>& f) {
        try {
            f();
        } catch (const std::exception& e) {
            report(id, name, false, std::string("exception: ") + e.what());
        }
    };
    if (want.count(1)) guarded(1, "matching-oracle", matching_oracle);
    if (want.count(2)) guarded(2, "gradient-check", gradient_check);
    if (want.count(3)) guarded(3, "shape-equivariance", shape_equivariance);
    if (want.count(4)) guarded(4, "frozen-contract", frozen_contract);
    if (want.count(5)) guarded(5, "config-fidelity", config_fidelity);
    if (want.count(8)) guarded(8, "metric-fixtures", metric_fixtures);
    if (want.count(9)) guarded(9, "determinism-resume", determinism_resume);
    if (want.count(6) || want.count(7) || want.count(10))
        guarded(6, "desk-learning", [&] { desk_learning(want); });
    return failures == 0 ? 0 : 1;
}
