// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.
//
//   adasap_acceptance [--work-dir DIR] [--only N[,N...]]

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "adasap/pipeline.hpp"
#include "support.hpp"

using namespace adasap;
namespace at = adasap::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

real median(std::vector<real> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

Outcome autodiff_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    at::Rng rng(1);
    real worst = 0;
    std::string worst_op;
    const auto ops = at::differentiable_ops();
    for (const auto& op : ops)
        for (int t = 0; t < 100; ++t)
            if (const real e = at::gradcheck_trial(op, rng); e > worst || std::isnan(e)) {
                worst = e;
                worst_op = op.name;
            }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60,
            fmt("%zu ops x 100 trials, worst rel err %.2e (%s), %.1f s", ops.size(), static_cast<double>(worst),
                worst_op.c_str(), secs)};
}

Outcome perturbation_feasibility() {
    at::Rng rng(2);
    real worst_excess = -1e300, worst_identity = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = at::pick(rng, 1, 64);
        const auto w = at::uniform_values(n, rng, -2, 2);
        const auto g = at::uniform_values(n, rng, -2, 2);
        const real rho = at::uniform_values(1, rng, 1e-3, 3)[0];
        const auto T = t % 2 ? Transform::identity : Transform::elementwise_abs_weight;
        const auto cfg = PerturbationConfig::uniform(rho, T);
        const auto e = compute_epsilon_hat(w, g, rho, cfg);
        const real tn = transformed_norm(w, e.values, cfg);
        worst_excess = std::max(worst_excess, tn - rho);
        if (T == Transform::identity) worst_identity = std::max(worst_identity, std::abs(tn - rho));
    }
    return {worst_excess <= 1e-9 && worst_identity <= 1e-9,
            fmt("1000 draws, max(|T^-1 eps| - rho) = %.2e, identity max ||eps| - rho| = %.2e",
                static_cast<double>(worst_excess), static_cast<double>(worst_identity))};
}

std::pair<Model, Batch> small_task(std::uint64_t seed) {
    at::Rng rng(seed);
    ModelSpec spec{Architecture::small_cnn, {3, 4}, 10, 1, 8, 8, 3};
    Batch b{Tensor({16, 1, 8, 8}, at::uniform_values(16 * 64, rng, 0, 1)), {}};
    for (int i = 0; i < 16; ++i) b.labels.push_back(i % 10);
    return {build_model(spec, seed), std::move(b)};
}

Outcome degeneracy_equivalence() {
    real worst_sam = 0;
    {
        auto [model, batch] = small_task(3);
        Model ref = model;
        OptimizerState opt;
        opt.schedule = LrSchedule::constant(0.05);
        opt.momentum = 0.9;
        opt.weight_decay = 5e-4;
        ParamBuffers buf;
        const auto cfg = PerturbationConfig::adaptive_bounds(0.05, 0.05);
        for (int s = 0; s < 100; ++s) {
            adasap_step(model, batch_objective(model, batch), cfg, opt, Criterion::magnitude_l2);
            at::reference_sam_step(ref, batch, 0.05, 0.05, 0.9, 5e-4, buf);
            for (std::size_t k = 0; k < ref.parameters().size(); ++k)
                for (std::size_t i = 0; i < ref.parameters()[k].numel(); ++i)
                    worst_sam = std::max(worst_sam, std::abs(model.parameters()[k][i] - ref.parameters()[k][i]));
        }
    }
    bool sgd_bitwise = true;
    {
        auto [model, batch] = small_task(4);
        Model ref = model;
        OptimizerState opt;
        opt.schedule = LrSchedule{0.1, 10, 100};
        opt.momentum = 0.9;
        opt.weight_decay = 5e-4;
        ParamBuffers buf;
        for (std::size_t s = 0; s < 100; ++s) {
            adasap_step(model, batch_objective(model, batch), PerturbationConfig::uniform(0), opt, Criterion::magnitude_l2);
            at::reference_sgd_step(ref, batch, opt.schedule.at(s), 0.9, 5e-4, buf);
            for (std::size_t k = 0; k < ref.parameters().size(); ++k) {
                const auto a = model.parameters()[k].data(), b = ref.parameters()[k].data();
                sgd_bitwise = sgd_bitwise && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
            }
        }
    }
    return {worst_sam <= 1e-12 && sgd_bitwise,
            fmt("SAM reference max |dw| over 100 steps = %.2e; rho=0 vs SGD bitwise: %s", static_cast<double>(worst_sam),
                sgd_bitwise ? "yes" : "no")};
}

Outcome rho_mapping() {
    const auto mid = resolve_rho({{"a", 0, 0}, {"b", 1, 0.5}, {"c", 2, 1}}, RhoBounds{0.01, 2.0, {}}).at("b");
    at::Rng rng(5);
    std::size_t violations = 0;
    for (int t = 0; t < 10000; ++t) {
        const std::size_t n = at::pick(rng, 2, 40);
        const auto v = at::uniform_values(n, rng, 0, 10);
        const real lo = at::uniform_values(1, rng, 1e-3, 0.5)[0];
        const real hi = lo + at::uniform_values(1, rng, 1e-3, 3)[0];
        std::vector<ImportanceScore> sc;
        for (std::size_t i = 0; i < n; ++i) sc.push_back({"p" + std::to_string(i), i, v[i]});
        const auto b = resolve_rho(sc, RhoBounds{lo, hi, {}});
        const auto imin = static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
        const auto imax = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
        violations += b.at(sc[imin].partition_id) != hi;
        violations += std::abs(b.at(sc[imax].partition_id) - lo) > 1e-12;
        for (std::size_t i = 0; i < n; ++i) {
            const real ri = b.at(sc[i].partition_id);
            violations += ri < lo || ri > hi;
            for (std::size_t j = 0; j < n; ++j)
                if (v[i] < v[j]) violations += !(ri > b.at(sc[j].partition_id));
        }
    }
    return {violations == 0 && std::abs(mid - 1.005) < 1e-12,
            fmt("10000 vectors, %zu violations; midpoint rho = %.15g", violations, static_cast<double>(mid))};
}

Outcome prune_schedule() {
    const auto ref = build_schedule(0.25, 2, 100).remaining;
    at::Rng rng(6);
    std::size_t violations = 0;
    for (int t = 0; t < 200; ++t) {
        const real k = at::uniform_values(1, rng, 0.02, 0.98)[0];
        const std::size_t R = at::pick(rng, 1, 15), m = at::pick(rng, 60, 2000);
        const auto s = build_schedule(k, R, m).remaining;
        violations += s.size() != R + 1 || s.front() != m ||
                      s.back() != static_cast<std::size_t>(std::llround(k * static_cast<real>(m)));
        for (std::size_t r = 1; r < s.size(); ++r) violations += s[r] > s[r - 1];
    }
    const bool ref_ok = ref == std::vector<std::size_t>{100, 50, 25};
    return {violations == 0 && ref_ok, fmt("200 schedules, %zu violations; m=100 k=0.25 R=2 -> [%zu, %zu, %zu]", violations,
                                           ref.at(0), ref.at(1), ref.at(2))};
}

Outcome export_equivalence() {
    at::Rng rng(7);
    real worst = 0;
    std::string shapes;
    for (const auto& spec : {ModelSpec{Architecture::small_cnn, {8, 16}, 10, 1, 28, 28, 3},
                             ModelSpec{Architecture::mlp, {128, 64}, 10, 1, 28, 28, 3}}) {
        for (real sparsity : {0.2, 0.5, 0.8}) {
            auto m = build_model(spec, 11);
            // kill a random subset, keeping one channel alive per layer
            std::vector<std::size_t> order;
            for (const auto& p : m.partitions())
                if (p.prunable) order.push_back(p.ordinal);
            std::shuffle(order.begin(), order.end(), rng);
            auto to_kill = static_cast<std::size_t>(std::llround(sparsity * static_cast<real>(order.size())));
            for (auto o : order) {
                if (to_kill == 0) break;
                const auto layer = m.partitions()[o].layer;
                if (m.alive_per_layer()[layer] <= 1) continue;
                m.kill(o);
                --to_kill;
            }
            const auto reduced = m.reduced();
            for (int b = 0; b < 50; ++b) {
                const Tensor x({8, spec.in_channels, spec.height, spec.width},
                               at::uniform_values(8 * spec.input_features(), rng, 0, 1));
                const auto a = m.forward(x), r = reduced.forward(x);
                for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - r[i]));
            }
            shapes += (shapes.empty() ? "" : " ") + reduced.spec().describe();
        }
    }
    return {worst <= 1e-10, fmt("50 probe batches x 3 sparsities x 2 models, max |dlogit| = %.2e; reduced: ",
                                static_cast<double>(worst)) + shapes};
}

Outcome sharpness_oracles() {
    auto q = at::make_quadratic({1}, {1});
    const real gap = perturbation_gap(q.set, q.objective, 0.1, 5).value;
    real grid = 0;
    for (int i = 0; i <= 200000; ++i) {
        const real x = real(0.9) + real(0.2) * i / 200000;
        grid = std::max(grid, real(0.5) * x * x - real(0.5));
    }
    at::Rng rng(8);
    real worst = 0;
    for (int t = 0; t < 30; ++t) {
        const std::size_t n = at::pick(rng, 1, 8);
        const auto A = at::random_psd(n, rng);
        auto p = at::make_quadratic(A, at::uniform_values(n, rng));
        const real est = top_hessian_eigenvalue(p.set, p.objective, 5000, 1e-12, static_cast<std::uint64_t>(t)).value;
        Eigen::MatrixXd M(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) M(static_cast<long>(i), static_cast<long>(j)) = static_cast<double>(A[i * n + j]);
        const double ref = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(M).eigenvalues().maxCoeff();
        worst = std::max(worst, static_cast<real>(std::abs(est - ref) / std::abs(ref)));
    }
    return {std::abs(gap - grid) <= 1e-6 && worst <= 1e-3,
            fmt("1-D gap %.9f vs grid %.9f; power iteration worst rel err %.2e over 30 quadratics",
                static_cast<double>(gap), static_cast<double>(grid), static_cast<double>(worst))};
}

Outcome robustness_ratio() {
    const auto fx = at::load_prediction_fixture(std::string(ADASAP_FIXTURE_DIR) + "/robustness_predictions.txt");
    Dataset clean;
    clean.height = clean.width = 1;
    clean.labels = fx.labels;
    clean.images.assign(fx.labels.size(), real(0.5));
    std::size_t call = 0;
    const auto r = evaluate(
        [&](const Dataset&) { return call == 0 ? (++call, fx.clean) : fx.cells.at(call++ - 1).predictions; }, clean,
        {kAllCorruptions.begin(), kAllCorruptions.end()}, {1, 2, 3, 4, 5}, 0);
    const real expect = real(42.46) / real(77.32);
    const real err = r.ratio ? std::abs(*r.ratio - expect) : 1;
    return {err <= 1e-12 && call == 31,
            fmt("acc_val %.4f, acc_C %.4f, R_C %.6f vs 42.46/77.32 = %.6f (err %.1e)", static_cast<double>(r.acc_val),
                static_cast<double>(r.acc_c), static_cast<double>(r.ratio.value_or(0)), static_cast<double>(expect),
                static_cast<double>(err))};
}

// ---- desk-scale replication -------------------------------------------------

// Default CNN pruned to half its channels. Radii are the asam preset scaled by
// 1/40: desk channels hold 10 to 80 weights, and the unscaled preset drives
// this model to the constant predictor. The uniform arm perturbs every channel
// at the finetune radius in all three phases.
const std::vector<std::pair<std::string, std::string>> kDeskBase{
    {"preset", "desk"}, {"target_keep_fraction", "0.5"}, {"measure_hessian", "false"}};

const std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> kDeskArms{
    {"sgd", {{"optimizer", "sgd"}}},
    {"uniform", {{"optimizer", "asam"}, {"rho_min", "0.05"}, {"rho_max", "0.05"}, {"finetune_rho", "0.05"}}},
    {"adasap", {{"optimizer", "adasap"}, {"rho_min", "0.00025"}, {"rho_max", "0.05"}, {"finetune_rho", "0.05"}}},
};

constexpr int kSeeds = 5;

RunConfig desk_config(const std::string& arm, int seed, const fs::path& dir) {
    RunConfig cfg;
    auto kv = kDeskBase;
    for (const auto& [name, extra] : kDeskArms)
        if (name == arm) kv.insert(kv.end(), extra.begin(), extra.end());
    kv.emplace_back("seed", std::to_string(seed));
    kv.emplace_back("output_dir", (dir / (arm + ".s" + std::to_string(seed))).string());
    cfg.apply(kv);
    cfg.validate();
    return cfg;
}

struct DeskResults {
    std::map<std::string, std::vector<RunSummary>> runs;
    double seconds = 0;
    bool ok = true;
    std::string error;
};

DeskResults run_desk(const fs::path& dir) {
    DeskResults out;
    const auto t0 = std::chrono::steady_clock::now();
    const auto data = load_datasets(desk_config("sgd", 0, dir));
    for (int seed = 0; seed < kSeeds; ++seed)
        for (const auto& [arm, extra] : kDeskArms) {
            const auto cfg = desk_config(arm, seed, dir);
            auto s = run_to_directory(cfg, data);
            if (s.diverged) {
                out.ok = false;
                out.error = arm + " seed " + std::to_string(seed) + ": " + s.error;
            }
            std::fprintf(stderr, "  desk run %-6s seed %d: post-prune acc %.3f, acc_C %.4f (%.0f s elapsed)\n",
                         arm.c_str(), seed, static_cast<double>(s.post_prune.accuracy),
                         static_cast<double>(s.robustness.acc_c), seconds_since(t0));
            out.runs[arm].push_back(std::move(s));
        }
    out.seconds = seconds_since(t0);
    return out;
}

std::vector<real> column(const DeskResults& d, const std::string& arm, const std::function<real(const RunSummary&)>& f) {
    std::vector<real> v;
    for (const auto& s : d.runs.at(arm)) v.push_back(f(s));
    return v;
}

real post_prune_gap(const RunSummary& s) {
    return s.sharpness_at(Phase::post_prune, SharpnessKind::perturbation_gap).value_or(std::numeric_limits<real>::quiet_NaN());
}

void print_seed_table(const DeskResults& d) {
    std::printf("  %-7s %4s %10s %10s %10s %10s %10s\n", "arm", "seed", "pre_acc", "post_acc", "post_gap", "final_acc",
                "acc_C");
    for (const auto& [arm, extra] : kDeskArms) {
        const auto& runs = d.runs.at(arm);
        for (std::size_t i = 0; i < runs.size(); ++i)
            std::printf("  %-7s %4zu %10.4f %10.4f %10.4f %10.4f %10.4f\n", arm.c_str(), i,
                        static_cast<double>(runs[i].pre_prune.accuracy), static_cast<double>(runs[i].post_prune.accuracy),
                        static_cast<double>(post_prune_gap(runs[i])), static_cast<double>(runs[i].final_val.accuracy),
                        static_cast<double>(runs[i].robustness.acc_c));
    }
}

Outcome flatter_minima(const DeskResults& d) {
    const real ada = median(column(d, "adasap", post_prune_gap)), sgd = median(column(d, "sgd", post_prune_gap));
    const bool in_budget = d.seconds < 30 * 60;
    return {d.ok && ada <= sgd && in_budget,
            fmt("median post-prune gap: adasap %.4f vs sgd %.4f; %d seeds x 3 arms in %.0f s", static_cast<double>(ada),
                static_cast<double>(sgd), kSeeds, d.seconds)};
}

Outcome corrupted_accuracy(const DeskResults& d) {
    auto acc_c = [](const RunSummary& s) { return s.robustness.acc_c; };
    const real ada = median(column(d, "adasap", acc_c)), uniform = median(column(d, "uniform", acc_c)),
               sgd = median(column(d, "sgd", acc_c));
    return {d.ok && ada >= uniform && uniform >= sgd && ada >= sgd,
            fmt("median acc_C: adasap %.4f, uniform %.4f, sgd %.4f", static_cast<double>(ada), static_cast<double>(uniform),
                static_cast<double>(sgd))};
}

Outcome post_prune_accuracy(const DeskResults& d) {
    auto acc = [](const RunSummary& s) { return s.post_prune.accuracy; };
    const real ada = median(column(d, "adasap", acc)), sgd = median(column(d, "sgd", acc));
    return {d.ok && ada >= sgd, fmt("median post-prune (pre-finetune) val acc: adasap %.4f vs sgd %.4f",
                                    static_cast<double>(ada), static_cast<double>(sgd))};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Reruns the first adasap desk run (or runs it twice when the desk runs were skipped).
Outcome reproducibility(const fs::path& dir, bool have_desk) {
    const auto first = desk_config("adasap", 0, dir);
    const auto data = load_datasets(first);
    if (!have_desk) run_to_directory(first, data);
    auto second = first;
    second.output_dir = (dir / "adasap.s0.rerun").string();
    run_to_directory(second, data);
    const auto a = slurp(fs::path(first.output_dir) / "metrics.csv"), b = slurp(fs::path(second.output_dir) / "metrics.csv");
    const auto lines = std::count(a.begin(), a.end(), '\n');
    return {!a.empty() && a == b, fmt("metrics.csv %zu bytes / %ld rows, identical: %s", a.size(), static_cast<long>(lines),
                                      a == b ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    fs::path work = fs::temp_directory_path() / "adasap_acceptance";
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--work-dir" && i + 1 < argc) work = argv[++i];
        else if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
        } else {
            std::cerr << "usage: " << argv[0] << " [--work-dir DIR] [--only N[,N...]]\n";
            return 2;
        }
    }
    fs::create_directories(work);
    const auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

    int failures = 0;
    auto report = [&](int n, const char* title, const Outcome& o) {
        std::printf("criterion %2d %s: %s: %s\n", n, o.pass ? "PASS" : "FAIL", title, o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            return Outcome{false, std::string("exception: ") + e.what()};
        }
    };

    if (wanted(1)) report(1, "autodiff vs central differences", guarded(autodiff_gradients));
    if (wanted(2)) report(2, "perturbation feasibility", guarded(perturbation_feasibility));
    if (wanted(3)) report(3, "degeneracy to SAM and SGD", guarded(degeneracy_equivalence));
    if (wanted(4)) report(4, "importance-to-radius mapping", guarded(rho_mapping));
    if (wanted(5)) report(5, "prune schedule", guarded(prune_schedule));
    if (wanted(6)) report(6, "mask/export equivalence", guarded(export_equivalence));
    if (wanted(7)) report(7, "sharpness oracles", guarded(sharpness_oracles));

    const bool desk = wanted(8) || wanted(9) || wanted(10);
    if (desk) {
        DeskResults d;
        try {
            d = run_desk(work / "desk");
        } catch (const std::exception& e) {
            d.ok = false;
            d.error = e.what();
        }
        if (d.runs.size() == kDeskArms.size()) {
            print_seed_table(d);
            if (wanted(8)) report(8, "flatter post-prune minima", guarded([&] { return flatter_minima(d); }));
            if (wanted(9)) report(9, "corrupted accuracy ordering", guarded([&] { return corrupted_accuracy(d); }));
            if (wanted(10)) report(10, "post-prune accuracy", guarded([&] { return post_prune_accuracy(d); }));
        } else {
            for (int n : {8, 9, 10})
                if (wanted(n)) report(n, "desk replication", {false, "desk runs failed: " + d.error});
        }
    }
    if (wanted(11)) report(11, "robustness ratio arithmetic", guarded(robustness_ratio));
    if (wanted(12)) report(12, "end-to-end reproducibility", guarded([&] { return reproducibility(work / "desk", desk); }));

    std::printf("%s: %d failing criteria\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
