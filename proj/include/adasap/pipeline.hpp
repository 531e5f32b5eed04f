#pragma once

// Warmup -> pruning -> robustness-finetune orchestration, metrics logging,
// ablation grids and pruned-model export.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasap/checkpoint.hpp"
#include "adasap/config.hpp"
#include "adasap/corruption.hpp"
#include "adasap/data.hpp"
#include "adasap/model.hpp"
#include "adasap/optimizer.hpp"
#include "adasap/pruning.hpp"
#include "adasap/sharpness.hpp"

namespace adasap {

class PipelineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Datasets {
    Dataset train;
    Dataset val;
    std::vector<Batch> measure;  // fixed batch set for sharpness readings
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32)};
    std::array<std::uint32_t, 2> s{};
    seq.generate(s.begin(), s.end());
    return (std::uint64_t{s[0]} << 32) | s[1];
}

inline Datasets load_datasets(const RunConfig& cfg) {
    Datasets d;
    const auto& m = cfg.model;
    if (cfg.dataset == "synthetic") {
        if (m.in_channels != 1 || m.height != m.width)
            throw ConfigError("the synthetic dataset produces square single-channel images");
        d.train = make_synthetic_shapes(cfg.train_size, cfg.data_seed, m.height, cfg.synthetic_noise);
        d.val = make_synthetic_shapes(cfg.val_size, mix_seed(cfg.data_seed, 1), m.height, cfg.synthetic_noise);
    } else if (cfg.dataset == "idx") {
        d.train = load_idx(cfg.train_images, cfg.train_labels);
        d.val = load_idx(cfg.val_images, cfg.val_labels);
    } else {
        d.train = load_csv(cfg.train_csv, m.in_channels, m.height, m.width);
        d.val = load_csv(cfg.val_csv, m.in_channels, m.height, m.width);
    }
    for (const auto* s : {&d.train, &d.val}) {
        s->validate();
        if (s->channels != m.in_channels || s->height != m.height || s->width != m.width)
            throw ConfigError("dataset images do not match the model input shape");
        if (s->size() == 0) throw DataError("empty dataset split");
        for (auto y : s->labels)
            if (y < 0 || static_cast<std::size_t>(y) >= m.classes) throw DataError("label outside the class range");
    }
    const auto order = shuffled_indices(d.val.size(), mix_seed(cfg.data_seed, 2));
    const std::size_t n = std::min(d.val.size(), cfg.measure_batches * cfg.batch_size);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                           order.begin() + static_cast<long>(std::min(n, start + cfg.batch_size)));
        d.measure.push_back(d.val.batch(idx));
    }
    return d;
}

struct SplitMetrics {
    real loss = 0;
    real accuracy = 0;
};

inline SplitMetrics evaluate_split(const Model& model, const Dataset& set, std::size_t batch_size = 256) {
    SplitMetrics m;
    std::size_t correct = 0;
    for (const auto& b : set.batches(batch_size)) {
        const Tensor logits = model.forward(b.images);
        m.loss += softmax_cross_entropy(logits, b.labels).item() * static_cast<real>(b.labels.size());
        correct += count_correct(b.labels, argmax_rows(logits));
    }
    m.loss /= static_cast<real>(set.size());
    m.accuracy = static_cast<real>(correct) / static_cast<real>(set.size());
    return m;
}

// One CSV for every row kind; cells that do not apply stay empty.
class MetricsLog {
public:
    explicit MetricsLog(std::ostream* os) : os_(os) {
        if (os_)
            *os_ << "record,phase,epoch,step,loss,perturbed_loss,mean_rho,max_rho,lr,val_loss,val_acc,sparsity,kind,value,"
                    "rho,ascent_steps\n";
    }

    void step(const char* phase, std::size_t epoch, const StepReport& r) {
        row({"step", phase, num(epoch), num(r.step), num(r.loss), num(r.perturbed_loss), num(r.mean_rho), num(r.max_rho),
             num(r.lr), "", "", "", "", "", "", ""});
    }
    void epoch(const char* phase, std::size_t epoch, std::size_t step, const SplitMetrics& val, real sparsity) {
        row({"epoch", phase, num(epoch), num(step), "", "", "", "", "", num(val.loss), num(val.accuracy), num(sparsity), "",
             "", "", ""});
    }
    void sharpness(std::size_t epoch, const SharpnessReading& r) {
        row({"sharpness", to_string(r.phase), num(epoch), num(r.step), "", "", "", "", "", "", "", "", to_string(r.kind),
             r.valid ? num(r.value) : "nan", r.kind == SharpnessKind::perturbation_gap ? num(r.rho) : "",
             num(r.ascent_steps)});
    }
    void phase(const char* name, std::size_t epoch, std::size_t step) {
        row({"phase", name, num(epoch), num(step), "", "", "", "", "", "", "", "", "", "", "", ""});
    }

private:
    static std::string num(real v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
        return buf;
    }
    static std::string num(std::size_t v) { return std::to_string(v); }

    void row(std::initializer_list<std::string> cells) {
        if (!os_) return;
        bool first = true;
        for (const auto& c : cells) {
            if (!first) *os_ << ',';
            *os_ << c;
            first = false;
        }
        *os_ << '\n';
    }

    std::ostream* os_;
};

struct RunSummary {
    std::string name;
    std::size_t steps = 0;
    SplitMetrics pre_prune;
    SplitMetrics post_prune;
    SplitMetrics final_val;
    RobustnessReport robustness;
    std::vector<SharpnessReading> sharpness;
    std::vector<PruneEvent> events;
    SparsityReport sparsity;
    bool diverged = false;
    std::string error;

    std::optional<real> sharpness_at(Phase phase, SharpnessKind kind) const {
        for (const auto& r : sharpness)
            if (r.phase == phase && r.kind == kind && r.valid) return r.value;
        return std::nullopt;
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"name", name},
                         {"steps", steps},
                         {"diverged", diverged},
                         {"error", error},
                         {"pre_prune_val_loss", pre_prune.loss},
                         {"pre_prune_val_acc", pre_prune.accuracy},
                         {"post_prune_val_loss", post_prune.loss},
                         {"post_prune_val_acc", post_prune.accuracy},
                         {"final_val_loss", final_val.loss},
                         {"final_val_acc", final_val.accuracy},
                         {"alive_fraction", sparsity.alive_fraction},
                         {"param_fraction", sparsity.param_fraction},
                         {"prune_events", events.size()},
                         {"robustness", robustness.to_json()}};
        auto& sh = j["sharpness"] = nlohmann::json::array();
        for (const auto& r : sharpness)
            sh.push_back({{"phase", to_string(r.phase)},
                          {"kind", to_string(r.kind)},
                          {"value", r.value},
                          {"valid", r.valid},
                          {"rho", r.rho},
                          {"ascent_steps", r.ascent_steps}});
        return j;
    }
};

struct PhasePlan {
    PerturbationConfig train;
    PerturbationConfig finetune;
};

// Perturbation settings for the adaptive phases and for the finetune phase.
inline PhasePlan plan_perturbations(const RunConfig& cfg) {
    PhasePlan plan;
    Transform t = cfg.transform;
    if (cfg.optimizer == OptimizerKind::sam) t = Transform::identity;
    if (cfg.optimizer == OptimizerKind::asam) t = Transform::elementwise_abs_weight;
    switch (cfg.optimizer) {
        case OptimizerKind::sgd: plan.train = PerturbationConfig::uniform(0); break;
        case OptimizerKind::sam:
        case OptimizerKind::asam: plan.train = PerturbationConfig::uniform(cfg.rho_max, t); break;
        case OptimizerKind::adasap: plan.train = PerturbationConfig::adaptive_bounds(cfg.rho_min, cfg.rho_max, t); break;
    }
    auto ft = cfg.finetune_perturbation;
    if (ft == FinetunePerturbation::automatic)
        ft = cfg.optimizer == OptimizerKind::sgd ? FinetunePerturbation::none : FinetunePerturbation::uniform;
    switch (ft) {
        case FinetunePerturbation::none: plan.finetune = PerturbationConfig::uniform(0); break;
        case FinetunePerturbation::uniform: plan.finetune = PerturbationConfig::uniform(cfg.finetune_rho, t); break;
        default: plan.finetune = PerturbationConfig::adaptive_bounds(cfg.rho_min, cfg.rho_max, t); break;
    }
    for (auto* p : {&plan.train, &plan.finetune}) {
        p->transform_eta = cfg.transform_eta;
        p->denominator = cfg.epsilon_denominator;
        p->score_smoothing = cfg.score_smoothing;
    }
    return plan;
}

struct RunSinks {
    std::ostream* metrics = nullptr;
    std::ostream* events = nullptr;
    std::string checkpoint_dir;  // empty: no checkpoints
};

// Number of prune events and the schedule for a config (nullopt when the run does not prune).
inline std::optional<PruneSchedule> plan_schedule(const RunConfig& cfg, const Model& model, std::size_t steps_per_epoch) {
    if (!cfg.prunes()) return std::nullopt;
    const std::size_t pruning_steps = cfg.pruning_epochs * steps_per_epoch;
    const std::size_t events = cfg.prune_events ? cfg.prune_events : pruning_steps / cfg.prune_frequency;
    if (events == 0 || events * cfg.prune_frequency > pruning_steps)
        throw ConfigError("pruning phase of " + std::to_string(pruning_steps) + " steps cannot hold " +
                          std::to_string(std::max<std::size_t>(events, 1)) + " prune events every " +
                          std::to_string(cfg.prune_frequency) + " steps");
    return build_schedule(cfg.target_keep_fraction, events, model.prunable_count(), model.prunable_layer_count(),
                          cfg.prune_frequency);
}

// `start`, when given, replaces the seeded initial model (warm start).
inline RunSummary run_pipeline(const RunConfig& cfg, const Datasets& data, const RunSinks& sinks = {},
                               Model* final_model = nullptr, const Model* start = nullptr) {
    cfg.validate();
    if (start && !(start->spec() == cfg.model))
        throw ConfigError("starting model " + start->spec().describe() + " does not match config " + cfg.model.describe());
    RunSummary summary;
    MetricsLog log(sinks.metrics);
    Model model = start ? *start : build_model(cfg.model, cfg.seed);

    const std::size_t n = data.train.size();
    const std::size_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
    const auto schedule = plan_schedule(cfg, model, spe);
    const auto plan = plan_perturbations(cfg);
    plan.train.validate();
    plan.finetune.validate();

    OptimizerState opt;
    opt.schedule = {cfg.lr_peak, cfg.lr_warmup_epochs * spe, cfg.total_epochs() * spe};
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;

    const Objective measurement = mean_objective(model, data.measure);
    const SharpnessSettings sharp{cfg.sharpness_rho, cfg.ascent_steps, cfg.hessian_iters, cfg.hessian_tol,
                                  mix_seed(cfg.seed, 3), cfg.measure_hessian};
    auto measure = [&](Phase phase, std::size_t epoch) {
        if (!cfg.measure_sharpness) return;
        for (auto& r : phase_sharpness(model, measurement, phase, opt.step, sharp, data.measure.size())) {
            log.sharpness(epoch, r);
            summary.sharpness.push_back(r);
        }
    };
    auto checkpoint = [&](const char* name) {
        if (sinks.checkpoint_dir.empty()) return;
        save_model(model, (std::filesystem::path(sinks.checkpoint_dir) / name).string(),
                   {{"step", opt.step}, {"seed", cfg.seed}});
    };
    auto post_prune = [&](std::size_t epoch) {
        summary.post_prune = evaluate_split(model, data.val);
        log.epoch("post_prune", epoch, opt.step, summary.post_prune, 1 - sparsity_report(model).alive_fraction);
        measure(Phase::post_prune, epoch);
    };

    struct PhaseSpec {
        const char* name;
        std::size_t epochs;
        const PerturbationConfig* perturbation;
        bool pruning;
    };
    const PhaseSpec phases[] = {{"warmup", cfg.warmup_epochs, &plan.train, false},
                                {"pruning", cfg.pruning_epochs, &plan.train, true},
                                {"finetune", cfg.finetune_epochs, &plan.finetune, false}};

    std::size_t epoch = 0;
    std::size_t prune_round = 0;
    bool post_prune_done = false;
    for (const auto& ph : phases) {
        log.phase(ph.name, epoch, opt.step);
        std::size_t phase_iter = 0;
        for (std::size_t e = 0; e < ph.epochs; ++e, ++epoch) {
            const auto order = shuffled_indices(n, mix_seed(cfg.seed, 1000 + epoch));
            for (std::size_t start = 0; start < n; start += cfg.batch_size) {
                const std::span<const std::size_t> idx(order.data() + start, std::min(n, start + cfg.batch_size) - start);
                const Batch batch = data.train.batch(idx);
                const Objective objective = batch_objective(model, batch);
                const auto report = adasap_step(model, objective, *ph.perturbation, opt, cfg.psi);
                if (report.diverged) {
                    summary.diverged = true;
                    summary.error = "non-finite loss at step " + std::to_string(report.step);
                    log.step(ph.name, epoch, report);
                    summary.steps = opt.step;
                    return summary;
                }
                log.step(ph.name, epoch, report);
                ++phase_iter;
                if (ph.pruning && schedule && prune_round < schedule->total_events &&
                    phase_iter % schedule->prune_frequency == 0) {
                    ++prune_round;
                    std::optional<ParamBuffers> grads;
                    if (cfg.phi == Criterion::taylor_first_order) {
                        grads = gradient(model.parameters(), objective);
                        zero_grads(model.parameters());
                    }
                    auto ev = prune_step(model, *schedule, prune_round, cfg.phi, grads ? &*grads : nullptr, &opt, opt.step);
                    if (sinks.events) append_jsonl(*sinks.events, ev);
                    summary.events.push_back(std::move(ev));
                    if (prune_round == schedule->total_events) {
                        post_prune(epoch);
                        post_prune_done = true;
                    }
                }
            }
            const bool last_of_phase = e + 1 == ph.epochs;
            if ((cfg.eval_every && (epoch + 1) % cfg.eval_every == 0) || last_of_phase)
                log.epoch(ph.name, epoch, opt.step, evaluate_split(model, data.val),
                          1 - sparsity_report(model).alive_fraction);
        }
        if (ph.perturbation == &plan.train && !ph.pruning) {
            summary.pre_prune = evaluate_split(model, data.val);
            measure(Phase::pre_prune, epoch);
            checkpoint("warmup.ckpt");
        } else if (ph.pruning) {
            if (!post_prune_done) post_prune(epoch);
            checkpoint("pruned.ckpt");
        }
    }

    summary.steps = opt.step;
    summary.final_val = evaluate_split(model, data.val);
    measure(Phase::post_finetune, epoch);
    summary.robustness = evaluate(model, data.val, cfg.corruption_kinds, cfg.corruption_severities, cfg.corruption_seed);
    summary.sparsity = sparsity_report(model);
    checkpoint("final.ckpt");
    if (final_model) *final_model = std::move(model);
    return summary;
}

// Runs a config end to end, writing metrics.csv, prune_events.jsonl,
// summary.json, robustness.csv and checkpoints under cfg.output_dir.
inline RunSummary run_to_directory(const RunConfig& cfg, const Datasets& data, const Model* start = nullptr) {
    if (cfg.output_dir.empty()) return run_pipeline(cfg, data, {}, nullptr, start);
    namespace fs = std::filesystem;
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    std::ofstream metrics(dir / "metrics.csv"), events(dir / "prune_events.jsonl"), config(dir / "config.txt");
    config << cfg.to_text();
    const auto summary = run_pipeline(cfg, data, {&metrics, &events, dir.string()}, nullptr, start);
    std::ofstream(dir / "summary.json") << summary.to_json().dump(2) << '\n';
    std::ofstream rob(dir / "robustness.csv");
    summary.robustness.write_csv(rob);
    return summary;
}

struct AblationAxis {
    std::string key;
    std::vector<std::string> values;
};

struct AblationRun {
    std::vector<std::pair<std::string, std::string>> settings;
    RunSummary summary;
};

// Cross product of the axes over a shared base config and seed. A failing run
// is recorded with its error and the grid continues.
inline std::vector<AblationRun> ablation_matrix(const RunConfig& base, const std::vector<AblationAxis>& axes,
                                                const Datasets& data) {
    std::vector<std::vector<std::pair<std::string, std::string>>> grid{{}};
    for (const auto& axis : axes) {
        if (axis.values.empty()) continue;
        std::vector<std::vector<std::pair<std::string, std::string>>> next;
        for (const auto& partial : grid)
            for (const auto& v : axis.values) {
                auto s = partial;
                s.emplace_back(axis.key, v);
                next.push_back(std::move(s));
            }
        grid = std::move(next);
    }
    std::vector<AblationRun> out;
    for (const auto& settings : grid) {
        AblationRun run{settings, {}};
        std::string name;
        for (const auto& [k, v] : settings) name += (name.empty() ? "" : ";") + k + "=" + v;
        try {
            RunConfig cfg = base;
            for (const auto& [k, v] : settings) cfg.set(k, v);
            if (!base.output_dir.empty())
                cfg.output_dir = (std::filesystem::path(base.output_dir) / (name.empty() ? "base" : name)).string();
            run.summary = run_to_directory(cfg, data);
        } catch (const std::exception& e) {
            run.summary.error = e.what();
        }
        run.summary.name = name.empty() ? "base" : name;
        out.push_back(std::move(run));
    }
    return out;
}

inline void write_ablation_table(std::ostream& os, const std::vector<AblationRun>& runs) {
    os << "run,size,val_acc,robustness_ratio,acc_c,pre_prune_val_acc,post_prune_val_acc,post_prune_sharpness,error\n";
    for (const auto& r : runs) {
        const auto& s = r.summary;
        char buf[512];
        const auto sharp = s.sharpness_at(Phase::post_prune, SharpnessKind::perturbation_gap);
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%s,%.6f,%.6f,%.6f,%s", static_cast<double>(s.sparsity.param_fraction),
                      static_cast<double>(s.final_val.accuracy),
                      s.robustness.ratio ? std::to_string(static_cast<double>(*s.robustness.ratio)).c_str() : "",
                      static_cast<double>(s.robustness.acc_c), static_cast<double>(s.pre_prune.accuracy),
                      static_cast<double>(s.post_prune.accuracy),
                      sharp ? std::to_string(static_cast<double>(*sharp)).c_str() : "");
        std::string err = s.error;
        std::replace(err.begin(), err.end(), ',', ';');
        os << '"' << s.name << "\"," << buf << ',' << err << '\n';
    }
}

class ExportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExportResult {
    Model reduced;
    real max_abs_diff = 0;
    std::size_t probe_examples = 0;
    SparsityReport sparsity;
};

// Deletes dead channels and certifies logit equivalence on a seeded probe batch.
inline ExportResult export_pruned_model(const Model& masked, std::uint64_t probe_seed = 0, std::size_t probe_examples = 16,
                                        real tolerance = real(1e-10)) {
    ExportResult r{masked.reduced(), 0, probe_examples, sparsity_report(masked)};
    const auto& s = masked.spec();
    std::mt19937_64 rng(probe_seed);
    std::uniform_real_distribution<real> u(0, 1);
    std::vector<real> x(probe_examples * s.input_features());
    for (auto& v : x) v = u(rng);
    const Tensor probe({probe_examples, s.in_channels, s.height, s.width}, std::move(x));
    const auto a = masked.forward(probe), b = r.reduced.forward(probe);
    for (std::size_t i = 0; i < a.numel(); ++i) r.max_abs_diff = std::max(r.max_abs_diff, std::abs(a[i] - b[i]));
    if (!(r.max_abs_diff <= tolerance))
        throw ExportError("reduced model deviates from the masked model by " + std::to_string(r.max_abs_diff));
    return r;
}

inline ExportResult export_pruned_model(const std::string& checkpoint_path, const std::string& out_path,
                                        std::uint64_t probe_seed = 0) {
    auto r = export_pruned_model(load_model(checkpoint_path), probe_seed);
    save_model(r.reduced, out_path,
               {{"exported_from", checkpoint_path},
                {"equivalence_max_abs_diff", r.max_abs_diff},
                {"equivalence_probe_examples", r.probe_examples},
                {"equivalence_certified", true},
                {"param_fraction", r.sparsity.param_fraction}});
    return r;
}

}  // namespace adasap
