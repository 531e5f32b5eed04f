// adasap: train, prune, evaluate, measure and export channel-pruned models.
//
// Every subcommand accepts --config FILE plus one --<key> flag per config key;
// flags override the file. Run `adasap <subcommand> --help` for the list.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "adasap/pipeline.hpp"

namespace fs = std::filesystem;
using namespace adasap;

namespace {

struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> options;

    void attach(CLI::App& app) {
        app.add_option("--config", config_file, "flat key = value config file")->check(CLI::ExistingFile);
        for (const auto& key : RunConfig::key_names())
            options.emplace_back(key, app.add_option("--" + key, values[key], "config key '" + key + "'"));
    }

    RunConfig resolve() const {
        std::vector<std::pair<std::string, std::string>> kv;
        if (!config_file.empty()) kv = RunConfig::read_file(config_file);
        for (const auto& [key, opt] : options)
            if (opt->count() > 0) kv.emplace_back(key, values.at(key));
        RunConfig cfg;
        cfg.apply(kv);
        cfg.validate();
        return cfg;
    }
};

void write_json(const nlohmann::json& j, const std::string& dir, const std::string& name) {
    std::cout << j.dump(2) << '\n';
    if (dir.empty()) return;
    fs::create_directories(dir);
    std::ofstream(fs::path(dir) / name) << j.dump(2) << '\n';
}

nlohmann::json sharpness_json(const std::vector<SharpnessReading>& readings) {
    auto out = nlohmann::json::array();
    for (const auto& r : readings)
        out.push_back({{"kind", to_string(r.kind)},
                       {"value", r.value},
                       {"valid", r.valid},
                       {"converged", r.converged},
                       {"rho", r.rho},
                       {"ascent_steps", r.ascent_steps},
                       {"batches_used", r.batches_used}});
    return out;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Tensors are allocated and freed every op; keep freed pages in the heap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"Adaptive sharpness-aware structured pruning"};
    app.require_subcommand(1);

    ConfigFlags train_flags, prune_flags, eval_flags, sharp_flags, corrupt_flags, ablate_flags, export_flags;
    std::string checkpoint, out_path;
    std::vector<std::string> axes;
    std::uint64_t probe_seed = 0;

    auto* train = app.add_subcommand("train", "full warmup -> pruning -> finetune pipeline");
    train_flags.attach(*train);

    auto* prune = app.add_subcommand("prune-only", "pruning and finetune phases from a trained checkpoint");
    prune_flags.attach(*prune);
    prune->add_option("--checkpoint", checkpoint, "trained (unpruned) model")->required()->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "clean and corrupted accuracy of a checkpoint");
    eval_flags.attach(*eval);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);

    auto* sharp = app.add_subcommand("sharpness", "perturbation-gap and Hessian sharpness of a checkpoint");
    sharp_flags.attach(*sharp);
    sharp->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);

    auto* corrupt_cmd = app.add_subcommand("corrupt", "write corrupted copies of the validation set as IDX files");
    corrupt_flags.attach(*corrupt_cmd);

    auto* ablate = app.add_subcommand("ablate", "cross product of config axes over a shared seed");
    ablate_flags.attach(*ablate);
    ablate->add_option("--axis", axes, "key=v1,v2,... (repeatable)");

    auto* exp = app.add_subcommand("export", "physically remove pruned channels");
    exp->add_option("--checkpoint", checkpoint, "masked model checkpoint")->required()->check(CLI::ExistingFile);
    exp->add_option("--out", out_path, "reduced checkpoint path")->required();
    exp->add_option("--probe-seed", probe_seed, "seed of the equivalence probe batch");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            const auto cfg = train_flags.resolve();
            const auto summary = run_to_directory(cfg, load_datasets(cfg));
            std::cout << summary.to_json().dump(2) << '\n';
            return summary.diverged ? 2 : 0;
        }
        if (prune->parsed()) {
            auto cfg = prune_flags.resolve();
            cfg.warmup_epochs = 0;
            const auto start = load_model(checkpoint);
            const auto summary = run_to_directory(cfg, load_datasets(cfg), &start);
            std::cout << summary.to_json().dump(2) << '\n';
            return summary.diverged ? 2 : 0;
        }
        if (eval->parsed()) {
            const auto cfg = eval_flags.resolve();
            const auto model = load_model(checkpoint);
            const auto data = load_datasets(cfg);
            const auto val = evaluate_split(model, data.val);
            const auto report =
                evaluate(model, data.val, cfg.corruption_kinds, cfg.corruption_severities, cfg.corruption_seed);
            nlohmann::json j{{"checkpoint", checkpoint},
                             {"val_loss", val.loss},
                             {"val_acc", val.accuracy},
                             {"param_fraction", sparsity_report(model).param_fraction},
                             {"robustness", report.to_json()}};
            write_json(j, cfg.output_dir, "eval.json");
            if (!cfg.output_dir.empty()) {
                std::ofstream csv(fs::path(cfg.output_dir) / "robustness.csv");
                report.write_csv(csv);
            }
            return 0;
        }
        if (sharp->parsed()) {
            const auto cfg = sharp_flags.resolve();
            auto model = load_model(checkpoint);
            const auto data = load_datasets(cfg);
            const SharpnessSettings s{cfg.sharpness_rho, cfg.ascent_steps, cfg.hessian_iters, cfg.hessian_tol,
                                      mix_seed(cfg.seed, 3), cfg.measure_hessian};
            const auto readings = phase_sharpness(model, mean_objective(model, data.measure), Phase::post_finetune, 0, s,
                                                  data.measure.size());
            write_json({{"checkpoint", checkpoint}, {"readings", sharpness_json(readings)}}, cfg.output_dir,
                       "sharpness.json");
            return 0;
        }
        if (corrupt_cmd->parsed()) {
            const auto cfg = corrupt_flags.resolve();
            const fs::path dir = cfg.output_dir.empty() ? fs::path("corrupted") : fs::path(cfg.output_dir);
            fs::create_directories(dir);
            const auto data = load_datasets(cfg);
            save_idx(data.val, (dir / "clean-images.idx").string(), (dir / "clean-labels.idx").string());
            for (auto kind : cfg.corruption_kinds)
                for (auto sev : cfg.corruption_severities) {
                    const std::string stem = std::string(to_string(kind)) + "-s" + std::to_string(sev);
                    save_idx(corrupt_dataset(data.val, kind, sev, cfg.corruption_seed),
                             (dir / (stem + "-images.idx")).string(), (dir / (stem + "-labels.idx")).string());
                    std::cout << (dir / stem).string() << '\n';
                }
            return 0;
        }
        if (ablate->parsed()) {
            const auto cfg = ablate_flags.resolve();
            std::vector<AblationAxis> parsed;
            for (const auto& a : axes) {
                const auto eq = a.find('=');
                if (eq == std::string::npos) throw ConfigError("--axis expects key=v1,v2,... got '" + a + "'");
                parsed.push_back({detail::trim(a.substr(0, eq)), detail::split_list(a.substr(eq + 1))});
            }
            const auto runs = ablation_matrix(cfg, parsed, load_datasets(cfg));
            write_ablation_table(std::cout, runs);
            if (!cfg.output_dir.empty()) {
                std::ofstream table(fs::path(cfg.output_dir) / "ablation.csv");
                write_ablation_table(table, runs);
            }
            return 0;
        }
        if (exp->parsed()) {
            const auto r = export_pruned_model(checkpoint, out_path, probe_seed);
            std::cout << nlohmann::json{{"out", out_path},
                                        {"spec", r.reduced.spec().describe()},
                                        {"max_abs_diff", r.max_abs_diff},
                                        {"param_fraction", r.sparsity.param_fraction}}
                             .dump(2)
                      << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
