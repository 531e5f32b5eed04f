#pragma once

// Flat-key run configuration.
//
// File syntax: one `key = value` per line, `#` starts a comment. Lists are
// comma separated. `preset` and `rho_preset` are applied before every other
// key regardless of their position, so explicit keys always win.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adasap/corruption.hpp"
#include "adasap/importance.hpp"
#include "adasap/model.hpp"
#include "adasap/optimizer.hpp"

namespace adasap {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class OptimizerKind { sgd, sam, asam, adasap };
enum class FinetunePerturbation { automatic, none, uniform, adaptive };

inline const char* to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::sam: return "sam";
        case OptimizerKind::asam: return "asam";
        case OptimizerKind::adasap: return "adasap";
    }
    return "unknown";
}

inline const char* to_string(FinetunePerturbation f) {
    switch (f) {
        case FinetunePerturbation::automatic: return "auto";
        case FinetunePerturbation::none: return "none";
        case FinetunePerturbation::uniform: return "uniform";
        case FinetunePerturbation::adaptive: return "adaptive";
    }
    return "unknown";
}

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline std::string format_real(real v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::size_t parse_size(const std::string& s) {
    if (s.empty() || s[0] == '-') throw ConfigError("expected a nonnegative integer, got '" + s + "'");
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw ConfigError("expected a nonnegative integer, got '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw ConfigError("expected a boolean, got '" + s + "'");
}

}  // namespace detail

struct RunConfig {
    ModelSpec model{Architecture::small_cnn, {8, 16}, 10, 1, 28, 28, 3};

    std::string dataset = "synthetic";  // synthetic | idx | csv
    std::string train_images, train_labels, val_images, val_labels;  // idx
    std::string train_csv, val_csv;                                  // csv
    std::size_t train_size = 2000;
    std::size_t val_size = 1000;
    std::uint64_t data_seed = 1;
    real synthetic_noise = real(0.08);

    std::size_t warmup_epochs = 4;
    std::size_t pruning_epochs = 6;
    std::size_t finetune_epochs = 10;
    std::size_t batch_size = 128;

    OptimizerKind optimizer = OptimizerKind::adasap;
    real rho_min = real(0.00025);
    real rho_max = real(0.05);
    real finetune_rho = real(0.05);
    Transform transform = Transform::elementwise_abs_weight;
    real transform_eta = real(1e-12);
    Denominator epsilon_denominator = Denominator::transformed_grad_norm;
    FinetunePerturbation finetune_perturbation = FinetunePerturbation::automatic;
    Criterion psi = Criterion::magnitude_l2;
    Criterion phi = Criterion::magnitude_l2;
    real score_smoothing = 0;

    real target_keep_fraction = real(0.5);
    std::size_t prune_frequency = 30;
    std::size_t prune_events = 0;  // 0: as many as fit in the pruning phase

    real lr_peak = real(0.1);
    std::size_t lr_warmup_epochs = 1;
    real momentum = real(0.9);
    real weight_decay = real(5e-4);

    std::size_t eval_every = 1;
    std::size_t measure_batches = 10;
    real sharpness_rho = real(0.05);
    std::size_t ascent_steps = 5;
    std::size_t hessian_iters = 20;
    real hessian_tol = real(1e-3);
    bool measure_sharpness = true;
    bool measure_hessian = true;

    std::vector<CorruptionKind> corruption_kinds{kAllCorruptions.begin(), kAllCorruptions.end()};
    std::vector<int> corruption_severities{1, 2, 3, 4, 5};
    std::uint64_t corruption_seed = 7;

    std::uint64_t seed = 0;
    std::string output_dir;
    std::string preset = "desk";
    std::string rho_preset = "desk";

    // Appendix-scale hyperparameters: 10 warmup epochs, 90 in total, peak lr
    // 1.024 with 8 warmup epochs, momentum 0.875, weight decay 3.05e-5.
    void apply_preset(const std::string& name) {
        if (name == "desk") {
            warmup_epochs = 4;
            pruning_epochs = 6;
            finetune_epochs = 10;
            lr_peak = real(0.1);
            lr_warmup_epochs = 1;
            momentum = real(0.9);
            weight_decay = real(5e-4);
            batch_size = 128;
        } else if (name == "paper") {
            warmup_epochs = 10;
            pruning_epochs = 1;
            finetune_epochs = 79;
            lr_peak = real(1.024);
            lr_warmup_epochs = 8;
            momentum = real(0.875);
            weight_decay = real(3.05e-5);
            prune_frequency = 30;
        } else {
            throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
        }
        preset = name;
    }

    void apply_rho_preset(const std::string& name) {
        if (name == "asam") {
            rho_min = real(0.01);
            rho_max = real(2.0);
            finetune_rho = real(2.0);
            transform = Transform::elementwise_abs_weight;
        } else if (name == "desk") {
            // asam radii over 40, for channels of tens of weights
            rho_min = real(0.00025);
            rho_max = real(0.05);
            finetune_rho = real(0.05);
            transform = Transform::elementwise_abs_weight;
        } else if (name == "sam") {
            rho_min = real(0.01);
            rho_max = real(0.1);
            finetune_rho = real(0.05);
            transform = Transform::identity;
        } else {
            throw ConfigError("unknown rho preset '" + name + "' (expected desk, asam or sam)");
        }
        rho_preset = name;
    }

    void set(const std::string& key, const std::string& raw) {
        const auto value = detail::trim(raw);
        auto& table = keys();
        const auto it = table.find(key);
        if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->second.set(*this, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("bad value '" + value + "' for '" + key + "': " + e.what());
        }
    }

    std::string get(const std::string& key) const {
        const auto it = keys().find(key);
        if (it == keys().end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second.get(*this);
    }

    // Applies presets first, then every other key.
    void apply(const std::vector<std::pair<std::string, std::string>>& kv) {
        for (const auto& [k, v] : kv)
            if (k == "preset") apply_preset(detail::trim(v));
        for (const auto& [k, v] : kv)
            if (k == "rho_preset") apply_rho_preset(detail::trim(v));
        for (const auto& [k, v] : kv)
            if (k != "preset" && k != "rho_preset") set(k, v);
    }

    static std::vector<std::pair<std::string, std::string>> parse_text(const std::string& text) {
        std::vector<std::pair<std::string, std::string>> kv;
        std::stringstream ss(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            kv.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static RunConfig from_text(const std::string& text) {
        RunConfig c;
        c.apply(parse_text(text));
        c.validate();
        return c;
    }

    static std::vector<std::pair<std::string, std::string>> read_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        std::stringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str());
    }

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& [k, entry] : keys()) os << k << " = " << entry.get(*this) << '\n';
        return os.str();
    }

    std::size_t total_epochs() const { return warmup_epochs + pruning_epochs + finetune_epochs; }
    bool prunes() const { return target_keep_fraction < 1 && pruning_epochs > 0; }

    void validate() const {
        model.validate();
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(target_keep_fraction > 0 && target_keep_fraction <= 1))
            throw ConfigError("target_keep_fraction must lie in (0, 1]");
        if (prune_frequency == 0) throw ConfigError("prune_frequency must be positive");
        if (rho_min < 0 || rho_max < 0) throw ConfigError("rho bounds must be nonnegative");
        const bool adaptive =
            optimizer == OptimizerKind::adasap || finetune_perturbation == FinetunePerturbation::adaptive;
        if (adaptive && !(rho_min > 0 && rho_min <= rho_max))
            throw ConfigError("adaptive perturbation needs 0 < rho_min <= rho_max");
        if (finetune_rho < 0) throw ConfigError("finetune_rho must be nonnegative");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
        if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
        if (lr_peak <= 0) throw ConfigError("lr_peak must be positive");
        if (measure_batches == 0) throw ConfigError("measure_batches must be positive");
        if (sharpness_rho <= 0 || ascent_steps == 0 || hessian_iters == 0)
            throw ConfigError("sharpness settings must be positive");
        for (auto s : corruption_severities)
            if (s < 0 || s > 5) throw ConfigError("corruption severities must lie in 0..5");
        if (score_smoothing < 0 || score_smoothing >= 1) throw ConfigError("score_smoothing must lie in [0, 1)");
        if (dataset != "synthetic" && dataset != "idx" && dataset != "csv")
            throw ConfigError("dataset must be synthetic, idx or csv");
        if (dataset == "synthetic" && (train_size == 0 || val_size == 0))
            throw ConfigError("synthetic dataset sizes must be positive");
    }

private:
    struct KeyEntry {
        std::function<void(RunConfig&, const std::string&)> set;
        std::function<std::string(const RunConfig&)> get;
    };

    static const std::map<std::string, KeyEntry>& keys() {
        static const std::map<std::string, KeyEntry> table = [] {
            std::map<std::string, KeyEntry> t;
            auto sz = [&t](const char* k, std::size_t RunConfig::*m) {
                t[k] = {[m](RunConfig& c, const std::string& v) { c.*m = detail::parse_size(v); },
                        [m](const RunConfig& c) { return std::to_string(c.*m); }};
            };
            auto u64 = [&t](const char* k, std::uint64_t RunConfig::*m) {
                t[k] = {[m](RunConfig& c, const std::string& v) { c.*m = detail::parse_size(v); },
                        [m](const RunConfig& c) { return std::to_string(c.*m); }};
            };
            auto re = [&t](const char* k, real RunConfig::*m) {
                t[k] = {[m](RunConfig& c, const std::string& v) { c.*m = static_cast<real>(std::stod(v)); },
                        [m](const RunConfig& c) { return detail::format_real(c.*m); }};
            };
            auto str = [&t](const char* k, std::string RunConfig::*m) {
                t[k] = {[m](RunConfig& c, const std::string& v) { c.*m = v; },
                        [m](const RunConfig& c) { return c.*m; }};
            };
            t["architecture"] = {[](RunConfig& c, const std::string& v) { c.model.architecture = parse_architecture(v); },
                                 [](const RunConfig& c) { return std::string(to_string(c.model.architecture)); }};
            t["widths"] = {[](RunConfig& c, const std::string& v) {
                               c.model.widths.clear();
                               for (const auto& w : detail::split_list(v)) c.model.widths.push_back(detail::parse_size(w));
                           },
                           [](const RunConfig& c) { return detail::join(c.model.widths); }};
            auto spec_sz = [&t](const char* k, std::size_t ModelSpec::*m) {
                t[k] = {[m](RunConfig& c, const std::string& v) { c.model.*m = detail::parse_size(v); },
                        [m](const RunConfig& c) { return std::to_string(c.model.*m); }};
            };
            spec_sz("classes", &ModelSpec::classes);
            spec_sz("in_channels", &ModelSpec::in_channels);
            spec_sz("height", &ModelSpec::height);
            spec_sz("width", &ModelSpec::width);
            spec_sz("kernel", &ModelSpec::kernel);

            str("dataset", &RunConfig::dataset);
            str("train_images", &RunConfig::train_images);
            str("train_labels", &RunConfig::train_labels);
            str("val_images", &RunConfig::val_images);
            str("val_labels", &RunConfig::val_labels);
            str("train_csv", &RunConfig::train_csv);
            str("val_csv", &RunConfig::val_csv);
            sz("train_size", &RunConfig::train_size);
            sz("val_size", &RunConfig::val_size);
            u64("data_seed", &RunConfig::data_seed);
            re("synthetic_noise", &RunConfig::synthetic_noise);

            sz("warmup_epochs", &RunConfig::warmup_epochs);
            sz("pruning_epochs", &RunConfig::pruning_epochs);
            sz("finetune_epochs", &RunConfig::finetune_epochs);
            sz("batch_size", &RunConfig::batch_size);

            t["optimizer"] = {[](RunConfig& c, const std::string& v) {
                                  if (v == "sgd") c.optimizer = OptimizerKind::sgd;
                                  else if (v == "sam") c.optimizer = OptimizerKind::sam;
                                  else if (v == "asam") c.optimizer = OptimizerKind::asam;
                                  else if (v == "adasap") c.optimizer = OptimizerKind::adasap;
                                  else throw ConfigError("optimizer must be sgd, sam, asam or adasap");
                              },
                              [](const RunConfig& c) { return std::string(to_string(c.optimizer)); }};
            re("rho_min", &RunConfig::rho_min);
            re("rho_max", &RunConfig::rho_max);
            re("finetune_rho", &RunConfig::finetune_rho);
            t["transform"] = {[](RunConfig& c, const std::string& v) { c.transform = parse_transform(v); },
                              [](const RunConfig& c) { return std::string(to_string(c.transform)); }};
            re("transform_eta", &RunConfig::transform_eta);
            t["epsilon_denominator"] = {
                [](RunConfig& c, const std::string& v) { c.epsilon_denominator = parse_denominator(v); },
                [](const RunConfig& c) { return std::string(to_string(c.epsilon_denominator)); }};
            t["finetune_perturbation"] = {[](RunConfig& c, const std::string& v) {
                                              if (v == "auto") c.finetune_perturbation = FinetunePerturbation::automatic;
                                              else if (v == "none") c.finetune_perturbation = FinetunePerturbation::none;
                                              else if (v == "uniform") c.finetune_perturbation = FinetunePerturbation::uniform;
                                              else if (v == "adaptive") c.finetune_perturbation = FinetunePerturbation::adaptive;
                                              else throw ConfigError("finetune_perturbation must be auto, none, uniform or adaptive");
                                          },
                                          [](const RunConfig& c) { return std::string(to_string(c.finetune_perturbation)); }};
            t["psi"] = {[](RunConfig& c, const std::string& v) { c.psi = parse_criterion(v); },
                        [](const RunConfig& c) { return std::string(to_string(c.psi)); }};
            t["phi"] = {[](RunConfig& c, const std::string& v) { c.phi = parse_criterion(v); },
                        [](const RunConfig& c) { return std::string(to_string(c.phi)); }};
            re("score_smoothing", &RunConfig::score_smoothing);

            re("target_keep_fraction", &RunConfig::target_keep_fraction);
            sz("prune_frequency", &RunConfig::prune_frequency);
            sz("prune_events", &RunConfig::prune_events);

            re("lr_peak", &RunConfig::lr_peak);
            sz("lr_warmup_epochs", &RunConfig::lr_warmup_epochs);
            re("momentum", &RunConfig::momentum);
            re("weight_decay", &RunConfig::weight_decay);

            sz("eval_every", &RunConfig::eval_every);
            sz("measure_batches", &RunConfig::measure_batches);
            re("sharpness_rho", &RunConfig::sharpness_rho);
            sz("ascent_steps", &RunConfig::ascent_steps);
            sz("hessian_iters", &RunConfig::hessian_iters);
            re("hessian_tol", &RunConfig::hessian_tol);
            t["measure_sharpness"] = {[](RunConfig& c, const std::string& v) { c.measure_sharpness = detail::parse_bool(v); },
                                      [](const RunConfig& c) { return std::string(c.measure_sharpness ? "true" : "false"); }};

            t["measure_hessian"] = {[](RunConfig& c, const std::string& v) { c.measure_hessian = detail::parse_bool(v); },
                                    [](const RunConfig& c) { return std::string(c.measure_hessian ? "true" : "false"); }};

            t["corruption_kinds"] = {[](RunConfig& c, const std::string& v) {
                                         c.corruption_kinds.clear();
                                         for (const auto& k : detail::split_list(v))
                                             c.corruption_kinds.push_back(parse_corruption(k));
                                     },
                                     [](const RunConfig& c) {
                                         std::vector<std::string> names;
                                         for (auto k : c.corruption_kinds) names.emplace_back(to_string(k));
                                         return detail::join(names);
                                     }};
            t["corruption_severities"] = {[](RunConfig& c, const std::string& v) {
                                              c.corruption_severities.clear();
                                              for (const auto& s : detail::split_list(v))
                                                  c.corruption_severities.push_back(std::stoi(s));
                                          },
                                          [](const RunConfig& c) { return detail::join(c.corruption_severities); }};
            u64("corruption_seed", &RunConfig::corruption_seed);

            u64("seed", &RunConfig::seed);
            str("output_dir", &RunConfig::output_dir);
            t["preset"] = {[](RunConfig& c, const std::string& v) { c.apply_preset(v); },
                           [](const RunConfig& c) { return c.preset; }};
            t["rho_preset"] = {[](RunConfig& c, const std::string& v) { c.apply_rho_preset(v); },
                               [](const RunConfig& c) { return c.rho_preset; }};
            return t;
        }();
        return table;
    }

public:
    static std::vector<std::string> key_names() {
        std::vector<std::string> out;
        for (const auto& [k, _] : keys()) out.push_back(k);
        return out;
    }
};

}  // namespace adasap
