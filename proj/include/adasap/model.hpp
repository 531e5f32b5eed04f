#pragma once

// Channel-structured models: an MLP and a two-conv CNN. Each output unit of a
// layer (a row of a dense weight, or an output channel of a convolution,
// together with its bias) is one neuron partition. Hidden layers are
// prunable; the classifier layer is not.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adasap/parameters.hpp"
#include "adasap/tensor.hpp"

namespace adasap {

class ModelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Architecture { mlp, small_cnn };

inline const char* to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "small_cnn"; }

inline Architecture parse_architecture(const std::string& s) {
    if (s == "mlp") return Architecture::mlp;
    if (s == "small_cnn" || s == "cnn") return Architecture::small_cnn;
    throw ModelError("unknown architecture '" + s + "'");
}

struct ModelSpec {
    Architecture architecture = Architecture::mlp;
    // Hidden layer widths (mlp) or convolution channel counts (small_cnn).
    std::vector<std::size_t> widths{128, 64};
    std::size_t classes = 10;
    std::size_t in_channels = 1;
    std::size_t height = 28;
    std::size_t width = 28;
    std::size_t kernel = 3;

    std::size_t input_features() const { return in_channels * height * width; }

    void validate() const {
        if (widths.empty()) throw ModelError("model needs at least one hidden layer");
        for (auto w : widths)
            if (w == 0) throw ModelError("layer widths must be >= 1");
        if (classes < 2) throw ModelError("need at least two classes");
        if (in_channels == 0 || height == 0 || width == 0) throw ModelError("input shape must be positive");
        if (architecture == Architecture::small_cnn) {
            if (kernel == 0 || kernel % 2 == 0) throw ModelError("convolution kernel must be odd");
            std::size_t h = height, w = width;
            for (std::size_t i = 0; i < widths.size(); ++i) {
                h /= 2;
                w /= 2;
            }
            if (h == 0 || w == 0) throw ModelError("input too small for " + std::to_string(widths.size()) + " pooling stages");
        }
    }

    std::string describe() const {
        std::ostringstream os;
        os << to_string(architecture) << '[';
        if (architecture == Architecture::mlp) os << input_features() << ',';
        else os << in_channels << 'x' << height << 'x' << width << ',';
        for (auto w : widths) os << w << ',';
        os << classes << ']';
        return os.str();
    }

    bool operator==(const ModelSpec&) const = default;
};

enum class LayerKind { dense, conv };

struct LayerInfo {
    LayerKind kind = LayerKind::dense;
    std::size_t in = 0;    // input features or input channels
    std::size_t out = 0;   // output units or output channels
    std::size_t kernel = 1;
    std::size_t weight = 0;  // index into parameters()
    std::size_t bias = 0;
    bool prunable = true;
    // Spatial extent of this layer's activation after pooling (conv only);
    // the classifier after the last conv flattens channel-major.
    std::size_t pooled_h = 1;
    std::size_t pooled_w = 1;

    std::size_t fan_in() const { return in * kernel * kernel; }
};

class Model {
public:
    Model() = default;

    Model(const Model& other) : spec_(other.spec_), layers_(other.layers_), partitions_(other.partitions_) {
        params_.reserve(other.params_.size());
        for (const auto& t : other.params_) params_.push_back(Tensor(t.shape(), {t.data().begin(), t.data().end()}, true));
    }
    Model& operator=(const Model& other) {
        if (this != &other) {
            Model copy(other);
            *this = std::move(copy);
        }
        return *this;
    }
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    // Builds the layer/partition structure around existing parameter values.
    Model(ModelSpec spec, std::vector<Tensor> params) : spec_(std::move(spec)), params_(std::move(params)) {
        spec_.validate();
        layout();
        if (params_.size() != 2 * layers_.size())
            throw ModelError("expected " + std::to_string(2 * layers_.size()) + " parameter tensors, got " +
                             std::to_string(params_.size()));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const Shape ws = L.kind == LayerKind::dense ? Shape{L.out, L.in} : Shape{L.out, L.in, L.kernel, L.kernel};
            if (params_[L.weight].shape() != ws || params_[L.bias].shape() != Shape{L.out})
                throw ModelError("parameter shapes for layer " + std::to_string(l) + " do not match the spec");
            params_[L.weight].set_requires_grad(true);
            params_[L.bias].set_requires_grad(true);
        }
        build_partitions();
    }

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerInfo>& layers() const { return layers_; }
    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    std::vector<ParameterPartition>& partitions() { return partitions_; }
    const std::vector<ParameterPartition>& partitions() const { return partitions_; }

    std::string parameter_name(std::size_t i) const {
        return "layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".weight" : ".bias");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : params_) n += t.numel();
        return n;
    }

    std::size_t prunable_count() const {
        std::size_t n = 0;
        for (const auto& p : partitions_) n += p.prunable;
        return n;
    }

    std::size_t alive_count() const {
        std::size_t n = 0;
        for (const auto& p : partitions_) n += p.prunable && p.alive;
        return n;
    }

    std::size_t prunable_layer_count() const {
        std::size_t n = 0;
        for (const auto& L : layers_) n += L.prunable;
        return n;
    }

    // Alive channels per layer (classifier reports its full width).
    std::vector<std::size_t> alive_per_layer() const {
        std::vector<std::size_t> out(layers_.size(), 0);
        for (const auto& p : partitions_) out[p.layer] += p.alive;
        return out;
    }

    std::vector<real> channel_mask(std::size_t layer) const {
        std::vector<real> m(layers_.at(layer).out, real(1));
        for (const auto& p : partitions_)
            if (p.layer == layer && !p.alive) m[p.channel] = real(0);
        return m;
    }

    // Zeroes a partition's scalars and marks it dead. Dead partitions never come back.
    void kill(std::size_t ordinal) {
        auto& p = partitions_.at(ordinal);
        if (!p.prunable) throw ModelError("partition " + p.id + " is not prunable");
        for (const auto& s : p.slices) {
            auto d = params_[s.tensor].mutable_data();
            std::fill(d.begin() + static_cast<long>(s.offset), d.begin() + static_cast<long>(s.offset + s.length),
                      real(0));
        }
        p.alive = false;
    }

    Tensor forward(const Tensor& batch) const {
        const bool cnn = spec_.architecture == Architecture::small_cnn;
        Tensor x = batch;
        if (cnn) {
            if (x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) != spec_.height || x.size(3) != spec_.width)
                throw DimensionError("forward: expected [N," + std::to_string(spec_.in_channels) + "," +
                                     std::to_string(spec_.height) + "," + std::to_string(spec_.width) + "], got " +
                                     shape_string(x.shape()));
        } else {
            if (x.dim() < 2 || x.numel() / x.size(0) != spec_.input_features())
                throw DimensionError("forward: expected " + std::to_string(spec_.input_features()) +
                                     " features per example, got " + shape_string(x.shape()));
            if (x.dim() != 2) x = flatten(x);
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            if (L.kind == LayerKind::conv) {
                x = conv2d(x, params_[L.weight], params_[L.bias], L.kernel / 2);
            } else {
                if (x.dim() != 2) x = flatten(x);
                x = linear(x, params_[L.weight], params_[L.bias]);
            }
            if (!L.prunable) continue;
            auto mask = channel_mask(l);
            if (std::find(mask.begin(), mask.end(), real(0)) != mask.end())
                x = mul_channel(x, Tensor::vector(std::move(mask)));
            x = relu(x);
            if (L.kind == LayerKind::conv) x = max_pool2d(x, 2);
        }
        return x;
    }

    // Physically smaller model with every dead channel deleted, along with
    // the downstream weights that consumed it. Masks in the result are all alive.
    Model reduced() const {
        const auto alive = alive_per_layer();
        ModelSpec rs = spec_;
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
            if (alive[l] == 0) throw ModelError("layer " + std::to_string(l) + " has no alive channels");
            rs.widths[l] = alive[l];
        }
        std::vector<std::vector<std::size_t>> keep(layers_.size());
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto m = channel_mask(l);
            for (std::size_t c = 0; c < m.size(); ++c)
                if (m[c] != 0) keep[l].push_back(c);
        }
        std::vector<Tensor> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const auto W = params_[L.weight].data();
            const auto B = params_[L.bias].data();
            // Input index map: all inputs for the first layer, alive upstream channels otherwise.
            std::vector<std::size_t> in_keep;
            std::size_t block = 1;  // scalars per input unit within one weight row
            if (l == 0) {
                for (std::size_t i = 0; i < L.in; ++i) in_keep.push_back(i);
            } else {
                in_keep = keep[l - 1];
            }
            if (L.kind == LayerKind::conv) block = L.kernel * L.kernel;
            else if (l > 0 && layers_[l - 1].kind == LayerKind::conv)
                block = layers_[l - 1].pooled_h * layers_[l - 1].pooled_w;
            const std::size_t row_len = L.kind == LayerKind::conv ? L.in * block : L.in;
            std::vector<real> w, b;
            for (auto o : keep[l]) {
                for (auto i : in_keep)
                    for (std::size_t k = 0; k < block; ++k) w.push_back(W[o * row_len + i * block + k]);
                b.push_back(B[o]);
            }
            const std::size_t new_in_units = in_keep.size();
            const std::size_t n_out = keep[l].size();
            if (L.kind == LayerKind::conv) out.emplace_back(Shape{n_out, new_in_units, L.kernel, L.kernel}, std::move(w), true);
            else out.emplace_back(Shape{n_out, new_in_units * block}, std::move(w), true);
            out.emplace_back(Shape{n_out}, std::move(b), true);
        }
        return Model(rs, std::move(out));
    }

private:
    void layout() {
        layers_.clear();
        const auto& s = spec_;
        if (s.architecture == Architecture::mlp) {
            std::size_t in = s.input_features();
            for (auto w : s.widths) {
                layers_.push_back({LayerKind::dense, in, w, 1, 0, 0, true});
                in = w;
            }
            layers_.push_back({LayerKind::dense, in, s.classes, 1, 0, 0, false});
        } else {
            std::size_t in = s.in_channels, h = s.height, w = s.width;
            for (auto c : s.widths) {
                h /= 2;
                w /= 2;
                layers_.push_back({LayerKind::conv, in, c, s.kernel, 0, 0, true, h, w});
                in = c;
            }
            layers_.push_back({LayerKind::dense, in * h * w, s.classes, 1, 0, 0, false});
        }
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].weight = 2 * l;
            layers_[l].bias = 2 * l + 1;
        }
    }

    void build_partitions() {
        partitions_.clear();
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const std::size_t row = L.fan_in();
            for (std::size_t o = 0; o < L.out; ++o) {
                ParameterPartition p;
                p.id = "layer" + std::to_string(l) + ".ch" + std::to_string(o);
                p.ordinal = partitions_.size();
                p.layer = l;
                p.channel = o;
                p.prunable = L.prunable;
                p.slices = {{L.weight, o * row, row}, {L.bias, o, 1}};
                partitions_.push_back(std::move(p));
            }
        }
    }

    friend Model build_model(const ModelSpec& spec, std::uint64_t seed);

    ModelSpec spec_;
    std::vector<LayerInfo> layers_;
    std::vector<Tensor> params_;
    std::vector<ParameterPartition> partitions_;
};

// Kaiming-uniform (fan-in, ReLU gain) weights; biases uniform in +-1/sqrt(fan_in).
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    m.layout();
    std::mt19937_64 rng(seed);
    for (const auto& L : m.layers_) {
        const real fan_in = static_cast<real>(L.fan_in());
        const real wb = std::sqrt(real(6) / fan_in);
        const real bb = real(1) / std::sqrt(fan_in);
        std::uniform_real_distribution<real> wd(-wb, wb), bd(-bb, bb);
        const Shape ws = L.kind == LayerKind::dense ? Shape{L.out, L.in} : Shape{L.out, L.in, L.kernel, L.kernel};
        std::vector<real> w(shape_numel(ws)), b(L.out);
        for (auto& v : w) v = wd(rng);
        for (auto& v : b) v = bd(rng);
        m.params_.emplace_back(ws, std::move(w), true);
        m.params_.emplace_back(Shape{L.out}, std::move(b), true);
    }
    m.build_partitions();
    return m;
}

struct Batch {
    Tensor images;
    std::vector<int> labels;
};

// Mean cross-entropy of the model on one labelled batch. Both references must
// outlive the returned objective.
inline Objective batch_objective(const Model& model, const Batch& batch) {
    return [&model, &batch](bool accumulate_grad) {
        Tensor loss = softmax_cross_entropy(model.forward(batch.images), batch.labels);
        if (accumulate_grad) loss.backward();
        return loss.item();
    };
}

// Mean over batches of the per-batch mean cross-entropy. Gradients are
// accumulated batch by batch in order.
inline Objective mean_objective(const Model& model, const std::vector<Batch>& batches) {
    if (batches.empty()) throw std::invalid_argument("mean_objective: no batches");
    return [&model, &batches](bool accumulate_grad) {
        const real w = real(1) / static_cast<real>(batches.size());
        real total = 0;
        for (const auto& b : batches) {
            Tensor loss = scale(softmax_cross_entropy(model.forward(b.images), b.labels), w);
            if (accumulate_grad) loss.backward();
            total += loss.item();
        }
        return total;
    };
}

}  // namespace adasap
