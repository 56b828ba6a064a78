#pragma once
// Split feature-extractor / classifier model, ERM training, test-time
// augmentation (with optional channel selection), the NoiseCrop baseline and
// class-activation attention maps.

#include "error.hpp"
#include "image.hpp"
#include "keypoints.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "selection.hpp"
#include "trapset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace tts {

struct ModelMetadata {
    std::string architecture;
    int channels = 0;
    ImageSize feature_size;
    ImageSize input_size;
};

// f(.) and g(.) of a frozen network. A model whose head is an nn::LinearHead
// over average-pooled channels supports class-activation maps; any other head
// is opaque.
class SplitModel {
  public:
    using Extractor = std::function<FeatureMap(const Image&)>;
    using OpaqueHead = std::function<std::vector<double>(const FeatureMap&)>;

    SplitModel(Extractor extractor, nn::LinearHead head, ModelMetadata meta)
        : extract_(std::move(extractor)), head_(std::move(head)), meta_(std::move(meta)) {}
    SplitModel(Extractor extractor, OpaqueHead head, ModelMetadata meta)
        : extract_(std::move(extractor)), head_(std::move(head)), meta_(std::move(meta)) {}

    static SplitModel from_network(std::shared_ptr<const nn::ConvNet> net) {
        ModelMetadata meta{net->arch.name, net->arch.feature_channels(), net->arch.feature_size(),
                           {net->arch.input_height, net->arch.input_width}};
        SplitModel m([net](const Image& img) { return net->features(img); }, net->head, std::move(meta));
        m.network_ = std::move(net);
        return m;
    }

    FeatureMap extract(const Image& img) const {
        if (img.size() != meta_.input_size)
            throw ShapeError("model expects " + to_string(meta_.input_size) + " images, got " + to_string(img.size()));
        FeatureMap f = extract_(img);
        if (f.channels() != meta_.channels || f.spatial_size() != meta_.feature_size)
            throw ShapeError("extractor produced an unexpected feature shape");
        return f;
    }

    std::vector<double> classify(const FeatureMap& f) const {
        if (const auto* lin = std::get_if<nn::LinearHead>(&head_)) return lin->probabilities(f);
        return std::get<OpaqueHead>(head_)(f);
    }

    std::vector<double> predict(const Image& img) const { return classify(extract(img)); }

    const nn::LinearHead* linear_head() const { return std::get_if<nn::LinearHead>(&head_); }
    const ModelMetadata& metadata() const noexcept { return meta_; }
    // Backing network when the model came from one (checkpointing, NoiseCrop statistics).
    const nn::ConvNet* network() const noexcept { return network_.get(); }

  private:
    Extractor extract_;
    std::variant<nn::LinearHead, OpaqueHead> head_;
    ModelMetadata meta_;
    std::shared_ptr<const nn::ConvNet> network_;
};

// --- augmentation ----------------------------------------------------------

struct AugmentationPolicy {
    int replica_count = 50;
    int max_shift = 3;  // pixels, each axis
    bool horizontal_flip = true;
    bool vertical_flip = true;
    float brightness = 0.08f;  // additive, uniform in [-b, b]
    float contrast = 0.1f;     // gain around 0.5, uniform in [1 - c, 1 + c]
    std::uint64_t seed = 0x5eed;

    static AugmentationPolicy identity(int replicas = 1) {
        AugmentationPolicy p;
        p.replica_count = replicas;
        p.max_shift = 0;
        p.horizontal_flip = p.vertical_flip = false;
        p.brightness = p.contrast = 0.0f;
        return p;
    }

    bool is_identity() const {
        return max_shift == 0 && !horizontal_flip && !vertical_flip && brightness == 0.0f && contrast == 0.0f;
    }

    void validate() const {
        if (replica_count < 1) throw ConfigError("replica_count must be >= 1");
        if (max_shift < 0 || brightness < 0 || contrast < 0) throw ConfigError("augmentation ranges must be >= 0");
    }
};

struct AugmentParams {
    int dy = 0, dx = 0;
    bool hflip = false, vflip = false;
    float brightness = 0.0f;
    float gain = 1.0f;
};

inline AugmentParams draw_augment_params(const AugmentationPolicy& p, std::mt19937_64& rng) {
    AugmentParams a;
    if (p.max_shift > 0) {
        std::uniform_int_distribution<int> shift(-p.max_shift, p.max_shift);
        a.dy = shift(rng);
        a.dx = shift(rng);
    }
    std::bernoulli_distribution coin(0.5);
    if (p.horizontal_flip) a.hflip = coin(rng);
    if (p.vertical_flip) a.vflip = coin(rng);
    if (p.brightness > 0) a.brightness = std::uniform_real_distribution<float>(-p.brightness, p.brightness)(rng);
    if (p.contrast > 0) a.gain = std::uniform_real_distribution<float>(1.0f - p.contrast, 1.0f + p.contrast)(rng);
    return a;
}

// Shift with edge replication, optional flips, then photometric jitter.
inline Image apply_augmentation(const Image& src, const AugmentParams& a) {
    Image out(src.channels(), src.height(), src.width());
    const int H = src.height(), W = src.width();
    const bool photometric = a.brightness != 0.0f || a.gain != 1.0f;
    for (int y = 0; y < H; ++y) {
        int sy = std::clamp(y - a.dy, 0, H - 1);
        if (a.vflip) sy = H - 1 - sy;
        for (int x = 0; x < W; ++x) {
            int sx = std::clamp(x - a.dx, 0, W - 1);
            if (a.hflip) sx = W - 1 - sx;
            for (int c = 0; c < src.channels(); ++c) {
                float v = src.at(c, sy, sx);
                if (photometric) v = std::clamp((v - 0.5f) * a.gain + 0.5f + a.brightness, 0.0f, 1.0f);
                out.at(c, y, x) = v;
            }
        }
    }
    return out;
}

// Replica `index` of `img` under `policy`; independent of every other replica.
inline Image make_replica(const Image& img, const AugmentationPolicy& policy, int index) {
    if (policy.is_identity()) return img;
    std::seed_seq seq{static_cast<std::uint32_t>(policy.seed), static_cast<std::uint32_t>(policy.seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    return apply_augmentation(img, draw_augment_params(policy, rng));
}

// --- inference ---------------------------------------------------------------

struct Selection {
    KeypointSet keys;
    SelectionConfig config;
};

struct TtaPrediction {
    std::vector<double> probabilities;
    std::optional<SelectionMask> mask;
    std::optional<ChannelScores> scores;
};

inline std::vector<FeatureMap> replica_features(const SplitModel& model, const Image& img,
                                                const AugmentationPolicy& policy) {
    policy.validate();
    std::vector<FeatureMap> out;
    out.reserve(static_cast<std::size_t>(policy.replica_count));
    if (policy.is_identity()) {
        out.assign(static_cast<std::size_t>(policy.replica_count), model.extract(img));
        return out;
    }
    for (int i = 0; i < policy.replica_count; ++i) out.push_back(model.extract(make_replica(img, policy, i)));
    return out;
}

// Mean of the per-replica probability vectors, optionally masking each
// replica's features first.
inline std::vector<double> classify_replicas(const SplitModel& model, std::span<const FeatureMap> replicas,
                                             const SelectionMask* mask) {
    if (replicas.empty()) throw PreconditionError("no replicas to classify");
    std::vector<double> sum;
    for (const FeatureMap& f : replicas) {
        const auto p = mask ? model.classify(apply_mask(f, *mask)) : model.classify(f);
        if (sum.empty()) sum.assign(p.size(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) sum[k] += p[k];
    }
    for (double& v : sum) v /= static_cast<double>(replicas.size());
    return sum;
}

// The selection mask is computed once on the un-augmented image and reused for
// every replica.
inline TtaPrediction predict_tta(const SplitModel& model, const Image& img, const AugmentationPolicy& policy,
                                 const std::optional<Selection>& selection = std::nullopt) {
    TtaPrediction out;
    if (selection) {
        auto sel = tts_select(model.extract(img), selection->keys, selection->config);
        out.mask = std::move(sel.mask);
        out.scores = std::move(sel.scores);
    }
    const auto replicas = replica_features(model, img, policy);
    out.probabilities = classify_replicas(model, replicas, out.mask ? &*out.mask : nullptr);
    return out;
}

// Background pixels replaced by Gaussian noise with the given channel
// statistics; lesion pixels untouched.
inline Image noisecrop(const Image& img, const SegmentationMask& mask, std::uint64_t seed,
                       const nn::ChannelStats& stats) {
    if (mask.size() != img.size())
        throw ShapeError("mask " + to_string(mask.size()) + " does not match image " + to_string(img.size()));
    if (static_cast<int>(stats.mean.size()) != img.channels() || static_cast<int>(stats.stddev.size()) != img.channels())
        throw ShapeError("noise statistics do not match the image channel count");
    Image out = img;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> unit(0.0f, 1.0f);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            if (mask.at(y, x)) continue;
            for (int c = 0; c < img.channels(); ++c)
                out.at(c, y, x) = stats.mean[static_cast<std::size_t>(c)] + stats.stddev[static_cast<std::size_t>(c)] * unit(rng);
        }
    return out;
}

inline Image noisecrop(const Image& img, const SegmentationMask& mask, std::uint64_t seed, const SplitModel& model) {
    if (!model.network()) throw UnsupportedArchitectureError("model carries no training-set channel statistics");
    return noisecrop(img, mask, seed, model.network()->stats);
}

struct AttentionMap {
    ImageSize size;
    std::vector<double> heat;  // row-major, in [0, 1]
    bool constant = false;     // flat map, reported as all zeros
    int predicted_class = 0;

    double at(int row, int col) const { return heat[static_cast<std::size_t>(row) * size.width + col]; }
    Pixel argmax() const {
        const auto it = std::max_element(heat.begin(), heat.end());
        const auto i = static_cast<int>(it - heat.begin());
        return {i / size.width, i % size.width};
    }
};

// Class-activation map of the predicted class, from the optionally masked
// features, bilinearly upsampled and min-max normalised.
inline AttentionMap attention_map(const SplitModel& model, const Image& img, const SelectionMask* mask = nullptr) {
    const nn::LinearHead* head = model.linear_head();
    if (!head) throw UnsupportedArchitectureError("class-activation maps need a linear head over pooled features");
    FeatureMap f = model.extract(img);
    if (mask) f = apply_mask(f, *mask);
    const auto probs = head->probabilities(f);
    const int k = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());

    std::vector<double> cam(f.plane_size(), 0.0);
    for (int c = 0; c < f.channels(); ++c) {
        const double w = head->w(k, c);
        const auto plane = f.channel(c);
        for (std::size_t i = 0; i < cam.size(); ++i) cam[i] += w * plane[i];
    }
    const auto up = upsample_to_image(BasicFeatureMap<double>(1, f.height(), f.width(), img.size(), std::move(cam)));

    AttentionMap out;
    out.size = img.size();
    out.predicted_class = k;
    out.heat.assign(up.values().begin(), up.values().end());
    const auto [lo, hi] = std::minmax_element(out.heat.begin(), out.heat.end());
    const double mn = *lo, mx = *hi;
    if (!(mx > mn)) {
        std::fill(out.heat.begin(), out.heat.end(), 0.0);
        out.constant = true;
    } else {
        for (double& v : out.heat) v = (v - mn) / (mx - mn);
    }
    return out;
}

// --- training ----------------------------------------------------------------

struct LabeledImage {
    Image image;
    Label label = Label::benign;
};

struct TrainConfig {
    nn::Architecture architecture = nn::Architecture::desk_scale();
    int max_epochs = 100;
    int patience = 10;  // epochs without validation improvement before stopping
    int batch_size = 16;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-3;
    AugmentationPolicy augmentation = [] {
        AugmentationPolicy p;
        p.replica_count = 1;
        return p;
    }();
    std::uint64_t seed = 0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_auc;
};

struct TrainResult {
    std::shared_ptr<const nn::ConvNet> network;
    int best_epoch = 0;
    std::optional<double> best_val_auc;
    std::vector<EpochRecord> history;

    SplitModel model() const { return SplitModel::from_network(network); }
};

namespace detail {

inline std::optional<double> validation_auc(const nn::ConvNet& net, std::span<const LabeledImage> val) {
    bool pos = false, neg = false;
    for (const auto& s : val) (s.label == Label::melanoma ? pos : neg) = true;
    if (!pos || !neg) return std::nullopt;
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : val) {
        scores.push_back(net.predict(s.image)[1]);
        labels.push_back(static_cast<int>(s.label));
    }
    return auc(scores, labels);
}

} // namespace detail

// Mini-batch SGD on cross-entropy. The returned weights are those of the epoch
// with the best validation AUC (the last epoch when validation lacks a class).
inline TrainResult train_erm(std::span<const LabeledImage> train, std::span<const LabeledImage> val,
                             const TrainConfig& cfg) {
    if (train.empty()) throw PreconditionError("training set is empty");
    if (cfg.max_epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0))
        throw ConfigError("invalid training configuration");
    cfg.architecture.validate();

    std::vector<const Image*> imgs;
    for (const auto& s : train) imgs.push_back(&s.image);
    nn::ConvNet net = nn::ConvNet::initialize(cfg.architecture, nn::compute_channel_stats(imgs), cfg.seed);
    nn::SgdMomentum opt(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const bool augment = !cfg.augmentation.is_identity();

    TrainResult result;
    nn::ConvNet best = net;
    int since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            nn::Gradients g = net.zero_gradients();
            for (std::size_t b = start; b < end; ++b) {
                const auto& s = train[order[b]];
                const int label = static_cast<int>(s.label);
                loss_sum += augment
                                ? net.accumulate_gradient(
                                      apply_augmentation(s.image, draw_augment_params(cfg.augmentation, rng)), label, g)
                                : net.accumulate_gradient(s.image, label, g);
            }
            opt.step(net, g, 1.0 / static_cast<double>(end - start));
        }
        const double mean_loss = loss_sum / static_cast<double>(train.size());
        if (!std::isfinite(mean_loss))
            throw TrainingError("training loss diverged at epoch " + std::to_string(epoch), epoch);

        EpochRecord rec{epoch, mean_loss, std::nullopt};
        try {
            rec.val_auc = detail::validation_auc(net, val);
        } catch (const NonFiniteError&) {
            throw TrainingError("non-finite activations at epoch " + std::to_string(epoch), epoch);
        }
        result.history.push_back(rec);

        if (!rec.val_auc) {
            best = net;
            result.best_epoch = epoch;
            continue;
        }
        if (!result.best_val_auc || *rec.val_auc > *result.best_val_auc) {
            result.best_val_auc = rec.val_auc;
            result.best_epoch = epoch;
            best = net;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    result.network = std::make_shared<const nn::ConvNet>(std::move(best));
    return result;
}

// --- checkpoints ---------------------------------------------------------------
//
// JSON container: {"format": "tts-checkpoint", "version": 1, "architecture": {...},
// "channel_stats": {...}, "convs": [{"in", "out", "weight", "bias"}...], "head": {...}}

inline nlohmann::json checkpoint_json(const nn::ConvNet& net) {
    nlohmann::json arch = {{"name", net.arch.name},
                           {"input_channels", net.arch.input_channels},
                           {"input_height", net.arch.input_height},
                           {"input_width", net.arch.input_width},
                           {"classes", net.arch.classes},
                           {"blocks", nlohmann::json::array()}};
    for (const auto& b : net.arch.blocks) arch["blocks"].push_back({{"out_channels", b.out_channels}, {"pool", b.pool}});
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& c : net.convs) convs.push_back({{"in", c.in}, {"out", c.out}, {"weight", c.weight}, {"bias", c.bias}});
    return {{"format", "tts-checkpoint"},
            {"version", 1},
            {"architecture", arch},
            {"channel_stats", {{"mean", net.stats.mean}, {"std", net.stats.stddev}}},
            {"convs", convs},
            {"head", {{"classes", net.head.classes},
                      {"channels", net.head.channels},
                      {"weight", net.head.weight},
                      {"bias", net.head.bias}}}};
}

inline nn::ConvNet network_from_checkpoint(const nlohmann::json& j) {
    try {
        if (j.at("format") != "tts-checkpoint" || j.at("version") != 1)
            throw ParseError("not a version-1 tts checkpoint");
        nn::ConvNet net;
        const auto& a = j.at("architecture");
        net.arch.name = a.at("name").get<std::string>();
        net.arch.input_channels = a.at("input_channels").get<int>();
        net.arch.input_height = a.at("input_height").get<int>();
        net.arch.input_width = a.at("input_width").get<int>();
        net.arch.classes = a.at("classes").get<int>();
        for (const auto& b : a.at("blocks"))
            net.arch.blocks.push_back({b.at("out_channels").get<int>(), b.at("pool").get<bool>()});
        net.arch.validate();
        net.stats.mean = j.at("channel_stats").at("mean").get<std::vector<float>>();
        net.stats.stddev = j.at("channel_stats").at("std").get<std::vector<float>>();
        int in = net.arch.input_channels;
        const auto& convs = j.at("convs");
        if (convs.size() != net.arch.blocks.size()) throw ParseError("conv count does not match architecture");
        for (std::size_t l = 0; l < convs.size(); ++l) {
            nn::Conv3x3 c(in, net.arch.blocks[l].out_channels);
            if (convs[l].at("in") != c.in || convs[l].at("out") != c.out) throw ParseError("conv shape mismatch");
            c.weight = convs[l].at("weight").get<std::vector<float>>();
            c.bias = convs[l].at("bias").get<std::vector<float>>();
            if (c.weight.size() != static_cast<std::size_t>(c.in) * c.out * 9 || c.bias.size() != static_cast<std::size_t>(c.out))
                throw ParseError("conv parameter count mismatch");
            net.convs.push_back(std::move(c));
            in = net.arch.blocks[l].out_channels;
        }
        net.head = nn::LinearHead(net.arch.classes, in);
        net.head.weight = j.at("head").at("weight").get<std::vector<float>>();
        net.head.bias = j.at("head").at("bias").get<std::vector<float>>();
        if (net.head.weight.size() != static_cast<std::size_t>(net.arch.classes) * in ||
            net.head.bias.size() != static_cast<std::size_t>(net.arch.classes))
            throw ParseError("head parameter count mismatch");
        if (static_cast<int>(net.stats.mean.size()) != net.arch.input_channels ||
            static_cast<int>(net.stats.stddev.size()) != net.arch.input_channels)
            throw ParseError("channel statistics do not match input channels");
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const nn::ConvNet& net, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out << checkpoint_json(net).dump() << "\n";
}

inline nn::ConvNet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return network_from_checkpoint(j);
}

} // namespace tts
