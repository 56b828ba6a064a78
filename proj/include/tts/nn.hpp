#pragma once
// Small convolutional classifier with hand-written backprop.
//
// Layout: input standardisation -> [conv3x3(pad 1) -> ReLU -> optional 2x2 max-pool]*
// -> global average pool -> linear head -> softmax. The output of the last
// conv block is the feature map handed to test-time selection.

#include "error.hpp"
#include "image.hpp"
#include "selection.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace tts::nn {

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int channels, int height, int width)
        : c(channels), h(height), w(width), v(static_cast<std::size_t>(channels) * height * width, 0.0f) {}

    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    float* at_plane(int k) { return v.data() + static_cast<std::size_t>(k) * plane(); }
    const float* at_plane(int k) const { return v.data() + static_cast<std::size_t>(k) * plane(); }
};

struct ConvBlockSpec {
    int out_channels = 16;
    bool pool = true;
    friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct Architecture {
    std::string name = "tts-convnet";
    int input_channels = 3;
    int input_height = 32;
    int input_width = 32;
    std::vector<ConvBlockSpec> blocks;
    int classes = 2;

    // 32x32 RGB -> 64 x 8 x 8 features.
    static Architecture desk_scale() {
        Architecture a;
        a.blocks = {{12, true}, {24, true}, {64, false}};
        return a;
    }

    int feature_channels() const { return blocks.back().out_channels; }
    ImageSize feature_size() const {
        ImageSize s{input_height, input_width};
        for (const auto& b : blocks)
            if (b.pool) s = {s.height / 2, s.width / 2};
        return s;
    }

    void validate() const {
        if (blocks.empty()) throw ConfigError("architecture needs at least one conv block");
        if (input_channels < 1 || input_height < 1 || input_width < 1 || classes < 2)
            throw ConfigError("architecture has invalid input or class dimensions");
        const ImageSize f = feature_size();
        if (f.height < 1 || f.width < 1) throw ConfigError("too many pooling stages for the input size");
        for (const auto& b : blocks)
            if (b.out_channels < 1) throw ConfigError("conv block needs at least one output channel");
    }

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Per-channel mean / std of the training images.
struct ChannelStats {
    std::vector<float> mean;
    std::vector<float> stddev;

    static ChannelStats neutral(int channels) {
        return {std::vector<float>(static_cast<std::size_t>(channels), 0.0f),
                std::vector<float>(static_cast<std::size_t>(channels), 1.0f)};
    }
    friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

inline ChannelStats compute_channel_stats(const std::vector<const Image*>& images) {
    if (images.empty()) throw PreconditionError("channel statistics need at least one image");
    const int channels = images.front()->channels();
    std::vector<double> sum(static_cast<std::size_t>(channels)), sq(static_cast<std::size_t>(channels));
    double count = 0;
    for (const Image* img : images) {
        const auto plane = static_cast<std::size_t>(img->height()) * img->width();
        for (int c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const double v = img->data()[static_cast<std::size_t>(c) * plane + i];
                sum[static_cast<std::size_t>(c)] += v;
                sq[static_cast<std::size_t>(c)] += v * v;
            }
        count += static_cast<double>(plane);
    }
    ChannelStats s;
    for (int c = 0; c < channels; ++c) {
        const double m = sum[static_cast<std::size_t>(c)] / count;
        const double var = std::max(sq[static_cast<std::size_t>(c)] / count - m * m, 1e-8);
        s.mean.push_back(static_cast<float>(m));
        s.stddev.push_back(static_cast<float>(std::sqrt(var)));
    }
    return s;
}

class Conv3x3 {
  public:
    int in = 0;
    int out = 0;
    std::vector<float> weight;  // [out][in][3][3]
    std::vector<float> bias;    // [out]

    Conv3x3() = default;
    Conv3x3(int in_channels, int out_channels)
        : in(in_channels), out(out_channels),
          weight(static_cast<std::size_t>(in_channels) * out_channels * 9, 0.0f),
          bias(static_cast<std::size_t>(out_channels), 0.0f) {}

    const float* kernel(int o, int i) const { return weight.data() + (static_cast<std::size_t>(o) * in + i) * 9; }

    void forward(const Tensor& x, Tensor& y) const {
        y = Tensor(out, x.h, x.w);
        const int H = x.h, W = x.w;
        for (int o = 0; o < out; ++o) {
            float* yp = y.at_plane(o);
            std::fill(yp, yp + y.plane(), bias[static_cast<std::size_t>(o)]);
            for (int i = 0; i < in; ++i) {
                const float* k = kernel(o, i);
                const float* xp = x.at_plane(i);
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dx = kx - 1;
                        const float wv = k[ky * 3 + kx];
                        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                        for (int r = std::max(0, -dy); r < std::min(H, H - dy); ++r) {
                            const float* src = xp + static_cast<std::ptrdiff_t>(r + dy) * W + dx;
                            float* dst = yp + static_cast<std::ptrdiff_t>(r) * W;
                            for (int col = x0; col < x1; ++col) dst[col] += wv * src[col];
                        }
                    }
                }
            }
        }
    }

    // Accumulates parameter gradients; writes the input gradient when gx != nullptr.
    void backward(const Tensor& x, const Tensor& gy, Tensor* gx, std::vector<float>& gw,
                  std::vector<float>& gb) const {
        const int H = x.h, W = x.w;
        if (gx) *gx = Tensor(in, H, W);
        for (int o = 0; o < out; ++o) {
            const float* gp = gy.at_plane(o);
            float bsum = 0.0f;
            for (std::size_t p = 0; p < gy.plane(); ++p) bsum += gp[p];
            gb[static_cast<std::size_t>(o)] += bsum;
            for (int i = 0; i < in; ++i) {
                const float* k = kernel(o, i);
                float* gk = gw.data() + (static_cast<std::size_t>(o) * in + i) * 9;
                const float* xp = x.at_plane(i);
                float* gxp = gx ? gx->at_plane(i) : nullptr;
                for (int ky = 0; ky < 3; ++ky) {
                    const int dy = ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int dx = kx - 1;
                        const float wv = k[ky * 3 + kx];
                        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                        float acc = 0.0f;
                        for (int r = std::max(0, -dy); r < std::min(H, H - dy); ++r) {
                            const float* src = xp + static_cast<std::ptrdiff_t>(r + dy) * W + dx;
                            const float* g = gp + static_cast<std::ptrdiff_t>(r) * W;
                            for (int col = x0; col < x1; ++col) acc += g[col] * src[col];
                            if (gxp) {
                                float* dst = gxp + static_cast<std::ptrdiff_t>(r + dy) * W + dx;
                                for (int col = x0; col < x1; ++col) dst[col] += wv * g[col];
                            }
                        }
                        gk[ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
};

inline void relu_inplace(Tensor& t) {
    for (float& v : t.v) v = v > 0.0f ? v : 0.0f;
}

// 2x2 max-pool, stride 2; `argmax` receives the flat source index per output.
inline Tensor max_pool2(const Tensor& x, std::vector<int>* argmax) {
    Tensor y(x.c, x.h / 2, x.w / 2);
    if (argmax) argmax->assign(y.v.size(), 0);
    for (int k = 0; k < x.c; ++k) {
        const float* xp = x.at_plane(k);
        for (int r = 0; r < y.h; ++r)
            for (int col = 0; col < y.w; ++col) {
                int best = (2 * r) * x.w + 2 * col;
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b) {
                        const int idx = (2 * r + a) * x.w + 2 * col + b;
                        if (xp[idx] > xp[best]) best = idx;
                    }
                const std::size_t o = static_cast<std::size_t>(k) * y.plane() + static_cast<std::size_t>(r) * y.w + col;
                y.v[o] = xp[best];
                if (argmax) (*argmax)[o] = static_cast<int>(static_cast<std::size_t>(k) * x.plane()) + best;
            }
    }
    return y;
}

// Linear classifier over globally average-pooled channels.
struct LinearHead {
    int classes = 0;
    int channels = 0;
    std::vector<float> weight;  // [classes][channels]
    std::vector<float> bias;    // [classes]

    LinearHead() = default;
    LinearHead(int n_classes, int n_channels)
        : classes(n_classes), channels(n_channels),
          weight(static_cast<std::size_t>(n_classes) * n_channels, 0.0f),
          bias(static_cast<std::size_t>(n_classes), 0.0f) {}

    float w(int k, int c) const { return weight[static_cast<std::size_t>(k) * channels + c]; }

    std::vector<double> pooled(const FeatureMap& f) const {
        if (f.channels() != channels)
            throw ShapeError("head expects " + std::to_string(channels) + " channels, got " +
                             std::to_string(f.channels()));
        std::vector<double> g(static_cast<std::size_t>(channels));
        for (int c = 0; c < channels; ++c) {
            double s = 0.0;
            for (float v : f.channel(c)) s += v;
            g[static_cast<std::size_t>(c)] = s / static_cast<double>(f.plane_size());
        }
        return g;
    }

    std::vector<double> logits_from_pooled(const std::vector<double>& g) const {
        std::vector<double> z(static_cast<std::size_t>(classes));
        for (int k = 0; k < classes; ++k) {
            double s = bias[static_cast<std::size_t>(k)];
            for (int c = 0; c < channels; ++c) s += static_cast<double>(w(k, c)) * g[static_cast<std::size_t>(c)];
            z[static_cast<std::size_t>(k)] = s;
        }
        return z;
    }

    std::vector<double> probabilities(const FeatureMap& f) const;
};

inline std::vector<double> softmax(const std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
    for (double& v : p) v /= s;
    return p;
}

inline std::vector<double> LinearHead::probabilities(const FeatureMap& f) const {
    return softmax(logits_from_pooled(pooled(f)));
}

struct Gradients {
    std::vector<std::vector<float>> conv_w, conv_b;
    std::vector<float> head_w, head_b;
};

class ConvNet {
  public:
    Architecture arch;
    ChannelStats stats;
    std::vector<Conv3x3> convs;
    LinearHead head;

    ConvNet() = default;

    // He-normal conv weights, small Gaussian head, zero biases.
    static ConvNet initialize(Architecture architecture, ChannelStats channel_stats, std::uint64_t seed) {
        architecture.validate();
        ConvNet net;
        net.arch = std::move(architecture);
        net.stats = std::move(channel_stats);
        if (static_cast<int>(net.stats.mean.size()) != net.arch.input_channels ||
            static_cast<int>(net.stats.stddev.size()) != net.arch.input_channels)
            throw ConfigError("channel statistics do not match the input channel count");
        std::mt19937_64 rng(seed);
        int in = net.arch.input_channels;
        for (const auto& b : net.arch.blocks) {
            Conv3x3 conv(in, b.out_channels);
            std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(in * 9)));
            for (float& v : conv.weight) v = dist(rng);
            net.convs.push_back(std::move(conv));
            in = b.out_channels;
        }
        net.head = LinearHead(net.arch.classes, in);
        std::normal_distribution<float> hd(0.0f, std::sqrt(1.0f / static_cast<float>(in)));
        for (float& v : net.head.weight) v = hd(rng);
        return net;
    }

    Tensor standardize(const Image& img) const {
        if (img.channels() != arch.input_channels || img.height() != arch.input_height ||
            img.width() != arch.input_width)
            throw ShapeError("model expects " + std::to_string(arch.input_channels) + "x" +
                             std::to_string(arch.input_height) + "x" + std::to_string(arch.input_width) +
                             " images, got " + std::to_string(img.channels()) + "x" +
                             std::to_string(img.height()) + "x" + std::to_string(img.width()));
        Tensor t(img.channels(), img.height(), img.width());
        const std::size_t plane = t.plane();
        for (int c = 0; c < t.c; ++c) {
            const float m = stats.mean[static_cast<std::size_t>(c)];
            const float inv = 1.0f / stats.stddev[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < plane; ++i)
                t.v[static_cast<std::size_t>(c) * plane + i] = (img.data()[static_cast<std::size_t>(c) * plane + i] - m) * inv;
        }
        return t;
    }

    Tensor forward_features(const Image& img) const {
        Tensor x = standardize(img);
        for (std::size_t l = 0; l < convs.size(); ++l) {
            Tensor y;
            convs[l].forward(x, y);
            relu_inplace(y);
            x = arch.blocks[l].pool ? max_pool2(y, nullptr) : std::move(y);
        }
        return x;
    }

    FeatureMap features(const Image& img) const {
        Tensor t = forward_features(img);
        return FeatureMap(t.c, t.h, t.w, img.size(), std::move(t.v));
    }

    std::vector<double> predict(const Image& img) const { return head.probabilities(features(img)); }

    Gradients zero_gradients() const {
        Gradients g;
        for (const auto& c : convs) {
            g.conv_w.emplace_back(c.weight.size(), 0.0f);
            g.conv_b.emplace_back(c.bias.size(), 0.0f);
        }
        g.head_w.assign(head.weight.size(), 0.0f);
        g.head_b.assign(head.bias.size(), 0.0f);
        return g;
    }

    // Cross-entropy of one sample; accumulates its gradient into `g`.
    double accumulate_gradient(const Image& img, int label, Gradients& g) const {
        const std::size_t L = convs.size();
        std::vector<Tensor> inputs(L), activ(L);
        std::vector<std::vector<int>> pool_idx(L);
        Tensor x = standardize(img);
        for (std::size_t l = 0; l < L; ++l) {
            inputs[l] = std::move(x);
            convs[l].forward(inputs[l], activ[l]);
            relu_inplace(activ[l]);
            x = arch.blocks[l].pool ? max_pool2(activ[l], &pool_idx[l]) : activ[l];
        }

        const std::size_t plane = x.plane();
        std::vector<double> pooled(static_cast<std::size_t>(x.c));
        for (int c = 0; c < x.c; ++c) {
            double s = 0.0;
            const float* p = x.at_plane(c);
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            pooled[static_cast<std::size_t>(c)] = s / static_cast<double>(plane);
        }
        const auto prob = softmax(head.logits_from_pooled(pooled));
        const double loss = -std::log(std::max(prob[static_cast<std::size_t>(label)], 1e-300));

        std::vector<double> dz(prob);
        dz[static_cast<std::size_t>(label)] -= 1.0;
        std::vector<double> dpool(static_cast<std::size_t>(x.c), 0.0);
        for (int k = 0; k < head.classes; ++k) {
            g.head_b[static_cast<std::size_t>(k)] += static_cast<float>(dz[static_cast<std::size_t>(k)]);
            for (int c = 0; c < head.channels; ++c) {
                g.head_w[static_cast<std::size_t>(k) * head.channels + c] +=
                    static_cast<float>(dz[static_cast<std::size_t>(k)] * pooled[static_cast<std::size_t>(c)]);
                dpool[static_cast<std::size_t>(c)] += head.w(k, c) * dz[static_cast<std::size_t>(k)];
            }
        }
        Tensor grad(x.c, x.h, x.w);
        for (int c = 0; c < x.c; ++c) {
            const auto v = static_cast<float>(dpool[static_cast<std::size_t>(c)] / static_cast<double>(plane));
            std::fill(grad.at_plane(c), grad.at_plane(c) + plane, v);
        }

        for (std::size_t l = L; l-- > 0;) {
            Tensor ga;
            if (arch.blocks[l].pool) {
                ga = Tensor(activ[l].c, activ[l].h, activ[l].w);
                for (std::size_t i = 0; i < grad.v.size(); ++i)
                    ga.v[static_cast<std::size_t>(pool_idx[l][i])] += grad.v[i];
            } else {
                ga = std::move(grad);
            }
            for (std::size_t i = 0; i < ga.v.size(); ++i)
                if (activ[l].v[i] <= 0.0f) ga.v[i] = 0.0f;
            Tensor gin;
            convs[l].backward(inputs[l], ga, l > 0 ? &gin : nullptr, g.conv_w[l], g.conv_b[l]);
            grad = std::move(gin);
        }
        return loss;
    }
};

// SGD with momentum; weight decay applies to weights, not biases.
class SgdMomentum {
  public:
    SgdMomentum(const ConvNet& net, double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), wd_(weight_decay), velocity_(net.zero_gradients()) {}

    void step(ConvNet& net, const Gradients& g, double scale) {
        for (std::size_t l = 0; l < net.convs.size(); ++l) {
            update(net.convs[l].weight, g.conv_w[l], velocity_.conv_w[l], scale, wd_);
            update(net.convs[l].bias, g.conv_b[l], velocity_.conv_b[l], scale, 0.0);
        }
        update(net.head.weight, g.head_w, velocity_.head_w, scale, wd_);
        update(net.head.bias, g.head_b, velocity_.head_b, scale, 0.0);
    }

  private:
    void update(std::vector<float>& p, const std::vector<float>& g, std::vector<float>& v, double scale,
                double wd) const {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double grad = g[i] * scale + wd * p[i];
            v[i] = static_cast<float>(momentum_ * v[i] + grad);
            p[i] = static_cast<float>(p[i] - lr_ * v[i]);
        }
    }

    double lr_, momentum_, wd_;
    Gradients velocity_;
};

} // namespace tts::nn
