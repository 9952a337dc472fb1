#pragma once

#include <vector>

#include "mdsgen/tensor.hpp"

namespace mds {

// Adam with bias correction; weight decay intentionally absent.
struct Adam {
    float lr = 5e-4f;
    float beta1 = 0.9f, beta2 = 0.999f;
    float eps = 1e-8f;
    long long step_count = 0;
    std::vector<std::vector<float>> m, v;  // one slot per parameter tensor

    explicit Adam(float lr_ = 5e-4f) : lr(lr_) {}

    void bind(const std::vector<TensorPtr>& params) {
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i]->numel(), 0.0f);
            v[i].assign(params[i]->numel(), 0.0f);
        }
    }

    void step(const std::vector<TensorPtr>& params) {
        if (m.size() != params.size()) throw ConfigError("Adam: bind() before step()");
        ++step_count;
        float bc1 = 1.0f - std::pow(beta1, (float)step_count);
        float bc2 = 1.0f - std::pow(beta2, (float)step_count);
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            if (p.grad.empty()) continue;
            for (size_t j = 0; j < p.numel(); ++j) {
                float g = p.grad[j];
                m[i][j] = beta1 * m[i][j] + (1.0f - beta1) * g;
                v[i][j] = beta2 * v[i][j] + (1.0f - beta2) * g * g;
                float mh = m[i][j] / bc1, vh = v[i][j] / bc2;
                p.data[j] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }
};

// Shadow parameter copies. The update is written as e += (1-d)*(p-e) so that
// p == e is an exact fixed point: frozen parameters leave the EMA bit-identical.
struct Ema {
    float decay = 0.9999f;
    std::vector<TensorPtr> shadow;

    void init(const std::vector<TensorPtr>& params, float d) {
        decay = d;
        shadow.clear();
        shadow.reserve(params.size());
        for (auto& p : params) {
            auto s = Tensor::create(p->shape);
            s->data = p->data;
            shadow.push_back(s);
        }
    }

    void update(const std::vector<TensorPtr>& params) {
        if (shadow.size() != params.size()) throw ConfigError("Ema: init() before update()");
        float k = 1.0f - decay;
        for (size_t i = 0; i < params.size(); ++i)
            for (size_t j = 0; j < params[i]->numel(); ++j)
                shadow[i]->data[j] += k * (params[i]->data[j] - shadow[i]->data[j]);
    }
};

}  // namespace mds
