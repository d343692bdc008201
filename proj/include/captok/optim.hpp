#pragma once

#include <cmath>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "captok/param.hpp"

namespace captok {

// AdamW with decoupled weight decay. Frozen parameters and parameters whose
// gradient was never touched in the current step are left bitwise unchanged.
class AdamW {
public:
    struct Config {
        double lr = 3e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    struct Slot {
        std::vector<double> m, v;
        long t = 0;
    };

    AdamW() = default;
    explicit AdamW(Config cfg) : cfg_(cfg) {}

    Config& config() { return cfg_; }
    const Config& config() const { return cfg_; }

    void step(ParamSet& params, double lr_override = -1.0) {
        const double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
        for (auto& p : params.all()) {
            if (!p.trainable || !p.tensor.has_grad()) continue;
            Slot& s = state_[p.name];
            auto& w = p.tensor.data();
            const auto& g = p.tensor.grad();
            if (s.m.empty()) {
                s.m.assign(w.size(), 0.0);
                s.v.assign(w.size(), 0.0);
            }
            s.t += 1;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
            for (size_t i = 0; i < w.size(); ++i) {
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

    std::unordered_map<std::string, Slot>& state() { return state_; }
    const std::unordered_map<std::string, Slot>& state() const { return state_; }

private:
    Config cfg_;
    std::unordered_map<std::string, Slot> state_;
};

// cosine decay from base_lr to floor_frac * base_lr over total steps
inline double cosine_lr(double base_lr, long step, long total_steps, double floor_frac = 0.1) {
    if (total_steps <= 0) return base_lr;
    double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    double lo = base_lr * floor_frac;
    return lo + 0.5 * (base_lr - lo) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace captok
