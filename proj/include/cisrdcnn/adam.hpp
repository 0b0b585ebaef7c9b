#ifndef CISRDCNN_ADAM_HPP
#define CISRDCNN_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cisr::nn {

/// A named view of one trainable buffer together with its gradient.
struct ParamSlot {
    std::string name;
    std::span<double> value;
    std::span<const double> grad;
};

class NonFiniteGradient : public std::runtime_error {
public:
    explicit NonFiniteGradient(const std::string& param)
        : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(param)
    {
    }
    const std::string& param() const { return param_; }

private:
    std::string param_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive-moment optimizer with bias correction. Moment buffers are bound to
/// slot order on the first step and must see the same layout afterwards.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::span<const ParamSlot> slots, double lr)
    {
        for (const ParamSlot& s : slots) {
            if (s.grad.size() != s.value.size())
                throw std::invalid_argument("adam: gradient size mismatch for '" + s.name + "'");
            for (double g : s.grad)
                if (!std::isfinite(g))
                    throw NonFiniteGradient(s.name);
        }
        if (moments_.empty()) {
            for (const ParamSlot& s : slots)
                moments_.push_back({s.name, std::vector<double>(s.value.size(), 0.0),
                    std::vector<double>(s.value.size(), 0.0)});
        } else if (moments_.size() != slots.size()) {
            throw std::invalid_argument("adam: parameter layout changed between steps");
        }

        ++steps_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < slots.size(); ++k) {
            const ParamSlot& s = slots[k];
            Moments& mo = moments_[k];
            if (mo.name != s.name || mo.m.size() != s.value.size())
                throw std::invalid_argument("adam: parameter '" + s.name + "' does not match optimizer state");
            for (std::size_t i = 0; i < s.value.size(); ++i) {
                const double g = s.grad[i];
                mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
                mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = mo.m[i] / c1;
                const double vhat = mo.v[i] / c2;
                s.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }

    std::size_t steps() const { return steps_; }

private:
    struct Moments {
        std::string name;
        std::vector<double> m, v;
    };

    AdamConfig cfg_;
    std::vector<Moments> moments_;
    std::size_t steps_ = 0;
};

}  // namespace cisr::nn

#endif  // CISRDCNN_ADAM_HPP
