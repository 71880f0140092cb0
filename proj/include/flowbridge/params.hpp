#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowbridge/errors.hpp"
#include "flowbridge/rng.hpp"
#include "flowbridge/tensor.hpp"

namespace flowbridge {

// Named, ordered collection of tensors with freeze flags. Iteration order is
// insertion order; names are hierarchical with '.' separators.
template <typename T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool frozen = false;
    };

    Tensor<T>& add(const std::string& name, Tensor<T> t, bool frozen = false) {
        if (index_.count(name)) throw ContractViolation("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), frozen});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractViolation("unknown parameter: " + name);
        return entries_[it->second];
    }
    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractViolation("unknown parameter: " + name);
        return entries_[it->second];
    }

    Tensor<T>& tensor(const std::string& name) { return entry(name).tensor; }
    const Tensor<T>& tensor(const std::string& name) const { return entry(name).tensor; }

    void set_all_frozen(bool frozen) {
        for (auto& e : entries_) e.frozen = frozen;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    int64_t num_values() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.tensor.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

enum class LrSchedule { cosine };

struct TrainHyperparams {
    double learning_rate = 1e-4;
    int batch_size = 64;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double grad_clip = 1.0;
    int total_steps = 5000;
    int warmup_steps = 50;
    LrSchedule schedule = LrSchedule::cosine;

    void validate() const {
        if (!(warmup_steps > 0 && warmup_steps < total_steps))
            throw ContractViolation("require 0 < warmup_steps < total_steps");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ContractViolation("betas must lie in [0, 1)");
    }
};

// Adam moments for the non-frozen parameters only.
template <typename T>
struct OptimizerState {
    GradMap<T> m;
    GradMap<T> v;
    int64_t t = 0;

    template <typename S>
    void init(const ParameterStore<S>& store) {
        m.clear();
        v.clear();
        t = 0;
        for (const auto& e : store.entries())
            if (!e.frozen) {
                m.emplace(e.name, Tensor<T>(e.tensor.shape));
                v.emplace(e.name, Tensor<T>(e.tensor.shape));
            }
    }
};

// Linear warmup 0 -> lr over [0, warmup], then cosine decay to 0 at total_steps.
inline double cosine_warmup_lr(int64_t step, const TrainHyperparams& hp) {
    if (step < 0 || step > hp.total_steps)
        throw ContractViolation("lr schedule step " + std::to_string(step) + " outside [0, total_steps]");
    if (step <= hp.warmup_steps)
        return hp.learning_rate * static_cast<double>(step) / static_cast<double>(hp.warmup_steps);
    double progress = static_cast<double>(step - hp.warmup_steps) /
                      static_cast<double>(hp.total_steps - hp.warmup_steps);
    return hp.learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Scales all gradients in place when the global L2 norm exceeds max_norm;
// returns the applied scale.
template <typename T>
double clip_global_norm(GradMap<T>& grads, double max_norm) {
    if (max_norm <= 0) throw ContractViolation("max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    double scale = max_norm / norm;
    for (auto& [name, g] : grads)
        for (auto& v : g.data) v = static_cast<T>(v * scale);
    return scale;
}

// Decoupled-weight-decay Adam with bias correction, eps = 1e-8.
// grads must cover exactly the non-frozen parameters of the store.
template <typename T>
void adamw_step(ParameterStore<T>& store, const GradMap<T>& grads, OptimizerState<T>& state,
                const TrainHyperparams& hp, double lr_t) {
    constexpr double kEps = 1e-8;
    for (const auto& [name, g] : grads) {
        if (store.entry(name).frozen)
            throw ContractViolation("gradient supplied for frozen parameter: " + name);
    }
    state.t += 1;
    const double b1 = hp.beta1, b2 = hp.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (auto& e : store.entries()) {
        if (e.frozen) continue;
        auto git = grads.find(e.name);
        if (git == grads.end())
            throw ContractViolation("missing gradient for trainable parameter: " + e.name);
        const Tensor<T>& g = git->second;
        Tensor<T>& m = state.m.at(e.name);
        Tensor<T>& v = state.v.at(e.name);
        Tensor<T>& p = e.tensor;
        for (int64_t i = 0; i < p.size(); ++i) {
            double gi = static_cast<double>(g.at(i));
            double mi = b1 * static_cast<double>(m.at(i)) + (1.0 - b1) * gi;
            double vi = b2 * static_cast<double>(v.at(i)) + (1.0 - b2) * gi * gi;
            m.at(i) = static_cast<T>(mi);
            v.at(i) = static_cast<T>(vi);
            double mhat = mi / bc1;
            double vhat = vi / bc2;
            double pi = static_cast<double>(p.at(i));
            pi -= lr_t * hp.weight_decay * pi;
            pi -= lr_t * mhat / (std::sqrt(vhat) + kEps);
            p.at(i) = static_cast<T>(pi);
        }
    }
}

}  // namespace flowbridge
