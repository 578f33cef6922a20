#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sapiens/config.hpp"
#include "sapiens/params.hpp"

namespace sapiens {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;

    void validate() const;
    static OptimConfig from_config(const ConfigMap& c, const std::string& prefix = "optimizer");
    void to_config(ConfigMap& c, const std::string& prefix = "optimizer") const;
};

struct ScheduleConfig {
    int64_t warmup_iters = 1000;
    int64_t total_iters = 100000;
    double min_lr = 1e-7;

    void validate() const;
    static ScheduleConfig from_config(const ConfigMap& c, const std::string& prefix = "schedule");
    void to_config(ConfigMap& c, const std::string& prefix = "schedule") const;
};

// Norm gains, biases, positional tables and the special tokens are exempt
// from weight decay.
bool zero_decay_param(const std::string& name);

// Linear warmup 0 -> base_lr over warmup_iters, then cosine down to min_lr
// at total_iters.
double lr_schedule(int64_t iter, double base_lr, const ScheduleConfig& sched);

// Joint l2 norm over every tensor in the map; scales them in place when it
// exceeds max_norm. Returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

// Decoupled weight decay; moments are bias-corrected. Parameters absent from
// the grads map are left untouched, which is also how frozen subsets are
// expressed. Non-finite gradients abort the step.
class AdamW {
public:
    explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr);

    const OptimConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    // moment access for checkpointing
    std::map<std::string, Tensor>& exp_avg() { return m_; }
    std::map<std::string, Tensor>& exp_avg_sq() { return v_; }
    const std::map<std::string, Tensor>& exp_avg() const { return m_; }
    const std::map<std::string, Tensor>& exp_avg_sq() const { return v_; }
    void set_step_count(int64_t t);

private:
    OptimConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_;
    std::map<std::string, Tensor> v_;
};

}  // namespace sapiens
