#include "sapiens/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace sapiens {

void OptimConfig::validate() const {
    check(lr > 0.0, "optim: lr must be positive");
    check(beta1 >= 0.0 && beta1 < 1.0, "optim: beta1 must be in [0,1)");
    check(beta2 >= 0.0 && beta2 < 1.0, "optim: beta2 must be in [0,1)");
    check(weight_decay >= 0.0, "optim: weight_decay must be non-negative");
    check(eps > 0.0, "optim: eps must be positive");
}

OptimConfig OptimConfig::from_config(const ConfigMap& c, const std::string& prefix) {
    OptimConfig o;
    o.lr = c.get_real(prefix + ".lr", o.lr);
    o.beta1 = c.get_real(prefix + ".beta1", o.beta1);
    o.beta2 = c.get_real(prefix + ".beta2", o.beta2);
    o.weight_decay = c.get_real(prefix + ".weight_decay", o.weight_decay);
    o.eps = c.get_real(prefix + ".eps", o.eps);
    o.validate();
    return o;
}

void OptimConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".lr", format_real(lr));
    c.set(prefix + ".beta1", format_real(beta1));
    c.set(prefix + ".beta2", format_real(beta2));
    c.set(prefix + ".weight_decay", format_real(weight_decay));
    c.set(prefix + ".eps", format_real(eps));
}

void ScheduleConfig::validate() const {
    check(warmup_iters >= 0, "schedule: warmup_iters must be non-negative");
    check(total_iters > 0, "schedule: total_iters must be positive");
    check(warmup_iters <= total_iters, "schedule: warmup exceeds total");
    check(min_lr >= 0.0, "schedule: min_lr must be non-negative");
}

ScheduleConfig ScheduleConfig::from_config(const ConfigMap& c, const std::string& prefix) {
    ScheduleConfig s;
    s.warmup_iters = c.get_int(prefix + ".warmup_iters", s.warmup_iters);
    s.total_iters = c.get_int(prefix + ".total_iters", s.total_iters);
    s.min_lr = c.get_real(prefix + ".min_lr", s.min_lr);
    s.validate();
    return s;
}

void ScheduleConfig::to_config(ConfigMap& c, const std::string& prefix) const {
    c.set(prefix + ".warmup_iters", std::to_string(warmup_iters));
    c.set(prefix + ".total_iters", std::to_string(total_iters));
    c.set(prefix + ".min_lr", format_real(min_lr));
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

bool zero_decay_param(const std::string& name) {
    if (ends_with(name, ".bias") || ends_with(name, ".gain")) return true;
    if (name.find("pos_table") != std::string::npos) return true;
    if (name.rfind("cls.", 0) == 0 || name.find(".cls.") != std::string::npos) return true;
    if (name.find("mask_token") != std::string::npos) return true;
    return false;
}

double lr_schedule(int64_t iter, double base_lr, const ScheduleConfig& sched) {
    sched.validate();
    check(iter >= 0, "lr_schedule: negative iter");
    check(iter <= sched.total_iters, "lr_schedule: iter past total_iters");
    if (iter < sched.warmup_iters)
        return base_lr * static_cast<double>(iter) / static_cast<double>(sched.warmup_iters);
    if (iter >= sched.total_iters) return sched.min_lr;
    const double span = static_cast<double>(sched.total_iters - sched.warmup_iters);
    const double prog = static_cast<double>(iter - sched.warmup_iters) / span;
    return sched.min_lr + (base_lr - sched.min_lr) * 0.5 * (1.0 + std::cos(M_PI * prog));
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
    check(max_norm > 0.0, "clip: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        (void)name;
        for (double v : g.data) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads) {
            (void)name;
            for (double& v : g.data) v *= scale;
        }
    }
    return norm;
}

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads, double lr) {
    check(lr >= 0.0, "adamw: negative lr");
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        check(p.same_shape(g), "adamw: gradient shape mismatch for " + name);
        for (double v : g.data)
            if (!std::isfinite(v))
                throw std::runtime_error("adamw: non-finite gradient in " + name + " at step " +
                                         std::to_string(t_));
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Tensor(p.shape, 0.0)).first;
            v_.emplace(name, Tensor(p.shape, 0.0));
        }
        Tensor& m = mit->second;
        Tensor& v = v_.at(name);
        const double wd = zero_decay_param(name) ? 0.0 : cfg_.weight_decay;
        for (int64_t i = 0; i < p.numel(); ++i) {
            m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
            v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p.data[i]);
        }
    }
}

void AdamW::set_step_count(int64_t t) {
    check(t >= 0, "adamw: negative step count");
    t_ = t;
}

}  // namespace sapiens
