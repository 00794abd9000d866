#include "epns/train.hpp"

#include <cmath>

namespace epns {

void AdamState::init(const ParamStore& params) {
    m.clear();
    v.clear();
    for (std::size_t i = 0; i < params.size(); ++i) {
        m.emplace_back(static_cast<std::size_t>(params.tensor(i).size()), 0.0);
        v.emplace_back(static_cast<std::size_t>(params.tensor(i).size()), 0.0);
    }
    step = 0;
    skipped = 0;
}

bool adam_step(ParamStore& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const TrainConfig& cfg) {
    if (!state.initialized()) state.init(params);
    double sq_norm = 0.0;
    for (const auto& g : grads)
        for (double v : g) {
            if (!std::isfinite(v)) {
                ++state.skipped;
                return false;
            }
            sq_norm += v * v;
        }
    const double norm = std::sqrt(sq_norm);
    const double clip_scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params.tensor(pi).data();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const auto& g = grads[pi];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j] * clip_scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[j]);
        }
    }
    return true;
}

double kl_anneal(int epoch, const TrainConfig& cfg) {
    if (cfg.beta_period <= 0) return 1.0;
    const double beta = cfg.beta_increment * static_cast<double>(epoch / cfg.beta_period);
    return beta < 1.0 ? beta : 1.0;
}

Tensor free_bits_objective(Tape& tape, const Tensor& recon, const Tensor& kl_per_dim, double beta, double lambda) {
    Tensor kl_clamped = lambda > 0.0 ? tape.maximum_scalar(kl_per_dim, lambda) : kl_per_dim;
    Tensor kl_total = tape.sum_all(kl_clamped);
    return tape.add(tape.neg(recon), tape.mul_scalar(kl_total, beta));
}

} // namespace epns
