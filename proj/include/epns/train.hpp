#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "epns/model.hpp"
#include "epns/nn.hpp"
#include "epns/rng.hpp"

namespace epns {

struct TrainConfig {
    int epochs = 180;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int batch_size = 64;
    int rollout_k = 16;          // multi-step unroll length K
    double beta_increment = 0.005;
    int beta_period = 200;       // epochs per annealing increment
    double free_bits = 0.0;      // lambda
    double grad_clip = 10.0;     // global-norm clip
    std::uint64_t seed = 0;
    int workers = 2;
    int val_pairs_per_traj = 4;  // fixed validation subsample
    double max_skip_fraction = 0.10;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t step = 0;
    std::int64_t skipped = 0;

    void init(const ParamStore& params);
    bool initialized() const { return !m.empty(); }
};

// Decoupled-weight-decay Adam over the store; returns false (and counts) when
// any gradient entry is non-finite, leaving parameters untouched.
bool adam_step(ParamStore& params, const std::vector<std::vector<double>>& grads, AdamState& state,
               const TrainConfig& cfg);

// beta = min(1, increment * floor(epoch / period))
double kl_anneal(int epoch, const TrainConfig& cfg);

// loss = -recon + beta * sum_j max(lambda, KL_j)
Tensor free_bits_objective(Tape& tape, const Tensor& recon, const Tensor& kl_per_dim, double beta, double lambda);

struct EpochMetrics {
    int epoch = 0;
    double recon = 0.0;   // mean per unrolled step
    double kl = 0.0;      // mean per unrolled step, pre-clamp
    double beta = 0.0;
    double val_elbo = 0.0;
    int skipped_batches = 0;
    int batches = 0;
};

struct TrainingDiverged : std::runtime_error {
    explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

template <class State>
struct TrajectoryData {
    std::vector<State> frames;
    std::uint64_t seed = 0;
};

namespace detail {

constexpr std::uint64_t kElemStream = 0x7261696eULL;  // training element noise
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kValStream = 0x76616cULL;

inline void run_partitioned(int n, int workers, const std::function<void(int item, int worker)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        threads.emplace_back([=, &fn]() {
            for (int i = w; i < n; i += workers) fn(i, w);
        });
    for (auto& t : threads) t.join();
}

} // namespace detail

// One epoch of posterior-guided multi-step training: per trajectory a uniform
// start t0, K unrolled steps with the loss backpropagated through a single
// autoregressive step each (the unrolled input state re-enters as a constant),
// one optimizer update per minibatch. Replica parameter stores are synced from
// the master at every batch; gradients reduce in element order so results do
// not depend on the worker count.
template <class Model>
EpochMetrics multi_step_train_epoch(Model& model, std::vector<Model*>& replicas,
                                    const std::vector<TrajectoryData<typename Model::State>>& train,
                                    AdamState& opt, const TrainConfig& cfg, int epoch) {
    using State = typename Model::State;
    const int n_traj = static_cast<int>(train.size());
    const double beta = kl_anneal(epoch, cfg);
    const int k_steps = cfg.rollout_k;

    std::vector<int> order(static_cast<std::size_t>(n_traj));
    for (int i = 0; i < n_traj; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, {detail::kShuffleStream, static_cast<std::uint64_t>(epoch)}));
    for (int i = n_traj - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(shuffle_rng.uniform_int(i + 1))]);

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.beta = beta;
    double recon_sum = 0.0, kl_sum = 0.0;
    std::int64_t steps_counted = 0;

    const std::size_t n_params = model.params().size();
    for (int batch_start = 0; batch_start < n_traj; batch_start += cfg.batch_size) {
        const int bsz = std::min(cfg.batch_size, n_traj - batch_start);
        for (Model* r : replicas) r->params().copy_values_from(model.params());

        std::vector<std::vector<std::vector<double>>> elem_grads(static_cast<std::size_t>(bsz));
        std::vector<double> elem_recon(static_cast<std::size_t>(bsz), 0.0);
        std::vector<double> elem_kl(static_cast<std::size_t>(bsz), 0.0);
        std::vector<char> elem_ok(static_cast<std::size_t>(bsz), 1);

        detail::run_partitioned(bsz, static_cast<int>(replicas.size()), [&](int e, int w) {
            Model& m = *replicas[static_cast<std::size_t>(w)];
            const int ti = order[static_cast<std::size_t>(batch_start + e)];
            const auto& traj = train[static_cast<std::size_t>(ti)];
            const int frames = static_cast<int>(traj.frames.size());
            if (frames < k_steps + 1) throw std::runtime_error("trajectory shorter than rollout K+1");
            Rng rng(derive_seed(cfg.seed, {detail::kElemStream, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(ti)}));
            const int t0 = rng.uniform_int(frames - k_steps);

            m.params().zero_grads();
            State xhat = traj.frames[static_cast<std::size_t>(t0)];
            double r_acc = 0.0, k_acc = 0.0;
            bool ok = true;
            for (int k = 1; k <= k_steps; ++k) {
                Tape tape;
                auto step = m.elbo_step(tape, xhat, traj.frames[static_cast<std::size_t>(t0 + k)], rng);
                Tensor loss = free_bits_objective(tape, step.elbo.recon, step.elbo.kl_per_dim, beta, cfg.free_bits);
                if (!std::isfinite(loss.item())) {
                    ok = false;
                    break;
                }
                tape.backward(loss);
                r_acc += step.elbo.recon.item();
                for (double v : step.elbo.kl_per_dim.data()) k_acc += v;
                xhat = step.reconstruction;
            }
            elem_ok[static_cast<std::size_t>(e)] = ok ? 1 : 0;
            elem_recon[static_cast<std::size_t>(e)] = r_acc;
            elem_kl[static_cast<std::size_t>(e)] = k_acc;
            auto& g = elem_grads[static_cast<std::size_t>(e)];
            g.resize(n_params);
            for (std::size_t pi = 0; pi < n_params; ++pi) g[pi] = m.params().tensor(pi).grad();
        });

        ++metrics.batches;
        bool batch_ok = true;
        for (int e = 0; e < bsz; ++e)
            if (!elem_ok[static_cast<std::size_t>(e)]) batch_ok = false;
        if (!batch_ok) {
            ++metrics.skipped_batches;
            continue;
        }

        // deterministic reduction in element order, then mean over the batch
        std::vector<std::vector<double>> grads(n_params);
        for (std::size_t pi = 0; pi < n_params; ++pi)
            grads[pi].assign(static_cast<std::size_t>(model.params().tensor(pi).size()), 0.0);
        for (int e = 0; e < bsz; ++e)
            for (std::size_t pi = 0; pi < n_params; ++pi) {
                const auto& src = elem_grads[static_cast<std::size_t>(e)][pi];
                auto& dst = grads[pi];
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        const double inv_b = 1.0 / static_cast<double>(bsz);
        for (auto& g : grads)
            for (auto& v : g) v *= inv_b;

        if (!adam_step(model.params(), grads, opt, cfg)) ++metrics.skipped_batches;

        for (int e = 0; e < bsz; ++e) {
            recon_sum += elem_recon[static_cast<std::size_t>(e)];
            kl_sum += elem_kl[static_cast<std::size_t>(e)];
        }
        steps_counted += static_cast<std::int64_t>(bsz) * k_steps;
    }

    if (steps_counted > 0) {
        metrics.recon = recon_sum / static_cast<double>(steps_counted);
        metrics.kl = kl_sum / static_cast<double>(steps_counted);
    }
    if (metrics.batches > 0 &&
        metrics.skipped_batches > cfg.max_skip_fraction * metrics.batches)
        throw TrainingDiverged("more than " + std::to_string(static_cast<int>(cfg.max_skip_fraction * 100)) +
                               "% of batches skipped in epoch " + std::to_string(epoch));
    return metrics;
}

// Mean one-step ELBO over a fixed, seed-determined subsample of consecutive
// frame pairs; the same pairs are used every epoch so values are comparable.
template <class Model>
double validation_elbo(const Model& model, const std::vector<TrajectoryData<typename Model::State>>& val,
                       const TrainConfig& cfg, int epoch) {
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t ti = 0; ti < val.size(); ++ti) {
        const auto& traj = val[ti];
        const int pairs = static_cast<int>(traj.frames.size()) - 1;
        if (pairs <= 0) continue;
        Rng pair_rng(derive_seed(cfg.seed, {detail::kValStream, static_cast<std::uint64_t>(ti)}));
        const int n_eval = std::min(cfg.val_pairs_per_traj, pairs);
        for (int i = 0; i < n_eval; ++i) {
            const int t = pair_rng.uniform_int(pairs);
            Rng rng(derive_seed(cfg.seed, {detail::kValStream, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(ti), static_cast<std::uint64_t>(i)}));
            total += model.one_step_elbo_value(traj.frames[static_cast<std::size_t>(t)],
                                               traj.frames[static_cast<std::size_t>(t + 1)], rng);
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

} // namespace epns
