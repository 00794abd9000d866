#pragma once

#include <functional>
#include <vector>

#include "epns/cpm.hpp"
#include "epns/nbody.hpp"
#include "epns/rng.hpp"
#include "epns/train.hpp"

namespace epns {

struct EmpiricalDistribution {
    std::vector<double> samples; // ascending

    static EmpiricalDistribution of(std::vector<double> xs);
    int count() const { return static_cast<int>(samples.size()); }
};

// sup-norm distance between the two empirical CDFs (merge walk)
double ks_statistic(const EmpiricalDistribution& a, const EmpiricalDistribution& b);

// Asymptotic two-sided p-value with the standard small-sample correction
// lambda = (sqrt(en) + 0.12 + 0.11/sqrt(en)) * d, en = sqrt(n*m/(n+m)).
double ks_two_sample_pvalue(double d, int n, int m);

// Connected components of same-type cells under site 4-adjacency, summed over
// types; medium and absent cells excluded.
int cluster_count(const Lattice& lat);

enum class NBodyObservable { KineticEnergy, PotentialEnergy, TotalEnergy };
std::vector<double> observable_series(const NBodyTrajectory& traj, NBodyObservable obs, const NBodyConfig& cfg);
std::vector<double> cluster_count_series(const CpmTrajectory& traj);

struct DksRow {
    int frame = 0;
    double dks = 0.0;
    double pvalue = 1.0;
};
// KS distance between the model and ground-truth ensembles of an observable,
// evaluated at the requested frames.
std::vector<DksRow> dks_at_times(const std::vector<std::vector<double>>& model_series,
                                 const std::vector<std::vector<double>>& gt_series, const std::vector<int>& frames);

// ---------------------------------------------------------------------------
// statistical equivariance verification (Table-2 style protocol)
// ---------------------------------------------------------------------------

struct EquivarianceResult {
    double dks = 0.0;
    double pvalue = 1.0;
    int n1 = 0, n2 = 0;
    bool low_sample_warning = false; // fewer than 30 samples on a side
};

BodyState rotate_state(const BodyState& s, const Mat3& r);

// distribution 1: a fixed coordinate of one randomly chosen body after
// rotating final outputs; distribution 2: the same attribute of rollouts from
// the rotated x^0. Sampler seeds are independent per rollout.
EquivarianceResult verify_equivariance_celestial(
    const std::function<NBodyTrajectory(const BodyState&, std::uint64_t)>& simulate,
    const std::vector<BodyState>& x0s, int rollouts_per_x0, std::uint64_t seed);

// Same protocol with a random permutation of cell ids; the attribute is the
// distance traveled by one fixed cell's volume centroid from frame 0 to the
// final frame.
EquivarianceResult verify_equivariance_cellular(
    const std::function<CpmTrajectory(const Lattice&, std::uint64_t)>& simulate, const std::vector<Lattice>& x0s,
    int rollouts_per_x0, std::uint64_t seed);

// ---------------------------------------------------------------------------
// rollout stability
// ---------------------------------------------------------------------------

struct StabilityCriterion {
    enum class Kind { EnergyJump, VolumeRange };
    Kind kind = Kind::EnergyJump;
    double threshold = 20.0; // energy jump between consecutive stored frames
    double fraction = 0.2;   // fraction of cells allowed outside the range
    double vol_min = 0.0, vol_max = 0.0;
};

StabilityCriterion energy_jump_criterion(double threshold = 20.0);
// volume range observed anywhere in the training trajectories
StabilityCriterion volume_range_criterion(const std::vector<CpmTrajectory>& training, double fraction = 0.2);

// index of the first frame that violates the criterion, or frame count if none
int first_unstable_frame(const NBodyTrajectory& traj, const StabilityCriterion& c, const NBodyConfig& cfg);
int first_unstable_frame(const CpmTrajectory& traj, const StabilityCriterion& c);

// fraction of rollouts still stable at each frame; monotone nonincreasing
std::vector<double> stability_fraction(const std::vector<int>& first_violation, int frames);

struct QuantileBand {
    std::vector<double> median, lo, hi;
};
// per-frame empirical quantiles with linear interpolation
QuantileBand quantile_bands(const std::vector<std::vector<double>>& ensemble_series, double q_lo = 0.1,
                            double q_hi = 0.9);

// mean one-step ELBO over every consecutive test pair
template <class Model>
double test_elbo(const Model& model, const std::vector<TrajectoryData<typename Model::State>>& data,
                 std::uint64_t seed) {
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t ti = 0; ti < data.size(); ++ti) {
        const auto& frames = data[ti].frames;
        for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
            Rng rng(derive_seed(seed, {0x7e57e1b0ULL, static_cast<std::uint64_t>(ti), static_cast<std::uint64_t>(t)}));
            total += model.one_step_elbo_value(frames[t], frames[t + 1], rng);
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

} // namespace epns
