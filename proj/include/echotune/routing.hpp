#pragma once

#include <cstdint>

#include "echotune/rng.hpp"

namespace echotune {

// Linearly decaying step-level Bernoulli schedule for the echo path.
struct RoutingSchedule {
    double p_start = 1.0;
    double p_end = 0.2;
    int total_steps = 1;
    uint64_t seed = 0;

    void validate() const; // ConfigError when 0 <= p_end <= p_start <= 1 or K >= 1 fails
};

// p_k as a convex combination, so both endpoints are exact in f64.
double routing_prob(int k, const RoutingSchedule& s);

// One Bernoulli draw per training step from a dedicated stream; all target
// modules within the step share the result.
class RouteSampler {
public:
    explicit RouteSampler(const RoutingSchedule& s);

    double prob(int k) const { return routing_prob(k, schedule_); }
    int sample(int k);

private:
    RoutingSchedule schedule_;
    DetRng rng_;
};

} // namespace echotune
