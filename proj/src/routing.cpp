#include "echotune/routing.hpp"

#include <string>

#include "echotune/error.hpp"

namespace echotune {

void RoutingSchedule::validate() const {
    if (total_steps < 1) {
        throw ConfigError("routing schedule needs at least one step, got " + std::to_string(total_steps));
    }
    if (!(0.0 <= p_end && p_end <= p_start && p_start <= 1.0)) {
        throw ConfigError("routing probabilities must satisfy 0 <= p_end <= p_start <= 1, got p_start=" +
                          std::to_string(p_start) + ", p_end=" + std::to_string(p_end));
    }
}

double routing_prob(int k, const RoutingSchedule& s) {
    s.validate();
    if (k < 0 || k >= s.total_steps) {
        throw UsageError("routing step " + std::to_string(k) + " outside [0, " +
                         std::to_string(s.total_steps) + ")");
    }
    if (s.total_steps == 1) return s.p_start;
    const double w = static_cast<double>(k) / static_cast<double>(s.total_steps - 1);
    return s.p_start * (1.0 - w) + s.p_end * w;
}

RouteSampler::RouteSampler(const RoutingSchedule& s) : schedule_(s), rng_(s.seed) {
    schedule_.validate();
}

int RouteSampler::sample(int k) {
    const double p = routing_prob(k, schedule_);
    return rng_.uniform() < p ? 1 : 0;
}

} // namespace echotune
