#include <doctest.h>

#include <cmath>

#include "echotune/error.hpp"
#include "echotune/routing.hpp"

using namespace echotune;

TEST_SUITE("routing") {

TEST_CASE("linear decay endpoints and midpoint") {
    RoutingSchedule s{1.0, 0.2, 11, 0};
    CHECK(routing_prob(0, s) == 1.0);
    CHECK(routing_prob(10, s) == 0.2);
    CHECK(std::abs(routing_prob(5, s) - 0.6) < 1e-12);

    RoutingSchedule one{0.7, 0.1, 1, 0};
    CHECK(routing_prob(0, one) == 0.7);
}

TEST_CASE("probability is monotone non-increasing") {
    RoutingSchedule s{0.9, 0.3, 257, 0};
    double prev = routing_prob(0, s);
    for (int k = 1; k < s.total_steps; ++k) {
        const double p = routing_prob(k, s);
        CHECK(p <= prev + 1e-15);
        prev = p;
    }
}

TEST_CASE("out-of-range step and invalid schedules") {
    RoutingSchedule s{1.0, 0.2, 10, 0};
    CHECK_THROWS_AS(routing_prob(10, s), UsageError);
    CHECK_THROWS_AS(routing_prob(-1, s), UsageError);

    RoutingSchedule bad{0.2, 1.0, 10, 0}; // p_end > p_start
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    RoutingSchedule bad2{1.0, 0.2, 0, 0};
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("degenerate Bernoulli draws") {
    RoutingSchedule always{1.0, 1.0, 100, 3};
    RouteSampler a(always);
    for (int k = 0; k < 100; ++k) CHECK(a.sample(k) == 1);

    RoutingSchedule never{0.0, 0.0, 100, 3};
    RouteSampler n(never);
    for (int k = 0; k < 100; ++k) CHECK(n.sample(k) == 0);
}

TEST_CASE("empirical mean over the default schedule") {
    const int steps = 10000;
    RoutingSchedule s{1.0, 0.2, steps, 12345};
    RouteSampler sampler(s);
    int on = 0;
    for (int k = 0; k < steps; ++k) on += sampler.sample(k);
    const double mean = static_cast<double>(on) / steps;
    CHECK(mean > 0.58);
    CHECK(mean < 0.62);
}

TEST_CASE("same seed gives the identical routing sequence") {
    RoutingSchedule s{0.8, 0.2, 500, 777};
    RouteSampler a(s), b(s);
    for (int k = 0; k < s.total_steps; ++k) CHECK(a.sample(k) == b.sample(k));
}

} // TEST_SUITE
