#include "droplab/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace droplab {

std::string to_string(ScheduleKind kind) {
    switch (kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::linear_early: return "linear_early";
    case ScheduleKind::stepped_early: return "stepped_early";
    case ScheduleKind::stepped_late: return "stepped_late";
    case ScheduleKind::triangular: return "triangular";
    case ScheduleKind::annealed_deterministic: return "annealed_deterministic";
    }
    return "?";
}

std::string to_string(ScheduleDirection direction) {
    return direction == ScheduleDirection::increasing ? "increasing" : "decreasing";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
    if (name == "constant") return ScheduleKind::constant;
    if (name == "linear") return ScheduleKind::linear;
    if (name == "linear_early") return ScheduleKind::linear_early;
    if (name == "stepped_early") return ScheduleKind::stepped_early;
    if (name == "stepped_late") return ScheduleKind::stepped_late;
    if (name == "triangular") return ScheduleKind::triangular;
    if (name == "annealed_deterministic") return ScheduleKind::annealed_deterministic;
    throw ConfigError("schedule.kind: unknown kind '" + name + "'");
}

ScheduleDirection schedule_direction_from_string(const std::string& name) {
    if (name == "increasing") return ScheduleDirection::increasing;
    if (name == "decreasing") return ScheduleDirection::decreasing;
    throw ConfigError("schedule.direction: unknown direction '" + name + "'");
}

bool DropoutSchedule::uses_direction() const {
    return kind == ScheduleKind::linear || kind == ScheduleKind::linear_early;
}

bool DropoutSchedule::uses_cutoff() const {
    return kind == ScheduleKind::stepped_early || kind == ScheduleKind::stepped_late ||
           kind == ScheduleKind::linear_early || kind == ScheduleKind::annealed_deterministic;
}

bool DropoutSchedule::uses_cycles() const { return kind == ScheduleKind::triangular; }

void DropoutSchedule::validate() const {
    if (total_iters <= 0) throw ConfigError("schedule.total_iters must be positive");
    if (kind == ScheduleKind::annealed_deterministic) {
        if (p_base != 1.0) {
            throw ConfigError("schedule.p_base: the annealed deterministic curriculum spans the "
                              "full unit range; p_base must be exactly 1");
        }
    } else if (!(p_base >= 0.0 && p_base < 1.0)) {
        throw ConfigError("schedule.p_base must lie in [0, 1), got " + std::to_string(p_base));
    }
    if (uses_cutoff()) {
        if (cutoff_iter <= 0) {
            throw ConfigError("schedule.cutoff_iter must be positive for kind '" +
                              to_string(kind) + "'");
        }
        if (cutoff_iter > total_iters) {
            throw ConfigError("schedule.cutoff_iter " + std::to_string(cutoff_iter) +
                              " exceeds total_iters " + std::to_string(total_iters));
        }
    }
    if (uses_cycles() && cycles <= 0) {
        throw ConfigError("schedule.cycles must be positive for kind 'triangular'");
    }
}

double schedule_ratio(const DropoutSchedule& s, int64_t t) {
    if (t < 0 || t > s.total_iters) {
        throw DomainError("schedule_ratio: iteration " + std::to_string(t) + " outside [0, " +
                          std::to_string(s.total_iters) + "]");
    }
    const double td = static_cast<double>(t);
    switch (s.kind) {
    case ScheduleKind::constant:
        return s.p_base;
    case ScheduleKind::stepped_early:
        return t < s.cutoff_iter ? s.p_base : 0.0;
    case ScheduleKind::stepped_late:
        return t < s.cutoff_iter ? 0.0 : s.p_base;
    case ScheduleKind::linear: {
        const double frac = td / static_cast<double>(s.total_iters);
        return s.direction == ScheduleDirection::decreasing ? s.p_base * (1.0 - frac)
                                                            : s.p_base * frac;
    }
    case ScheduleKind::linear_early: {
        const double frac = td / static_cast<double>(s.cutoff_iter);
        return s.direction == ScheduleDirection::decreasing
                   ? s.p_base * std::max(0.0, 1.0 - frac)
                   : s.p_base * std::min(1.0, frac);
    }
    case ScheduleKind::triangular: {
        // Each of the `cycles` equal-length cycles rises 0 -> p_base over its
        // first half and falls back to 0 over the second.
        const double period = static_cast<double>(s.total_iters) / static_cast<double>(s.cycles);
        const double u = std::fmod(td, period) / period;
        return s.p_base * (u <= 0.5 ? 2.0 * u : 2.0 * (1.0 - u));
    }
    case ScheduleKind::annealed_deterministic: {
        // Reported ratio = fraction of units still disabled (p_base == 1).
        const double frac = td / static_cast<double>(s.cutoff_iter);
        return s.p_base * std::max(0.0, 1.0 - frac);
    }
    }
    throw StateError("schedule_ratio: unreachable");
}

} // namespace droplab
