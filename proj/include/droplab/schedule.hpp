#pragma once

#include <cstdint>
#include <string>

#include "droplab/error.hpp"

namespace droplab {

enum class ScheduleKind {
    constant,
    linear,
    linear_early,
    stepped_early,
    stepped_late,
    triangular,
    annealed_deterministic,
};

enum class ScheduleDirection { increasing, decreasing };

std::string to_string(ScheduleKind kind);
std::string to_string(ScheduleDirection direction);
ScheduleKind schedule_kind_from_string(const std::string& name);
ScheduleDirection schedule_direction_from_string(const std::string& name);

// A dropout schedule is a pure function of the iteration index. The ratio is
// always within [0, p_base] and is continuous except at stepped cutoffs.
//
// For the annealed deterministic curriculum the ratio reported is the
// fraction of units currently disabled, which starts at 1 and reaches 0 at
// cutoff_iter; p_base is therefore required to be exactly 1 for that kind.
struct DropoutSchedule {
    ScheduleKind kind = ScheduleKind::constant;
    double p_base = 0.1;
    ScheduleDirection direction = ScheduleDirection::decreasing; // linear kinds
    int64_t cutoff_iter = 0; // stepped/linear_early/annealed kinds
    int64_t cycles = 3;      // triangular
    int64_t total_iters = 30000;

    void validate() const; // throws ConfigError
    bool uses_direction() const;
    bool uses_cutoff() const;
    bool uses_cycles() const;
};

// Dropout ratio at iteration t, 0 <= t <= total_iters. DomainError outside.
double schedule_ratio(const DropoutSchedule& schedule, int64_t t);

} // namespace droplab
