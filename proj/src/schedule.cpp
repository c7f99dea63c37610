#include "hvae/objective.hpp"

namespace hvae::objective {

double alpha_at(const ScheduleState& state) {
    if (state.step < state.warmup_steps) return 0.0;
    if (state.anneal_steps <= 0) return 1.0;
    const double a = static_cast<double>(state.step - state.warmup_steps) / state.anneal_steps;
    return a < 1.0 ? a : 1.0;
}

bool update_beta(ScheduleState& state, long epoch, double new_perplexity) {
    const bool plateau = !state.perplexity_history.empty() &&
                         new_perplexity >= state.perplexity_history.back().second;
    state.perplexity_history.emplace_back(epoch, new_perplexity);
    if (!plateau) return false;
    if (state.beta <= state.beta_floor) return true;  // halt: beta at floor and not improving
    state.beta -= 1;
    return false;
}

}  // namespace hvae::objective
