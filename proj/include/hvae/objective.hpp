#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvae/graph.hpp"
#include "hvae/tensor.hpp"

namespace hvae::objective {

enum class Branch { RECON, KL };
enum class ObjectiveKind { EQ2_LITERAL, GATED_ADDITIVE };

inline ObjectiveKind objective_from_string(const std::string& s) {
    if (s == "eq2_literal") return ObjectiveKind::EQ2_LITERAL;
    if (s == "gated_additive") return ObjectiveKind::GATED_ADDITIVE;
    throw std::invalid_argument("objective must be eq2_literal or gated_additive");
}

inline std::string to_string(ObjectiveKind k) {
    return k == ObjectiveKind::EQ2_LITERAL ? "eq2_literal" : "gated_additive";
}

struct LossBreakdown {
    double recon_nll = 0;
    std::array<double, 3> layer_kl{0, 0, 0};
    double kl_max = 0;
    int kl_max_level = 1;  // 1-based; ties resolved to the lowest level
    Branch selected_branch = Branch::RECON;
    double total_loss = 0;
    double alpha = 0;
    double beta = 0;
};

// KL( N(mq, diag sq^2) || N(mp, diag sp^2) ), closed form.
inline double kl_diag_gauss(const std::vector<double>& mq, const std::vector<double>& sq,
                            const std::vector<double>& mp, const std::vector<double>& sp) {
    if (mq.size() != sq.size() || mq.size() != mp.size() || mq.size() != sp.size())
        throw std::invalid_argument("kl_diag_gauss: dimension mismatch");
    double kl = 0;
    for (size_t i = 0; i < mq.size(); ++i) {
        if (sq[i] <= 0 || sp[i] <= 0) throw std::domain_error("kl_diag_gauss: nonpositive std");
        const double dm = mq[i] - mp[i];
        kl += std::log(sp[i] / sq[i]) + (sq[i] * sq[i] + dm * dm) / (2 * sp[i] * sp[i]) - 0.5;
    }
    return kl;
}

inline int argmax_lowest(const std::array<double, 3>& kls) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (kls[i] > kls[best]) best = i;
    return best;  // strict '>' keeps the lowest index on ties
}

// Value-level objective bookkeeping shared by both objective readings.
inline LossBreakdown mobile_threshold_loss(double recon_nll, const std::array<double, 3>& kls,
                                           double alpha, double beta,
                                           ObjectiveKind kind = ObjectiveKind::EQ2_LITERAL) {
    if (recon_nll < 0) throw std::domain_error("mobile_threshold_loss: negative recon_nll");
    if (alpha < 0 || alpha > 1) throw std::domain_error("mobile_threshold_loss: alpha not in [0,1]");
    if (beta <= 0) throw std::domain_error("mobile_threshold_loss: beta must be positive");
    for (double k : kls)
        if (k < 0) throw std::domain_error("mobile_threshold_loss: negative KL");
    LossBreakdown out;
    out.recon_nll = recon_nll;
    out.layer_kl = kls;
    out.kl_max_level = argmax_lowest(kls) + 1;
    out.kl_max = kls[out.kl_max_level - 1];
    out.alpha = alpha;
    out.beta = beta;
    const double threshold = alpha * beta * out.kl_max;
    if (alpha == 0) {  // warmup: pure reconstruction
        out.selected_branch = Branch::RECON;
        out.total_loss = recon_nll;
        return out;
    }
    if (kind == ObjectiveKind::EQ2_LITERAL) {
        // max(-recon, -alpha*beta*kl_max) as a loss: min of the two quantities,
        // gradient through the selected branch only.
        if (threshold > recon_nll) {
            out.selected_branch = Branch::RECON;
            out.total_loss = recon_nll;
        } else {
            out.selected_branch = Branch::KL;
            out.total_loss = threshold;
        }
    } else {
        // KL penalized only above the mobile threshold.
        if (threshold >= recon_nll) {
            out.selected_branch = Branch::KL;
            out.total_loss = recon_nll + threshold;
        } else {
            out.selected_branch = Branch::RECON;
            out.total_loss = recon_nll;
        }
    }
    return out;
}

// Graph-level counterpart: same branch rule, but returns a loss node wired so
// that gradient flows only where the selected reading allows.
template <typename T>
typename Graph<T>::Ref mobile_threshold_loss_graph(Graph<T>& g, typename Graph<T>::Ref recon,
                                                   const std::array<typename Graph<T>::Ref, 3>& kls,
                                                   double alpha, double beta, ObjectiveKind kind,
                                                   LossBreakdown* breakdown = nullptr) {
    std::array<double, 3> kv{g.val(kls[0]).v[0], g.val(kls[1]).v[0], g.val(kls[2]).v[0]};
    LossBreakdown b =
        mobile_threshold_loss(g.val(recon).v[0], kv, alpha, beta, kind);
    typename Graph<T>::Ref loss;
    const auto kl_sel = kls[b.kl_max_level - 1];
    if (b.alpha == 0) {
        loss = recon;
    } else if (kind == ObjectiveKind::EQ2_LITERAL) {
        loss = b.selected_branch == Branch::RECON
                   ? recon
                   : g.scale(kl_sel, static_cast<T>(alpha * beta));
    } else {
        loss = b.selected_branch == Branch::KL
                   ? g.add(recon, g.scale(kl_sel, static_cast<T>(alpha * beta)))
                   : recon;
    }
    if (breakdown) *breakdown = b;
    return loss;
}

// Eq. 1 bound: -recon_nll - sum of layer KLs. Used for perplexity only.
inline double elbo(double recon_nll, const std::array<double, 3>& kls) {
    return -recon_nll - (kls[0] + kls[1] + kls[2]);
}

// Appendix A schedule: 3000-step pure reconstruction, 3000-step linear KL
// annealing, beta 6 -> 3 decremented on perplexity plateau.
struct ScheduleState {
    long step = 0;
    double beta = 6;
    std::vector<std::pair<long, double>> perplexity_history;  // (epoch, value)
    long warmup_steps = 3000;
    long anneal_steps = 3000;
    double beta_start = 6;
    double beta_floor = 3;
};

double alpha_at(const ScheduleState& state);

// Appends the new perplexity, decrements beta by 1 on plateau (never below the
// floor) and returns true when the halt condition fires.
bool update_beta(ScheduleState& state, long epoch, double new_perplexity);

}  // namespace hvae::objective
