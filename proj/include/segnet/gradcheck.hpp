#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "segnet/params.hpp"
#include "segnet/tensor.hpp"

namespace segnet {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tol = 1e-4;
    bool passed = false;

    std::string summary() const {
        std::ostringstream os;
        os << (passed ? "PASS" : "FAIL") << " tol=" << tol << "\n";
        for (const auto& e : entries) {
            os << "  " << e.name << " max_rel_err=" << e.max_rel_err;
            if (!e.finite) os << " NON-FINITE";
            os << "\n";
        }
        return os.str();
    }
};

// Central-difference gradient verification. `f` must be a pure scalar
// function of the given parameters (evaluation-style forward: no dropout,
// no running-statistic updates). The numeric side only ever calls the
// forward path, so it is independent of the backward implementation it
// checks. Relative error uses max(|analytic|, |numeric|, floor) as the
// denominator; the floor keeps finite-difference noise on near-zero
// gradients from reading as a relative failure.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  const std::vector<Parameter*>& params,
                                  double h = 1e-6, double tol = 1e-4,
                                  double denom_floor = 1e-2) {
    GradCheckReport report;
    report.tol = tol;

    for (Parameter* p : params) p->array.zero_grad();
    Tensor loss = f();
    loss.backward();

    std::vector<std::vector<Real>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->array.grad());

    bool all_pass = true;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        GradCheckEntry entry;
        entry.name = p->name;
        auto& vals = p->array.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const Real orig = vals[i];
            double fp, fm;
            {
                NoGradGuard ng;
                vals[i] = orig + static_cast<Real>(h);
                fp = static_cast<double>(f().item());
                vals[i] = orig - static_cast<Real>(h);
                fm = static_cast<double>(f().item());
                vals[i] = orig;
            }
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                entry.finite = false;
                entry.worst_index = i;
                break;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = static_cast<double>(analytic[pi][i]);
            const double abs_err = std::abs(a - numeric);
            const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
            const double rel = abs_err / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
            entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
        }
        if (!entry.finite || entry.max_rel_err >= tol) all_pass = false;
        report.entries.push_back(std::move(entry));
    }
    report.passed = all_pass;
    return report;
}

} // namespace segnet
