#include "spectra/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "spectra/ops.hpp"
#include "spectra/rng.hpp"

namespace spectra {

namespace {

struct ReluFreezeGuard {
    ReluFreezeGuard() { ops::relu_freeze_capture(); }
    ~ReluFreezeGuard() { ops::relu_freeze_off(); }
};

}  // namespace

GradCheckResult finite_difference_check(
    const std::function<Tensor(Tape&)>& program,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    int samples_per_param, std::uint64_t seed) {
    if (!(h > 0.0) || h > 1e-2) {
        throw std::invalid_argument("finite_difference_check: h must be in (0, 1e-2]");
    }
    if (samples_per_param < 1) {
        throw std::invalid_argument("finite_difference_check: samples_per_param must be positive");
    }

    ReluFreezeGuard freeze;  // reference run captures the relu masks

    Tape ref_tape;
    Tensor loss = program(ref_tape);
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("finite_difference_check: program must return a scalar");
    }
    const double base = loss.value();

    auto evaluate = [&program]() {
        ops::relu_freeze_replay();
        Tape t(false);
        Tensor l = program(t);
        if (!l.defined() || l.size() != 1) {
            throw std::invalid_argument("finite_difference_check: program must return a scalar");
        }
        return l.value();
    };

    const double repeat = evaluate();
    if (repeat != base) {  // bitwise: any drift means the program is impure
        throw std::runtime_error("finite_difference_check: non-deterministic program detected");
    }

    for (const auto& entry : params) {
        Tensor p = entry.second;  // handles share storage
        p.zero_grad();
    }
    if (ref_tape.owns(loss)) {
        ref_tape.backward(loss);
    }

    GradCheckResult result;
    Rng rng(mix_seed(seed, 0x6fd1u));
    for (const auto& entry : params) {
        const std::string& name = entry.first;
        Tensor p = entry.second;
        auto& values = p.data();
        const std::int64_t n = p.size();
        std::vector<std::int64_t> coords;
        if (n <= samples_per_param) {
            for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            coords = rng.sample_without_replacement(n, samples_per_param);
            std::sort(coords.begin(), coords.end());
        }
        double worst = 0.0;
        for (std::int64_t c : coords) {
            const auto idx = static_cast<std::size_t>(c);
            const double saved = values[idx];
            values[idx] = saved + h;
            const double up = evaluate();
            values[idx] = saved - h;
            const double down = evaluate();
            values[idx] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
            const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            worst = std::max(worst, err);
        }
        result.per_param.emplace_back(name, worst);
        if (worst > result.max_rel_err) {
            result.max_rel_err = worst;
            result.worst_param = name;
        }
    }
    return result;
}

}  // namespace spectra
