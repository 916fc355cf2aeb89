#include "selftest.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "hcseg/clustering.hpp"
#include "hcseg/config.hpp"
#include "hcseg/decoder.hpp"
#include "hcseg/losses.hpp"
#include "hcseg/metrics.hpp"
#include "hcseg/netpbm.hpp"
#include "oracles.hpp"

namespace hcseg {

namespace {

using Check = std::function<std::string()>; // empty string = pass

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

std::string fail(const std::string& what, double value) {
    std::ostringstream os;
    os << what << " = " << value;
    return os.str();
}

std::string local_vs_dense() {
    std::mt19937_64 rng(11);
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
        const GridShape coarse{1 + rng() % 6, 1 + rng() % 6};
        const GridShape fine{coarse.height * 2, coarse.width * 2};
        const Tensor q = oracle::random_unit_columns(rng, 4, fine.size());
        const Tensor k = oracle::random_unit_columns(rng, 4, coarse.size());
        const double s = 0.05 + 0.5 * double(rng() % 100) / 100.0;
        std::vector<std::uint8_t> m(fine.size() * coarse.size());
        for (std::size_t n = 0; n < fine.size(); ++n)
            for (std::size_t c = 0; c < coarse.size(); ++c) m[n * coarse.size() + c] = oracle::in_window(n, c, fine, coarse);
        const Tensor dense = masked_softmax_rows(scale(matmul_tn(q, k), 1.0 / s), m);
        const Tensor local = compute_assignment_local(q, k, s, fine, coarse, 0).to_dense();
        worst = std::max(worst, max_abs_diff(dense, local));
    }
    return worst <= 1e-10 ? "" : fail("max abs diff", worst);
}

std::string decode_conserves_rows() {
    std::mt19937_64 rng(12);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        std::vector<AssignmentMatrix> chain;
        GridShape g{8, 8};
        for (int i = 0; i < 3; ++i) {
            const GridShape c{g.height / 2, g.width / 2};
            const Tensor q = oracle::random_unit_columns(rng, 3, g.size());
            const Tensor k = oracle::random_unit_columns(rng, 3, c.size());
            chain.push_back(compute_assignment_local(q, k, Tensor::scalar(0.2), g, c, i));
            g = c;
        }
        MaskStack coarse;
        coarse.level = 3;
        coarse.grid = g;
        coarse.semantics = MaskSemantics::class_probabilities;
        coarse.values = softmax_rows(oracle::random_tensor(rng, {g.size(), 4}, -2, 2), 1.0);
        const MaskStack full = decode_full(chain, coarse);
        for (std::size_t n = 0; n < full.pixels(); ++n) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 4; ++c) sum += full.values[n * 4 + c];
            worst = std::max(worst, std::fabs(sum - 1.0));
        }
    }
    return worst <= 1e-6 ? "" : fail("max row-sum deviation", worst);
}

std::string hungarian_vs_brute_force() {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 300; ++t) {
        const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 5;
        const Tensor cost = oracle::random_tensor(rng, {r, c}, -1, 1);
        const double want = oracle::brute_force_min_cost(oracle::to_matrix(cost));
        const double got = hungarian_match(cost).total_cost;
        if (std::fabs(want - got) > 1e-12) return fail("cost gap", got - want);
    }
    return "";
}

std::string metrics_vs_oracles() {
    std::mt19937_64 rng(14);
    for (int t = 0; t < 30; ++t) {
        const LabelMap p = oracle::random_labels(rng, 6, 6, 4), g = oracle::random_labels(rng, 6, 6, 3);
        const double ue = undersegmentation_error(p, g).error;
        if (std::fabs(ue - oracle::ue(p, g, UeVariant::min_side)) > 1e-12) return fail("ue gap", ue);
        const double mi = miou(p, g, 4).mean_iou;
        if (std::fabs(mi - oracle::miou(p, g, 4)) > 1e-12) return fail("miou gap", mi);
        const LabelMap pi = oracle::random_labels(rng, 6, 6, 2), gi = oracle::random_labels(rng, 6, 6, 2);
        const double pq = panoptic_quality(p, pi, g, gi, 4, 4).pq;
        if (std::fabs(pq - oracle::pq(p, pi, g, gi, 4, 4).pq) > 1e-12) return fail("pq gap", pq);
    }
    return "";
}

std::string netpbm_round_trip() {
    std::mt19937_64 rng(15);
    for (int t = 0; t < 20; ++t) {
        const LabelMap l = oracle::random_labels(rng, 1 + rng() % 8, 1 + rng() % 8, t % 2 ? 65536 : 256);
        if (!(parse_pgm(encode_pgm(l)) == l)) return "label map changed in round trip";
    }
    return "";
}

std::string op_gradients() {
    std::mt19937_64 rng(16);
    const GridShape fine{4, 4}, coarse{2, 2};
    const Tensor k = oracle::random_unit_columns(rng, 3, coarse.size());
    const Tensor x = oracle::random_unit_columns(rng, 3, fine.size());
    const double err = oracle::gradient_error(
        [&](const Tensor& q) {
            const AssignmentMatrix a = compute_assignment_local(q, k, Tensor::scalar(0.3), fine, coarse, 0);
            return sum(mul(a.weights, a.weights));
        },
        x);
    return err <= 1e-5 ? "" : fail("relative error", err);
}

std::string config_round_trip() {
    RunConfig c = default_run_config();
    c.apply_seed(42);
    const RunConfig back = run_config_from_json(to_json(c));
    return to_json(back).dump() == to_json(c).dump() ? "" : "config changed in round trip";
}

} // namespace

std::vector<SelftestCheck> run_selftest() {
    const std::vector<std::pair<std::string, Check>> checks = {
        {"local assignment equals masked dense", local_vs_dense},
        {"decoded class rows sum to one", decode_conserves_rows},
        {"hungarian equals exhaustive search", hungarian_vs_brute_force},
        {"metrics equal counting oracles", metrics_vs_oracles},
        {"netpbm round trip", netpbm_round_trip},
        {"assignment gradient equals finite differences", op_gradients},
        {"config round trip", config_round_trip},
    };
    std::vector<SelftestCheck> out;
    for (const auto& [name, fn] : checks) {
        SelftestCheck c{name};
        try {
            c.detail = fn();
            c.pass = c.detail.empty();
        } catch (const std::exception& e) {
            c.detail = std::string("exception: ") + e.what();
        }
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace hcseg
