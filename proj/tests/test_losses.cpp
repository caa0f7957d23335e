#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dsp/log.hpp"
#include "dsp/losses.hpp"
#include "dsp/model.hpp"
#include "test_util.hpp"

using namespace dsp;
using dsp::test::gradient_error;
using dsp::test::kGradInstances;
using dsp::test::kGradTol;
using dsp::test::random_tensor;

namespace {

struct QuietLog {
    log::Level prev = log::level();
    QuietLog() { log::set_level(log::Level::Quiet); }
    ~QuietLog() { log::set_level(prev); }
};

LabelMap random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t classes, double ignore = 0.0) {
    LabelMap l(h, w);
    for (auto& v : l.data) v = rng.bernoulli(ignore) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.index(classes));
    return l;
}

PasteMask random_mask(Rng& rng, std::size_t h, std::size_t w, double beta) {
    PasteMask m(h, w, beta);
    for (auto& s : m.support) s = rng.bernoulli(0.5) ? 1 : 0;
    return m;
}

Tensor log_probs_of(const Tensor& logits) {
    Tape t;
    return log_softmax(t, logits).detach();
}

// Scalar-loop cross entropy from raw logits.
double ce(const Tensor& logits, std::size_t pixel, std::uint8_t y) {
    const std::size_t C = logits.dim(2);
    double mx = -1e300;
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits[pixel * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[pixel * C + c] - mx);
    return -(logits[pixel * C + y] - mx - std::log(z));
}

double seg_oracle(const Tensor& logits, const LabelMap& y) {
    double s = 0.0;
    int n = 0;
    for (std::size_t p = 0; p < y.pixels(); ++p) {
        if (y.data[p] == kIgnoreLabel) continue;
        s += ce(logits, p, y.data[p]);
        ++n;
    }
    return n ? s / n : 0.0;
}

double pair_oracle(const Tensor& logits, const LabelMap& paste, const LabelMap& base, const PasteMask& m) {
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < paste.pixels(); ++p) {
        const double w = m.support[p] ? m.beta : 0.0;
        if (paste.data[p] != kIgnoreLabel) {
            num += w * ce(logits, p, paste.data[p]);
            den += w;
        }
        if (base.data[p] != kIgnoreLabel) {
            num += (1 - w) * ce(logits, p, base.data[p]);
            den += 1 - w;
        }
    }
    return den > 0 ? num / den : 0.0;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
    const std::size_t F = t.shape().back(), n = t.size() / F;
    std::vector<std::vector<double>> r(n, std::vector<double>(F));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < F; ++f) r[i][f] = t[i * F + f];
    return r;
}

double sqdist(const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t f = 0; f < x.size(); ++f) s += (x[f] - y[f]) * (x[f] - y[f]);
    return s;
}

// Independent biased MMD^2 with a sorted-median bandwidth.
double mmd_oracle(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                  std::optional<double> bw) {
    std::vector<std::vector<double>> pool = a;
    pool.insert(pool.end(), b.begin(), b.end());
    double s2;
    if (bw) {
        s2 = *bw * *bw;
    } else {
        std::vector<double> d;
        for (std::size_t i = 0; i < pool.size(); ++i)
            for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(sqdist(pool[i], pool[j]));
        std::sort(d.begin(), d.end());
        const std::size_t n = d.size();
        s2 = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
    }
    auto k = [&](const auto& x, const auto& y) { return std::exp(-sqdist(x, y) / (2 * s2)); };
    auto mean_k = [&](const auto& X, const auto& Y) {
        double s = 0.0;
        for (const auto& x : X)
            for (const auto& y : Y) s += k(x, y);
        return s / static_cast<double>(X.size() * Y.size());
    };
    return std::max(0.0, mean_k(a, a) + mean_k(b, b) - 2 * mean_k(a, b));
}

// The median bandwidth is piecewise smooth: it kinks where two pairwise
// distances swap places around the median. FD instances keep the order
// statistics it reads separated from their neighbours, like relu inputs
// are kept away from zero.
bool median_separated(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                      double gap = 1e-3) {
    std::vector<std::vector<double>> pool = a;
    pool.insert(pool.end(), b.begin(), b.end());
    std::vector<double> d;
    for (std::size_t i = 0; i < pool.size(); ++i)
        for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(sqdist(pool[i], pool[j]));
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    if (n < 2) return true;
    const std::size_t lo = (n - 1) / 2, hi = n / 2;
    if (lo > 0 && d[lo] - d[lo - 1] < gap) return false;
    if (hi + 1 < n && d[hi + 1] - d[hi] < gap) return false;
    return lo == hi || d[hi] - d[lo] >= gap;
}

// Feature-alignment FD inputs: both pooled sample sets must be separated.
bool alignment_separated(const Tensor& fps, const Tensor& fpt, const PasteMask& m) {
    const auto ra = rows_of(fps), rb = rows_of(fpt);
    const std::size_t factor = m.height / fps.dim(0);
    const auto pooled = pool_mask(m, factor);
    std::vector<std::vector<double>> pa, pb;
    for (std::size_t c = 0; c < pooled.size(); ++c) {
        if (pooled[c] <= 0) continue;
        pa.push_back(ra[c]);
        pb.push_back(rb[c]);
        for (auto& x : pa.back()) x *= pooled[c];
        for (auto& x : pb.back()) x *= pooled[c];
    }
    return median_separated(ra, rb) && median_separated(pa, pb);
}

}  // namespace

// --- cross entropy -----------------------------------------------------------

TEST_CASE("seg_loss matches a scalar-loop oracle") {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const Tensor logits = random_tensor(rng, {4, 4, 8}, -3, 3, false);
        const LabelMap y = random_labels(rng, 4, 4, 8, 0.2);
        Tape t;
        CHECK(std::abs(seg_loss(t, log_probs_of(logits), y).item() - seg_oracle(logits, y)) < 1e-12);
    }
}

TEST_CASE("seg_loss endpoints") {
    Tape t;
    const Tensor uniform = log_probs_of(Tensor::zeros({2, 2, 8}));
    CHECK(std::abs(seg_loss(t, uniform, LabelMap(2, 2, 3)).item() - std::log(8.0)) < 1e-14);

    // Probability 1 - 1e-9 on the true class: loss is -log1p(-1e-9) = 1e-9 + O(1e-18).
    Tensor certain = Tensor::full({2, 2, 8}, std::log(1e-9 / 7));
    for (std::size_t p = 0; p < 4; ++p) certain.mutable_data()[p * 8 + 5] = std::log1p(-1e-9);
    CHECK(std::abs(seg_loss(t, certain, LabelMap(2, 2, 5)).item() - 1e-9) < 1e-17);

    QuietLog q;
    CHECK(seg_loss(t, uniform, LabelMap(2, 2, kIgnoreLabel)).item() == 0.0);
}

TEST_CASE("soft losses match a scalar-loop oracle") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        const Tensor logits = random_tensor(rng, {4, 4, 5}, -3, 3, false);
        const Tensor lp = log_probs_of(logits);
        const LabelMap yp = random_labels(rng, 4, 4, 5, 0.1);
        const LabelMap ys = random_labels(rng, 4, 4, 5, 0.1);
        const PasteMask m = random_mask(rng, 4, 4, rng.uniform(0, 1));
        Tape t;
        CHECK(std::abs(seg_soft_loss(t, lp, yp, ys, m).item() - pair_oracle(logits, yp, ys, m)) < 1e-12);
        CHECK(std::abs(consistency_loss(t, lp, yp, ys, m).item() - pair_oracle(logits, yp, ys, m)) < 1e-12);
    }
}

TEST_CASE("soft loss mask endpoints are exact") {
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        const Tensor lp = log_probs_of(random_tensor(rng, {4, 4, 6}, -3, 3, false));
        const LabelMap yp = random_labels(rng, 4, 4, 6);
        const LabelMap ys = random_labels(rng, 4, 4, 6);
        Tape t;
        PasteMask zero(4, 4, 0.8);
        CHECK(std::abs(seg_soft_loss(t, lp, yp, ys, zero).item() - seg_loss(t, lp, ys).item()) < 1e-12);
        CHECK(std::abs(consistency_loss(t, lp, yp, ys, zero).item() - seg_loss(t, lp, ys).item()) < 1e-12);
        PasteMask full(4, 4, 1.0);
        std::fill(full.support.begin(), full.support.end(), 1);
        CHECK(std::abs(seg_soft_loss(t, lp, yp, ys, full).item() - seg_loss(t, lp, yp).item()) < 1e-12);
        CHECK(std::abs(consistency_loss(t, lp, yp, ys, full).item() - seg_loss(t, lp, yp).item()) < 1e-12);

        // Continuity in beta.
        const PasteMask m = random_mask(rng, 4, 4, 0.3);
        double max_ce = 0.0;
        for (std::size_t p = 0; p < 16; ++p)
            max_ce = std::max({max_ce, -lp[p * 6 + yp.data[p]], -lp[p * 6 + ys.data[p]]});
        const double l1 = seg_soft_loss(t, lp, yp, ys, m).item();
        const double l2 = seg_soft_loss(t, lp, yp, ys, m.with_beta(0.7)).item();
        CHECK(std::abs(l1 - l2) <= max_ce * 0.4 + 1e-12);
    }
}

TEST_CASE("single pixel soft loss example") {
    // CE against class 0 is 1.0 and against class 1 is 2.0.
    const double a = -1.0, b = -2.0;
    const Tensor lp({1, 1, 3}, {a, b, std::log(1 - std::exp(a) - std::exp(b))});
    PasteMask m(1, 1, 0.8);
    m.support[0] = 1;
    Tape t;
    CHECK(std::abs(seg_soft_loss(t, lp, LabelMap(1, 1, 0), LabelMap(1, 1, 1), m).item() - 1.2) < 1e-12);
}

TEST_CASE("consistency at zero mask with argmax pseudo-labels is the mean self-CE") {
    Rng rng(4);
    const Tensor lp = log_probs_of(random_tensor(rng, {4, 4, 5}, -2, 2, false));
    const LabelMap hard = argmax_labels(lp);
    double self = 0.0;
    for (std::size_t p = 0; p < 16; ++p) self -= lp[p * 5 + hard.data[p]];
    Tape t;
    CHECK(std::abs(consistency_loss(t, lp, LabelMap(4, 4, 0), hard, PasteMask(4, 4, 0.8)).item() - self / 16) < 1e-12);
}

TEST_CASE("gradient check: seg, soft and consistency losses through log_softmax") {
    Rng rng(5);
    for (int i = 0; i < kGradInstances; ++i) {
        const LabelMap yp = random_labels(rng, 3, 3, 4, 0.1);
        const LabelMap ys = random_labels(rng, 3, 3, 4, 0.1);
        const PasteMask m = random_mask(rng, 3, 3, rng.uniform(0.1, 1.0));
        const double err = gradient_error(
            [&](Tape& t, const std::vector<Tensor>& v) {
                const Tensor lp = log_softmax(t, v[0]);
                return add(t, add(t, seg_loss(t, lp, ys), seg_soft_loss(t, lp, yp, ys, m)),
                           mul_scalar(t, consistency_loss(t, lp, yp, ys, m), 0.7));
            },
            {random_tensor(rng, {3, 3, 4}, -2, 2)});
        CHECK(err < kGradTol);
    }
}

// --- MMD ---------------------------------------------------------------------

TEST_CASE("mmd2 of a set with itself is zero") {
    Rng rng(6);
    for (int i = 0; i < 20; ++i) {
        const Tensor x = random_tensor(rng, {5 + static_cast<std::size_t>(i % 4), 3}, -1, 1, false);
        Tape t;
        CHECK(std::abs(mmd2(t, x, x).item()) <= 1e-10);
        CHECK(std::abs(mmd2(t, x, x, {0.5}).item()) <= 1e-10);
    }
}

TEST_CASE("mmd2 is exactly symmetric and non-negative") {
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
        const Tensor a = random_tensor(rng, {4, 3}, -1, 1, false);
        const Tensor b = random_tensor(rng, {3 + static_cast<std::size_t>(i % 3), 3}, -1, 1, false);
        Tape t;
        const double ab = mmd2(t, a, b).item(), ba = mmd2(t, b, a).item();
        CHECK(ab == ba);
        CHECK(ab >= 0.0);
        CHECK(mmd2(t, a, b, {0.7}).item() == mmd2(t, b, a, {0.7}).item());
        // Nearly identical sets: the clamp keeps fp noise non-negative.
        Tensor a2 = a.detach();
        a2.mutable_data()[0] += 1e-12;
        CHECK(mmd2(t, a, a2).item() >= 0.0);
    }
}

TEST_CASE("mmd2 matches a hand kernel-matrix oracle on 3-point sets") {
    // a = {(0,0), (1,0), (0,1)}, b = {(1,1), (2,1), (1,2)}, sigma = 1.
    const Tensor a({3, 2}, {0, 0, 1, 0, 0, 1});
    const Tensor b({3, 2}, {1, 1, 2, 1, 1, 2});
    // Within each set the squared distances are {1, 1, 2}; both sets are
    // translates so kaa == kbb.
    const double kaa = (3 + 2 * (2 * std::exp(-0.5) + std::exp(-1.0))) / 9;
    // Cross squared distances: a0-b: 2,5,5; a1-b: 1,2,4; a2-b: 1,4,2.
    const double kab = (std::exp(-1.0) + 2 * std::exp(-2.5) + 2 * (std::exp(-0.5) + std::exp(-1.0) + std::exp(-2.0))) / 9;
    const double expect = 2 * kaa - 2 * kab;
    Tape t;
    CHECK(std::abs(mmd2(t, a, b, {1.0}).item() - expect) < 1e-12);
    CHECK(std::abs(mmd_oracle(rows_of(a), rows_of(b), 1.0) - expect) < 1e-12);

    // Median heuristic against the sorted-median oracle.
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
        const Tensor x = random_tensor(rng, {3, 2}, -1, 1, false);
        const Tensor y = random_tensor(rng, {3, 2}, -1, 2, false);
        CHECK(std::abs(mmd2(t, x, y).item() - mmd_oracle(rows_of(x), rows_of(y), std::nullopt)) < 1e-12);
    }
}

TEST_CASE("median heuristic: even count averages, zero median falls back") {
    // Pairwise squared distances on a line at 0, 1, 3: {1, 9, 4} -> median 4.
    const Tensor a({2, 1}, {0, 1}), b({1, 1}, {3});
    CHECK(median_heuristic_sigma2(a, b) == 4.0);
    // Points 0, 1, 3, 7: distances {1, 9, 49, 4, 36, 16}, median (9 + 16) / 2.
    CHECK(median_heuristic_sigma2(Tensor({2, 1}, {0, 1}), Tensor({2, 1}, {3, 7})) == 12.5);
    // Three equal points and one other: distances {0, 0, 0, 4, 4, 4}, median 2.
    CHECK(median_heuristic_sigma2(Tensor({2, 1}, {1, 1}), Tensor({2, 1}, {1, 3})) == 2.0);
    // Four equal points and one other: median 0, mean positive distance is 4.
    CHECK(median_heuristic_sigma2(Tensor({3, 1}, {1, 1, 1}), Tensor({2, 1}, {1, 3})) == 4.0);
    CHECK(median_heuristic_sigma2(Tensor({2, 1}, {5, 5}), Tensor({2, 1}, {5, 5})) == 1.0);
}

TEST_CASE("mmd2 is zero only for equal multisets on small cases") {
    Tape t;
    const Tensor a({3, 1}, {0.1, 0.5, 0.9});
    CHECK(mmd2(t, a, Tensor({3, 1}, {0.9, 0.1, 0.5})).item() <= 1e-12);
    CHECK(mmd2(t, a, Tensor({3, 1}, {0.1, 0.5, 0.8})).item() > 1e-6);
    CHECK(mmd2(t, a, Tensor({2, 1}, {0.1, 0.5})).item() > 1e-6);
}

TEST_CASE("mmd2 of an empty set is zero") {
    QuietLog q;
    Tape t;
    CHECK(mmd2(t, Tensor(), Tensor({2, 2}, {1, 2, 3, 4})).item() == 0.0);
}

TEST_CASE("gradient check: mmd2 with median heuristic and fixed bandwidth") {
    Rng rng(9);
    for (int i = 0; i < kGradInstances; ++i) {
        const std::size_t n = 3 + i % 3, m = 2 + i % 4;
        const std::optional<double> bw = i % 2 ? std::optional<double>(0.8) : std::nullopt;
        Tensor a, b;
        do {
            a = random_tensor(rng, {n, 3});
            b = random_tensor(rng, {m, 3}, -0.5, 1.5);
        } while (!median_separated(rows_of(a), rows_of(b)));
        const double err = gradient_error(
            [&](Tape& t, const std::vector<Tensor>& v) { return mmd2(t, v[0], v[1], {bw}); }, {a, b});
        CHECK(err < kGradTol);
    }
}

// --- feature alignment -------------------------------------------------------

TEST_CASE("pool_mask averages soft values") {
    PasteMask m(4, 4, 0.8);
    m.support = {1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1};
    const auto p = pool_mask(m, 2);
    REQUIRE(p.size() == 4);
    CHECK(std::abs(p[0] - 0.6) < 1e-15);
    CHECK(p[1] == 0.0);
    CHECK(p[2] == 0.0);
    CHECK(std::abs(p[3] - 0.8) < 1e-15);
}

TEST_CASE("feature alignment matches a composed pooling and MMD oracle") {
    Rng rng(10);
    for (int i = 0; i < 10; ++i) {
        const Tensor fps = random_tensor(rng, {4, 4, 3}, -1, 1, false);
        const Tensor fpt = random_tensor(rng, {4, 4, 3}, -1, 1, false);
        PasteMask m(16, 16, 0.8);
        // Hand-set: a rectangle plus a few stray pixels.
        for (std::size_t y = 2; y < 9; ++y)
            for (std::size_t x = 5; x < 12; ++x) m.support[y * 16 + x] = 1;
        m.support[15 * 16 + rng.index(16)] = 1;

        std::vector<double> pooled(16, 0.0);
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) pooled[(y / 4) * 4 + x / 4] += m.value(y * 16 + x) / 16.0;
        std::vector<std::vector<double>> pa, pb;
        const auto ra = rows_of(fps), rb = rows_of(fpt);
        for (std::size_t c = 0; c < 16; ++c) {
            if (pooled[c] <= 0) continue;
            std::vector<double> u = ra[c], v = rb[c];
            for (auto& x : u) x *= pooled[c];
            for (auto& x : v) x *= pooled[c];
            pa.push_back(u);
            pb.push_back(v);
        }
        Tape t;
        const FeatureAlignment fa = feature_alignment(t, fps, fpt, m);
        CHECK(std::abs(fa.paste.item() - mmd_oracle(pa, pb, std::nullopt)) < 1e-12);
        CHECK(std::abs(fa.global.item() - mmd_oracle(ra, rb, std::nullopt)) < 1e-12);
    }
}

TEST_CASE("feature alignment degenerate cases") {
    Rng rng(11);
    const Tensor f = random_tensor(rng, {4, 4, 3}, -1, 1, false);
    PasteMask m(16, 16, 0.8);
    m.support[0] = 1;
    Tape t;
    const FeatureAlignment same = feature_alignment(t, f, f, m);
    CHECK(same.paste.item() <= 1e-10);
    CHECK(same.global.item() <= 1e-10);

    QuietLog q;
    const Tensor g = random_tensor(rng, {4, 4, 3}, -1, 1, false);
    const FeatureAlignment empty = feature_alignment(t, f, g, PasteMask(16, 16, 0.8));
    CHECK(empty.paste.item() == 0.0);
    CHECK(empty.global.item() == feature_alignment(t, f, g, m).global.item());
}

TEST_CASE("gradient check: feature alignment") {
    Rng rng(12);
    for (int i = 0; i < kGradInstances; ++i) {
        PasteMask m(8, 8, rng.uniform(0.2, 1.0));
        for (auto& s : m.support) s = rng.bernoulli(0.4) ? 1 : 0;
        Tensor a, b;
        do {
            a = random_tensor(rng, {2, 2, 3});
            b = random_tensor(rng, {2, 2, 3}, -0.5, 1.5);
        } while (!alignment_separated(a, b, m));
        const double err = gradient_error(
            [&](Tape& t, const std::vector<Tensor>& v) {
                const FeatureAlignment fa = feature_alignment(t, v[0], v[1], m);
                return add(t, fa.paste, fa.global);
            },
            {a, b});
        CHECK(err < kGradTol);
    }
}

// --- total objective ---------------------------------------------------------

TEST_CASE("total objective is linear in lambda") {
    Rng rng(13);
    for (int i = 0; i < 20; ++i) {
        const double s = rng.uniform(0, 3), ss = rng.uniform(0, 3), c = rng.uniform(0, 3);
        const double p = rng.uniform(0, 0.5), g = rng.uniform(0, 0.5), lam = rng.uniform(0, 0.1);
        Tape t;
        auto total = [&](double l) {
            return total_objective(t, Tensor::scalar(s), Tensor::scalar(ss), Tensor::scalar(c), Tensor::scalar(p),
                                   Tensor::scalar(g), l)
                .item();
        };
        const double base = total(0.0);
        CHECK(std::abs(base - (s + ss + c)) < 1e-12);
        CHECK(std::abs(total(lam) - (s + ss + c + lam * (p + g))) < 1e-12);
        CHECK(std::abs((total(2 * lam) - base) - 2 * (total(lam) - base)) < 1e-12);
    }
}

TEST_CASE("gradient check: total objective of all loss terms") {
    Rng rng(14);
    for (int i = 0; i < kGradInstances; ++i) {
        const LabelMap yp = random_labels(rng, 4, 4, 3);
        const LabelMap ys = random_labels(rng, 4, 4, 3);
        PasteMask m = random_mask(rng, 4, 4, 0.8);
        Tensor fa_in, fb_in;
        do {
            fa_in = random_tensor(rng, {2, 2, 2});
            fb_in = random_tensor(rng, {2, 2, 2});
        } while (!alignment_separated(fa_in, fb_in, m));
        const double err = gradient_error(
            [&](Tape& t, const std::vector<Tensor>& v) {
                const Tensor lp = log_softmax(t, v[0]);
                const FeatureAlignment fa = feature_alignment(t, v[1], v[2], m);
                return total_objective(t, seg_loss(t, lp, ys), seg_soft_loss(t, lp, yp, ys, m),
                                       consistency_loss(t, lp, yp, ys, m), fa.paste, fa.global, 0.5);
            },
            {random_tensor(rng, {4, 4, 3}, -2, 2), fa_in, fb_in});
        CHECK(err < kGradTol);
    }
}

TEST_CASE("loss csv format") {
    CHECK(loss_csv_header() == "iteration,seg,seg_soft,cons,paste_mmd,global_mmd,total,lr\n");
    LossBreakdown l;
    l.seg = 0.1;
    l.total = 1.0 / 3.0;
    const std::string row = loss_csv_row(7, l, 2.5e-3);
    CHECK(row == "7,0.10000000000000001,0,0,0,0,0.33333333333333331,0.0025000000000000001\n");
}
