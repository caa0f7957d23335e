#include "dsp/losses.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>

#include "dsp/log.hpp"

namespace dsp {

namespace {

struct LabelTerm {
    std::span<const std::uint8_t> labels;
    std::span<const double> weights;  // empty means weight 1 everywhere
};

// Σ_terms Σ_p w_p CE(p, y_p) / Σ_terms Σ_p w_p [y_p valid], as one tape node.
Tensor weighted_ce(Tape& tape, const std::string& op, const Tensor& log_probs, std::vector<LabelTerm> terms) {
    if (!log_probs.defined() || log_probs.rank() != 3) throw ShapeError(op + ": log_probs must be [H, W, C]");
    const std::size_t C = log_probs.dim(2);
    const std::size_t P = log_probs.dim(0) * log_probs.dim(1);
    for (const auto& t : terms) {
        if (t.labels.size() != P || (!t.weights.empty() && t.weights.size() != P)) {
            throw ShapeError(op + ": labels/weights do not match log_probs " + shape_str(log_probs.shape()));
        }
    }
    double num = 0.0, den = 0.0;
    for (const auto& t : terms) {
        for (std::size_t p = 0; p < P; ++p) {
            const auto y = t.labels[p];
            if (y == kIgnoreLabel) continue;
            if (y >= C) throw ShapeError(op + ": label " + std::to_string(y) + " out of range");
            const double w = t.weights.empty() ? 1.0 : t.weights[p];
            num += w * -log_probs[p * C + y];
            den += w;
        }
    }
    if (!(den > 0.0)) {
        log::warn(op + ": no labeled pixels carry weight, loss defined as 0");
        return Tensor::scalar(0.0);
    }
    // Copy what backward needs; the spans may not outlive this call.
    std::vector<std::pair<std::vector<std::uint8_t>, std::vector<double>>> saved;
    for (const auto& t : terms) {
        saved.emplace_back(std::vector<std::uint8_t>(t.labels.begin(), t.labels.end()),
                           std::vector<double>(t.weights.begin(), t.weights.end()));
    }
    const double inv = 1.0 / den;
    return tape.record({log_probs}, Tensor::scalar(num * inv),
                       [saved = std::move(saved), inv, C](std::span<const double> g,
                                                          std::span<std::vector<double>*> gin) {
                           auto& gx = *gin[0];
                           for (const auto& [lab, w] : saved) {
                               for (std::size_t p = 0; p < lab.size(); ++p) {
                                   if (lab[p] == kIgnoreLabel) continue;
                                   gx[p * C + lab[p]] -= g[0] * inv * (w.empty() ? 1.0 : w[p]);
                               }
                           }
                       });
}

void check_label_size(const std::string& op, const LabelMap& label, const PasteMask& mask) {
    if (label.height != mask.height || label.width != mask.width) {
        throw ShapeError(op + ": label map and mask sizes differ");
    }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-major [rows, F] view used by the MMD kernel.
struct Rows {
    std::span<const double> data;
    std::size_t n = 0;
    std::size_t F = 0;
};

Rows as_rows(const std::string& op, const Tensor& t) {
    if (t.rank() != 2) throw ShapeError(op + ": samples must be [n, F], got " + shape_str(t.shape()));
    return {t.data(), t.dim(0), t.dim(1)};
}

// Bandwidth choice and which pooled pairs it depends on.
struct Bandwidth {
    double sigma2 = 1.0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (i, j), i < j
    double pair_weight = 0.0;                                 // d sigma2 / d D_ij for each listed pair
};

Bandwidth median_bandwidth(const RowMat& D) {
    Bandwidth bw;
    const std::size_t N = static_cast<std::size_t>(D.rows());
    const std::size_t npairs = N * (N - 1) / 2;
    if (npairs == 0) return bw;
    std::vector<double> vals;
    vals.reserve(npairs);
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = i + 1; j < N; ++j) vals.push_back(D(i, j));
    }
    auto lower = vals.begin() + static_cast<long>((npairs - 1) / 2);
    std::nth_element(vals.begin(), lower, vals.end());
    std::vector<double> picked = {*lower};
    if (npairs % 2 == 0) picked.push_back(*std::min_element(lower + 1, vals.end()));
    const double med = picked.size() == 2 ? 0.5 * (picked[0] + picked[1]) : picked[0];
    if (med > 0.0) {
        // The pair carrying each order statistic is the first one in (i, j)
        // order with that distance, which keeps the gradient deterministic.
        bw.sigma2 = med;
        bw.pair_weight = 1.0 / static_cast<double>(picked.size());
        for (std::size_t k = 0; k < picked.size(); ++k) {
            bool found = false;
            for (std::size_t i = 0; i < N && !found; ++i) {
                for (std::size_t j = i + 1; j < N && !found; ++j) {
                    const std::pair<std::size_t, std::size_t> ij{i, j};
                    if (D(i, j) == picked[k] && (k == 0 || bw.pairs[0] != ij)) {
                        bw.pairs.push_back(ij);
                        found = true;
                    }
                }
            }
        }
        return bw;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = i + 1; j < N; ++j) {
            if (D(i, j) > 0.0) {
                total += D(i, j);
                bw.pairs.emplace_back(i, j);
            }
        }
    }
    if (bw.pairs.empty()) return bw;  // all samples identical: sigma2 = 1, no dependence
    bw.sigma2 = total / static_cast<double>(bw.pairs.size());
    bw.pair_weight = 1.0 / static_cast<double>(bw.pairs.size());
    return bw;
}

RowMat pooled_rows(const Rows& a, const Rows& b) {
    RowMat z(static_cast<long>(a.n + b.n), static_cast<long>(a.F));
    std::copy(a.data.begin(), a.data.end(), z.data());
    std::copy(b.data.begin(), b.data.end(), z.data() + a.data.size());
    return z;
}

// |z_i - z_j|^2 through the Gram matrix, clamped at 0 with an exact zero diagonal.
RowMat pairwise_sq(const RowMat& z) {
    const Eigen::VectorXd sq = z.rowwise().squaredNorm();
    RowMat D = -2.0 * (z * z.transpose());
    D.colwise() += sq;
    D.rowwise() += sq.transpose();
    D = D.cwiseMax(0.0);
    D.diagonal().setZero();
    // Symmetrize so D(i, j) and D(j, i) are bitwise equal.
    for (long i = 0; i < D.rows(); ++i) {
        for (long j = i + 1; j < D.cols(); ++j) D(j, i) = D(i, j);
    }
    return D;
}

// (size, data) ordering makes mmd2(a, b) and mmd2(b, a) evaluate identically.
bool canonical_before(const Tensor& a, const Tensor& b) {
    if (a.dim(0) != b.dim(0)) return a.dim(0) < b.dim(0);
    const auto da = a.data(), db = b.data();
    return !std::lexicographical_compare(db.begin(), db.end(), da.begin(), da.end());
}

}  // namespace

Tensor seg_loss(Tape& tape, const Tensor& log_probs, const LabelMap& labels) {
    return weighted_ce(tape, "seg_loss", log_probs, {LabelTerm{labels.data, {}}});
}

Tensor weighted_pair_loss(Tape& tape, const Tensor& log_probs, const MixedLabels& labels) {
    return weighted_ce(tape, "weighted_pair_loss", log_probs,
                       {LabelTerm{labels.paste_label.data, labels.paste_weight},
                        LabelTerm{labels.base_label.data, labels.base_weight}});
}

Tensor seg_soft_loss(Tape& tape, const Tensor& log_probs, const LabelMap& paste_label, const LabelMap& source_label,
                     const PasteMask& mask) {
    check_label_size("seg_soft_loss", paste_label, mask);
    check_label_size("seg_soft_loss", source_label, mask);
    return weighted_pair_loss(tape, log_probs, mix_labels(mask, paste_label, source_label));
}

Tensor consistency_loss(Tape& tape, const Tensor& log_probs, const LabelMap& paste_label,
                        const LabelMap& pseudo_label, const PasteMask& mask) {
    check_label_size("consistency_loss", paste_label, mask);
    check_label_size("consistency_loss", pseudo_label, mask);
    return weighted_pair_loss(tape, log_probs, mix_labels(mask, paste_label, pseudo_label));
}

double median_heuristic_sigma2(const Tensor& a, const Tensor& b) {
    const auto ra = as_rows("median_heuristic_sigma2", a), rb = as_rows("median_heuristic_sigma2", b);
    if (ra.F != rb.F) throw ShapeError("median_heuristic_sigma2: feature widths differ");
    return median_bandwidth(pairwise_sq(pooled_rows(ra, rb))).sigma2;
}

Tensor mmd2(Tape& tape, const Tensor& a_in, const Tensor& b_in, const MmdConfig& config) {
    const std::string op = "mmd2";
    if (!a_in.defined() || !b_in.defined()) {
        log::warn("mmd2: empty sample set, term contributes 0");
        return Tensor::scalar(0.0);
    }
    const bool swapped = !canonical_before(a_in, b_in);
    const Tensor& a = swapped ? b_in : a_in;
    const Tensor& b = swapped ? a_in : b_in;
    const auto ra = as_rows(op, a), rb = as_rows(op, b);
    if (ra.F != rb.F) throw ShapeError(op + ": feature widths differ (" + std::to_string(ra.F) + " vs " +
                                       std::to_string(rb.F) + ")");
    if (config.bandwidth && !(*config.bandwidth > 0.0)) throw std::invalid_argument(op + ": bandwidth must be > 0");

    const std::size_t n = ra.n, m = rb.n, N = n + m, F = ra.F;
    RowMat z = pooled_rows(ra, rb);
    const RowMat D = pairwise_sq(z);
    Bandwidth bw;
    if (config.bandwidth) bw.sigma2 = *config.bandwidth * *config.bandwidth;
    else bw = median_bandwidth(D);
    const double s = bw.sigma2;

    const RowMat K = (D * (-1.0 / (2.0 * s))).array().exp().matrix();
    const long ln = static_cast<long>(n), lm = static_cast<long>(m);
    const double waa = 1.0 / static_cast<double>(n * n), wbb = 1.0 / static_cast<double>(m * m);
    const double wab = -1.0 / static_cast<double>(n * m);
    const double raw = K.topLeftCorner(ln, ln).sum() * waa + K.bottomRightCorner(lm, lm).sum() * wbb +
                       2.0 * K.topRightCorner(ln, lm).sum() * wab;
    if (!(raw > 0.0)) return Tensor::scalar(0.0);  // clamp: flat, no gradient

    // P = W ∘ K with the V-statistic weights: 1/n^2 within a, 1/m^2 within b, -1/(nm) across.
    RowMat P = K;
    P.topLeftCorner(ln, ln) *= waa;
    P.bottomRightCorner(lm, lm) *= wbb;
    P.topRightCorner(ln, lm) *= wab;
    P.bottomLeftCorner(lm, ln) *= wab;
    // G = d mmd / d D per ordered pair: -P / (2 s) plus the bandwidth path.
    const double dsigma = P.cwiseProduct(D).sum() / (2.0 * s * s);
    RowMat G = P * (-1.0 / (2.0 * s));
    for (const auto& [i, j] : bw.pairs) {
        const double c = 0.5 * dsigma * bw.pair_weight;
        G(static_cast<long>(i), static_cast<long>(j)) += c;
        G(static_cast<long>(j), static_cast<long>(i)) += c;
    }
    auto backward = [G = std::move(G), z = std::move(z), n, N, F, swapped](std::span<const double> g,
                                                                            std::span<std::vector<double>*> gin) {
        // d D_ij / d z_i = 2 (z_i - z_j) and G is symmetric, so
        // grad z = 4 (diag(G 1) z - G z).
        const Eigen::VectorXd rs = G.rowwise().sum();
        const RowMat gz = (4.0 * g[0]) * (rs.asDiagonal() * z - G * z);
        auto* ga = gin[swapped ? 1 : 0];
        auto* gb = gin[swapped ? 0 : 1];
        const double* src = gz.data();
        if (ga) {
            for (std::size_t k = 0; k < n * F; ++k) (*ga)[k] += src[k];
        }
        if (gb) {
            for (std::size_t k = n * F; k < N * F; ++k) (*gb)[k - n * F] += src[k];
        }
    };
    return tape.record({a_in, b_in}, Tensor::scalar(raw), std::move(backward));
}

std::vector<double> pool_mask(const PasteMask& mask, std::size_t factor) {
    if (factor == 0 || mask.height % factor || mask.width % factor) {
        throw ShapeError("pool_mask: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " is not divisible by " + std::to_string(factor));
    }
    const std::size_t h = mask.height / factor, w = mask.width / factor;
    std::vector<double> out(h * w, 0.0);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < factor; ++dy) {
                for (std::size_t dx = 0; dx < factor; ++dx) {
                    s += mask.value((y * factor + dy) * mask.width + x * factor + dx);
                }
            }
            out[y * w + x] = s * inv;
        }
    }
    return out;
}

FeatureAlignment feature_alignment(Tape& tape, const Tensor& f_ps, const Tensor& f_pt, const PasteMask& mask,
                                   const MmdConfig& config) {
    const std::string op = "feature_alignment";
    if (!f_ps.defined() || !f_pt.defined() || f_ps.rank() != 3) throw ShapeError(op + ": features must be [h, w, F]");
    if (f_ps.shape() != f_pt.shape()) {
        throw ShapeError(op + ": feature shapes differ " + shape_str(f_ps.shape()) + " vs " + shape_str(f_pt.shape()));
    }
    const std::size_t h = f_ps.dim(0), w = f_ps.dim(1), F = f_ps.dim(2);
    if (mask.height % h || mask.width % w || mask.height / h != mask.width / w) {
        throw ShapeError(op + ": mask size is not an integer multiple of the feature grid");
    }
    const auto pooled = pool_mask(mask, mask.height / h);

    FeatureAlignment out;
    const Tensor rows_ps = reshape(tape, f_ps, {h * w, F});
    const Tensor rows_pt = reshape(tape, f_pt, {h * w, F});
    out.global = mmd2(tape, rows_ps, rows_pt, config);

    std::vector<std::size_t> idx;
    std::vector<double> scale;
    for (std::size_t q = 0; q < pooled.size(); ++q) {
        if (pooled[q] > 0.0) {
            idx.push_back(q);
            scale.push_back(pooled[q]);
        }
    }
    if (idx.empty()) {
        log::warn(op + ": paste support vanishes at feature resolution, paste term is 0");
        out.paste = Tensor::scalar(0.0);
    } else {
        out.paste = mmd2(tape, gather_rows_scaled(tape, rows_ps, idx, scale),
                         gather_rows_scaled(tape, rows_pt, idx, scale), config);
    }
    return out;
}

Tensor total_objective(Tape& tape, const Tensor& seg, const Tensor& seg_soft, const Tensor& cons, const Tensor& paste,
                       const Tensor& global, double lambda_feature) {
    const Tensor ce = add(tape, add(tape, seg, seg_soft), cons);
    return add(tape, ce, mul_scalar(tape, add(tape, paste, global), lambda_feature));
}

std::string loss_csv_header() { return "iteration,seg,seg_soft,cons,paste_mmd,global_mmd,total,lr\n"; }

std::string loss_csv_row(std::size_t iteration, const LossBreakdown& l, double lr) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", iteration, l.seg, l.seg_soft,
                  l.cons, l.paste_mmd, l.global_mmd, l.total, lr);
    return buf;
}

}  // namespace dsp
