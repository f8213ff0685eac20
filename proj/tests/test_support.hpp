#pragma once

// Shared helpers and independent oracles for the test suites. Everything in
// here computes through plain loops, never through the graph engine it is
// used to check.

#include "cde/rng.hpp"
#include "cde/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <vector>

namespace cde::testing {

inline double rel_err(double a, double b, double floor = 1e-3) {
    const double denom = std::max({std::fabs(a), std::fabs(b), floor});
    return std::fabs(a - b) / denom;
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, rel_err(a.at(i), b.at(i), floor));
    }
    return worst;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, RngStream& rng, double lo = -2.0,
                            double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

/// Random tensor with every entry bounded away from zero (for abs/relu).
inline Tensor random_tensor_away_from_zero(std::vector<std::size_t> shape, RngStream& rng,
                                           double margin = 1e-2) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) {
        do {
            v = rng.uniform(-2.0, 2.0);
        } while (std::fabs(v) < margin);
    }
    return t;
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
inline Tensor random_rotation(std::size_t n, RngStream& rng) {
    Tensor q = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal(0.0, 1.0);
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += v[c] * q.at(j, c);
            for (std::size_t c = 0; c < n; ++c) v[c] -= dot * q.at(j, c);
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        for (std::size_t c = 0; c < n; ++c) q.at(i, c) = v[c] / nrm;
    }
    return q;
}

/// Direct enumeration of the supervised contrastive objective: sum over
/// anchors of -(1/|P(i)|) sum_p log( exp(sim_ip/tau) / sum_{j!=i} exp(sim_ij/tau) ),
/// with eps-guarded cosine similarity. Anchors without positives are skipped.
inline double supcon_oracle(const Tensor& deltas, const std::vector<int>& labels, double tau) {
    const std::size_t B = deltas.rows(), l = deltas.cols();
    constexpr double eps = 1e-12;
    std::vector<std::vector<double>> sim(B, std::vector<double>(B, 0.0));
    std::vector<double> norms(B, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < l; ++c) acc += deltas.at(i, c) * deltas.at(i, c);
        norms[i] = std::sqrt(acc);
    }
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < B; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < l; ++c) dot += deltas.at(i, c) * deltas.at(j, c);
            sim[i][j] = dot / ((norms[i] + eps) * (norms[j] + eps));
        }
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        std::vector<std::size_t> positives;
        for (std::size_t j = 0; j < B; ++j)
            if (j != i && labels[j] == labels[i]) positives.push_back(j);
        if (positives.empty()) continue;
        double denom = 0.0;
        for (std::size_t j = 0; j < B; ++j)
            if (j != i) denom += std::exp(sim[i][j] / tau);
        double anchor = 0.0;
        for (std::size_t p : positives) {
            anchor += std::log(std::exp(sim[i][p] / tau) / denom);
        }
        loss -= anchor / static_cast<double>(positives.size());
    }
    return loss;
}

/// Direct cross-entropy enumeration.
inline double ce_oracle(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t B = logits.rows(), A = logits.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < A; ++j) denom += std::exp(logits.at(i, j));
        total += -std::log(std::exp(logits.at(i, static_cast<std::size_t>(labels[i]))) / denom);
    }
    return total / static_cast<double>(B);
}

/// Brute-force k-NN oracle: repeated minimum extraction with the same tie
/// rules the library promises (distance tie -> smallest training index, vote
/// tie -> smallest action index).
inline std::vector<int> knn_oracle(const Tensor& train, const std::vector<int>& train_labels,
                                   const Tensor& queries, std::size_t k) {
    const std::size_t T = train.rows(), l = train.cols();
    std::vector<int> out;
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        std::vector<double> dist(T);
        for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t c = 0; c < l; ++c) {
                const double d = queries.at(q, c) - train.at(t, c);
                acc += d * d;
            }
            dist[t] = acc;
        }
        std::vector<bool> used(T, false);
        std::vector<std::size_t> chosen;
        for (std::size_t pick = 0; pick < k; ++pick) {
            std::size_t best = T;
            for (std::size_t t = 0; t < T; ++t) {
                if (used[t]) continue;
                if (best == T || dist[t] < dist[best]) best = t;
            }
            used[best] = true;
            chosen.push_back(best);
        }
        int max_label = 0;
        for (int lab : train_labels) max_label = std::max(max_label, lab);
        std::vector<std::size_t> votes(static_cast<std::size_t>(max_label) + 1, 0);
        for (std::size_t t : chosen) ++votes[static_cast<std::size_t>(train_labels[t])];
        std::size_t winner = 0;
        for (std::size_t a = 1; a < votes.size(); ++a)
            if (votes[a] > votes[winner]) winner = a;
        out.push_back(static_cast<int>(winner));
    }
    return out;
}

} // namespace cde::testing
