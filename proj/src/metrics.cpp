#include "pemsim/metrics.hpp"

#include <numeric>
#include <stdexcept>

namespace pemsim {

namespace {

void require_same_length(const std::vector<double>& a, const std::vector<double>& b,
                         const char* who) {
    if (a.size() != b.size() || a.empty()) {
        throw std::invalid_argument(std::string(who) + ": series length mismatch");
    }
}

std::vector<double> ranks_of(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank, 1-based
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
    require_same_length(a, b, "rmse");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    require_same_length(a, b, "pearson");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) {
        throw std::invalid_argument("pearson: zero-variance series");
    }
    return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require_same_length(a, b, "spearman");
    return pearson(ranks_of(a), ranks_of(b));
}

TempStats temp_stats_of(const Trace& trace) {
    TempStats out;
    out.mean = trace.temp_mean_series();
    out.std_dev = trace.temp_std_series();
    return out;
}

TempStatNorms temp_stat_norms(const TempStats& a, const TempStats& b) {
    require_same_length(a.mean, b.mean, "temp_stat_norms");
    require_same_length(a.std_dev, b.std_dev, "temp_stat_norms");
    const double k = static_cast<double>(a.mean.size());
    TempStatNorms out;
    double acc_mean = 0.0, acc_std = 0.0;
    for (std::size_t i = 0; i < a.mean.size(); ++i) {
        const double dm = a.mean[i] - b.mean[i];
        const double ds = a.std_dev[i] - b.std_dev[i];
        acc_mean += dm * dm;
        acc_std += ds * ds;
        out.mean_linf = std::max(out.mean_linf, std::abs(dm));
        out.std_linf = std::max(out.std_linf, std::abs(ds));
    }
    out.mean_l2_raw = std::sqrt(acc_mean);
    out.std_l2_raw = std::sqrt(acc_std);
    out.mean_l2 = out.mean_l2_raw / std::sqrt(k);
    out.std_l2 = out.std_l2_raw / std::sqrt(k);
    return out;
}

double mean_kld(const std::vector<std::vector<double>>& macro_dist,
                const std::vector<std::vector<double>>& micro_dist, double epsilon) {
    if (macro_dist.size() != micro_dist.size() || macro_dist.empty()) {
        throw std::invalid_argument("mean_kld: step count mismatch");
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < macro_dist.size(); ++k) {
        const auto& p = macro_dist[k];
        const auto& q = micro_dist[k];
        if (p.size() != q.size() || p.empty()) {
            throw std::invalid_argument("mean_kld: bin count mismatch");
        }
        // Smooth the empirical side so log stays finite, then renormalize.
        double qsum = 0.0;
        for (double v : q) qsum += v + epsilon;
        double kl = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] <= 0.0) continue;
            const double qi = (q[i] + epsilon) / qsum;
            kl += p[i] * std::log(p[i] / qi);
        }
        acc += kl;
    }
    return acc / static_cast<double>(macro_dist.size());
}

PacketLengthStats packet_length_stats(const std::vector<PacketCompletion>& completions,
                                      double min_length_s, double max_length_s,
                                      double bin_width_s) {
    if (completions.empty()) {
        throw std::invalid_argument("packet_length_stats: no completions recorded");
    }
    PacketLengthStats out;
    const int bins =
        std::max(1, static_cast<int>(std::ceil((max_length_s - min_length_s) / bin_width_s)));
    out.hist_edges.resize(bins + 1);
    for (int i = 0; i <= bins; ++i) out.hist_edges[i] = min_length_s + i * bin_width_s;
    out.hist_weight.assign(bins, 0.0);

    double w_sum = 0.0, l_sum = 0.0;
    for (const auto& c : completions) {
        if (c.length_s < min_length_s || c.weight <= 0.0) continue;
        const int b = std::min(
            bins - 1, static_cast<int>((c.length_s - min_length_s) / bin_width_s));
        out.hist_weight[b] += c.weight;
        w_sum += c.weight;
        l_sum += c.weight * c.length_s;
    }
    if (w_sum <= 0.0) {
        throw std::invalid_argument("packet_length_stats: all completions filtered out");
    }
    out.total_weight = w_sum;
    out.mean_s = l_sum / w_sum;
    double var = 0.0;
    for (const auto& c : completions) {
        if (c.length_s < min_length_s || c.weight <= 0.0) continue;
        const double d = c.length_s - out.mean_s;
        var += c.weight * d * d;
    }
    out.std_s = std::sqrt(var / w_sum);
    return out;
}

}  // namespace pemsim
