#include "pemsim/trace.hpp"

#include <cstdio>
#include <fstream>

#include "pemsim/errors.hpp"

namespace pemsim {

std::vector<double> Trace::power_series() const {
    std::vector<double> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.p_agg_kw);
    return out;
}

std::vector<double> Trace::reference_series() const {
    std::vector<double> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.p_ref_kw);
    return out;
}

std::vector<double> Trace::temp_mean_series() const {
    std::vector<double> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.temp_mean_f);
    return out;
}

std::vector<double> Trace::temp_std_series() const {
    std::vector<double> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.temp_std_f);
    return out;
}

std::vector<PacketCompletion> Trace::all_completions() const {
    std::vector<PacketCompletion> out;
    for (const auto& s : steps) {
        out.insert(out.end(), s.packet_completions.begin(), s.packet_completions.end());
    }
    return out;
}

void write_trace_csv(const Trace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write trace file: " + path);
    out << "time_s,p_agg_kw,p_ref_kw,n_req_on,n_req_off,beta_on,beta_off,"
           "optout_fraction,temp_mean_f,temp_std_f,packet_completions\n";
    char buf[256];
    for (const auto& s : trace.steps) {
        std::snprintf(buf, sizeof(buf),
                      "%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,",
                      s.time_s, s.p_agg_kw, s.p_ref_kw, s.n_req_on, s.n_req_off,
                      s.beta_on, s.beta_off, s.optout_fraction, s.temp_mean_f,
                      s.temp_std_f);
        out << buf;
        for (std::size_t i = 0; i < s.packet_completions.size(); ++i) {
            const auto& c = s.packet_completions[i];
            std::snprintf(buf, sizeof(buf), "%s%.10g:%.10g", i ? ";" : "", c.length_s,
                          c.weight);
            out << buf;
        }
        out << '\n';
    }
}

}  // namespace pemsim
