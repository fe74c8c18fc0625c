#include "trajekt/msm.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "trajekt/csv.hpp"
#include "trajekt/parallel.hpp"
#include "trajekt/rng.hpp"
#include "trajekt/stats.hpp"

namespace trajekt {

TransitionEventSet extract_transitions(const StateSequences& sequences, int n_transient) {
  TransitionEventSet out;
  out.n_transient = n_transient;
  out.patients.reserve(sequences.size());
  for (const auto& seq : sequences) {
    if (seq.steps.empty()) continue;
    PatientTransitions pt;
    pt.person_id = seq.person_id;
    pt.entry_state = seq.steps.front().second;
    double terminal_time = static_cast<double>(seq.t_end - seq.t_start);

    int current = pt.entry_state;
    for (const auto& [dt, state] : seq.steps) {
      if (state == current) continue;
      pt.records.push_back({static_cast<double>(dt), current, state});
      current = state;
    }
    // a change stamped exactly at the terminal time has zero sojourn: drop it
    if (!pt.records.empty() && pt.records.back().time == terminal_time &&
        seq.outcome != Outcome::censored) {
      current = pt.records.back().from;
      pt.records.pop_back();
    }
    switch (seq.outcome) {
      case Outcome::ckd:
        pt.records.push_back({terminal_time, current, out.ckd_state()});
        break;
      case Outcome::death:
        pt.records.push_back({terminal_time, current, out.death_state()});
        break;
      case Outcome::censored:
        pt.censor_time = terminal_time;
        break;
    }
    out.patients.push_back(std::move(pt));
  }
  return out;
}

const std::vector<double>& TransitionMatrixSeries::at(double t) const {
  static thread_local std::vector<double> identity;
  // last event time <= t; identity before the first event
  auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) {
    identity.assign(static_cast<size_t>(n_states) * n_states, 0.0);
    for (int i = 0; i < n_states; ++i) identity[static_cast<size_t>(i) * n_states + i] = 1.0;
    return identity;
  }
  return mats[static_cast<size_t>(it - times.begin()) - 1];
}

TransitionMatrixSeries aalen_johansen(const TransitionEventSet& eventset, double s,
                                      double t_max) {
  const int m = eventset.n_states();
  TransitionMatrixSeries out;
  out.n_states = m;
  out.consumed_transitions.assign(static_cast<size_t>(m) * m, 0);

  // occupancy segments (enter, leave, state): at risk at u iff enter < u <= leave
  struct Edge {
    double time;
    int state;
    int delta;  // +1 enter, -1 leave
  };
  std::vector<Edge> edges;
  std::map<double, std::vector<std::pair<int, int>>> transitions;  // time -> (from, to)
  for (const auto& p : eventset.patients) {
    double enter = 0.0;
    int state = p.entry_state;
    for (const auto& r : p.records) {
      if (r.time > t_max) break;
      edges.push_back({enter, state, +1});
      edges.push_back({r.time, state, -1});
      transitions[r.time].emplace_back(r.from, r.to);
      enter = r.time;
      state = r.to;
      if (r.to >= eventset.n_transient) break;  // absorbed
    }
    bool absorbed = !p.records.empty() && p.records.back().time <= t_max &&
                    p.records.back().to >= eventset.n_transient;
    if (!absorbed) {
      double leave = p.censor_time ? std::min(*p.censor_time, t_max) : t_max;
      // resume from the last in-range transition, if any
      edges.push_back({enter, state, +1});
      edges.push_back({leave, state, -1});
    }
  }
  // enters at time a count for u > a, leaves at b keep the subject at risk at
  // u == b; sorting by time and applying strictly-before gives both.
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return a.time < b.time;
  });

  std::vector<double> prod(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i) prod[static_cast<size_t>(i) * m + i] = 1.0;
  std::vector<int64_t> at_risk(m, 0);
  size_t edge_ptr = 0;

  std::vector<double> factor(static_cast<size_t>(m) * m);
  std::vector<double> next(static_cast<size_t>(m) * m);
  for (const auto& [u, trs] : transitions) {
    if (u > t_max) break;
    while (edge_ptr < edges.size() && edges[edge_ptr].time < u) {
      at_risk[edges[edge_ptr].state] += edges[edge_ptr].delta;
      ++edge_ptr;
    }
    if (u <= s) continue;

    std::vector<int64_t> counts(static_cast<size_t>(m) * m, 0);
    for (const auto& [from, to] : trs) counts[static_cast<size_t>(from) * m + to]++;

    std::fill(factor.begin(), factor.end(), 0.0);
    for (int l = 0; l < m; ++l) factor[static_cast<size_t>(l) * m + l] = 1.0;
    for (int l = 0; l < eventset.n_transient; ++l) {
      int64_t row_events = 0;
      for (int c = 0; c < m; ++c) row_events += counts[static_cast<size_t>(l) * m + c];
      if (row_events == 0) continue;
      if (at_risk[l] <= 0) {
        out.zero_risk_rows++;  // no information: the row stays identity
        continue;
      }
      double hazard_sum = 0.0;
      for (int c = 0; c < m; ++c) {
        if (c == l) continue;
        int64_t n_lc = counts[static_cast<size_t>(l) * m + c];
        if (n_lc == 0) continue;
        double d = static_cast<double>(n_lc) / static_cast<double>(at_risk[l]);
        factor[static_cast<size_t>(l) * m + c] = d;
        hazard_sum += d;
        out.consumed_transitions[static_cast<size_t>(l) * m + c] +=
            static_cast<size_t>(n_lc);
      }
      factor[static_cast<size_t>(l) * m + l] = 1.0 - hazard_sum;
    }

    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        double v = 0.0;
        for (int l = 0; l < m; ++l)
          v += prod[static_cast<size_t>(i) * m + l] * factor[static_cast<size_t>(l) * m + j];
        next[static_cast<size_t>(i) * m + j] = v;
      }
    prod.swap(next);
    out.times.push_back(u);
    out.mats.push_back(prod);
  }
  return out;
}

CiBands bootstrap_transition_ci(const TransitionEventSet& eventset, int B, uint64_t seed,
                                const std::vector<double>& horizons_days, int jobs) {
  if (B < 2) throw config_error("bootstrap: B must be >= 2");
  const int m = eventset.n_states();
  const size_t n = eventset.patients.size();
  const size_t cells = horizons_days.size() * static_cast<size_t>(m) * m;
  double t_max = horizons_days.empty() ? 0.0
                                       : *std::max_element(horizons_days.begin(),
                                                           horizons_days.end());

  CiBands out;
  out.n_states = m;
  out.horizons = horizons_days;
  out.point.assign(cells, 0.0);
  out.lo.assign(cells, 0.0);
  out.hi.assign(cells, 0.0);
  out.replicates_used.assign(cells, 0);

  TransitionMatrixSeries full = aalen_johansen(eventset, 0.0, t_max);
  for (size_t h = 0; h < horizons_days.size(); ++h) {
    const auto& mat = full.at(horizons_days[h]);
    for (int f = 0; f < m; ++f)
      for (int t = 0; t < m; ++t)
        out.point[out.idx(h, f, t)] = mat[static_cast<size_t>(f) * m + t];
  }

  // per-replicate values; NaN marks a from-state with no exposure
  std::vector<std::vector<double>> rep_values(B);
  std::vector<uint8_t> rep_degenerate(B, 0);
  parallel_chunks(
      static_cast<size_t>(B), 1,
      [&](size_t b, size_t, size_t) {
        Rng rng(derive_seed(seed, "bootstrap", b));
        TransitionEventSet rep;
        rep.n_transient = eventset.n_transient;
        rep.patients.reserve(n);
        std::vector<uint8_t> occupied(m, 0);
        for (size_t i = 0; i < n; ++i) {
          const auto& p = eventset.patients[rng.uniform_int(n)];
          rep.patients.push_back(p);
          int state = p.entry_state;
          occupied[state] = 1;
          for (const auto& r : p.records) {
            if (r.to < m) occupied[r.to] = 1;
            state = r.to;
          }
        }
        for (int f = eventset.n_transient; f < m; ++f) occupied[f] = 1;  // absorbing rows
        bool degenerate = false;
        for (int f = 0; f < eventset.n_transient; ++f)
          if (!occupied[f]) degenerate = true;
        rep_degenerate[b] = degenerate ? 1 : 0;

        TransitionMatrixSeries series = aalen_johansen(rep, 0.0, t_max);
        auto& vals = rep_values[b];
        vals.assign(cells, std::nan(""));
        for (size_t h = 0; h < horizons_days.size(); ++h) {
          const auto& mat = series.at(horizons_days[h]);
          for (int f = 0; f < m; ++f) {
            if (f < eventset.n_transient && !occupied[f]) continue;
            for (int t = 0; t < m; ++t)
              vals[out.idx(h, f, t)] = mat[static_cast<size_t>(f) * m + t];
          }
        }
      },
      jobs);

  for (uint8_t d : rep_degenerate) out.degenerate_replicates += d;
  std::vector<double> cell;
  for (size_t c = 0; c < cells; ++c) {
    cell.clear();
    for (int b = 0; b < B; ++b)
      if (!std::isnan(rep_values[b][c])) cell.push_back(rep_values[b][c]);
    out.replicates_used[c] = cell.size();
    if (cell.empty()) {
      out.lo[c] = out.hi[c] = out.point[c];
      continue;
    }
    out.lo[c] = quantile(cell, 0.025);
    out.hi[c] = quantile(cell, 0.975);
  }
  return out;
}

std::vector<TerminalRow> terminal_probability_table(const TransitionMatrixSeries& series,
                                                    const std::vector<double>& horizons_days) {
  std::vector<TerminalRow> rows;
  const int m = series.n_states;
  const int ckd = m - 2, death = m - 1;
  double last_time = series.times.empty() ? 0.0 : series.times.back();
  for (int s = 0; s < m; ++s) {
    for (double h : horizons_days) {
      const auto& mat = series.at(h);
      rows.push_back({s, h, mat[static_cast<size_t>(s) * m + ckd],
                      mat[static_cast<size_t>(s) * m + death], h > last_time});
    }
  }
  return rows;
}

void write_transitions_csv(const std::string& path, const TransitionEventSet& es) {
  CsvWriter w(path, {"person_id", "time", "from", "to"});
  for (const auto& p : es.patients)
    for (const auto& r : p.records)
      w.write_row({std::to_string(p.person_id), fmt_double(r.time), std::to_string(r.from),
                   std::to_string(r.to)});
}

void write_aj_series_csv(const std::string& path, const TransitionMatrixSeries& series,
                         const std::vector<double>& grid_days) {
  CsvWriter w(path, {"time", "from", "to", "prob"});
  const int m = series.n_states;
  for (double t : grid_days) {
    const auto& mat = series.at(t);
    for (int f = 0; f < m; ++f)
      for (int c = 0; c < m; ++c)
        w.write_row({fmt_double(t), std::to_string(f), std::to_string(c),
                     fmt_double(mat[static_cast<size_t>(f) * m + c])});
  }
}

void write_terminal_table_csv(const std::string& path, const std::vector<TerminalRow>& rows) {
  CsvWriter w(path, {"state", "horizon_days", "p_ckd", "p_death", "carried_forward"});
  for (const auto& r : rows)
    w.write_row({std::to_string(r.state), fmt_double(r.horizon_days), fmt_double(r.p_ckd),
                 fmt_double(r.p_death), r.carried_forward ? "1" : "0"});
}

void write_ci_csv(const std::string& path, const CiBands& bands) {
  CsvWriter w(path, {"horizon_days", "from", "to", "point", "lo", "hi", "replicates"});
  const int m = bands.n_states;
  for (size_t h = 0; h < bands.horizons.size(); ++h)
    for (int f = 0; f < m; ++f)
      for (int t = 0; t < m; ++t) {
        size_t c = bands.idx(h, f, t);
        w.write_row({fmt_double(bands.horizons[h]), std::to_string(f), std::to_string(t),
                     fmt_double(bands.point[c]), fmt_double(bands.lo[c]),
                     fmt_double(bands.hi[c]), std::to_string(bands.replicates_used[c])});
      }
}

}  // namespace trajekt
