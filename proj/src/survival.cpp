#include "trajekt/survival.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "trajekt/csv.hpp"
#include "trajekt/stats.hpp"

namespace trajekt {

KmCurve kaplan_meier(const std::vector<double>& times, const std::vector<uint8_t>& events) {
  if (times.empty() || times.size() != events.size())
    throw data_error("kaplan_meier: empty or mismatched input");
  std::vector<size_t> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return times[a] < times[b]; });

  KmCurve out;
  double s = 1.0;
  size_t n = times.size(), i = 0;
  int64_t at_risk = static_cast<int64_t>(n);
  while (i < n) {
    double t = times[order[i]];
    int64_t d = 0, removed = 0;
    while (i < n && times[order[i]] == t) {
      if (events[order[i]]) ++d;
      ++removed;
      ++i;
    }
    if (d > 0) {
      double factor = 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      s = s * factor;
      out.times.push_back(t);
      out.surv.push_back(s);
      out.at_risk.push_back(at_risk);
      out.events.push_back(d);
    }
    at_risk -= removed;
  }
  return out;
}

double KmCurve::at(double t) const {
  auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return surv[static_cast<size_t>(it - times.begin()) - 1];
}

double KmCurve::at_left(double t) const {
  auto it = std::lower_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return surv[static_cast<size_t>(it - times.begin()) - 1];
}

SurvivalData apply_competing_mode(const CauseData& data, CompetingMode mode) {
  SurvivalData out;
  out.covariate_names = data.covariate_names;
  size_t p = data.covariate_names.size();
  for (size_t i = 0; i < data.time.size(); ++i) {
    if (mode == CompetingMode::exclude_deaths && data.cause[i] == Cause::death) continue;
    out.time.push_back(data.time[i]);
    out.event.push_back(data.cause[i] == Cause::ckd ? 1 : 0);
    out.x.insert(out.x.end(), data.x.begin() + i * p, data.x.begin() + (i + 1) * p);
  }
  return out;
}

namespace {

struct EventGroup {
  double time = 0.0;
  std::vector<size_t> members;  // subjects with an event at this time
  size_t suffix_begin = 0;      // first position in the sorted order with T >= time
  double weight = 1.0;
};

struct CoxEngine {
  const SurvivalData& data;
  const CoxOptions& opt;
  size_t n, p;
  std::vector<size_t> order;       // ascending time
  std::vector<EventGroup> groups;  // ascending time
  std::vector<double> xc;          // centered covariates, n x p

  explicit CoxEngine(const SurvivalData& d, const CoxOptions& o) : data(d), opt(o) {
    n = d.n();
    p = d.p();
    if (n == 0) throw data_error("cox: no subjects");
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return d.time[a] < d.time[b]; });
    for (size_t k = 0; k < n;) {
      double t = d.time[order[k]];
      EventGroup g;
      g.time = t;
      g.suffix_begin = k;
      while (k < n && d.time[order[k]] == t) {
        if (d.event[order[k]]) g.members.push_back(order[k]);
        ++k;
      }
      if (!g.members.empty()) groups.push_back(std::move(g));
    }
    if (groups.empty()) throw data_error("cox: no events");

    // centering keeps exp(x*beta) in range; the partial likelihood is
    // invariant to covariate shifts
    xc.assign(n * p, 0.0);
    for (size_t j = 0; j < p; ++j) {
      double m = 0.0;
      for (size_t i = 0; i < n; ++i) m += d.xij(i, j);
      m /= static_cast<double>(n);
      for (size_t i = 0; i < n; ++i) xc[i * p + j] = d.xij(i, j) - m;
    }
  }

  size_t total_events() const {
    size_t d = 0;
    for (const auto& g : groups) d += g.members.size();
    return d;
  }

  void set_weights(const std::vector<double>& w) {
    for (size_t g = 0; g < groups.size(); ++g) groups[g].weight = w[g];
  }

  // returns the (weighted) partial log-likelihood; fills score/information
  // when requested
  double eval(const Eigen::VectorXd& beta, Eigen::VectorXd* score,
              Eigen::MatrixXd* info) const {
    std::vector<double> theta(n);
    for (size_t i = 0; i < n; ++i) {
      double lp = 0.0;
      for (size_t j = 0; j < p; ++j) lp += xc[i * p + j] * beta(j);
      theta[i] = std::exp(lp);
    }
    if (score) score->setZero(p);
    if (info) info->setZero(p, p);

    double ll = 0.0;
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    size_t pos = n;  // subjects with index >= pos are accumulated

    for (size_t gi = groups.size(); gi-- > 0;) {
      const EventGroup& g = groups[gi];
      while (pos > g.suffix_begin) {
        --pos;
        size_t i = order[pos];
        double th = theta[i];
        s0 += th;
        for (size_t j = 0; j < p; ++j) s1(j) += th * xc[i * p + j];
        if (info)
          for (size_t j = 0; j < p; ++j)
            for (size_t l = j; l < p; ++l)
              s2(j, l) += th * xc[i * p + j] * xc[i * p + l];
      }
      double d = static_cast<double>(g.members.size());
      double w = g.weight;
      double s0d = 0.0;
      Eigen::VectorXd s1d = Eigen::VectorXd::Zero(p);
      Eigen::MatrixXd s2d = Eigen::MatrixXd::Zero(p, p);
      Eigen::VectorXd xsum = Eigen::VectorXd::Zero(p);
      double lpsum = 0.0;
      for (size_t i : g.members) {
        double th = theta[i];
        s0d += th;
        for (size_t j = 0; j < p; ++j) {
          double xij = xc[i * p + j];
          s1d(j) += th * xij;
          xsum(j) += xij;
          lpsum += xij * beta(j);
        }
        if (info)
          for (size_t j = 0; j < p; ++j)
            for (size_t l = j; l < p; ++l) s2d(j, l) += th * xc[i * p + j] * xc[i * p + l];
      }
      auto sym = [&](Eigen::MatrixXd& m) {
        for (size_t j = 0; j < p; ++j)
          for (size_t l = 0; l < j; ++l) m(j, l) = m(l, j);
      };
      ll += w * lpsum;
      if (score) *score += w * xsum;

      int nsteps = opt.ties == Ties::efron ? static_cast<int>(d) : 1;
      for (int l = 0; l < nsteps; ++l) {
        double frac = opt.ties == Ties::efron ? static_cast<double>(l) / d : 0.0;
        double phi = s0 - frac * s0d;
        double mult = opt.ties == Ties::efron ? 1.0 : d;
        ll -= w * mult * std::log(phi);
        if (score || info) {
          Eigen::VectorXd s1l = s1 - frac * s1d;
          Eigen::VectorXd xbar = s1l / phi;
          if (score) *score -= w * mult * xbar;
          if (info) {
            Eigen::MatrixXd s2l = s2 - frac * s2d;
            sym(s2l);
            *info += w * mult * (s2l / phi - xbar * xbar.transpose());
          }
        }
      }
    }
    return ll;
  }

  // group-level risk moments at beta, ascending by time (Breslow form)
  struct GroupMoments {
    double time, weight, d, s0;
    Eigen::VectorXd xbar;
    Eigen::MatrixXd v;  // s2/s0 - xbar xbar^T
  };
  std::vector<GroupMoments> moments(const Eigen::VectorXd& beta) const {
    std::vector<double> theta(n);
    for (size_t i = 0; i < n; ++i) {
      double lp = 0.0;
      for (size_t j = 0; j < p; ++j) lp += xc[i * p + j] * beta(j);
      theta[i] = std::exp(lp);
    }
    std::vector<GroupMoments> out(groups.size());
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    size_t pos = n;
    for (size_t gi = groups.size(); gi-- > 0;) {
      const EventGroup& g = groups[gi];
      while (pos > g.suffix_begin) {
        --pos;
        size_t i = order[pos];
        double th = theta[i];
        s0 += th;
        for (size_t j = 0; j < p; ++j) s1(j) += th * xc[i * p + j];
        for (size_t j = 0; j < p; ++j)
          for (size_t l = 0; l < p; ++l) s2(j, l) += th * xc[i * p + j] * xc[i * p + l];
      }
      GroupMoments gm;
      gm.time = g.time;
      gm.weight = g.weight;
      gm.d = static_cast<double>(g.members.size());
      gm.s0 = s0;
      gm.xbar = s1 / s0;
      gm.v = s2 / s0 - gm.xbar * gm.xbar.transpose();
      out[gi] = std::move(gm);
    }
    return out;
  }
};

std::vector<double> make_weights(const CoxEngine& eng, const SurvivalData& data,
                                 const std::string& weight_template, double cap) {
  std::vector<double> w(eng.groups.size(), 1.0);
  if (weight_template == "unit") return w;
  if (weight_template != "ahr")
    throw config_error("unknown weight template '" + weight_template + "'");

  KmCurve s_km = kaplan_meier(data.time, data.event);
  std::vector<uint8_t> flipped(data.event.size());
  for (size_t i = 0; i < data.event.size(); ++i) flipped[i] = data.event[i] ? 0 : 1;
  KmCurve g_km = kaplan_meier(data.time, flipped);  // censoring distribution

  double total_events = 0.0, weighted = 0.0;
  for (size_t k = 0; k < eng.groups.size(); ++k) {
    double t = eng.groups[k].time;
    double s = s_km.at_left(t);
    double g = g_km.at_left(t);
    double wk = g > 0.0 ? s / g : cap;
    wk = std::min(wk, cap);
    w[k] = wk;
    double d = static_cast<double>(eng.groups[k].members.size());
    total_events += d;
    weighted += d * wk;
  }
  if (weighted > 0.0)
    for (double& wk : w) wk *= total_events / weighted;
  return w;
}

HazardFit fit_engine(const SurvivalData& data, const CoxOptions& opt,
                     const std::string& weight_template) {
  CoxEngine eng(data, opt);
  std::vector<double> weights = make_weights(eng, data, weight_template, opt.weight_cap);
  eng.set_weights(weights);
  const size_t p = data.p();

  HazardFit fit;
  fit.covariates = data.covariate_names;
  fit.ties = opt.ties;
  fit.weight_template = weight_template;
  fit.n_subjects = data.n();
  fit.n_events = eng.total_events();
  if (p == 0) throw data_error("cox: empty model (no covariates)");

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd score(p);
  Eigen::MatrixXd info(p, p);
  double ll = eng.eval(beta, nullptr, nullptr);

  bool converged = false;
  int iter = 0;
  for (iter = 1; iter <= opt.max_iter; ++iter) {
    eng.eval(beta, &score, &info);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success)
      throw numeric_error("cox: singular information matrix");
    Eigen::VectorXd delta = ldlt.solve(score);
    if (!delta.allFinite()) throw numeric_error("cox: non-finite Newton step");

    // step-halving keeps the objective non-decreasing
    double step = 1.0;
    double ll_new = ll;
    Eigen::VectorXd beta_new = beta;
    bool accepted = false;
    for (int h = 0; h < 40; ++h) {
      beta_new = beta + step * delta;
      ll_new = eng.eval(beta_new, nullptr, nullptr);
      if (std::isfinite(ll_new) && ll_new >= ll - 1e-10 * (1.0 + std::fabs(ll))) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    for (size_t j = 0; j < p; ++j)
      if (std::fabs(beta_new(j)) > opt.beta_bound)
        throw numeric_error("cox: non-identifiable (monotone likelihood) for covariate '" +
                            data.covariate_names[j] + "'");

    double max_change = (step * delta).cwiseAbs().maxCoeff();
    beta = beta_new;
    ll = ll_new;
    if (max_change < opt.tol) {
      converged = true;
      break;
    }
  }

  eng.eval(beta, &score, &info);
  Eigen::MatrixXd cov;
  if (weight_template == "unit") {
    cov = info.inverse();
  } else {
    // robust sandwich: the weighted score is not a likelihood score
    auto gm = eng.moments(beta);
    std::vector<double> theta(data.n());
    for (size_t i = 0; i < data.n(); ++i) {
      double lp = 0.0;
      for (size_t j = 0; j < p; ++j) lp += eng.xc[i * p + j] * beta(j);
      theta[i] = std::exp(lp);
    }
    // prefix sums over event times ascending
    std::vector<double> a0(gm.size());
    std::vector<Eigen::VectorXd> a1(gm.size());
    double run0 = 0.0;
    Eigen::VectorXd run1 = Eigen::VectorXd::Zero(p);
    for (size_t k = 0; k < gm.size(); ++k) {
      double c = gm[k].weight * gm[k].d / gm[k].s0;
      run0 += c;
      run1 += c * gm[k].xbar;
      a0[k] = run0;
      a1[k] = run1;
    }
    std::vector<double> group_times(gm.size());
    for (size_t k = 0; k < gm.size(); ++k) group_times[k] = gm[k].time;
    std::unordered_map<double, size_t> group_of;
    for (size_t k = 0; k < gm.size(); ++k) group_of[gm[k].time] = k;

    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(p, p);
    for (size_t i = 0; i < data.n(); ++i) {
      Eigen::VectorXd xi(p);
      for (size_t j = 0; j < p; ++j) xi(j) = eng.xc[i * p + j];
      Eigen::VectorXd u = Eigen::VectorXd::Zero(p);
      if (data.event[i]) {
        size_t k = group_of.at(data.time[i]);
        u += gm[k].weight * (xi - gm[k].xbar);
      }
      auto it = std::upper_bound(group_times.begin(), group_times.end(), data.time[i]);
      if (it != group_times.begin()) {
        size_t k = static_cast<size_t>(it - group_times.begin()) - 1;
        u -= theta[i] * (a0[k] * xi - a1[k]);
      }
      b += u * u.transpose();
    }
    Eigen::MatrixXd ainv = info.inverse();
    cov = ainv * b * ainv;
  }

  fit.converged = converged;
  fit.iterations = iter;
  fit.loglik = ll;
  fit.beta.assign(p, 0.0);
  fit.se.assign(p, 0.0);
  fit.hr.assign(p, 0.0);
  fit.hr_lo.assign(p, 0.0);
  fit.hr_hi.assign(p, 0.0);
  fit.p_raw.assign(p, 1.0);
  fit.covariance.assign(p * p, 0.0);
  for (size_t j = 0; j < p; ++j) {
    fit.beta[j] = beta(j);
    double var = cov(j, j);
    fit.se[j] = var > 0.0 ? std::sqrt(var) : 0.0;
    fit.hr[j] = std::exp(beta(j));
    fit.hr_lo[j] = std::exp(beta(j) - 1.96 * fit.se[j]);
    fit.hr_hi[j] = std::exp(beta(j) + 1.96 * fit.se[j]);
    fit.p_raw[j] = fit.se[j] > 0.0
                       ? 2.0 * normal_sf(std::fabs(beta(j)) / fit.se[j])
                       : 1.0;
    for (size_t l = 0; l < p; ++l) fit.covariance[j * p + l] = cov(j, l);
  }
  return fit;
}

}  // namespace

HazardFit cox_fit(const SurvivalData& data, const CoxOptions& opt) {
  return fit_engine(data, opt, "unit");
}

HazardFit weighted_cox_fit(const SurvivalData& data, const std::string& weight_template,
                           const CoxOptions& opt) {
  return fit_engine(data, opt, weight_template);
}

PhTestResult ph_test(const HazardFit& fit, const SurvivalData& data) {
  if (!fit.converged) throw numeric_error("ph_test: fit did not converge");
  const size_t p = data.p();
  CoxOptions opt;
  opt.ties = fit.ties;
  CoxEngine eng(data, opt);
  size_t d = eng.total_events();
  if (d <= p) throw data_error("ph_test: fewer events than covariates");

  Eigen::VectorXd beta(p);
  for (size_t j = 0; j < p; ++j) beta(j) = fit.beta[j];
  auto gm = eng.moments(beta);

  KmCurve km = kaplan_meier(data.time, data.event);

  // per-event residuals and transformed times
  std::vector<Eigen::VectorXd> residuals;
  std::vector<double> g;
  Eigen::MatrixXd vbar = Eigen::MatrixXd::Zero(p, p);
  for (size_t k = 0; k < eng.groups.size(); ++k) {
    double gk = 1.0 - km.at(eng.groups[k].time);
    for (size_t i : eng.groups[k].members) {
      Eigen::VectorXd xi(p);
      for (size_t j = 0; j < p; ++j) xi(j) = eng.xc[i * p + j];
      residuals.push_back(xi - gm[k].xbar);
      g.push_back(gk);
    }
    vbar += gm[k].d * gm[k].v;
  }
  vbar /= static_cast<double>(d);

  double gbar = 0.0;
  for (double v : g) gbar += v;
  gbar /= static_cast<double>(d);
  double gss = 0.0;
  for (double v : g) gss += (v - gbar) * (v - gbar);
  if (gss <= 0.0) throw data_error("ph_test: degenerate time transform");

  Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
  for (size_t e = 0; e < residuals.size(); ++e) w += (g[e] - gbar) * residuals[e];

  PhTestResult out;
  out.covariate_chi2.resize(p);
  out.covariate_p.resize(p);
  for (size_t j = 0; j < p; ++j) {
    double denom = vbar(j, j) * gss;
    double chi2 = denom > 0.0 ? w(j) * w(j) / denom : 0.0;
    out.covariate_chi2[j] = chi2;
    out.covariate_p[j] = chi2_sf(chi2, 1.0);
  }
  Eigen::MatrixXd m = vbar * gss;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
  if (ldlt.info() == Eigen::Success) {
    out.global_chi2 = w.dot(ldlt.solve(w));
    out.global_p = chi2_sf(out.global_chi2, static_cast<double>(p));
  }
  return out;
}

ScreenedData screen_covariates(const SurvivalData& data, double collinearity_threshold,
                               int min_event_occurrences) {
  const size_t n = data.n(), p = data.p();
  std::vector<uint8_t> keep(p, 1);
  ScreeningReport report;

  std::vector<uint8_t> is_binary(p, 1);
  std::vector<uint8_t> is_constant(p, 1);
  for (size_t j = 0; j < p; ++j) {
    for (size_t i = 0; i < n; ++i) {
      double v = data.xij(i, j);
      if (v != 0.0 && v != 1.0) is_binary[j] = 0;
      if (v != data.xij(0, j)) is_constant[j] = 0;
    }
  }

  for (size_t j = 0; j < p; ++j)
    if (is_constant[j]) {
      keep[j] = 0;
      report.dropped.emplace_back(data.covariate_names[j], "constant");
    }

  // continuous collinearity: drop the later column in declared order
  for (size_t a = 0; a < p; ++a) {
    if (!keep[a] || is_binary[a]) continue;
    for (size_t b = a + 1; b < p; ++b) {
      if (!keep[b] || is_binary[b]) continue;
      std::vector<double> va(n), vb(n);
      for (size_t i = 0; i < n; ++i) {
        va[i] = data.xij(i, a);
        vb[i] = data.xij(i, b);
      }
      if (std::fabs(pearson(va, vb)) > collinearity_threshold) {
        keep[b] = 0;
        report.dropped.emplace_back(data.covariate_names[b],
                                    "collinear(" + data.covariate_names[a] + ")");
      }
    }
  }

  // rare binaries: occurrences among subjects with the outcome event
  for (size_t j = 0; j < p; ++j) {
    if (!keep[j] || !is_binary[j]) continue;
    int occ = 0;
    for (size_t i = 0; i < n; ++i)
      if (data.event[i] && data.xij(i, j) == 1.0) ++occ;
    if (occ < min_event_occurrences) {
      keep[j] = 0;
      report.dropped.emplace_back(data.covariate_names[j], "rare_binary");
    }
  }

  ScreenedData out;
  std::vector<size_t> cols;
  for (size_t j = 0; j < p; ++j)
    if (keep[j]) {
      cols.push_back(j);
      report.kept.push_back(data.covariate_names[j]);
    }
  if (cols.empty()) throw data_error("screening dropped every covariate (empty model)");
  out.report = std::move(report);
  out.data.covariate_names = out.report.kept;
  out.data.time = data.time;
  out.data.event = data.event;
  out.data.x.reserve(n * cols.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j : cols) out.data.x.push_back(data.xij(i, j));
  return out;
}

std::vector<double> bh_adjust(const std::vector<double>& pvalues) {
  const size_t m = pvalues.size();
  std::vector<size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return pvalues[a] < pvalues[b]; });
  std::vector<double> adjusted(m, 0.0);
  double running = 1.0;
  for (size_t i = m; i-- > 0;) {
    double q = (pvalues[order[i]] * static_cast<double>(m)) / static_cast<double>(i + 1);
    if (q > 1.0) q = 1.0;
    if (q < running) running = q;
    adjusted[order[i]] = running;
  }
  return adjusted;
}

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw data_error("ks_two_sample: empty sample");
  std::vector<double> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  size_t i = 0, j = 0;
  double d = 0.0;
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  while (i < sa.size() && j < sb.size()) {
    double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] == x) ++i;
    while (j < sb.size() && sb[j] == x) ++j;
    d = std::max(d, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  double ne = na * nb / (na + nb);
  double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  return {d, kolmogorov_sf(lambda)};
}

Chi2Result chi2_independence(const std::vector<std::vector<int64_t>>& table) {
  size_t r = table.size();
  if (r == 0) throw data_error("chi2: empty table");
  size_t c = table[0].size();
  for (const auto& row : table)
    if (row.size() != c) throw data_error("chi2: ragged table");
  if (r < 2 || c < 2) throw data_error("chi2: degenerate table (needs >= 2 rows and columns)");

  std::vector<double> row_sum(r, 0.0), col_sum(c, 0.0);
  double total = 0.0;
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) {
      row_sum[i] += static_cast<double>(table[i][j]);
      col_sum[j] += static_cast<double>(table[i][j]);
      total += static_cast<double>(table[i][j]);
    }
  for (double s : row_sum)
    if (s <= 0.0) throw data_error("chi2: degenerate table (zero row marginal)");
  for (double s : col_sum)
    if (s <= 0.0) throw data_error("chi2: degenerate table (zero column marginal)");

  double stat = 0.0;
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) {
      double expected = row_sum[i] * col_sum[j] / total;
      double diff = static_cast<double>(table[i][j]) - expected;
      stat += diff * diff / expected;
    }
  int df = static_cast<int>((r - 1) * (c - 1));
  return {stat, df, chi2_sf(stat, static_cast<double>(df))};
}

CovariateMatrix build_covariate_matrix(const std::vector<CohortPatient>& cohort,
                                       const std::vector<std::string>& panel_vars,
                                       int knn_k) {
  CovariateMatrix out;
  out.names.push_back("sex_male");
  out.names.push_back("age_at_encounter");
  out.names.push_back("baseline_egfr");
  for (const auto& f : kComorbidityFlags) out.names.push_back(f);
  for (const auto& f : kMedicationFlags) out.names.push_back(f);
  out.names.push_back("sepsis_day1");
  std::vector<std::string> day1_cols;
  for (const auto& v : panel_vars)
    if (v != "height") day1_cols.push_back(v);  // height only feeds child eGFR
  for (const auto& v : day1_cols) out.names.push_back("day1_" + v);

  const size_t n = cohort.size(), p = out.names.size();
  out.x.assign(n * p, 0.0);
  out.present.assign(n * p, 0);
  out.is_binary.assign(p, 0);
  out.is_binary[0] = 1;
  for (size_t j = 3; j < 3 + kComorbidityFlags.size() + kMedicationFlags.size() + 1; ++j)
    out.is_binary[j] = 1;

  // impute unknown sex by KNN over the observed numeric covariates
  std::vector<std::string> sex_target(n);
  NumericTable numeric = NumericTable::make(
      [&] {
        std::vector<std::string> cols = {"age_at_encounter"};
        for (const auto& v : day1_cols) cols.push_back("day1_" + v);
        return cols;
      }(),
      [&] {
        std::vector<int64_t> ids(n);
        for (size_t i = 0; i < n; ++i) ids[i] = cohort[i].person_id;
        return ids;
      }());
  for (size_t i = 0; i < n; ++i) {
    const auto& cov = cohort[i].covariates;
    sex_target[i] = cov.sex == Sex::male ? "M" : cov.sex == Sex::female ? "F" : "";
    numeric.set(i, 0, cov.age_at_encounter);
    for (size_t j = 0; j < day1_cols.size(); ++j) {
      auto it = cov.day1_means.find(day1_cols[j]);
      if (it != cov.day1_means.end()) numeric.set(i, j + 1, it->second);
    }
  }
  bool any_unknown = false, any_known = false;
  for (const auto& s : sex_target) (s.empty() ? any_unknown : any_known) = true;
  std::vector<std::string> sex = sex_target;
  if (any_unknown && any_known) sex = knn_impute_categorical(numeric, sex_target, knn_k);

  for (size_t i = 0; i < n; ++i) {
    const auto& pat = cohort[i];
    const auto& cov = pat.covariates;
    auto put = [&](size_t j, double v) {
      out.x[i * p + j] = v;
      out.present[i * p + j] = 1;
    };
    put(0, sex[i] == "M" ? 1.0 : 0.0);
    put(1, cov.age_at_encounter);
    if (cov.baseline_egfr) {
      put(2, *cov.baseline_egfr);
    } else if (!sex[i].empty() && cov.age_at_encounter >= 18.0) {
      // recompute with the imputed sex; children without height stay missing
      put(2, egfr_adult(cov.age_at_encounter, sex[i] == "M" ? Sex::male : Sex::female,
                        pat.baseline.value));
    }
    size_t j = 3;
    for (const auto& f : kComorbidityFlags) put(j++, cov.flags.at(f));
    for (const auto& f : kMedicationFlags) put(j++, cov.flags.at(f));
    put(j++, cov.flags.at("sepsis_day1"));
    for (const auto& v : day1_cols) {
      auto it = cov.day1_means.find(v);
      if (it != cov.day1_means.end()) put(j, it->second);
      ++j;
    }
  }
  return out;
}

RiskFactorReport risk_factor_analysis(const std::vector<CohortPatient>& cohort,
                                      const StateSequences& sequences,
                                      const std::vector<std::string>& panel_vars,
                                      const RiskFactorOptions& opt) {
  RiskFactorReport report;
  if (cohort.empty() || sequences.empty()) return report;

  std::unordered_map<PersonId, size_t> row_of;
  for (size_t i = 0; i < cohort.size(); ++i) row_of[cohort[i].person_id] = i;

  // initial state and first transition per patient
  std::map<int, std::vector<size_t>> by_initial;
  std::map<std::pair<int, int>, std::vector<size_t>> by_pair;
  for (const auto& seq : sequences) {
    if (seq.steps.empty()) continue;
    auto it = row_of.find(seq.person_id);
    if (it == row_of.end()) continue;
    int initial = seq.steps.front().second;
    by_initial[initial].push_back(it->second);
    for (size_t s = 1; s < seq.steps.size(); ++s) {
      if (seq.steps[s].second != initial) {
        by_pair[{initial, seq.steps[s].second}].push_back(it->second);
        break;
      }
    }
  }

  struct Subpop {
    std::string name;
    std::vector<size_t> rows;
  };
  std::vector<Subpop> subpops;
  const double denom = static_cast<double>(sequences.size());
  for (const auto& [state, rows] : by_initial)
    if (static_cast<double>(rows.size()) / denom >= opt.subpop_prevalence)
      subpops.push_back({"S" + std::to_string(state), rows});
  for (const auto& [pair, rows] : by_pair)
    if (static_cast<double>(rows.size()) / denom >= opt.subpop_prevalence)
      subpops.push_back(
          {"S" + std::to_string(pair.first) + "->S" + std::to_string(pair.second), rows});

  CovariateMatrix full = build_covariate_matrix(cohort, panel_vars, opt.knn_k);
  const size_t p_full = full.names.size();

  for (const auto& sub : subpops) {
    RiskFactorDiagnostic diag;
    diag.subpopulation = sub.name;
    diag.n = sub.rows.size();
    if (sub.rows.size() < opt.min_subpop) {
      diag.status = "skipped_small";
      diag.detail = "subpopulation below minimum size " + std::to_string(opt.min_subpop);
      report.diagnostics.push_back(std::move(diag));
      continue;
    }

    // subpopulation slice with per-subpopulation imputation
    NumericTable t = NumericTable::make(full.names, [&] {
      std::vector<int64_t> ids;
      for (size_t r : sub.rows) ids.push_back(cohort[r].person_id);
      return ids;
    }());
    for (size_t i = 0; i < sub.rows.size(); ++i)
      for (size_t j = 0; j < p_full; ++j)
        if (full.present[sub.rows[i] * p_full + j])
          t.set(i, j, full.x[sub.rows[i] * p_full + j]);

    CauseData cause;
    try {
      DropResult dropped = drop_high_missingness(t, opt.missing_threshold);
      for (const auto& c : dropped.dropped) diag.dropped.emplace_back(c, "high_missing");
      bool any_missing = false;
      for (uint8_t pr : dropped.table.present)
        if (!pr) any_missing = true;
      NumericTable completed = dropped.table;
      if (any_missing) {
        SoftImputeOptions sopt;
        sopt.lambda = opt.softimpute_lambda;
        completed = soft_impute(dropped.table, sopt).table;
      }

      cause.covariate_names = completed.columns;
      for (size_t i = 0; i < sub.rows.size(); ++i) {
        const auto& pat = cohort[sub.rows[i]];
        double time = static_cast<double>(pat.window.length_days());
        if (time <= 0.0) continue;  // zero-length follow-up carries no information
        cause.time.push_back(time);
        cause.cause.push_back(pat.window.outcome == Outcome::ckd     ? Cause::ckd
                              : pat.window.outcome == Outcome::death ? Cause::death
                                                                     : Cause::censored);
        for (size_t j = 0; j < completed.ncols(); ++j)
          cause.x.push_back(completed.at(i, j));
      }
    } catch (const error& e) {
      diag.status = "error";
      diag.detail = e.what();
      report.diagnostics.push_back(std::move(diag));
      continue;
    }

    SurvivalData sd = apply_competing_mode(cause, opt.competing);
    size_t n_events = 0;
    for (uint8_t e : sd.event) n_events += e;
    diag.n_events = n_events;
    if (n_events == 0) {
      diag.status = "error";
      diag.detail = "no outcome events in subpopulation";
      report.diagnostics.push_back(std::move(diag));
      continue;
    }

    try {
      ScreenedData screened = screen_covariates(sd, opt.collinearity_threshold, 5);
      for (const auto& d : screened.report.dropped) diag.dropped.push_back(d);

      CoxOptions copt;
      copt.ties = opt.ties;
      HazardFit fit = weighted_cox_fit(screened.data, opt.weight_template, copt);
      if (!fit.converged) {
        diag.status = "non_converged";
        diag.detail = "excluded after " + std::to_string(copt.max_iter) + " iterations";
        report.diagnostics.push_back(std::move(diag));
        continue;
      }
      try {
        HazardFit plain = opt.weight_template == "unit"
                              ? fit
                              : cox_fit(screened.data, copt);
        diag.ph_global_p = ph_test(plain, screened.data).global_p;
      } catch (const error&) {
        // diagnostics only; the weighted fit stands on its own
      }

      fit.p_adj = bh_adjust(fit.p_raw);
      for (size_t j = 0; j < fit.beta.size(); ++j)
        report.rows.push_back({sub.name, fit.covariates[j], fit.hr[j], fit.hr_lo[j],
                               fit.hr_hi[j], fit.p_raw[j], fit.p_adj[j], sub.rows.size()});
      diag.status = "fitted";
    } catch (const error& e) {
      diag.status = "error";
      diag.detail = e.what();
    }
    report.diagnostics.push_back(std::move(diag));
  }
  return report;
}

void write_risk_factors_csv(const std::string& path, const RiskFactorReport& report) {
  CsvWriter w(path, {"subpopulation", "covariate", "average_hazard_ratio", "ci_lower",
                     "ci_upper", "uncorrected_p_value", "corrected_p_value", "n"});
  for (const auto& r : report.rows)
    w.write_row({r.subpopulation, r.covariate, fmt_double(r.ahr), fmt_double(r.ci_lo),
                 fmt_double(r.ci_hi), fmt_double(r.p_raw), fmt_double(r.p_adj),
                 std::to_string(r.n)});
}

void write_diagnostics_csv(const std::string& path, const RiskFactorReport& report) {
  CsvWriter w(path, {"subpopulation", "status", "n", "n_events", "ph_global_p", "dropped",
                     "detail"});
  for (const auto& d : report.diagnostics) {
    std::string dropped;
    for (const auto& [col, why] : d.dropped) {
      if (!dropped.empty()) dropped += ";";
      dropped += col + ":" + why;
    }
    w.write_row({d.subpopulation, d.status, std::to_string(d.n), std::to_string(d.n_events),
                 std::isnan(d.ph_global_p) ? "" : fmt_double(d.ph_global_p), dropped,
                 d.detail});
  }
}

}  // namespace trajekt
