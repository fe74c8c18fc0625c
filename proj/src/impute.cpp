#include "trajekt/impute.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>

namespace trajekt {

double NumericTable::missing_fraction(size_t c) const {
  if (nrows() == 0) return 0.0;
  size_t missing = 0;
  for (size_t r = 0; r < nrows(); ++r)
    if (!is_present(r, c)) ++missing;
  return static_cast<double>(missing) / static_cast<double>(nrows());
}

NumericTable NumericTable::make(std::vector<std::string> columns,
                                std::vector<int64_t> row_ids) {
  NumericTable t;
  t.columns = std::move(columns);
  t.row_ids = std::move(row_ids);
  t.cells.assign(t.nrows() * t.ncols(), 0.0);
  t.present.assign(t.nrows() * t.ncols(), 0);
  return t;
}

DropResult drop_high_missingness(const NumericTable& table, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw config_error("missing threshold must be in (0, 1]");
  std::vector<size_t> keep;
  DropResult out;
  for (size_t c = 0; c < table.ncols(); ++c) {
    if (table.missing_fraction(c) > threshold)
      out.dropped.push_back(table.columns[c]);
    else
      keep.push_back(c);
  }
  if (keep.empty()) throw data_error("all columns exceed the missingness threshold");
  std::vector<std::string> cols;
  for (size_t c : keep) cols.push_back(table.columns[c]);
  out.table = NumericTable::make(std::move(cols), table.row_ids);
  for (size_t r = 0; r < table.nrows(); ++r)
    for (size_t j = 0; j < keep.size(); ++j)
      if (table.is_present(r, keep[j])) out.table.set(r, j, table.at(r, keep[j]));
  return out;
}

// per-column mean/sd over observed cells
static void observed_moments(const NumericTable& t, std::vector<double>& mean,
                             std::vector<double>& sd) {
  size_t p = t.ncols();
  mean.assign(p, 0.0);
  sd.assign(p, 1.0);
  for (size_t c = 0; c < p; ++c) {
    double s = 0.0;
    size_t n = 0;
    for (size_t r = 0; r < t.nrows(); ++r)
      if (t.is_present(r, c)) {
        s += t.at(r, c);
        ++n;
      }
    if (n == 0) continue;
    mean[c] = s / static_cast<double>(n);
    double ss = 0.0;
    for (size_t r = 0; r < t.nrows(); ++r)
      if (t.is_present(r, c)) {
        double d = t.at(r, c) - mean[c];
        ss += d * d;
      }
    sd[c] = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 1.0;
    if (sd[c] == 0.0) sd[c] = 1.0;
  }
}

std::vector<std::string> knn_impute_categorical(const NumericTable& numeric,
                                                const std::vector<std::string>& target,
                                                int k) {
  if (k < 1) throw config_error("knn k must be >= 1");
  if (target.size() != numeric.nrows())
    throw data_error("knn: target column length does not match table rows");

  std::vector<size_t> complete;
  for (size_t r = 0; r < target.size(); ++r)
    if (!target[r].empty()) complete.push_back(r);
  if (complete.empty()) throw data_error("knn: no complete rows to impute from");

  std::vector<double> mean, sd;
  observed_moments(numeric, mean, sd);
  auto z = [&](size_t r, size_t c) { return (numeric.at(r, c) - mean[c]) / sd[c]; };

  std::vector<std::string> out = target;
  for (size_t r = 0; r < target.size(); ++r) {
    if (!target[r].empty()) continue;
    // distance to every complete row over mutually observed columns
    std::vector<std::pair<double, size_t>> dist;
    dist.reserve(complete.size());
    for (size_t cr : complete) {
      double ss = 0.0;
      int m = 0;
      for (size_t c = 0; c < numeric.ncols(); ++c) {
        if (!numeric.is_present(r, c) || !numeric.is_present(cr, c)) continue;
        double d = z(r, c) - z(cr, c);
        ss += d * d;
        ++m;
      }
      double d = m > 0 ? std::sqrt(ss / m) : std::numeric_limits<double>::infinity();
      dist.emplace_back(d, cr);
    }
    size_t take = std::min<size_t>(k, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + take, dist.end());
    std::map<std::string, int> votes;
    for (size_t i = 0; i < take; ++i) votes[target[dist[i].second]]++;
    // map iteration is lexicographic, so the first max is the tie-break winner
    std::string best;
    int best_n = -1;
    for (const auto& [cat, n] : votes)
      if (n > best_n) {
        best = cat;
        best_n = n;
      }
    out[r] = best;
  }
  return out;
}

CompletionResult soft_impute(const NumericTable& table, const SoftImputeOptions& opt) {
  const size_t n = table.nrows(), p = table.ncols();
  if (n == 0 || p == 0) throw data_error("soft_impute: empty table");
  for (size_t c = 0; c < p; ++c)
    if (table.missing_fraction(c) >= 1.0)
      throw data_error("soft_impute: column '" + table.columns[c] + "' has no observed entries");

  std::vector<double> mean, sd;
  observed_moments(table, mean, sd);

  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, p);
  Eigen::ArrayXXd mask = Eigen::ArrayXXd::Zero(n, p);
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < p; ++c)
      if (table.is_present(r, c)) {
        x(r, c) = (table.at(r, c) - mean[c]) / sd[c];
        mask(r, c) = 1.0;
      }

  double lambda = opt.lambda;
  if (lambda < 0.0) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd0(x);
    lambda = svd0.singularValues()(0) / 50.0;
  }

  auto objective = [&](const Eigen::MatrixXd& z, double nuclear) {
    double fit = ((x - z).array() * mask).matrix().squaredNorm();
    return 0.5 * fit + lambda * nuclear;
  };

  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, p);
  double prev_obj = std::numeric_limits<double>::infinity();
  CompletionResult res;
  res.converged = false;
  double nuclear = 0.0;

  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    Eigen::MatrixXd w =
        (mask * x.array() + (1.0 - mask) * z.array()).matrix();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::VectorXd s = svd.singularValues();
    nuclear = 0.0;
    for (int i = 0; i < s.size(); ++i) {
      s(i) = std::max(0.0, s(i) - lambda);
      nuclear += s(i);
    }
    Eigen::MatrixXd z_new = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();

    double obj = objective(z_new, nuclear);
    if (obj > prev_obj + 1e-9 * (1.0 + std::fabs(prev_obj)))
      throw numeric_error("soft_impute: objective increased at iteration " +
                          std::to_string(iter));
    double denom = std::max(z.norm(), 1.0);
    double change = (z_new - z).norm() / denom;
    z = std::move(z_new);
    prev_obj = obj;
    res.iterations = iter;
    if (change < opt.tol) {
      res.converged = true;
      break;
    }
  }
  res.objective = prev_obj;

  res.table = table;
  res.imputed_per_column.assign(p, 0);
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < p; ++c)
      if (!table.is_present(r, c)) {
        res.table.set(r, c, z(r, c) * sd[c] + mean[c]);
        res.imputed_per_column[c]++;
      }
  return res;
}

}  // namespace trajekt
