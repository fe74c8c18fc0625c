#pragma once

#include <string>
#include <vector>

#include "trajekt/common.hpp"

namespace trajekt {

// Rectangular numeric table with explicit missingness. Cells are addressed
// row-major; NaN is never stored, the mask is authoritative.
struct NumericTable {
  std::vector<std::string> columns;
  std::vector<int64_t> row_ids;
  std::vector<double> cells;    // rows x cols
  std::vector<uint8_t> present; // 1 observed, 0 missing

  size_t nrows() const { return row_ids.size(); }
  size_t ncols() const { return columns.size(); }
  double& at(size_t r, size_t c) { return cells[r * ncols() + c]; }
  double at(size_t r, size_t c) const { return cells[r * ncols() + c]; }
  bool is_present(size_t r, size_t c) const { return present[r * ncols() + c] != 0; }
  void set(size_t r, size_t c, double v) {
    cells[r * ncols() + c] = v;
    present[r * ncols() + c] = 1;
  }
  void set_missing(size_t r, size_t c) {
    cells[r * ncols() + c] = 0.0;
    present[r * ncols() + c] = 0;
  }
  double missing_fraction(size_t c) const;
  static NumericTable make(std::vector<std::string> columns, std::vector<int64_t> row_ids);
};

struct DropResult {
  NumericTable table;
  std::vector<std::string> dropped;
};

// Removes columns with missing fraction strictly greater than the threshold.
DropResult drop_high_missingness(const NumericTable& table, double threshold);

// Fills missing entries of a categorical column by majority vote among the k
// nearest complete rows; distances use z-scaled mutually observed numeric
// columns, rescaled by the count of compared columns. Ties break to the
// lexicographically smallest category.
std::vector<std::string> knn_impute_categorical(const NumericTable& numeric,
                                                const std::vector<std::string>& target,
                                                int k);

struct CompletionResult {
  NumericTable table;                    // observed cells untouched
  std::vector<int> imputed_per_column;
  double objective = 0.0;                // 0.5*||P_obs(X-Z)||^2_F + lambda*||Z||_*
  int iterations = 0;
  bool converged = false;
};

struct SoftImputeOptions {
  double lambda = -1.0;  // < 0 selects sigma_max(zero-filled)/50
  double tol = 1e-5;
  int max_iter = 300;
};

// Iterative SVD soft-thresholding on the z-standardized matrix; values are
// returned on the original scale with observed entries restored exactly.
CompletionResult soft_impute(const NumericTable& table, const SoftImputeOptions& opt = {});

}  // namespace trajekt
