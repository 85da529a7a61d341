#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semrec/dense_tokenizer.hpp"
#include "semrec/error.hpp"

namespace semrec {

// Row-major double matrix; the discretization path runs in float64 end to end.
struct DMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  DMatrix() = default;
  DMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
};

// Full eigendecomposition of a symmetric n x n matrix (cyclic Jacobi).
// Eigenvalues descending; eigenvectors[:, j] belongs to eigenvalues[j],
// stored row-major n x n. Deterministic.
void symmetric_eigen(const std::vector<double>& matrix, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors);

struct PcaModel {
  int input_dim = 0;   // D
  int components = 0;  // d
  std::vector<double> mean;                      // D
  std::vector<double> basis;                     // D x d, column per component
  std::vector<double> eigenvalues;               // d, descending
  std::vector<double> explained_variance_ratio;  // d, fractions of total variance
};

// Eigendecomposition of the covariance of mean-centered x (normalized by
// n-1). Sign convention: each component's largest-|coordinate| entry is
// positive, ties broken toward the lower index. Requires n > d, d <= D and
// rank(x) >= d.
PcaModel pca_fit(const DMatrix& x, int d);
DMatrix pca_transform(const PcaModel& model, const DMatrix& x);

struct KMeansModel {
  int k = 0;
  int dim = 0;
  std::vector<double> centroids;  // k x dim
  std::vector<int> counts;
  std::vector<double> inertia_history;  // one entry per Lloyd assignment pass

  double distance2(const double* point, int centroid) const;
  int assign(const double* point) const;  // nearest centroid, ties -> lowest index
};

// Seeded k-means++ initialization, Lloyd iterations to an assignment fixpoint
// (at most 300), empty clusters re-seeded to the point farthest from its
// centroid.
KMeansModel kmeans_fit(const DMatrix& points, int k, uint64_t seed);

using SemanticId = std::vector<int>;  // length v, entries 1-based in [1, k]

struct CodeMatrix {
  int v = 0;
  int n = 0;
  std::vector<int> codes;  // [v][n]
  std::vector<std::string> item_ids;

  int at(int position, int item) const { return codes[static_cast<size_t>(position) * n + item]; }
  int& at(int position, int item) { return codes[static_cast<size_t>(position) * n + item]; }
  SemanticId column(int item) const;
  int index_of(const std::string& item_id) const;  // -1 when absent
  bool columns_distinct() const;

  // TSV with header item_id, c_1 .. c_v
  void save_tsv(const std::string& path) const;
  static CodeMatrix load_tsv(const std::string& path);
};

struct CodeAssignment {
  CodeMatrix codes;
  std::vector<PcaModel> pca;        // one per dense-token position
  std::vector<KMeansModel> kmeans;  // one per dense-token position
  std::vector<DMatrix> reduced;     // n x d per position
};

// Per position independently: PCA to d components, k-means into k groups,
// nearest-centroid assignment. Deterministic given the seed.
CodeAssignment assign_codes(const DenseEmbeddingMatrix& e, int d, int k, uint64_t seed);

// Makes all columns distinct. Within each duplicate group the item nearest
// its last-position centroid keeps its codes; every other item's last code
// moves to the next-nearest centroid that yields an unused column, visiting
// items by ascending item_id.
CodeMatrix resolve_collisions(const CodeMatrix& codes, const std::vector<DMatrix>& reduced,
                              const std::vector<KMeansModel>& kmeans);

int hamming_distance(const SemanticId& a, const SemanticId& b);

// k^v, the size of the identifier space
double code_capacity(int k, int v);

void save_cluster_models(const std::string& manifest_path, const CodeAssignment& assignment,
                         const MetaMap& extra_meta = {});

}  // namespace semrec
