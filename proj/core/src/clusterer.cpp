#include "semrec/clusterer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace semrec {

void symmetric_eigen(const std::vector<double>& matrix, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors) {
  if (static_cast<int>(matrix.size()) != n * n)
    throw ValidationError("eigen: matrix size does not match n");
  std::vector<double> a = matrix;
  std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) s += a[static_cast<size_t>(i) * n + j] * a[static_cast<size_t>(i) * n + j];
    return s;
  };
  const double total = std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
  const double tol = std::max(1e-300, total * 1e-28);

  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[static_cast<size_t>(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double app = a[static_cast<size_t>(p) * n + p];
        const double aqq = a[static_cast<size_t>(q) * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = a[static_cast<size_t>(i) * n + p];
          const double aiq = a[static_cast<size_t>(i) * n + q];
          a[static_cast<size_t>(i) * n + p] = c * aip - s * aiq;
          a[static_cast<size_t>(i) * n + q] = s * aip + c * aiq;
        }
        for (int j = 0; j < n; ++j) {
          const double apj = a[static_cast<size_t>(p) * n + j];
          const double aqj = a[static_cast<size_t>(q) * n + j];
          a[static_cast<size_t>(p) * n + j] = c * apj - s * aqj;
          a[static_cast<size_t>(q) * n + j] = s * apj + c * aqj;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = v[static_cast<size_t>(i) * n + p];
          const double viq = v[static_cast<size_t>(i) * n + q];
          v[static_cast<size_t>(i) * n + p] = c * vip - s * viq;
          v[static_cast<size_t>(i) * n + q] = s * vip + c * viq;
        }
      }
  }

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return a[static_cast<size_t>(x) * n + x] > a[static_cast<size_t>(y) * n + y];
  });
  eigenvalues.assign(static_cast<size_t>(n), 0.0);
  eigenvectors.assign(static_cast<size_t>(n) * n, 0.0);
  for (int j = 0; j < n; ++j) {
    eigenvalues[static_cast<size_t>(j)] = a[static_cast<size_t>(order[static_cast<size_t>(j)]) * n +
                                            order[static_cast<size_t>(j)]];
    for (int i = 0; i < n; ++i)
      eigenvectors[static_cast<size_t>(i) * n + j] =
          v[static_cast<size_t>(i) * n + order[static_cast<size_t>(j)]];
  }
}

PcaModel pca_fit(const DMatrix& x, int d) {
  const int n = x.rows, dim = x.cols;
  if (d < 1 || d > dim) throw ValidationError("pca: d must be in [1, D]");
  if (n <= d) throw ValidationError("pca: need more samples than components");

  PcaModel model;
  model.input_dim = dim;
  model.components = d;
  model.mean.assign(static_cast<size_t>(dim), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) model.mean[static_cast<size_t>(j)] += x.at(i, j);
  for (auto& m : model.mean) m /= n;

  std::vector<double> cov(static_cast<size_t>(dim) * dim, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < dim; ++a) {
      const double da = x.at(i, a) - model.mean[static_cast<size_t>(a)];
      for (int b = a; b < dim; ++b)
        cov[static_cast<size_t>(a) * dim + b] += da * (x.at(i, b) - model.mean[static_cast<size_t>(b)]);
    }
  for (int a = 0; a < dim; ++a)
    for (int b = a; b < dim; ++b) {
      cov[static_cast<size_t>(a) * dim + b] /= (n - 1);
      cov[static_cast<size_t>(b) * dim + a] = cov[static_cast<size_t>(a) * dim + b];
    }

  std::vector<double> eigenvalues, eigenvectors;
  symmetric_eigen(cov, dim, eigenvalues, eigenvectors);

  double total_var = 0.0;
  for (double ev : eigenvalues) total_var += std::max(ev, 0.0);
  int rank = 0;
  for (double ev : eigenvalues)
    if (ev > std::max(1e-12, eigenvalues.front() * 1e-9)) ++rank;
  if (rank < d)
    throw ValidationError("pca: requested " + std::to_string(d) +
                          " components but data rank is only " + std::to_string(rank));

  model.basis.assign(static_cast<size_t>(dim) * d, 0.0);
  model.eigenvalues.assign(eigenvalues.begin(), eigenvalues.begin() + d);
  for (int j = 0; j < d; ++j) {
    // sign convention: largest-|coordinate| entry positive, ties to lower index
    int arg = 0;
    double best = -1.0;
    for (int i = 0; i < dim; ++i) {
      const double mag = std::fabs(eigenvectors[static_cast<size_t>(i) * dim + j]);
      if (mag > best + 1e-15) {
        best = mag;
        arg = i;
      }
    }
    const double flip = eigenvectors[static_cast<size_t>(arg) * dim + j] < 0 ? -1.0 : 1.0;
    for (int i = 0; i < dim; ++i)
      model.basis[static_cast<size_t>(i) * d + j] = flip * eigenvectors[static_cast<size_t>(i) * dim + j];
    model.explained_variance_ratio.push_back(total_var > 0 ? model.eigenvalues[static_cast<size_t>(j)] / total_var
                                                           : 0.0);
  }
  return model;
}

DMatrix pca_transform(const PcaModel& model, const DMatrix& x) {
  if (x.cols != model.input_dim) throw ValidationError("pca: transform dimension mismatch");
  DMatrix y(x.rows, model.components);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < model.components; ++j) {
      double acc = 0.0;
      for (int c = 0; c < model.input_dim; ++c)
        acc += (x.at(i, c) - model.mean[static_cast<size_t>(c)]) *
               model.basis[static_cast<size_t>(c) * model.components + j];
      y.at(i, j) = acc;
    }
  return y;
}

double KMeansModel::distance2(const double* point, int centroid) const {
  const double* c = centroids.data() + static_cast<size_t>(centroid) * dim;
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = point[i] - c[i];
    acc += d * d;
  }
  return acc;
}

int KMeansModel::assign(const double* point) const {
  int best = 0;
  double best_d = distance2(point, 0);
  for (int c = 1; c < k; ++c) {
    const double d = distance2(point, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

KMeansModel kmeans_fit(const DMatrix& points, int k, uint64_t seed) {
  const int n = points.rows, dim = points.cols;
  if (k < 1) throw ValidationError("kmeans: k must be positive");
  if (n < k)
    throw ValidationError("kmeans: need at least k points, got " + std::to_string(n) + " for k=" +
                          std::to_string(k));
  std::mt19937 rng(static_cast<uint32_t>(seed));

  KMeansModel model;
  model.k = k;
  model.dim = dim;
  model.centroids.assign(static_cast<size_t>(k) * dim, 0.0);

  // k-means++ seeding
  {
    std::uniform_int_distribution<int> uniform(0, n - 1);
    const int first = uniform(rng);
    std::copy(points.row(first), points.row(first) + dim, model.centroids.begin());
    std::vector<double> d2(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) d2[static_cast<size_t>(i)] = model.distance2(points.row(i), 0);
    for (int c = 1; c < k; ++c) {
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      int pick;
      if (total <= 0.0) {
        pick = uniform(rng);
      } else {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        pick = n - 1;
        for (int i = 0; i < n; ++i) {
          r -= d2[static_cast<size_t>(i)];
          if (r <= 0.0) {
            pick = i;
            break;
          }
        }
      }
      std::copy(points.row(pick), points.row(pick) + dim,
                model.centroids.begin() + static_cast<size_t>(c) * dim);
      for (int i = 0; i < n; ++i) {
        model.k = c + 1;  // distance2 over the centroids chosen so far
        d2[static_cast<size_t>(i)] = std::min(d2[static_cast<size_t>(i)], model.distance2(points.row(i), c));
      }
    }
    model.k = k;
  }

  std::vector<int> assignment(static_cast<size_t>(n), -1);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      const int c = model.assign(points.row(i));
      inertia += model.distance2(points.row(i), c);
      if (c != assignment[static_cast<size_t>(i)]) {
        assignment[static_cast<size_t>(i)] = c;
        changed = true;
      }
    }
    model.inertia_history.push_back(inertia);
    if (!changed) break;

    model.counts.assign(static_cast<size_t>(k), 0);
    std::fill(model.centroids.begin(), model.centroids.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const int c = assignment[static_cast<size_t>(i)];
      ++model.counts[static_cast<size_t>(c)];
      for (int j = 0; j < dim; ++j)
        model.centroids[static_cast<size_t>(c) * dim + j] += points.at(i, j);
    }
    for (int c = 0; c < k; ++c)
      if (model.counts[static_cast<size_t>(c)] > 0)
        for (int j = 0; j < dim; ++j)
          model.centroids[static_cast<size_t>(c) * dim + j] /= model.counts[static_cast<size_t>(c)];

    // empty clusters: re-seed to the point farthest from its own centroid
    std::vector<uint8_t> taken(static_cast<size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
      if (model.counts[static_cast<size_t>(c)] > 0) continue;
      int far = -1;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        if (taken[static_cast<size_t>(i)]) continue;
        const double d = model.distance2(points.row(i), assignment[static_cast<size_t>(i)]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) throw ValidationError("kmeans: cannot repopulate empty cluster");
      taken[static_cast<size_t>(far)] = 1;
      std::copy(points.row(far), points.row(far) + dim,
                model.centroids.begin() + static_cast<size_t>(c) * dim);
    }
  }

  // final populations under the converged assignment
  model.counts.assign(static_cast<size_t>(k), 0);
  for (int i = 0; i < n; ++i) ++model.counts[static_cast<size_t>(model.assign(points.row(i)))];
  for (int c = 0; c < k; ++c)
    if (model.counts[static_cast<size_t>(c)] == 0)
      throw ValidationError("kmeans: empty cluster survived fitting");
  return model;
}

SemanticId CodeMatrix::column(int item) const {
  SemanticId id(static_cast<size_t>(v));
  for (int i = 0; i < v; ++i) id[static_cast<size_t>(i)] = at(i, item);
  return id;
}

int CodeMatrix::index_of(const std::string& item_id) const {
  for (size_t i = 0; i < item_ids.size(); ++i)
    if (item_ids[i] == item_id) return static_cast<int>(i);
  return -1;
}

bool CodeMatrix::columns_distinct() const {
  std::set<SemanticId> seen;
  for (int j = 0; j < n; ++j)
    if (!seen.insert(column(j)).second) return false;
  return true;
}

void CodeMatrix::save_tsv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw ValidationError("codes: cannot write " + path);
  f << "item_id";
  for (int i = 1; i <= v; ++i) f << "\tc_" << i;
  f << "\n";
  for (int j = 0; j < n; ++j) {
    f << item_ids[static_cast<size_t>(j)];
    for (int i = 0; i < v; ++i) f << "\t" << at(i, j);
    f << "\n";
  }
}

CodeMatrix CodeMatrix::load_tsv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("codes: cannot read " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("item_id\t", 0) != 0)
    throw ValidationError("codes: missing header in " + path);
  const int v = static_cast<int>(std::count(line.begin(), line.end(), '\t'));
  std::vector<std::vector<int>> rows;
  std::vector<std::string> ids;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, '\t');
    ids.push_back(field);
    std::vector<int> codes;
    while (std::getline(ss, field, '\t')) codes.push_back(std::stoi(field));
    if (static_cast<int>(codes.size()) != v)
      throw ValidationError("codes: row for " + ids.back() + " has wrong arity");
    rows.push_back(std::move(codes));
  }
  CodeMatrix m;
  m.v = v;
  m.n = static_cast<int>(rows.size());
  m.item_ids = std::move(ids);
  m.codes.assign(static_cast<size_t>(m.v) * m.n, 0);
  for (int j = 0; j < m.n; ++j)
    for (int i = 0; i < v; ++i) m.at(i, j) = rows[static_cast<size_t>(j)][static_cast<size_t>(i)];
  return m;
}

CodeAssignment assign_codes(const DenseEmbeddingMatrix& e, int d, int k, uint64_t seed) {
  if (e.n < k) throw ValidationError("assign_codes: need at least k items");
  CodeAssignment out;
  out.codes.v = e.v;
  out.codes.n = e.n;
  out.codes.item_ids = e.item_ids;
  out.codes.codes.assign(static_cast<size_t>(e.v) * e.n, 0);
  for (int i = 0; i < e.v; ++i) {
    DMatrix x(e.n, e.dim);
    for (int j = 0; j < e.n; ++j)
      for (int c = 0; c < e.dim; ++c) x.at(j, c) = e.at(i, j, c);
    PcaModel pca = pca_fit(x, d);
    DMatrix reduced = pca_transform(pca, x);
    KMeansModel km = kmeans_fit(reduced, k, seed ^ (0x9e3779b9ull * static_cast<uint64_t>(i + 1)));
    for (int j = 0; j < e.n; ++j) out.codes.at(i, j) = km.assign(reduced.row(j)) + 1;
    out.pca.push_back(std::move(pca));
    out.kmeans.push_back(std::move(km));
    out.reduced.push_back(std::move(reduced));
  }
  return out;
}

CodeMatrix resolve_collisions(const CodeMatrix& codes, const std::vector<DMatrix>& reduced,
                              const std::vector<KMeansModel>& kmeans) {
  if (reduced.size() != static_cast<size_t>(codes.v) || kmeans.size() != static_cast<size_t>(codes.v))
    throw ValidationError("resolve_collisions: need reduced points and models per position");
  CodeMatrix out = codes;
  const int last = codes.v - 1;
  const DMatrix& pts = reduced[static_cast<size_t>(last)];
  const KMeansModel& km = kmeans[static_cast<size_t>(last)];

  std::map<SemanticId, std::vector<int>> groups;
  for (int j = 0; j < codes.n; ++j) groups[codes.column(j)].push_back(j);

  std::set<SemanticId> used;
  for (const auto& [column, members] : groups) used.insert(column);

  for (auto& [column, members] : groups) {
    if (members.size() < 2) continue;
    // keeper: nearest to its last-position centroid, ties to smaller item_id
    int keeper = members.front();
    double keeper_d = km.distance2(pts.row(keeper), codes.at(last, keeper) - 1);
    for (int j : members) {
      const double d = km.distance2(pts.row(j), codes.at(last, j) - 1);
      if (d < keeper_d ||
          (d == keeper_d && codes.item_ids[static_cast<size_t>(j)] <
                                codes.item_ids[static_cast<size_t>(keeper)])) {
        keeper = j;
        keeper_d = d;
      }
    }
    std::vector<int> movers;
    for (int j : members)
      if (j != keeper) movers.push_back(j);
    std::sort(movers.begin(), movers.end(), [&](int a, int b) {
      return codes.item_ids[static_cast<size_t>(a)] < codes.item_ids[static_cast<size_t>(b)];
    });

    for (int j : movers) {
      std::vector<int> order(static_cast<size_t>(km.k));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return km.distance2(pts.row(j), a) < km.distance2(pts.row(j), b);
      });
      bool placed = false;
      for (int c : order) {
        SemanticId candidate = out.column(j);
        candidate[static_cast<size_t>(last)] = c + 1;
        if (used.insert(candidate).second) {
          out.at(last, j) = c + 1;
          placed = true;
          break;
        }
      }
      if (!placed) {
        std::string names;
        for (int m : members) names += (names.empty() ? "" : ", ") + codes.item_ids[static_cast<size_t>(m)];
        throw ValidationError("resolve_collisions: all " + std::to_string(km.k) +
                              " alternatives exhausted for items [" + names + "]");
      }
    }
  }
  return out;
}

int hamming_distance(const SemanticId& a, const SemanticId& b) {
  if (a.size() != b.size()) throw ValidationError("hamming: length mismatch");
  int d = 0;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++d;
  return d;
}

double code_capacity(int k, int v) { return std::pow(static_cast<double>(k), v); }

void save_cluster_models(const std::string& manifest_path, const CodeAssignment& assignment,
                         const MetaMap& extra_meta) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  auto to_tensor = [](const std::vector<double>& data, std::vector<int> shape) {
    std::vector<float> f(data.begin(), data.end());
    return Tensor::from_data(std::move(shape), std::move(f));
  };
  for (size_t i = 0; i < assignment.pca.size(); ++i) {
    const auto& pca = assignment.pca[i];
    const auto& km = assignment.kmeans[i];
    const std::string p = "position" + std::to_string(i) + ".";
    tensors.emplace_back(p + "pca.mean", to_tensor(pca.mean, {pca.input_dim}));
    tensors.emplace_back(p + "pca.basis", to_tensor(pca.basis, {pca.input_dim, pca.components}));
    tensors.emplace_back(p + "pca.eigenvalues", to_tensor(pca.eigenvalues, {pca.components}));
    tensors.emplace_back(p + "kmeans.centroids", to_tensor(km.centroids, {km.k, km.dim}));
  }
  MetaMap meta = {{"positions", std::to_string(assignment.pca.size())}};
  for (const auto& kv : extra_meta) meta.push_back(kv);
  save_named_tensors(manifest_path, "cluster_models", meta, {}, tensors);
}

}  // namespace semrec
