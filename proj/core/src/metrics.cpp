#include "semrec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

#include <json.hpp>

namespace semrec {

namespace {

// 1-based rank of the target, 0 when absent; validates the no-duplicates invariant
int target_rank(const RetrievalResult& r) {
  std::set<std::string> seen;
  int rank = 0;
  for (size_t i = 0; i < r.ranked.size(); ++i) {
    if (!seen.insert(r.ranked[i]).second)
      throw ValidationError("metrics: duplicate item '" + r.ranked[i] + "' in ranked list");
    if (r.ranked[i] == r.target && rank == 0) rank = static_cast<int>(i) + 1;
  }
  return rank;
}

bool has_both_classes(const ScoringImpression& imp) {
  bool pos = false, neg = false;
  for (const auto& c : imp.candidates) (c.clicked ? pos : neg) = true;
  return pos && neg;
}

// stable descending sort by score; input order breaks ties
std::vector<const ScoredCandidate*> by_score(const ScoringImpression& imp) {
  std::vector<const ScoredCandidate*> order;
  for (const auto& c : imp.candidates) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(),
                   [](const ScoredCandidate* a, const ScoredCandidate* b) { return a->score > b->score; });
  return order;
}

}  // namespace

double recall_at_k(const std::vector<RetrievalResult>& results, int k) {
  if (k < 1) throw ValidationError("recall: k must be positive");
  if (results.empty()) throw ValidationError("recall: empty result set");
  int hits = 0;
  for (const auto& r : results) {
    const int rank = target_rank(r);
    if (rank > 0 && rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double ndcg_at_k(const std::vector<RetrievalResult>& results, int k) {
  if (k < 1) throw ValidationError("ndcg: k must be positive");
  if (results.empty()) throw ValidationError("ndcg: empty result set");
  double acc = 0.0;
  for (const auto& r : results) {
    const int rank = target_rank(r);
    if (rank > 0 && rank <= k) acc += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
  }
  return acc / static_cast<double>(results.size());
}

double auc(const ScoringImpression& impression) {
  if (!has_both_classes(impression))
    throw ValidationError("auc: impression needs at least one positive and one negative");
  double wins = 0.0;
  int64_t pairs = 0;
  for (const auto& p : impression.candidates) {
    if (!p.clicked) continue;
    for (const auto& n : impression.candidates) {
      if (n.clicked) continue;
      ++pairs;
      if (p.score > n.score)
        wins += 1.0;
      else if (p.score == n.score)
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

double mrr(const std::vector<ScoringImpression>& impressions) {
  if (impressions.empty()) throw ValidationError("mrr: no impressions");
  double acc = 0.0;
  int used = 0;
  for (const auto& imp : impressions) {
    if (!has_both_classes(imp)) continue;
    auto order = by_score(imp);
    for (size_t i = 0; i < order.size(); ++i)
      if (order[i]->clicked) {
        acc += 1.0 / static_cast<double>(i + 1);
        break;
      }
    ++used;
  }
  if (used == 0) throw ValidationError("mrr: every impression was single-class");
  return acc / static_cast<double>(used);
}

double impression_ndcg_at_k(const std::vector<ScoringImpression>& impressions, int k) {
  if (k < 1) throw ValidationError("ndcg: k must be positive");
  if (impressions.empty()) throw ValidationError("ndcg: no impressions");
  double acc = 0.0;
  int used = 0;
  for (const auto& imp : impressions) {
    if (!has_both_classes(imp)) continue;
    auto order = by_score(imp);
    for (size_t i = 0; i < order.size() && i < static_cast<size_t>(k); ++i)
      if (order[i]->clicked) {
        acc += 1.0 / std::log2(static_cast<double>(i + 1) + 1.0);
        break;
      }
    ++used;
  }
  if (used == 0) throw ValidationError("ndcg: every impression was single-class");
  return acc / static_cast<double>(used);
}

ScoringReport score_metrics(const std::vector<ScoringImpression>& impressions,
                            const std::vector<int>& ndcg_ks) {
  if (impressions.empty()) throw ValidationError("score_metrics: no impressions");
  ScoringReport report;
  std::vector<ScoringImpression> usable;
  for (const auto& imp : impressions) {
    if (has_both_classes(imp))
      usable.push_back(imp);
    else
      ++report.skipped_single_class;
  }
  if (usable.empty()) throw ValidationError("score_metrics: every impression was single-class");
  if (report.skipped_single_class > 0)
    std::cerr << "warning: skipped " << report.skipped_single_class
              << " single-class impression(s)\n";
  report.used = static_cast<int>(usable.size());
  double acc = 0.0;
  for (const auto& imp : usable) acc += auc(imp);
  report.mean_auc = acc / static_cast<double>(usable.size());
  report.mrr = mrr(usable);
  for (int k : ndcg_ks) report.ndcg.emplace_back(k, impression_ndcg_at_k(usable, k));
  return report;
}

void write_metrics_json(const std::string& path,
                        const std::vector<std::pair<std::string, double>>& metrics,
                        const MetaMap& meta) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  for (const auto& [k, v] : meta) j[k] = v;
  for (const auto& [name, value] : metrics) j[name] = value;
  std::ofstream f(path);
  if (!f) throw ValidationError("metrics: cannot write " + path);
  f << j.dump(2) << "\n";
}

void print_metrics_table(std::ostream& os,
                         const std::vector<std::pair<std::string, double>>& metrics) {
  size_t width = 6;
  for (const auto& [name, value] : metrics) width = std::max(width, name.size());
  for (const auto& [name, value] : metrics)
    os << std::left << std::setw(static_cast<int>(width) + 2) << name << std::fixed
       << std::setprecision(4) << value << "\n";
}

}  // namespace semrec
