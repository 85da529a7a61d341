#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "semrec/checkpoint.hpp"
#include "semrec/error.hpp"

namespace semrec {

struct RetrievalResult {
  std::string user_id;
  std::vector<std::string> ranked;  // best first, no duplicates
  std::string target;
};

// Fraction of queries whose target appears in the top k.
double recall_at_k(const std::vector<RetrievalResult>& results, int k);
// Single-relevant-item NDCG: 1/log2(rank+1) when rank <= k, else 0.
double ndcg_at_k(const std::vector<RetrievalResult>& results, int k);

struct ScoredCandidate {
  std::string item_id;
  double score = 0.0;
  bool clicked = false;
};

struct ScoringImpression {
  std::string user_id;
  std::vector<ScoredCandidate> candidates;
};

// Pairwise AUC of one impression (ties count one half). Needs both classes.
double auc(const ScoringImpression& impression);
// Reciprocal rank of the first clicked candidate under a stable descending
// sort by score; mean over impressions.
double mrr(const std::vector<ScoringImpression>& impressions);
double impression_ndcg_at_k(const std::vector<ScoringImpression>& impressions, int k);

struct ScoringReport {
  double mean_auc = 0.0;
  double mrr = 0.0;
  std::vector<std::pair<int, double>> ndcg;  // (k, value)
  int used = 0;
  int skipped_single_class = 0;  // impressions lacking a class, reported not dropped silently
};

ScoringReport score_metrics(const std::vector<ScoringImpression>& impressions,
                            const std::vector<int>& ndcg_ks);

// {"metric": value} JSON object with version/meta fields up front.
void write_metrics_json(const std::string& path,
                        const std::vector<std::pair<std::string, double>>& metrics,
                        const MetaMap& meta);
void print_metrics_table(std::ostream& os,
                         const std::vector<std::pair<std::string, double>>& metrics);

}  // namespace semrec
