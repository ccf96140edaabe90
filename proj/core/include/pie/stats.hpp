#pragma once

#include <cstddef>
#include <vector>

namespace pie {

double mean(const std::vector<double>& xs);

// Sample standard deviation (n-1 denominator); 0 for n <= 1.
double sample_std(const std::vector<double>& xs);

// Standard median: midpoint average of the two central order statistics for
// even counts. Input copied, not required sorted.
double median(std::vector<double> xs);

// Rank AUC of `pos` scored above `neg`; ties count 1/2. Exact pairwise count.
double rank_auc(const std::vector<double>& pos, const std::vector<double>& neg);

// Gini = 2*AUC - 1, clipped to [0, 1] for reporting.
double gini_separation(const std::vector<double>& pos, const std::vector<double>& neg);

// Average precision. `relevance` orders candidates (descending; ties broken by
// index ascending), `positive` marks relevant items. Throws ArgumentError when
// no item is positive.
double average_precision(const std::vector<double>& relevance,
                         const std::vector<bool>& positive);

// Tie-averaged ranks (1-based fractional ranks, descending by value).
std::vector<double> fractional_ranks(const std::vector<double>& xs);

// Spearman rank correlation with tie-averaged ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace pie
