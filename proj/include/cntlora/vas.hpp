#pragma once

// Variable adapter structure: distribute a global rank budget K across
// attachment points by ranking the relative variance of each point's
// singular values.

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "cntlora/error.hpp"

namespace cntlora {

struct SingularProfile {
  std::string point_id;
  std::vector<double> S;  // descending, non-negative; length = min(k, d)
};

struct RankAllocation {
  std::vector<std::pair<std::string, std::size_t>> ranks;  // insertion order of profiles
  std::size_t budget = 0;

  std::size_t rank_of(const std::string& id) const {
    for (const auto& [pid, r] : ranks)
      if (pid == id) return r;
    throw Error(ErrorCode::BadConfig, "no allocation for '" + id + "'");
  }

  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& [_, r] : ranks) t += r;
    return t;
  }

  friend bool operator==(const RankAllocation&, const RankAllocation&) = default;
};

/// v_m = s_m^2 / sum_k s_k^2. All-zero input yields all-zero output.
inline std::vector<double> relative_variance(const std::vector<double>& s) {
  double total = 0.0;
  for (double x : s) {
    if (x < 0.0) throw Error(ErrorCode::BadConfig, "singular values must be non-negative");
    total += x * x;
  }
  std::vector<double> v(s.size(), 0.0);
  if (total == 0.0) return v;
  for (std::size_t i = 0; i < s.size(); ++i) v[i] = s[i] * s[i] / total;
  return v;
}

/// Top-K selection over all (v, point, index) triples, sorted by v descending
/// with ties broken by point insertion order then singular-value index.
/// Points below `min_rank` are topped up by evicting the globally smallest
/// selected values from points that can spare them.
inline RankAllocation allocate_ranks(const std::vector<SingularProfile>& profiles, std::size_t budget,
                                     std::size_t min_rank = 0) {
  std::size_t capacity = 0;
  for (const auto& p : profiles) {
    capacity += p.S.size();
    if (p.S.size() < min_rank) {
      throw Error(ErrorCode::BudgetInfeasible,
                  "point '" + p.point_id + "' has fewer than min_rank=" + std::to_string(min_rank) + " singular values");
    }
  }
  if (budget > capacity) {
    throw Error(ErrorCode::BudgetInfeasible,
                "budget " + std::to_string(budget) + " exceeds total capacity " + std::to_string(capacity));
  }
  if (min_rank * profiles.size() > budget) {
    throw Error(ErrorCode::BudgetInfeasible, "min_rank * points exceeds budget " + std::to_string(budget));
  }

  struct Entry {
    double v;
    std::size_t point;
    std::size_t index;
  };
  std::vector<Entry> entries;
  entries.reserve(capacity);
  for (std::size_t p = 0; p < profiles.size(); ++p) {
    const auto v = relative_variance(profiles[p].S);
    for (std::size_t m = 0; m < v.size(); ++m) entries.push_back({v[m], p, m});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.v != b.v) return a.v > b.v;
    if (a.point != b.point) return a.point < b.point;
    return a.index < b.index;
  });

  std::vector<bool> selected(entries.size(), false);
  std::vector<std::size_t> count(profiles.size(), 0);
  for (std::size_t i = 0; i < budget; ++i) {
    selected[i] = true;
    ++count[entries[i].point];
  }

  for (std::size_t p = 0; p < profiles.size(); ++p) {
    while (count[p] < min_rank) {
      // Next-best unselected value of this point.
      std::size_t add = entries.size();
      for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!selected[i] && entries[i].point == p) {
          add = i;
          break;
        }
      }
      // Globally smallest selected value from a point above min_rank.
      std::size_t evict = entries.size();
      for (std::size_t i = entries.size(); i-- > 0;) {
        if (selected[i] && entries[i].point != p && count[entries[i].point] > min_rank) {
          evict = i;
          break;
        }
      }
      if (add == entries.size() || evict == entries.size()) {
        throw Error(ErrorCode::BudgetInfeasible, "cannot satisfy min_rank for '" + profiles[p].point_id + "'");
      }
      selected[evict] = false;
      --count[entries[evict].point];
      selected[add] = true;
      ++count[p];
    }
  }

  RankAllocation out;
  out.budget = budget;
  for (std::size_t p = 0; p < profiles.size(); ++p) out.ranks.emplace_back(profiles[p].point_id, count[p]);
  return out;
}

/// Default budget: the fixed rank times the number of attachment points.
inline std::size_t default_budget(std::size_t rank, std::size_t n_points) { return rank * n_points; }

}  // namespace cntlora
