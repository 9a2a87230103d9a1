#pragma once

// Keyframe partitions for the three conditioning strategies.

#include <string>
#include <vector>

#include "kfd/core.hpp"

namespace kfd {

enum class StrategyKind { prediction, interpolation, mixed };

inline std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::prediction: return "prediction";
    case StrategyKind::interpolation: return "interpolation";
    case StrategyKind::mixed: return "mixed";
  }
  return "?";
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "prediction") return StrategyKind::prediction;
  if (s == "interpolation") return StrategyKind::interpolation;
  if (s == "mixed") return StrategyKind::mixed;
  throw ConfigError("unknown strategy '" + s + "' (expected prediction, interpolation or mixed)");
}

struct Strategy {
  StrategyKind kind = StrategyKind::interpolation;
  int interval = 3;  // interpolation only
  int k = 6;         // prediction / mixed keyframe count

  void validate() const {
    if (kind == StrategyKind::interpolation && interval < 2) throw ConfigError("interval must be at least 2");
    if (kind == StrategyKind::prediction && k < 1) throw ConfigError("k must be at least 1");
    if (kind == StrategyKind::mixed && k < 2) throw ConfigError("mixed strategy needs k >= 2");
  }

  std::string label() const {
    return kind == StrategyKind::interpolation ? "interpolation-d" + std::to_string(interval)
                                               : to_string(kind) + "-k" + std::to_string(k);
  }
};

/// Intervals d >= 2 that divide n - 1.
inline std::vector<int> valid_intervals(int n) {
  std::vector<int> v;
  for (int d = 2; d <= n - 1; ++d)
    if ((n - 1) % d == 0) v.push_back(d);
  return v;
}

/// Keyframe partition of a window of n frames (0-based indices).
inline IndexPartition make_partition(int n, const Strategy& s) {
  s.validate();
  if (n < 2) throw ConfigError("make_partition: need at least two frames");
  std::vector<size_t> cond;
  switch (s.kind) {
    case StrategyKind::prediction:
      if (s.k >= n) throw ConfigError("prediction: k must be smaller than the window length");
      for (int i = 0; i < s.k; ++i) cond.push_back(i);
      break;
    case StrategyKind::mixed:
      if (s.k >= n) throw ConfigError("mixed: k must be smaller than the window length");
      for (int i = 0; i < s.k - 1; ++i) cond.push_back(i);
      cond.push_back(n - 1);
      break;
    case StrategyKind::interpolation: {
      if ((n - 1) % s.interval != 0) {
        std::string valid;
        for (int d : valid_intervals(n)) valid += (valid.empty() ? "" : ", ") + std::to_string(d);
        throw ConfigError("interval " + std::to_string(s.interval) + " does not divide N-1 = " + std::to_string(n - 1) +
                          "; valid intervals: " + (valid.empty() ? "none" : valid));
      }
      for (int i = 0; i < n; i += s.interval) cond.push_back(i);
      break;
    }
  }
  return IndexPartition(static_cast<size_t>(n), cond);
}

/// Window length used by the pipeline: 16 frames, shortened for
/// interpolation to the largest 1 + m*d not exceeding 16 so that d divides N-1.
inline int window_length(const Strategy& s, int base = 16) {
  s.validate();
  if (s.kind != StrategyKind::interpolation) return base;
  if (s.interval > base - 1) throw ConfigError("interval exceeds the window length");
  return 1 + s.interval * ((base - 1) / s.interval);
}

}  // namespace kfd
