#include "rawgat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace rawgat {

namespace {

struct OperatingPoint {
  double threshold;
  double far;  // fraction of spoof trials accepted (score >= threshold)
  double frr;  // fraction of bona trials rejected (score < threshold)
};

// Every distinct score as a threshold, plus a virtual point past the maximum
// where everything is rejected. FAR is non-increasing and FRR non-decreasing
// along the sweep, so FAR - FRR crosses zero exactly once.
std::vector<OperatingPoint> sweep(const std::vector<double>& bona,
                                  const std::vector<double>& spoof) {
  std::vector<double> thresholds;
  thresholds.reserve(bona.size() + spoof.size());
  thresholds.insert(thresholds.end(), bona.begin(), bona.end());
  thresholds.insert(thresholds.end(), spoof.begin(), spoof.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  std::vector<double> bona_sorted = bona;
  std::vector<double> spoof_sorted = spoof;
  std::sort(bona_sorted.begin(), bona_sorted.end());
  std::sort(spoof_sorted.begin(), spoof_sorted.end());

  const double nb = static_cast<double>(bona.size());
  const double ns = static_cast<double>(spoof.size());

  std::vector<OperatingPoint> points;
  points.reserve(thresholds.size() + 1);
  for (double t : thresholds) {
    const auto spoof_below =
        std::lower_bound(spoof_sorted.begin(), spoof_sorted.end(), t) -
        spoof_sorted.begin();
    const auto bona_below =
        std::lower_bound(bona_sorted.begin(), bona_sorted.end(), t) -
        bona_sorted.begin();
    points.push_back({t, (ns - static_cast<double>(spoof_below)) / ns,
                      static_cast<double>(bona_below) / nb});
  }
  points.push_back({thresholds.back(), 0.0, 1.0});
  return points;
}

std::string normalized_attack(const std::string& attack) {
  if (attack.empty() || attack == "-") return "other";
  return attack;
}

}  // namespace

EerResult compute_eer(const std::vector<ScoreRecord>& records) {
  std::vector<double> bona;
  std::vector<double> spoof;
  for (const auto& r : records) {
    require(std::isfinite(r.score), ErrorKind::numeric,
            concat_msg("compute_eer: non-finite score for trial '", r.id, "'"));
    (r.label == Label::bona ? bona : spoof).push_back(r.score);
  }
  require(!bona.empty() && !spoof.empty(), ErrorKind::contract,
          concat_msg("compute_eer: need both classes, got ", bona.size(),
                     " bona fide and ", spoof.size(), " spoof trials"));

  const auto points = sweep(bona, spoof);
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    const double d0 = points[i].far - points[i].frr;
    const double d1 = points[i + 1].far - points[i + 1].frr;
    if (d0 < 0.0) continue;  // crossing is later in the sweep
    if (d0 == 0.0) return {points[i].far, points[i].threshold};
    if (d1 > 0.0) continue;
    const double alpha = d0 / (d0 - d1);
    const double eer =
        points[i].far + alpha * (points[i + 1].far - points[i].far);
    const double threshold =
        points[i].threshold +
        alpha * (points[i + 1].threshold - points[i].threshold);
    return {eer, threshold};
  }
  // FAR starts at 1 (lowest score accepts everything) and ends at 0, while
  // FRR goes 0 -> 1, so the loop above always finds the crossing.
  throw Error(ErrorKind::numeric, "compute_eer: no FAR/FRR crossing found");
}

std::vector<AttackRow> per_attack_report(
    const std::vector<ScoreRecord>& records) {
  std::vector<ScoreRecord> bona;
  std::map<std::string, std::vector<ScoreRecord>> by_attack;
  for (const auto& r : records) {
    if (r.label == Label::bona) {
      bona.push_back(r);
    } else {
      by_attack[normalized_attack(r.attack)].push_back(r);
    }
  }
  require(!bona.empty() && !by_attack.empty(), ErrorKind::contract,
          "per_attack_report: need both classes");

  std::vector<AttackRow> rows;
  for (const auto& [attack, spoof_subset] : by_attack) {
    std::vector<ScoreRecord> subset = bona;
    subset.insert(subset.end(), spoof_subset.begin(), spoof_subset.end());
    rows.push_back({attack, spoof_subset.size(), compute_eer(subset).eer});
  }
  std::size_t total_spoof = 0;
  for (const auto& [attack, spoof_subset] : by_attack)
    total_spoof += spoof_subset.size();
  rows.push_back({"pooled", total_spoof, compute_eer(records).eer});
  return rows;
}

std::string format_attack_report(const std::vector<AttackRow>& rows) {
  std::ostringstream os;
  os << "attack\tspoof_trials\teer\n";
  char buf[64];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", row.eer);
    os << row.attack << '\t' << row.spoof_trials << '\t' << buf << '\n';
  }
  return os.str();
}

}  // namespace rawgat
