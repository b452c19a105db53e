#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rawgat/common.hpp"

namespace rawgat {

enum class Label { spoof = 0, bona = 1 };

struct ScoreRecord {
  std::string id;
  double score = 0.0;  // higher = more bona fide
  Label label = Label::spoof;
  std::string attack;  // spoof system id; empty or "-" when not applicable
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Equal error rate via a sweep over the sorted distinct scores (accept iff
// score >= threshold), linearly interpolating between the two operating
// points where FAR and FRR cross. Needs at least one record per class and
// finite scores.
EerResult compute_eer(const std::vector<ScoreRecord>& records);

struct AttackRow {
  std::string attack;        // "pooled" for the summary row
  std::size_t spoof_trials = 0;
  double eer = 0.0;
};

// Per-attack EERs, each spoof subset measured against all bona fide records,
// plus a pooled row (always last). Spoof records with no usable attack id
// group under "other".
std::vector<AttackRow> per_attack_report(
    const std::vector<ScoreRecord>& records);

// Aligned tab-separated rendering, one line per row, with a header.
std::string format_attack_report(const std::vector<AttackRow>& rows);

}  // namespace rawgat
