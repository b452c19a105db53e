#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "rawgat/metrics.hpp"
#include "rawgat/rng.hpp"

using rawgat::AttackRow;
using rawgat::compute_eer;
using rawgat::EerResult;
using rawgat::Label;
using rawgat::per_attack_report;
using rawgat::Rng;
using rawgat::ScoreRecord;

namespace {

std::vector<ScoreRecord> make_records(const std::vector<double>& bona,
                                      const std::vector<double>& spoof) {
  std::vector<ScoreRecord> recs;
  for (std::size_t i = 0; i < bona.size(); ++i)
    recs.push_back({"b" + std::to_string(i), bona[i], Label::bona, "-"});
  for (std::size_t i = 0; i < spoof.size(); ++i)
    recs.push_back({"s" + std::to_string(i), spoof[i], Label::spoof, "A01"});
  return recs;
}

// Independent reference: counts accept/reject decisions with plain loops at
// every candidate threshold (each score, ascending, plus a reject-everything
// end point) and applies the same linear interpolation rule at the FAR/FRR
// sign change.
EerResult eer_oracle(const std::vector<ScoreRecord>& recs) {
  std::vector<double> ts;
  for (const auto& r : recs) ts.push_back(r.score);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());

  auto rates = [&](double t, bool past_end) {
    double fa = 0, fr = 0, ns = 0, nb = 0;
    for (const auto& r : recs) {
      const bool accept = past_end ? false : (r.score >= t);
      if (r.label == Label::spoof) {
        ns += 1;
        fa += accept ? 1 : 0;
      } else {
        nb += 1;
        fr += accept ? 0 : 1;
      }
    }
    return std::pair<double, double>{fa / ns, fr / nb};
  };

  double prev_t = ts[0];
  auto [prev_far, prev_frr] = rates(prev_t, false);
  for (std::size_t i = 1; i <= ts.size(); ++i) {
    const bool past_end = i == ts.size();
    const double t = past_end ? ts.back() : ts[i];
    auto [far, frr] = rates(t, past_end);
    const double d0 = prev_far - prev_frr;
    const double d1 = far - frr;
    if (d0 == 0.0) return {prev_far, prev_t};
    if (d0 > 0.0 && d1 <= 0.0) {
      const double alpha = d0 / (d0 - d1);
      return {prev_far + alpha * (far - prev_far),
              prev_t + alpha * (t - prev_t)};
    }
    prev_t = t;
    prev_far = far;
    prev_frr = frr;
  }
  return {prev_far, prev_t};
}

}  // namespace

TEST_CASE("eer: perfect separation gives zero") {
  const auto recs = make_records({0.8, 0.9}, {0.1, 0.2});
  const auto res = compute_eer(recs);
  CHECK(res.eer == doctest::Approx(0.0));
  CHECK(res.threshold == doctest::Approx(0.8));
}

TEST_CASE("eer: identical scores give one half") {
  std::vector<ScoreRecord> recs = make_records({0.7, 0.7}, {0.7, 0.7, 0.7});
  const auto res = compute_eer(recs);
  CHECK(res.eer == doctest::Approx(0.5));
  CHECK(res.threshold == doctest::Approx(0.7));
}

TEST_CASE("eer: four-trial worked example") {
  // bona {0.9, 0.4} vs spoof {0.6, 0.1}: at threshold 0.6 exactly one spoof
  // is accepted and exactly one bona rejected, so FAR = FRR = 1/2 with no
  // interpolation needed.
  const auto recs = make_records({0.9, 0.4}, {0.6, 0.1});
  const auto res = compute_eer(recs);
  const auto ref = eer_oracle(recs);
  CHECK(res.eer == doctest::Approx(ref.eer).epsilon(1e-12));
  CHECK(res.threshold == doctest::Approx(ref.threshold).epsilon(1e-12));
  CHECK(res.eer == doctest::Approx(0.5));
  CHECK(res.threshold == doctest::Approx(0.6));
}

TEST_CASE("eer: interpolated crossing between operating points") {
  SUBCASE("unequal class sizes") {
    // Between t=5.5 (FAR 2/5, FRR 1/3) and t=6 (FAR 2/5, FRR 2/3) the sign
    // of FAR-FRR flips; the linear crossing sits at alpha = 1/5, giving
    // EER 2/5 at threshold 5.6.
    std::vector<double> spoof(10);
    for (int i = 0; i < 10; ++i) spoof[static_cast<std::size_t>(i)] = i;
    const auto recs = make_records({4.5, 5.5, 6.5}, spoof);
    const auto res = compute_eer(recs);
    CHECK(res.eer == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(res.threshold == doctest::Approx(5.6).epsilon(1e-12));
    const auto ref = eer_oracle(recs);
    CHECK(res.eer == doctest::Approx(ref.eer).epsilon(1e-12));
  }
  SUBCASE("cross-class tie moves both rates across the segment") {
    // bona {0.5, 0.7} vs spoof {0.3, 0.5}: between t=0.5 (FAR 1/2, FRR 0)
    // and t=0.7 (FAR 0, FRR 1/2) both rates change; alpha = 1/2 gives
    // EER 1/4 at threshold 0.6.
    const auto recs = make_records({0.5, 0.7}, {0.3, 0.5});
    const auto res = compute_eer(recs);
    CHECK(res.eer == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(res.threshold == doctest::Approx(0.6).epsilon(1e-12));
    const auto ref = eer_oracle(recs);
    CHECK(res.eer == doctest::Approx(ref.eer).epsilon(1e-12));
  }
}

TEST_CASE("eer: exact crossing at a shared operating point") {
  const auto recs = make_records({0.2, 0.6, 0.7, 0.8}, {0.1, 0.3, 0.4, 0.5});
  const auto res = compute_eer(recs);
  CHECK(res.eer == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(res.threshold == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("eer: duplication invariance") {
  const auto base = make_records({0.9, 0.4, 0.55}, {0.6, 0.1, 0.5, 0.45});
  std::vector<ScoreRecord> tripled;
  for (int k = 0; k < 3; ++k)
    tripled.insert(tripled.end(), base.begin(), base.end());
  const auto a = compute_eer(base);
  const auto b = compute_eer(tripled);
  CHECK(a.eer == doctest::Approx(b.eer).epsilon(1e-14));
  CHECK(a.threshold == doctest::Approx(b.threshold).epsilon(1e-14));
}

TEST_CASE("eer: invariant under strictly increasing score transforms") {
  Rng rng(411);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> bona, spoof;
    const int nb = static_cast<int>(rng.uniform_int(1, 12));
    const int ns = static_cast<int>(rng.uniform_int(1, 12));
    for (int i = 0; i < nb; ++i)
      bona.push_back(static_cast<double>(rng.uniform_int(-8, 8)) / 4.0);
    for (int i = 0; i < ns; ++i)
      spoof.push_back(static_cast<double>(rng.uniform_int(-8, 8)) / 4.0);
    auto recs = make_records(bona, spoof);
    const double before = compute_eer(recs).eer;
    for (auto& r : recs) r.score = std::exp(r.score) + 3.0 * r.score;
    const double after = compute_eer(recs).eer;
    CHECK(before == doctest::Approx(after).epsilon(1e-12));
  }
}

TEST_CASE("eer: label swap with negated scores is symmetric") {
  Rng rng(902);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> bona, spoof;
    const int nb = static_cast<int>(rng.uniform_int(1, 10));
    const int ns = static_cast<int>(rng.uniform_int(1, 10));
    for (int i = 0; i < nb; ++i) bona.push_back(rng.uniform(-1.0, 1.0));
    for (int i = 0; i < ns; ++i) spoof.push_back(rng.uniform(-1.0, 1.0));
    auto recs = make_records(bona, spoof);
    auto flipped = recs;
    for (auto& r : flipped) {
      r.score = -r.score;
      r.label = r.label == Label::bona ? Label::spoof : Label::bona;
    }
    CHECK(compute_eer(recs).eer ==
          doctest::Approx(compute_eer(flipped).eer).epsilon(1e-12));
  }
}

TEST_CASE("eer: matches the brute-force sweep oracle on random score sets") {
  Rng rng(20260825);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<double> bona, spoof;
    const int nb = static_cast<int>(rng.uniform_int(1, 40));
    const int ns = static_cast<int>(rng.uniform_int(1, 40));
    // Coarse grid scores so ties and shared thresholds appear often.
    for (int i = 0; i < nb; ++i)
      bona.push_back(static_cast<double>(rng.uniform_int(0, 16)) / 8.0);
    for (int i = 0; i < ns; ++i)
      spoof.push_back(static_cast<double>(rng.uniform_int(0, 16)) / 8.0);
    const auto recs = make_records(bona, spoof);
    const auto got = compute_eer(recs);
    const auto ref = eer_oracle(recs);
    CHECK(got.eer == doctest::Approx(ref.eer).epsilon(1e-12));
    CHECK(got.threshold == doctest::Approx(ref.threshold).epsilon(1e-12));
  }
}

TEST_CASE("eer: rejects degenerate input") {
  std::vector<ScoreRecord> only_bona = make_records({0.5, 0.6}, {});
  CHECK_THROWS_AS(compute_eer(only_bona), rawgat::Error);
  std::vector<ScoreRecord> only_spoof = make_records({}, {0.5, 0.6});
  CHECK_THROWS_AS(compute_eer(only_spoof), rawgat::Error);
  CHECK_THROWS_AS(compute_eer({}), rawgat::Error);

  auto recs = make_records({0.5}, {0.4});
  recs[0].score = std::nan("");
  CHECK_THROWS_WITH_AS(compute_eer(recs),
                       doctest::Contains("non-finite score"), rawgat::Error);
}

TEST_CASE("per-attack report: rows equal subset reruns, pooled last") {
  std::vector<ScoreRecord> recs;
  Rng rng(77);
  for (int i = 0; i < 12; ++i)
    recs.push_back({"b" + std::to_string(i), rng.uniform(0.2, 1.0),
                    Label::bona, "-"});
  // A01 is trivially separable, A02 overlaps the bona range.
  for (int i = 0; i < 6; ++i)
    recs.push_back({"s1_" + std::to_string(i), rng.uniform(-1.0, 0.0),
                    Label::spoof, "A01"});
  for (int i = 0; i < 7; ++i)
    recs.push_back({"s2_" + std::to_string(i), rng.uniform(0.0, 0.9),
                    Label::spoof, "A02"});
  // No usable attack id -> grouped under "other".
  recs.push_back({"sx_0", 0.3, Label::spoof, ""});
  recs.push_back({"sx_1", 0.4, Label::spoof, "-"});

  const auto rows = per_attack_report(recs);
  REQUIRE(rows.size() == 4);
  CHECK(rows.back().attack == "pooled");
  CHECK(rows.back().spoof_trials == 15);
  CHECK(rows.back().eer == doctest::Approx(compute_eer(recs).eer));

  auto find_row = [&](const std::string& name) -> const AttackRow& {
    for (const auto& r : rows)
      if (r.attack == name) return r;
    REQUIRE(false);
    return rows.front();
  };

  for (const std::string name : {"A01", "A02", "other"}) {
    std::vector<ScoreRecord> subset;
    for (const auto& r : recs) {
      const bool is_other = r.attack.empty() || r.attack == "-";
      if (r.label == Label::bona ||
          (name == "other" ? is_other : r.attack == name))
        subset.push_back(r);
    }
    const auto& row = find_row(name);
    CHECK(row.eer == doctest::Approx(compute_eer(subset).eer).epsilon(1e-14));
  }
  CHECK(find_row("A01").eer == doctest::Approx(0.0));
  CHECK(find_row("A01").spoof_trials == 6);
  CHECK(find_row("other").spoof_trials == 2);

  const std::string text = rawgat::format_attack_report(rows);
  CHECK(text.find("attack\tspoof_trials\teer") != std::string::npos);
  CHECK(text.find("pooled\t15\t") != std::string::npos);
  CHECK(text.find("A01\t6\t0.000000") != std::string::npos);
}

TEST_CASE("per-attack report: single attack pools identically") {
  const auto recs = make_records({0.9, 0.4, 0.8}, {0.6, 0.1, 0.2});
  const auto rows = per_attack_report(recs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].attack == "A01");
  CHECK(rows[0].eer == doctest::Approx(rows[1].eer).epsilon(1e-14));
  CHECK_THROWS_AS(per_attack_report(make_records({0.1}, {})), rawgat::Error);
}
