#include "episeg/eval.hpp"

#include <algorithm>
#include <map>

#include "doctest.h"
#include "test_util.hpp"

using namespace episeg;
using episeg::test::random_mask;

namespace {

// Independent one-pass scorer for (pred, truth, exclusion) triples.
struct ScoreOracle {
    uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    ScoreOracle(const ImageU8& pred, const ImageU8& truth, const ImageU8* excl) {
        for (int y = 0; y < pred.h; ++y)
            for (int x = 0; x < pred.w; ++x) {
                if (excl && excl->at(x, y)) continue;
                bool p = pred.at(x, y) != 0, t = truth.at(x, y) != 0;
                tp += p && t;
                fp += p && !t;
                fn += !p && t;
                tn += !p && !t;
            }
    }
};

// Exhaustive ISUP lookup for patterns in {3,4,5}: most prevalent plus
// highest of the remaining grades, then the standard bucket table.
int isup_oracle(int primary, int secondary, int tertiary /*0 = absent*/) {
    int highest = std::max(secondary, tertiary);
    int sum = primary + highest;
    static const std::map<std::pair<int, int>, int> table = {
        {{3, 3}, 1}, {{3, 4}, 2}, {{3, 5}, 4}, {{4, 3}, 3}, {{4, 4}, 4},
        {{4, 5}, 5}, {{5, 3}, 4}, {{5, 4}, 5}, {{5, 5}, 5}};
    (void)sum;
    return table.at({primary, highest});
}

}  // namespace

TEST_CASE("confusion counts partition the non-excluded pixels") {
    Rng rng(20);
    ImageU8 pred = random_mask(rng, 64, 64);
    ImageU8 truth = random_mask(rng, 64, 64);

    ConfusionCounts same = confusion(pred, pred);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);

    ImageU8 inverted = pred;
    for (auto& v : inverted.data) v = v ? 0 : 1;
    ConfusionCounts opp = confusion(pred, inverted);
    CHECK(opp.tp == 0);
    CHECK(opp.tn == 0);

    for (int trial = 0; trial < 50; ++trial) {
        ImageU8 p = random_mask(rng, 64, 64, rng.uniform(0.1, 0.9));
        ImageU8 t = random_mask(rng, 64, 64, rng.uniform(0.1, 0.9));
        ImageU8 e = random_mask(rng, 64, 64, 0.2);
        ConfusionCounts c = confusion(p, t, &e);
        ScoreOracle o(p, t, &e);
        CHECK(c.tp == o.tp);
        CHECK(c.fp == o.fp);
        CHECK(c.fn == o.fn);
        CHECK(c.tn == o.tn);
        uint64_t excluded = 0;
        for (auto v : e.data) excluded += v;
        CHECK(c.total() + excluded == 64 * 64);
    }

    ImageU8 small(8, 8, 1);
    CHECK_THROWS_AS(confusion(pred, small), Error);
}

TEST_CASE("metric formulas") {
    ConfusionCounts c{8, 2, 2, 88};
    Metrics m = metrics(c);
    CHECK(m.accuracy == doctest::Approx(0.96));
    CHECK(m.f1 == doctest::Approx(0.8));
    CHECK(m.jaccard == doctest::Approx(2.0 / 3.0));
    CHECK_FALSE(m.flagged_perfect);

    Metrics perfect = metrics({50, 0, 0, 50});
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.f1 == 1.0);
    CHECK(perfect.jaccard == 1.0);

    Metrics empty_pos = metrics({0, 0, 0, 100});
    CHECK(empty_pos.f1 == 1.0);
    CHECK(empty_pos.jaccard == 1.0);
    CHECK(empty_pos.flagged_perfect);

    CHECK_THROWS_AS(metrics({0, 0, 0, 0}), Error);
}

TEST_CASE("f1 and jaccard satisfy j = f1/(2-f1)") {
    Rng rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        ConfusionCounts c{rng.uniform_int(100), rng.uniform_int(100), rng.uniform_int(100),
                          rng.uniform_int(100)};
        if (c.total() == 0 || c.tp + c.fp + c.fn == 0) continue;
        Metrics m = metrics(c);
        CHECK(m.jaccard == doctest::Approx(m.f1 / (2.0 - m.f1)).epsilon(1e-12));
        CHECK(m.f1 >= m.jaccard);
    }
}

TEST_CASE("aggregate means, spread, and grouping") {
    auto make_report = [](const std::string& id, const std::string& label, double f1,
                          std::vector<int> grades = {}) {
        RegionReport r;
        r.id = id;
        r.spec.label = label;
        r.spec.grades = grades;
        if (grades.size() >= 2)
            r.grade_group = grade_group({grades[0], grades[1], grades.size() > 2 ? grades[2] : 0});
        r.f1 = f1;
        r.accuracy = f1;
        r.jaccard = f1;
        return r;
    };

    std::vector<RegionReport> single{make_report("a", "benign", 0.9)};
    auto rows = aggregate(single, GroupBy::all);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].n == 1);
    CHECK(rows[0].f1_mean == doctest::Approx(0.9));
    CHECK(rows[0].f1_min == doctest::Approx(0.9));
    CHECK(rows[0].f1_max == doctest::Approx(0.9));
    CHECK(rows[0].f1_std == doctest::Approx(0.0));

    std::vector<RegionReport> two{make_report("a", "benign", 0.8), make_report("b", "tumor", 0.9, {3, 3})};
    rows = aggregate(two, GroupBy::all);
    CHECK(rows[0].f1_mean == doctest::Approx(0.85));
    CHECK(rows[0].f1_min == doctest::Approx(0.8));
    CHECK(rows[0].f1_max == doctest::Approx(0.9));
    // population std of {0.8, 0.9}
    CHECK(rows[0].f1_std == doctest::Approx(0.05));

    rows = aggregate(two, GroupBy::label);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].group == "Benign");
    CHECK(rows[0].n == 1);
    CHECK(rows[1].group == "Cancer");
    CHECK(rows[1].n == 1);

    // grade grouping partitions tumors; benign regions are excluded
    std::vector<RegionReport> mixed{make_report("a", "benign", 0.7),
                                    make_report("b", "tumor", 0.8, {3, 3}),
                                    make_report("c", "tumor", 0.9, {4, 3})};
    rows = aggregate(mixed, GroupBy::grade_group);
    int total_in_groups = 0;
    for (const auto& row : rows) total_in_groups += row.n;
    CHECK(total_in_groups == 2);

    // permutation invariance
    std::vector<RegionReport> shuffled{mixed[2], mixed[0], mixed[1]};
    auto rows2 = aggregate(shuffled, GroupBy::grade_group);
    REQUIRE(rows.size() == rows2.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].group == rows2[i].group);
        CHECK(rows[i].f1_mean == doctest::Approx(rows2[i].f1_mean));
    }

    CHECK_THROWS_AS(aggregate({}, GroupBy::all), Error);
}

TEST_CASE("grade_group matches the exhaustive ISUP lookup") {
    CHECK(grade_group({3, 3, 0}) == 1);
    CHECK(grade_group({3, 4, 0}) == 2);
    CHECK(grade_group({4, 3, 0}) == 3);
    CHECK(grade_group({4, 3, 5}) == 5);  // highest = 5 -> 4+5 = 9

    // all (primary, secondary) pairs in {3,4,5}, no tertiary
    for (int p : {3, 4, 5})
        for (int s : {3, 4, 5}) CHECK(grade_group({p, s, 0}) == isup_oracle(p, s, 0));

    // all triples in {3,4,5}^3
    for (int p : {3, 4, 5})
        for (int s : {3, 4, 5})
            for (int t : {3, 4, 5}) CHECK(grade_group({p, s, t}) == isup_oracle(p, s, t));

    // pattern 2 collapses to 3
    CHECK(grade_group({2, 2, 0}) == 1);
    CHECK(grade_group({2, 4, 0}) == 2);
    CHECK(grade_group({4, 2, 0}) == 3);

    CHECK_THROWS_AS(grade_group({1, 3, 0}), Error);
    CHECK_THROWS_AS(grade_group({3, 6, 0}), Error);
    try {
        grade_group({3, 6, 0});
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_grade);
    }
}

TEST_CASE("stratified split proportions and determinism") {
    // one group of 10 at 60/40 -> 6/4
    std::vector<std::pair<std::string, int>> ten;
    for (int i = 0; i < 10; ++i) ten.emplace_back("s" + std::to_string(i), 1);
    SplitResult r = stratified_split(ten, 0.6, 42);
    CHECK(r.train_ids.size() == 6);
    CHECK(r.test_ids.size() == 4);

    // the full cohort histogram 39/16/18/6/23 at a 62:40 split
    std::vector<std::pair<std::string, int>> cohort;
    int counts[5] = {39, 16, 18, 6, 23};
    int id = 0;
    for (int g = 1; g <= 5; ++g)
        for (int i = 0; i < counts[g - 1]; ++i) cohort.emplace_back("c" + std::to_string(id++), g);
    double frac = 62.0 / 102.0;
    SplitResult split = stratified_split(cohort, frac, 7);
    std::map<int, int> train_per_group;
    std::map<std::string, int> group_of;
    for (const auto& [sid, g] : cohort) group_of[sid] = g;
    for (const auto& sid : split.train_ids) train_per_group[group_of[sid]]++;
    for (int g = 1; g <= 5; ++g) {
        double exact = frac * counts[g - 1];
        CHECK(std::abs(train_per_group[g] - exact) < 1.0);  // within one slide
    }
    CHECK(train_per_group[1] >= 23);
    CHECK(train_per_group[1] <= 24);

    SplitResult again = stratified_split(cohort, frac, 7);
    CHECK(split.train_ids == again.train_ids);
    CHECK(split.test_ids == again.test_ids);

    SplitResult other_seed = stratified_split(cohort, frac, 8);
    CHECK(other_seed.train_ids != split.train_ids);

    // degenerate group warns
    std::vector<std::pair<std::string, int>> tiny{{"only", 1}};
    SplitResult warned = stratified_split(tiny, 0.5, 1);
    CHECK_FALSE(warned.warnings.empty());
}

TEST_CASE("external protocol merges epithelial classes and excludes background") {
    Rng rng(22);

    // all-stroma truth, empty prediction: flagged perfect
    ImageU8 truth(16, 16, 1, static_cast<uint8_t>(ExternalClass::stroma));
    ImageU8 pred(16, 16, 1, 0);
    ImageU8 bg(16, 16, 1, 0);
    RegionReport rep = external_protocol(pred, truth, bg);
    CHECK(rep.accuracy == 1.0);
    CHECK(rep.f1 == 1.0);
    CHECK(rep.flagged_perfect);

    // random multiclass truth equals the merge-then-score oracle
    for (int trial = 0; trial < 30; ++trial) {
        ImageU8 multi(32, 32, 1);
        for (auto& v : multi.data) v = static_cast<uint8_t>(rng.uniform_int(4));
        ImageU8 p = random_mask(rng, 32, 32);
        ImageU8 excl = random_mask(rng, 32, 32, 0.15);
        RegionReport got = external_protocol(p, multi, excl);

        ImageU8 merged(32, 32, 1);
        for (size_t i = 0; i < multi.data.size(); ++i) merged.data[i] = multi.data[i] != 0;
        ScoreOracle o(p, merged, &excl);
        CHECK(got.counts.tp == o.tp);
        CHECK(got.counts.fp == o.fp);
        CHECK(got.counts.fn == o.fn);
        CHECK(got.counts.tn == o.tn);
    }
}

TEST_CASE("region report invariant: stored metrics match recomputation") {
    Rng rng(23);
    RegionSpec spec;
    spec.label = "tumor";
    spec.grades = {4, 4};
    ImageU8 p = random_mask(rng, 40, 40), t = random_mask(rng, 40, 40);
    RegionReport rep = score_region("r0", spec, p, t);
    Metrics m = metrics(rep.counts);
    CHECK(rep.accuracy == doctest::Approx(m.accuracy).epsilon(1e-12));
    CHECK(rep.f1 == doctest::Approx(m.f1).epsilon(1e-12));
    CHECK(rep.jaccard == doctest::Approx(m.jaccard).epsilon(1e-12));
    CHECK(rep.grade_group == 4);
}

TEST_CASE("overlay colors") {
    ImageU8 pred(2, 2, 1), truth(2, 2, 1), excl(2, 2, 1, 0);
    pred.at(0, 0) = 1; truth.at(0, 0) = 1;  // TP
    pred.at(1, 0) = 1; truth.at(1, 0) = 0;  // FP
    pred.at(0, 1) = 0; truth.at(0, 1) = 1;  // FN
    excl.at(1, 1) = 1;                      // excluded
    ImageU8 ov = render_overlay(pred, truth, &excl);
    CHECK(ov.at(0, 0, 1) > 0);   // green
    CHECK(ov.at(0, 0, 0) == 0);
    CHECK(ov.at(1, 0, 0) > 0);   // red
    CHECK(ov.at(1, 0, 1) == 0);
    CHECK(ov.at(0, 1, 2) > 0);   // blue
    CHECK(ov.at(1, 1, 0) == 128);  // gray
}

TEST_CASE("regions.json round-trip") {
    episeg::test::TempDir td("regions");
    std::vector<RegionSpec> regions(2);
    regions[0].id = "r0";
    regions[0].slide_id = "s1";
    regions[0].x = 100;
    regions[0].y = 200;
    regions[0].width_px = 64;
    regions[0].height_px = 48;
    regions[0].mpp = 0.48;
    regions[0].label = "benign";
    regions[1] = regions[0];
    regions[1].id = "r1";
    regions[1].label = "tumor";
    regions[1].grades = {4, 3, 5};
    save_regions(regions, td.sub("regions.json"));
    auto back = load_regions(td.sub("regions.json"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "r0");
    CHECK(back[0].label == "benign");
    CHECK(back[1].grades == std::vector<int>{4, 3, 5});
    CHECK(back[1].x == 100);
}
