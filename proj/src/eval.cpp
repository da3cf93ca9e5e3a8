#include "episeg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "episeg/rng.hpp"
#include "json.hpp"

namespace episeg {

ConfusionCounts confusion(const ImageU8& pred, const ImageU8& truth, const ImageU8* exclusion) {
    if (!pred.same_shape(truth) || pred.ch != 1)
        raise(Errc::dimension_mismatch, "confusion needs equally sized single-channel masks");
    if (exclusion && !exclusion->same_shape(pred))
        raise(Errc::dimension_mismatch, "exclusion mask size mismatch");
    ConfusionCounts c;
    for (size_t i = 0; i < pred.pixels(); ++i) {
        if (exclusion && exclusion->data[i]) continue;
        bool p = pred.data[i] != 0, t = truth.data[i] != 0;
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

Metrics metrics(const ConfusionCounts& c) {
    uint64_t total = c.total();
    if (total == 0) raise(Errc::empty_region, "no pixels left to score");
    Metrics m;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
    uint64_t pos = c.tp + c.fp + c.fn;
    if (pos == 0) {
        m.f1 = 1.0;
        m.jaccard = 1.0;
        m.flagged_perfect = true;
    } else {
        m.f1 = 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
        m.jaccard = static_cast<double>(c.tp) / static_cast<double>(pos);
    }
    return m;
}

RegionReport score_region(const std::string& id, const RegionSpec& spec, const ImageU8& pred,
                          const ImageU8& truth, const ImageU8* exclusion) {
    RegionReport r;
    r.id = id;
    r.spec = spec;
    r.counts = confusion(pred, truth, exclusion);
    Metrics m = metrics(r.counts);
    r.accuracy = m.accuracy;
    r.f1 = m.f1;
    r.jaccard = m.jaccard;
    r.flagged_perfect = m.flagged_perfect;
    if (spec.grades.size() >= 2) {
        GradeTriple g{spec.grades[0], spec.grades[1],
                      spec.grades.size() > 2 ? spec.grades[2] : 0};
        r.grade_group = grade_group(g);
    }
    return r;
}

namespace {

SummaryRow summarize(const std::string& name, const std::vector<const RegionReport*>& group) {
    SummaryRow row;
    row.group = name;
    row.n = static_cast<int>(group.size());
    if (group.empty()) return row;
    double f1_sum = 0, f1_sq = 0, acc_sum = 0, jac_sum = 0;
    row.f1_min = 1e300;
    row.f1_max = -1e300;
    for (const RegionReport* r : group) {
        f1_sum += r->f1;
        f1_sq += r->f1 * r->f1;
        acc_sum += r->accuracy;
        jac_sum += r->jaccard;
        row.f1_min = std::min(row.f1_min, r->f1);
        row.f1_max = std::max(row.f1_max, r->f1);
    }
    double n = static_cast<double>(group.size());
    row.f1_mean = f1_sum / n;
    row.f1_std = std::sqrt(std::max(0.0, f1_sq / n - row.f1_mean * row.f1_mean));
    row.accuracy_mean = acc_sum / n;
    row.jaccard_mean = jac_sum / n;
    return row;
}

}  // namespace

std::vector<SummaryRow> aggregate(const std::vector<RegionReport>& reports, GroupBy group_by) {
    if (reports.empty()) raise(Errc::empty_input, "aggregate needs at least one region");
    std::vector<SummaryRow> rows;
    if (group_by == GroupBy::all) {
        std::vector<const RegionReport*> all;
        for (const auto& r : reports) all.push_back(&r);
        rows.push_back(summarize("All", all));
    } else if (group_by == GroupBy::label) {
        std::vector<const RegionReport*> benign, cancer;
        for (const auto& r : reports)
            (r.spec.label == "tumor" ? cancer : benign).push_back(&r);
        rows.push_back(summarize("Benign", benign));
        rows.push_back(summarize("Cancer", cancer));
    } else {
        // tumor regions partitioned by grade group; benign regions excluded
        for (int g = 1; g <= 5; ++g) {
            std::vector<const RegionReport*> group;
            for (const auto& r : reports)
                if (r.spec.label == "tumor" && r.grade_group == g) group.push_back(&r);
            if (!group.empty())
                rows.push_back(summarize("Grade group " + std::to_string(g), group));
        }
    }
    return rows;
}

int grade_group(const GradeTriple& g) {
    auto check = [](int v, bool allow_absent) {
        if (allow_absent && v == 0) return;
        if (v < 2 || v > 5) raise(Errc::invalid_grade, "grades must lie in {2..5}");
    };
    check(g.primary, false);
    check(g.secondary, false);
    check(g.tertiary, true);

    // pattern 2 collapses to 3 for grouping
    auto collapse = [](int v) { return v == 2 ? 3 : v; };
    int primary = collapse(g.primary);
    int secondary = collapse(g.secondary);
    int highest = secondary;
    if (g.tertiary != 0) highest = std::max(highest, collapse(g.tertiary));

    int sum = primary + highest;
    if (primary == 3 && highest == 3) return 1;
    if (primary == 3 && highest == 4) return 2;
    if (primary == 4 && highest == 3) return 3;
    if (sum == 8) return 4;
    if (sum >= 9) return 5;
    // 3+5 handled by sum == 8; 5+3 likewise; remaining combinations all
    // reach one of the branches above.
    raise(Errc::invalid_grade, "no grade group mapping");
}

SplitResult stratified_split(const std::vector<std::pair<std::string, int>>& slides_with_groups,
                             double train_fraction, uint64_t seed) {
    if (!(train_fraction >= 0.0 && train_fraction <= 1.0))
        raise(Errc::bad_config, "train_fraction must lie in [0,1]");
    std::map<int, std::vector<std::string>> groups;
    for (const auto& [id, g] : slides_with_groups) groups[g].push_back(id);

    SplitResult out;
    Rng rng(seed);
    for (auto& [g, ids] : groups) {
        std::sort(ids.begin(), ids.end());
        Rng grng = rng.fork(static_cast<uint64_t>(g) + 1);
        for (size_t i = ids.size(); i > 1; --i)
            std::swap(ids[i - 1], ids[grng.uniform_int(i)]);
        double exact = train_fraction * static_cast<double>(ids.size());
        size_t train_n = static_cast<size_t>(std::floor(exact + 0.5));
        train_n = std::min(train_n, ids.size());
        if (!ids.empty() && train_fraction > 0.0 && train_fraction < 1.0 &&
            (train_n == 0 || train_n == ids.size()))
            out.warnings.push_back("EmptyGroup: grade group " + std::to_string(g) +
                                   " too small to appear on both sides of the split");
        for (size_t i = 0; i < ids.size(); ++i)
            (i < train_n ? out.train_ids : out.test_ids).push_back(ids[i]);
    }
    return out;
}

RegionReport external_protocol(const ImageU8& pred, const ImageU8& truth_multiclass,
                               const ImageU8& background_mask, const std::string& id) {
    if (!pred.same_shape(truth_multiclass) || !pred.same_shape(background_mask))
        raise(Errc::dimension_mismatch, "external_protocol inputs must share dimensions");
    ImageU8 truth(truth_multiclass.w, truth_multiclass.h, 1);
    for (size_t i = 0; i < truth.pixels(); ++i) {
        uint8_t v = truth_multiclass.data[i];
        if (v > 3) raise(Errc::bad_label_value, "external truth classes are 0..3");
        truth.data[i] = v != static_cast<uint8_t>(ExternalClass::stroma) ? 1 : 0;
    }
    RegionSpec spec;
    spec.id = id;
    spec.label = "external";
    return score_region(id, spec, pred, truth, &background_mask);
}

std::vector<RegionSpec> load_regions(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(Errc::io_failure, "cannot open regions file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        raise(Errc::io_failure, std::string("bad regions json: ") + e.what());
    }
    std::vector<RegionSpec> out;
    try {
        for (const auto& item : j) {
            RegionSpec r;
            r.id = item.at("id").get<std::string>();
            r.slide_id = item.at("slide_id").get<std::string>();
            r.x = item.at("x").get<long>();
            r.y = item.at("y").get<long>();
            r.width_px = item.at("width_px").get<int>();
            r.height_px = item.at("height_px").get<int>();
            r.mpp = item.at("mpp").get<double>();
            r.label = item.at("label").get<std::string>();
            if (item.contains("grades"))
                for (const auto& g : item["grades"]) r.grades.push_back(g.get<int>());
            out.push_back(std::move(r));
        }
    } catch (const std::exception& e) {
        raise(Errc::bad_config, std::string("bad regions schema: ") + e.what());
    }
    return out;
}

void save_regions(const std::vector<RegionSpec>& regions, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : regions) {
        nlohmann::json item;
        item["id"] = r.id;
        item["slide_id"] = r.slide_id;
        item["x"] = r.x;
        item["y"] = r.y;
        item["width_px"] = r.width_px;
        item["height_px"] = r.height_px;
        item["mpp"] = r.mpp;
        item["label"] = r.label;
        if (!r.grades.empty()) item["grades"] = r.grades;
        j.push_back(std::move(item));
    }
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) raise(Errc::io_failure, "cannot write regions file: " + path);
}

void write_region_csv(const std::vector<RegionReport>& reports, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(Errc::io_failure, "cannot write report: " + path);
    f << "region_id,label,grade_group,tp,fp,fn,tn,accuracy,f1,jaccard\n";
    f.precision(12);
    for (const auto& r : reports) {
        f << r.id << "," << r.spec.label << ",";
        if (r.grade_group > 0) f << r.grade_group;
        f << "," << r.counts.tp << "," << r.counts.fp << "," << r.counts.fn << "," << r.counts.tn
          << "," << r.accuracy << "," << r.f1 << "," << r.jaccard << "\n";
    }
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) raise(Errc::io_failure, "cannot write summary: " + path);
    f << "group,n,f1_mean,f1_std,f1_min,f1_max,accuracy_mean,jaccard_mean\n";
    f.precision(12);
    for (const auto& r : rows)
        f << r.group << "," << r.n << "," << r.f1_mean << "," << r.f1_std << "," << r.f1_min << ","
          << r.f1_max << "," << r.accuracy_mean << "," << r.jaccard_mean << "\n";
}

ImageU8 render_overlay(const ImageU8& pred, const ImageU8& truth, const ImageU8* exclusion) {
    if (!pred.same_shape(truth))
        raise(Errc::dimension_mismatch, "overlay inputs must share dimensions");
    ImageU8 out(pred.w, pred.h, 3);
    for (size_t i = 0; i < pred.pixels(); ++i) {
        uint8_t r = 255, g = 255, b = 255;  // true negative: white
        if (exclusion && exclusion->data[i]) {
            r = g = b = 128;
        } else {
            bool p = pred.data[i] != 0, t = truth.data[i] != 0;
            if (p && t) {
                r = 0; g = 170; b = 0;
            } else if (p && !t) {
                r = 210; g = 0; b = 0;
            } else if (!p && t) {
                r = 0; g = 0; b = 220;
            }
        }
        out.data[i * 3] = r;
        out.data[i * 3 + 1] = g;
        out.data[i * 3 + 2] = b;
    }
    return out;
}

}  // namespace episeg
