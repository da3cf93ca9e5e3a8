#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "episeg/image.hpp"
#include "episeg/tilestore.hpp"

namespace episeg {

// Epithelium is the positive label throughout.
struct ConfusionCounts {
    uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    uint64_t total() const { return tp + fp + fn + tn; }
};

struct Metrics {
    double accuracy = 0, f1 = 0, jaccard = 0;
    bool flagged_perfect = false;  // tp+fp+fn == 0: scored 1 by convention
};

struct GradeTriple {
    int primary = 0;
    int secondary = 0;
    int tertiary = 0;  // 0 = absent
};

struct RegionReport {
    std::string id;
    RegionSpec spec;
    ConfusionCounts counts;
    double accuracy = 0, f1 = 0, jaccard = 0;
    bool flagged_perfect = false;
    int grade_group = 0;  // 0 = none (benign region)
};

// Pixels where exclusion != 0 are skipped entirely.
ConfusionCounts confusion(const ImageU8& pred, const ImageU8& truth,
                          const ImageU8* exclusion = nullptr);

// acc = (tp+tn)/total, f1 = 2tp/(2tp+fp+fn), jaccard = tp/(tp+fp+fn).
// Throws EmptyRegion when total == 0.
Metrics metrics(const ConfusionCounts& c);

RegionReport score_region(const std::string& id, const RegionSpec& spec, const ImageU8& pred,
                          const ImageU8& truth, const ImageU8* exclusion = nullptr);

enum class GroupBy { all, label, grade_group };

struct SummaryRow {
    std::string group;
    int n = 0;
    double f1_mean = 0, f1_std = 0, f1_min = 0, f1_max = 0;
    double accuracy_mean = 0, jaccard_mean = 0;
};

// Unweighted mean over regions, population std. Rows in fixed order:
// All | Benign, Cancer | Grade group 1..5 (groups with members only).
std::vector<SummaryRow> aggregate(const std::vector<RegionReport>& reports, GroupBy group_by);

// ISUP grade group per the biopsy rule: most prevalent plus highest grade.
// Pattern 2 collapses to 3 (grade groups are defined on 3..5).
int grade_group(const GradeTriple& g);

struct SplitResult {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::vector<std::string> warnings;
};

// Deterministic per seed; per-group train count within one slide of the
// exact proportional allocation.
SplitResult stratified_split(const std::vector<std::pair<std::string, int>>& slides_with_groups,
                             double train_fraction, uint64_t seed);

// External-set protocol: multi-class truth (see ExternalClass) collapses to
// a single epithelium class; background_mask becomes the exclusion mask.
enum class ExternalClass : uint8_t { stroma = 0, benign_epithelium = 1, gleason3 = 2, gleason4 = 3 };
RegionReport external_protocol(const ImageU8& pred, const ImageU8& truth_multiclass,
                               const ImageU8& background_mask, const std::string& id = "external");

std::vector<RegionSpec> load_regions(const std::string& path);
void save_regions(const std::vector<RegionSpec>& regions, const std::string& path);

// region_id,label,grade_group,tp,fp,fn,tn,accuracy,f1,jaccard
void write_region_csv(const std::vector<RegionReport>& reports, const std::string& path);
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path);

// Green = true positive, red = false positive, blue = false negative,
// white = true negative, gray = excluded.
ImageU8 render_overlay(const ImageU8& pred, const ImageU8& truth,
                       const ImageU8* exclusion = nullptr);

}  // namespace episeg
