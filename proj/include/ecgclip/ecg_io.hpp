#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ecgclip/util.hpp"

namespace ecgclip {

// One multi-lead recording. samples is [n_leads x n_samples] in millivolts.
struct EcgRecord {
    std::string patient_id;
    std::string record_id;
    double fs = 500.0;
    std::vector<std::string> leads;
    Eigen::MatrixXd samples;
    std::set<std::string> labels;

    // Throws InvalidSpec when the record breaks its invariants.
    void validate() const;
    Eigen::Index lead_index(const std::string& name) const;  // -1 if absent
    bool operator==(const EcgRecord&) const = default;
};

struct Cohort {
    std::vector<EcgRecord> records;
    std::map<std::string, std::string> reports;  // record_id -> report text
    std::vector<std::string> label_space;

    void validate() const;
    const EcgRecord* find(const std::string& record_id) const;
};

struct SplitPlan {
    std::map<std::string, std::string> assignment;  // patient_id -> split
    std::vector<std::pair<std::string, double>> ratios;
    std::uint64_t seed = 0;

    std::vector<std::string> patients_in(const std::string& split) const;
    // Records of `cohort` whose patient belongs to `split`, in cohort order.
    std::vector<std::size_t> record_indices(const Cohort& cohort, const std::string& split) const;
};

// Per-label planted component: a tone at frequency_hz on the given leads, plus the
// report keyword that names the label.
struct SignalTemplate {
    double frequency_hz = 0.0;
    double amplitude_mv = 0.25;
    std::vector<std::string> leads;
    std::string keyword;
};

struct CohortSpec {
    int n_patients = 0;
    int records_per_patient = 1;
    std::vector<std::pair<std::string, double>> label_prevalences;  // ordered label space
    std::map<std::string, SignalTemplate> class_signal_templates;    // defaults filled in per label
    std::uint64_t seed = 0;
    double fs = 500.0;
    double duration_s = 10.0;
    double noise_mv = 0.02;
    // Incidental report findings (not task labels), each planted as its own component.
    int n_descriptors = 6;
};

// The standard 12-lead order written by the generator.
const std::vector<std::string>& standard_leads();

// Default template for a label id; deterministic, distinct per slot.
SignalTemplate default_template(const std::string& label, std::size_t slot);

Cohort generate_synthetic_cohort(const CohortSpec& spec);

SplitPlan make_splits(const Cohort& cohort, const std::vector<std::pair<std::string, double>>& ratios,
                      const std::set<std::string>& stratify_on, std::uint64_t seed);

// Record container: `key=value` header, blank line, float32 LE samples (row-major).
std::string serialize_record(const EcgRecord& record);
EcgRecord parse_record(std::string_view bytes);
void write_record(const EcgRecord& record, const std::filesystem::path& path);
EcgRecord read_record(const std::filesystem::path& path);

// Cohort directory: records/<id>.ecg, labels.csv, reports.csv, label_space.txt.
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort read_cohort(const std::filesystem::path& dir);

void write_labels_csv(const std::map<std::string, std::set<std::string>>& labels, const std::filesystem::path& path);
std::map<std::string, std::set<std::string>> read_labels_csv(const std::filesystem::path& path);

void write_split_csv(const SplitPlan& plan, const std::filesystem::path& path);
SplitPlan read_split_csv(const std::filesystem::path& path);

// "a:0.85,b:0.15" -> ordered pairs.
std::vector<std::pair<std::string, double>> parse_ratios(const std::string& text);

}  // namespace ecgclip
