#include "ecgclip/ecg_io.hpp"

#include "ecgclip/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace ecgclip {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Data model

void EcgRecord::validate() const {
    if (!(fs > 0.0) || !std::isfinite(fs)) throw InvalidSpec("record " + record_id + ": fs must be positive");
    if (static_cast<Eigen::Index>(leads.size()) != samples.rows())
        throw InvalidSpec("record " + record_id + ": lead count does not match sample rows");
    if (samples.cols() < 1) throw InvalidSpec("record " + record_id + ": no samples");
    std::set<std::string> seen;
    for (const auto& l : leads)
        if (!seen.insert(l).second) throw InvalidSpec("record " + record_id + ": duplicate lead " + l);
}

Eigen::Index EcgRecord::lead_index(const std::string& name) const {
    auto it = std::find(leads.begin(), leads.end(), name);
    return it == leads.end() ? -1 : static_cast<Eigen::Index>(it - leads.begin());
}

void Cohort::validate() const {
    std::set<std::string> ids;
    std::set<std::string> space(label_space.begin(), label_space.end());
    for (const auto& r : records) {
        r.validate();
        if (!ids.insert(r.record_id).second) throw InvalidSpec("duplicate record id " + r.record_id);
        for (const auto& l : r.labels)
            if (!space.count(l)) throw InvalidSpec("record " + r.record_id + ": label " + l + " not in label space");
    }
    for (const auto& [id, text] : reports)
        if (!ids.count(id)) throw InvalidSpec("report for unknown record " + id);
}

const EcgRecord* Cohort::find(const std::string& record_id) const {
    for (const auto& r : records)
        if (r.record_id == record_id) return &r;
    return nullptr;
}

std::vector<std::string> SplitPlan::patients_in(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& [p, s] : assignment)
        if (s == split) out.push_back(p);
    return out;
}

std::vector<std::size_t> SplitPlan::record_indices(const Cohort& cohort, const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cohort.records.size(); ++i) {
        auto it = assignment.find(cohort.records[i].patient_id);
        if (it != assignment.end() && it->second == split) out.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic cohort

const std::vector<std::string>& standard_leads() {
    static const std::vector<std::string> leads = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                                   "V1", "V2", "V3",  "V4",  "V5",  "V6"};
    return leads;
}

namespace {

struct KnownLabel {
    const char* id;
    const char* keyword;
};

constexpr KnownLabel kKnownLabels[] = {
    {"AF", "atrial fibrillation"},
    {"AFL", "atrial flutter"},
    {"LBBB", "left bundle branch block"},
    {"RBBB", "right bundle branch block"},
    {"STEMI", "acute myocardial infarction"},
    {"OMI", "old myocardial infarction"},
    {"LVH", "left ventricular hypertrophy"},
    {"APB", "premature atrial complexes"},
    {"VPB", "premature ventricular complexes"},
    {"SBrad", "sinus bradycardia"},
    {"STach", "sinus tachycardia"},
    {"1AVB", "first degree av block"},
};

// Label tones sit below 50 Hz and descriptor tones above it, so the two never share a band.
constexpr double kLabelFreqs[] = {23.0, 31.0, 37.0, 43.0, 17.0, 27.0, 33.0, 39.0, 45.0};
// Each descriptor owns one lead; the tones stay under the 62.5 Hz Nyquist limit of the first strided conv.
constexpr double kDescriptorFreqs[] = {53.0, 55.0, 57.0, 59.0, 61.0, 54.0, 56.0, 58.0};
constexpr double kDescriptorAmplitudeMv = 1.0;
constexpr const char* kDescriptorLeads[] = {"V1", "V3", "V5", "I", "V2", "V4", "V6", "II"};
constexpr const char* kDescriptorPhrases[] = {
    "low voltage in limb leads", "axis deviation noted",  "poor r wave progression",
    "nonspecific t wave changes", "prominent u waves",    "borderline qt interval",
    "clockwise rotation",         "early precordial transition",
};
constexpr const char* kFiller[] = {"recorded", "standard", "tracing",  "compared", "previous", "unchanged",
                                   "technically", "adequate", "confirmed", "reviewed", "routine",  "study"};

// Lead gains of the heartbeat waves for I, II and V1..V6.
constexpr double kQrsGain[] = {0.6, 1.0, -0.8, -0.4, 0.3, 0.9, 1.1, 0.8};
constexpr double kTGain[] = {0.5, 0.8, -0.2, 0.3, 0.5, 0.6, 0.6, 0.5};

double gauss_bump(double t, double center, double width) {
    double z = (t - center) / width;
    return std::exp(-0.5 * z * z);
}

std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

}  // namespace

SignalTemplate default_template(const std::string& label, std::size_t slot) {
    SignalTemplate t;
    constexpr std::size_t nf = std::size(kLabelFreqs);
    t.frequency_hz = kLabelFreqs[slot % nf] + 2.0 * static_cast<double>(slot / nf);
    t.amplitude_mv = 0.25;
    t.leads = {"II", "V" + std::to_string(1 + slot % 6)};
    t.keyword = to_lower(label);
    for (const auto& k : kKnownLabels)
        if (label == k.id) t.keyword = k.keyword;
    return t;
}

Cohort generate_synthetic_cohort(const CohortSpec& spec) {
    if (spec.n_patients <= 0) throw InvalidSpec("synthetic cohort needs at least one patient");
    if (spec.records_per_patient <= 0) throw InvalidSpec("records_per_patient must be positive");
    if (spec.label_prevalences.empty()) throw InvalidSpec("synthetic cohort needs a non-empty label space");
    if (!(spec.fs > 0.0) || !(spec.duration_s > 0.0)) throw InvalidSpec("fs and duration must be positive");
    if (spec.n_descriptors < 0 || spec.n_descriptors > static_cast<int>(std::size(kDescriptorFreqs)))
        throw InvalidSpec("n_descriptors must be in [0, 8]");
    for (const auto& [label, p] : spec.label_prevalences)
        if (!(p >= 0.0 && p <= 1.0)) throw InvalidSpec("prevalence of " + label + " outside [0,1]");

    Cohort cohort;
    std::vector<SignalTemplate> templates;
    std::set<std::string> keywords;
    for (std::size_t k = 0; k < spec.label_prevalences.size(); ++k) {
        const auto& label = spec.label_prevalences[k].first;
        if (std::find(cohort.label_space.begin(), cohort.label_space.end(), label) != cohort.label_space.end())
            throw InvalidSpec("duplicate label " + label);
        cohort.label_space.push_back(label);
        auto it = spec.class_signal_templates.find(label);
        templates.push_back(it != spec.class_signal_templates.end() ? it->second : default_template(label, k));
        if (!keywords.insert(templates.back().keyword).second)
            throw InvalidSpec("label keyword '" + templates.back().keyword + "' is not distinct");
    }

    const int n_records = spec.n_patients * spec.records_per_patient;
    const auto n_samples = static_cast<Eigen::Index>(std::llround(spec.fs * spec.duration_s));

    // Exact label counts: round(prevalence * n_records) records per label, chosen by a seeded shuffle.
    std::vector<std::set<std::string>> record_labels(n_records);
    for (std::size_t k = 0; k < cohort.label_space.size(); ++k) {
        auto rng = make_rng(spec.seed, 17 + k);
        std::vector<int> order(n_records);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        auto count = static_cast<int>(std::llround(spec.label_prevalences[k].second * n_records));
        for (int i = 0; i < count; ++i) record_labels[order[i]].insert(cohort.label_space[k]);
    }

    const std::vector<std::string> leads = standard_leads();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    for (int p = 0; p < spec.n_patients; ++p) {
        auto prng = make_rng(spec.seed, 1'000'000 + static_cast<std::uint64_t>(p));
        const double base_rate = 55.0 + 40.0 * unif(prng);
        const double base_amp = 0.8 + 0.4 * unif(prng);
        char pid[32];
        std::snprintf(pid, sizeof pid, "P%05d", p);

        for (int j = 0; j < spec.records_per_patient; ++j) {
            const int idx = p * spec.records_per_patient + j;
            auto rng = make_rng(spec.seed, 2'000'000 + static_cast<std::uint64_t>(idx));
            char rid[32];
            std::snprintf(rid, sizeof rid, "R%06d", idx);

            EcgRecord rec;
            rec.patient_id = pid;
            rec.record_id = rid;
            rec.fs = spec.fs;
            rec.leads = leads;
            rec.labels = record_labels[idx];

            const double rate = base_rate * (0.95 + 0.1 * unif(rng));
            const double amp = base_amp * (0.9 + 0.2 * unif(rng));
            const double rr = 60.0 / rate;
            const double first_beat = rr * unif(rng);
            const double wander_phase = 2.0 * std::numbers::pi * unif(rng);
            const double mains_phase = 2.0 * std::numbers::pi * unif(rng);

            // Independent leads I, II, V1..V6 in rows 0..7.
            Eigen::MatrixXd indep = Eigen::MatrixXd::Zero(8, n_samples);
            for (Eigen::Index s = 0; s < n_samples; ++s) {
                const double t = static_cast<double>(s) / spec.fs;
                double phase = std::fmod(t - first_beat + 10.0 * rr, rr);
                if (phase > 0.6 * rr) phase -= rr;
                const double p_wave = 0.15 * gauss_bump(phase, -0.16, 0.025);
                const double qrs = -0.1 * gauss_bump(phase, -0.025, 0.008) + 1.0 * gauss_bump(phase, 0.0, 0.01) -
                                   0.25 * gauss_bump(phase, 0.028, 0.009);
                const double t_wave = 0.3 * gauss_bump(phase, 0.26, 0.045);
                const double wander = 0.1 * std::sin(2.0 * std::numbers::pi * 0.15 * t + wander_phase);
                const double mains = 0.05 * std::sin(2.0 * std::numbers::pi * 50.0 * t + mains_phase);
                for (int l = 0; l < 8; ++l)
                    indep(l, s) = amp * (kQrsGain[l] * (qrs + p_wave) + kTGain[l] * t_wave) + wander + mains;
            }
            auto indep_row = [&](const std::string& lead) -> Eigen::Index {
                if (lead == "I") return 0;
                if (lead == "II") return 1;
                if (lead.size() == 2 && lead[0] == 'V' && lead[1] >= '1' && lead[1] <= '6') return 2 + (lead[1] - '1');
                throw InvalidSpec("template lead must be one of I, II, V1-V6: " + lead);
            };
            auto plant = [&](double freq, double amplitude, const std::vector<std::string>& on) {
                const double phase = 2.0 * std::numbers::pi * unif(rng);
                Eigen::RowVectorXd tone(n_samples);
                for (Eigen::Index s = 0; s < n_samples; ++s)
                    tone(s) = amplitude * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(s) / spec.fs + phase);
                for (const auto& lead : on) indep.row(indep_row(lead)) += tone;
            };

            std::vector<std::string> sentences;
            for (std::size_t k = 0; k < cohort.label_space.size(); ++k) {
                if (!rec.labels.count(cohort.label_space[k])) continue;
                plant(templates[k].frequency_hz, templates[k].amplitude_mv, templates[k].leads);
                sentences.push_back(templates[k].keyword);
            }
            if (sentences.empty()) sentences.emplace_back("sinus rhythm within normal limits");
            for (int d = 0; d < spec.n_descriptors; ++d) {
                if (unif(rng) < 0.5) continue;
                plant(kDescriptorFreqs[d], kDescriptorAmplitudeMv, {kDescriptorLeads[d]});
                sentences.emplace_back(kDescriptorPhrases[d]);
            }
            const int n_filler = 3 + static_cast<int>(unif(rng) * 4.0);
            std::string filler;
            for (int f = 0; f < n_filler; ++f) {
                if (f) filler += ' ';
                filler += kFiller[static_cast<std::size_t>(unif(rng) * std::size(kFiller)) % std::size(kFiller)];
            }
            sentences.push_back(filler);

            for (Eigen::Index s = 0; s < n_samples; ++s)
                for (int l = 0; l < 8; ++l) indep(l, s) += spec.noise_mv * normal(rng);

            rec.samples.resize(12, n_samples);
            const auto lead_i = indep.row(0);
            const auto lead_ii = indep.row(1);
            rec.samples.row(0) = lead_i;
            rec.samples.row(1) = lead_ii;
            rec.samples.row(2) = lead_ii - lead_i;
            rec.samples.row(3) = -0.5 * (lead_i + lead_ii);
            rec.samples.row(4) = lead_i - 0.5 * lead_ii;
            rec.samples.row(5) = lead_ii - 0.5 * lead_i;
            rec.samples.bottomRows(6) = indep.bottomRows(6);
            // Stored as float32; keep the in-memory record identical to what a reader sees.
            rec.samples = rec.samples.cast<float>().cast<double>();

            std::string report;
            for (std::size_t k = 0; k < sentences.size(); ++k) {
                if (k) report += ' ';
                report += capitalize(sentences[k]) + '.';
            }
            cohort.reports[rec.record_id] = report;
            cohort.records.push_back(std::move(rec));
        }
    }
    return cohort;
}

// ---------------------------------------------------------------------------
// Patient-level stratified splitting

std::vector<std::pair<std::string, double>> parse_ratios(const std::string& text) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& part : split(text, ',')) {
        auto kv = split(part, ':');
        if (kv.size() != 2 || trim(kv[0]).empty()) throw InvalidRatio("ratio entry must be name:fraction, got '" + part + "'");
        try {
            std::size_t used = 0;
            std::string num = trim(kv[1]);
            double v = std::stod(num, &used);
            if (used != num.size()) throw std::invalid_argument("trailing");
            out.emplace_back(trim(kv[0]), v);
        } catch (const std::logic_error&) {
            throw InvalidRatio("ratio for '" + trim(kv[0]) + "' is not a number");
        }
    }
    return out;
}

SplitPlan make_splits(const Cohort& cohort, const std::vector<std::pair<std::string, double>>& ratios,
                      const std::set<std::string>& stratify_on, std::uint64_t seed) {
    if (ratios.empty()) throw InvalidRatio("no split ratios given");
    double total = 0.0;
    std::set<std::string> names;
    for (const auto& [name, r] : ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw InvalidRatio("ratio of split '" + name + "' outside (0,1]");
        if (!names.insert(name).second) throw InvalidRatio("duplicate split name " + name);
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidRatio("split ratios must sum to 1");

    // Patients in first-seen order, with the union of their record labels (restricted to stratify_on).
    std::vector<std::string> patients;
    std::map<std::string, std::set<std::string>> patient_labels;
    for (const auto& r : cohort.records) {
        auto [it, fresh] = patient_labels.try_emplace(r.patient_id);
        if (fresh) patients.push_back(r.patient_id);
        for (const auto& l : r.labels)
            if (stratify_on.count(l)) it->second.insert(l);
    }
    const std::size_t n = patients.size();
    const std::size_t k = ratios.size();

    // Integer quotas by largest remainder so split sizes are exact.
    std::vector<std::size_t> quota(k);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned_total = 0;
    for (std::size_t s = 0; s < k; ++s) {
        double exact = ratios[s].second * static_cast<double>(n);
        quota[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        assigned_total += quota[s];
        remainders.emplace_back(exact - static_cast<double>(quota[s]), s);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned_total < n; ++i, ++assigned_total) ++quota[remainders[i % k].second];

    std::map<std::string, double> label_patients;
    for (const auto& p : patients)
        for (const auto& l : patient_labels[p]) label_patients[l] += 1.0;

    // Seeded shuffle, then rarest positive label first; unlabeled patients last.
    auto rng = make_rng(seed, 0x5917);
    std::shuffle(patients.begin(), patients.end(), rng);
    auto rarity = [&](const std::string& p) -> std::pair<double, std::string> {
        std::pair<double, std::string> best{std::numeric_limits<double>::infinity(), ""};
        for (const auto& l : patient_labels[p]) best = std::min(best, std::make_pair(label_patients[l], l));
        return best;
    };
    std::stable_sort(patients.begin(), patients.end(),
                     [&](const std::string& a, const std::string& b) { return rarity(a).first < rarity(b).first; });

    std::vector<std::size_t> filled(k, 0);
    std::map<std::string, std::vector<double>> label_filled;
    SplitPlan plan;
    plan.ratios = ratios;
    plan.seed = seed;
    for (const auto& p : patients) {
        const auto [count, rarest] = rarity(p);
        std::size_t best = k;
        double best_deficit = -std::numeric_limits<double>::infinity();
        double best_size_deficit = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < k; ++s) {
            if (filled[s] >= quota[s]) continue;
            const double size_deficit = static_cast<double>(quota[s]) - static_cast<double>(filled[s]);
            double deficit = size_deficit;
            if (!rarest.empty()) {
                auto& lf = label_filled[rarest];
                lf.resize(k, 0.0);
                deficit = count * ratios[s].second - lf[s];
            }
            if (deficit > best_deficit + 1e-12 ||
                (std::abs(deficit - best_deficit) <= 1e-12 && size_deficit > best_size_deficit)) {
                best = s;
                best_deficit = deficit;
                best_size_deficit = size_deficit;
            }
        }
        ++filled[best];
        for (const auto& l : patient_labels[p]) {
            auto& lf = label_filled[l];
            lf.resize(k, 0.0);
            lf[best] += 1.0;
        }
        plan.assignment[p] = ratios[best].first;
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Record container

namespace {

void append_f32_le(std::string& out, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float read_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return std::bit_cast<float>(bits);
}

void check_header_value(const std::string& key, const std::string& value) {
    if (value.find_first_of("\n\r") != std::string::npos || (key != "leads" && value.find(',') != std::string::npos))
        throw InvalidSpec("record field " + key + " contains a forbidden character");
}

}  // namespace

std::string serialize_record(const EcgRecord& record) {
    record.validate();
    std::string leads;
    for (std::size_t i = 0; i < record.leads.size(); ++i) {
        check_header_value("lead", record.leads[i]);
        if (record.leads[i].find(',') != std::string::npos) throw InvalidSpec("lead names cannot contain ','");
        leads += (i ? "," : "") + record.leads[i];
    }
    check_header_value("patient_id", record.patient_id);
    check_header_value("record_id", record.record_id);
    std::string out;
    out += "version=1\n";
    out += "patient_id=" + record.patient_id + "\n";
    out += "record_id=" + record.record_id + "\n";
    out += "fs=" + format_double(record.fs) + "\n";
    out += "leads=" + leads + "\n";
    out += "n_samples=" + std::to_string(record.samples.cols()) + "\n\n";
    out.reserve(out.size() + 4 * static_cast<std::size_t>(record.samples.size()));
    for (Eigen::Index l = 0; l < record.samples.rows(); ++l)
        for (Eigen::Index s = 0; s < record.samples.cols(); ++s)
            append_f32_le(out, static_cast<float>(record.samples(l, s)));
    return out;
}

EcgRecord parse_record(std::string_view bytes) {
    std::map<std::string, std::string> header;
    std::size_t pos = 0;
    while (true) {
        auto eol = bytes.find('\n', pos);
        if (eol == std::string_view::npos) throw FormatError("header not terminated by a blank line", pos);
        std::string_view line = bytes.substr(pos, eol - pos);
        if (line.empty()) {
            pos = eol + 1;
            break;
        }
        auto eq = line.find('=');
        if (eq == std::string_view::npos || eq == 0) throw FormatError("malformed header line", pos);
        std::string key(line.substr(0, eq));
        if (!header.emplace(key, std::string(line.substr(eq + 1))).second)
            throw FormatError("duplicate header key " + key, pos);
        pos = eol + 1;
    }
    static const std::set<std::string> keys = {"version", "patient_id", "record_id", "fs", "leads", "n_samples"};
    for (const auto& k : keys)
        if (!header.count(k)) throw FormatError("missing header key " + k, 0);
    for (const auto& [k, v] : header)
        if (!keys.count(k)) throw FormatError("unknown header key " + k, 0);
    if (header["version"] != "1") throw FormatError("unsupported version " + header["version"], 0);

    EcgRecord rec;
    rec.patient_id = header["patient_id"];
    rec.record_id = header["record_id"];
    try {
        std::size_t used = 0;
        rec.fs = std::stod(header["fs"], &used);
        if (used != header["fs"].size()) throw std::invalid_argument("fs");
    } catch (const std::logic_error&) {
        throw FormatError("invalid fs value", 0);
    }
    rec.leads = split(header["leads"], ',');
    long long n_samples = 0;
    try {
        std::size_t used = 0;
        n_samples = std::stoll(header["n_samples"], &used);
        if (used != header["n_samples"].size() || n_samples < 1) throw std::invalid_argument("n");
    } catch (const std::logic_error&) {
        throw FormatError("invalid n_samples value", 0);
    }
    const auto n_leads = static_cast<long long>(rec.leads.size());
    const long long expected = n_leads * n_samples * 4;
    const auto available = static_cast<long long>(bytes.size() - pos);
    if (available != expected)
        throw FormatError("payload holds " + std::to_string(available) + " bytes, header declares " +
                              std::to_string(expected),
                          pos + static_cast<std::size_t>(std::min(available, expected)));
    rec.samples.resize(n_leads, n_samples);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (long long l = 0; l < n_leads; ++l)
        for (long long s = 0; s < n_samples; ++s, p += 4) rec.samples(l, s) = read_f32_le(p);
    try {
        rec.validate();
    } catch (const InvalidSpec& e) {
        throw FormatError(e.what(), 0);
    }
    return rec;
}

void write_record(const EcgRecord& record, const fs::path& path) { write_file_atomic(path, serialize_record(record)); }

EcgRecord read_record(const fs::path& path) {
    std::string bytes = read_file(path);
    try {
        return parse_record(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what(), e.offset());
    }
}

// ---------------------------------------------------------------------------
// Cohort directory and CSV side files

void write_labels_csv(const std::map<std::string, std::set<std::string>>& labels, const fs::path& path) {
    std::string out = "record_id,label_id\n";
    for (const auto& [rid, ls] : labels)
        for (const auto& l : ls) out += csv_line({rid, l});
    write_file_atomic(path, out);
}

std::map<std::string, std::set<std::string>> read_labels_csv(const fs::path& path) {
    std::map<std::string, std::set<std::string>> out;
    for (auto& row : read_csv_table(path, {"record_id", "label_id"})) out[row[0]].insert(row[1]);
    return out;
}

void write_split_csv(const SplitPlan& plan, const fs::path& path) {
    std::string out = "patient_id,split\n";
    for (const auto& [p, s] : plan.assignment) out += csv_line({p, s});
    write_file_atomic(path, out);
}

SplitPlan read_split_csv(const fs::path& path) {
    SplitPlan plan;
    std::map<std::string, double> counts;
    for (auto& row : read_csv_table(path, {"patient_id", "split"})) {
        if (!plan.assignment.emplace(row[0], row[1]).second)
            throw FormatError(path.string() + ": patient " + row[0] + " assigned twice", 0);
        counts[row[1]] += 1.0;
    }
    for (const auto& [s, c] : counts) plan.ratios.emplace_back(s, c / static_cast<double>(plan.assignment.size()));
    return plan;
}

void write_cohort(const Cohort& cohort, const fs::path& dir) {
    cohort.validate();
    fs::create_directories(dir / "records");
    std::map<std::string, std::set<std::string>> labels;
    std::string reports = "record_id,report\n";
    for (const auto& r : cohort.records) {
        write_record(r, dir / "records" / (r.record_id + ".ecg"));
        labels[r.record_id] = r.labels;
        auto it = cohort.reports.find(r.record_id);
        if (it != cohort.reports.end()) reports += csv_line({r.record_id, it->second});
    }
    write_labels_csv(labels, dir / "labels.csv");
    write_file_atomic(dir / "reports.csv", reports);
    std::string space;
    for (const auto& l : cohort.label_space) space += l + "\n";
    write_file_atomic(dir / "label_space.txt", space);
}

Cohort read_cohort(const fs::path& dir) {
    if (!fs::is_directory(dir / "records")) throw IoError(dir.string() + " is not a cohort directory");
    Cohort cohort;
    for (const auto& line : split(read_file(dir / "label_space.txt"), '\n'))
        if (!trim(line).empty()) cohort.label_space.push_back(trim(line));
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / "records"))
        if (e.path().extension() == ".ecg") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    auto labels = read_labels_csv(dir / "labels.csv");
    for (const auto& f : files) {
        auto rec = read_record(f);
        auto it = labels.find(rec.record_id);
        if (it != labels.end()) rec.labels = it->second;
        cohort.records.push_back(std::move(rec));
    }
    if (fs::exists(dir / "reports.csv"))
        for (auto& row : read_csv_table(dir / "reports.csv", {"record_id", "report"})) cohort.reports[row[0]] = row[1];
    cohort.validate();
    return cohort;
}

}  // namespace ecgclip
