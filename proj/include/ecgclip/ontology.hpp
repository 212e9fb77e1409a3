#pragma once

#include <filesystem>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace ecgclip {

enum class RuleSource { report_text, structured_label, numeric_field };

std::string to_string(RuleSource s);
RuleSource parse_source(const std::string& s);

struct NumericPredicate {
    std::string field;
    std::string op;  // one of > >= < <= == !=
    double threshold = 0.0;
    std::string unit;  // informational; no conversion

    bool holds(double value) const;
};

struct MappingRule {
    std::string target;
    RuleSource source = RuleSource::report_text;
    std::vector<std::string> any_of;
    std::vector<std::string> all_of;
    std::vector<std::string> none_of;
    std::vector<std::string> fields;  // structured_label: fields to match against (all when empty)
    std::vector<NumericPredicate> numeric;

    std::string id() const { return target + "/" + to_string(source); }
};

struct RuleSet {
    std::string cohort;
    bool case_sensitive = false;
    std::vector<MappingRule> rules;
    std::vector<std::string> negation_terms;  // replaces the default guard list when non-empty
};

const std::vector<std::string>& default_negation_terms();

// Plain-text ruleset: top-level `key = value` lines, then `[rule TARGET]` blocks
// with source / any_of / all_of / none_of / field / numeric lines. `none_of = @negation`
// expands to the guard list. '#' starts a comment line.
RuleSet parse_ruleset(std::string_view text);
RuleSet read_ruleset(const std::filesystem::path& path);

struct CompiledRule {
    MappingRule rule;
    std::vector<std::regex> any_of, all_of, none_of;
};

class Matcher {
public:
    explicit Matcher(std::vector<CompiledRule> rules, std::string cohort) : rules_(std::move(rules)), cohort_(std::move(cohort)) {}
    const std::vector<CompiledRule>& rules() const { return rules_; }
    const std::string& cohort() const { return cohort_; }

private:
    std::vector<CompiledRule> rules_;
    std::string cohort_;
};

Matcher compile_ruleset(const RuleSet& rules);

struct MappingResult {
    std::set<std::string> labels;
    std::vector<std::string> warnings;
};

// Whitespace collapsed and trimmed.
std::string normalize_text(std::string_view text);
// Sentences of a report (split on . ; ! ? and line breaks), each normalized.
std::vector<std::string> split_sentences(std::string_view text);

MappingResult map_record(const Matcher& matcher, std::string_view report,
                         const std::map<std::string, std::string>& fields = {});

struct PrevalenceRow {
    std::string label;
    long count = 0;
    long total = 0;
    std::string text;  // "75,675 (69.96%)"
};

std::string format_count_percent(long count, long total);
std::vector<PrevalenceRow> prevalence_table(const std::map<std::string, std::set<std::string>>& labels,
                                            const std::vector<std::string>& label_order, long n_records);
std::string prevalence_csv(const std::vector<PrevalenceRow>& rows);

}  // namespace ecgclip
