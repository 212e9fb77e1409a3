#include "ecgclip/ontology.hpp"

#include "ecgclip/errors.hpp"
#include "ecgclip/util.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>

namespace ecgclip {

std::string to_string(RuleSource s) {
    switch (s) {
        case RuleSource::report_text: return "report_text";
        case RuleSource::structured_label: return "structured_label";
        case RuleSource::numeric_field: return "numeric_field";
    }
    return "?";
}

RuleSource parse_source(const std::string& s) {
    if (s == "report_text") return RuleSource::report_text;
    if (s == "structured_label") return RuleSource::structured_label;
    if (s == "numeric_field") return RuleSource::numeric_field;
    throw ConfigError("unknown rule source '" + s + "'");
}

bool NumericPredicate::holds(double v) const {
    if (op == ">") return v > threshold;
    if (op == ">=") return v >= threshold;
    if (op == "<") return v < threshold;
    if (op == "<=") return v <= threshold;
    if (op == "==") return v == threshold;
    if (op == "!=") return v != threshold;
    return false;
}

const std::vector<std::string>& default_negation_terms() {
    static const std::vector<std::string> terms = {R"(\bno\b)", R"(\bnot\b)", R"(\bnone\b)",
                                                   R"(\bnon-)", R"(\bwithout\b)", R"(\bnegative for\b)"};
    return terms;
}

namespace {

NumericPredicate parse_numeric(const std::string& text, std::size_t line) {
    static const std::regex re(R"(^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(>=|<=|==|!=|>|<)\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(\S*)\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, re))
        throw FormatError("malformed numeric predicate '" + text + "' on line " + std::to_string(line), 0);
    return {m[1], m[2], std::stod(m[3]), m[4]};
}

}  // namespace

RuleSet parse_ruleset(std::string_view text) {
    RuleSet rs;
    MappingRule* cur = nullptr;
    std::size_t offset = 0, line_no = 0;
    while (offset <= text.size()) {
        auto eol = text.find('\n', offset);
        if (eol == std::string_view::npos) eol = text.size();
        const std::string line = trim(text.substr(offset, eol - offset));
        const std::size_t line_offset = offset;
        offset = eol + 1;
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.rfind("[rule ", 0) != 0)
                throw FormatError("expected [rule TARGET] on line " + std::to_string(line_no), line_offset);
            const std::string target = trim(std::string_view(line).substr(6, line.size() - 7));
            if (target.empty()) throw FormatError("rule without a target on line " + std::to_string(line_no), line_offset);
            rs.rules.push_back({});
            cur = &rs.rules.back();
            cur->target = target;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("expected key = value on line " + std::to_string(line_no), line_offset);
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (!cur) {
            if (key == "cohort") rs.cohort = value;
            else if (key == "case_sensitive") rs.case_sensitive = (value == "true" || value == "1" || value == "yes");
            else if (key == "negation") rs.negation_terms.push_back(value);
            else throw FormatError("unknown ruleset key '" + key + "' on line " + std::to_string(line_no), line_offset);
            continue;
        }
        if (key == "source") cur->source = parse_source(value);
        else if (key == "any_of") cur->any_of.push_back(value);
        else if (key == "all_of") cur->all_of.push_back(value);
        else if (key == "none_of") cur->none_of.push_back(value);
        else if (key == "field") cur->fields.push_back(value);
        else if (key == "numeric") cur->numeric.push_back(parse_numeric(value, line_no));
        else throw FormatError("unknown rule key '" + key + "' on line " + std::to_string(line_no), line_offset);
    }
    return rs;
}

RuleSet read_ruleset(const std::filesystem::path& path) { return parse_ruleset(read_file(path)); }

Matcher compile_ruleset(const RuleSet& rs) {
    std::set<std::string> seen;
    const auto& guards = rs.negation_terms.empty() ? default_negation_terms() : rs.negation_terms;
    auto flags = std::regex::ECMAScript | std::regex::optimize;
    if (!rs.case_sensitive) flags |= std::regex::icase;

    std::vector<CompiledRule> compiled;
    for (const auto& rule : rs.rules) {
        if (!seen.insert(rule.id()).second) throw CompileError("rule " + rule.id() + " is defined twice");
        if (rule.any_of.empty() && rule.all_of.empty() && rule.numeric.empty())
            throw CompileError("rule " + rule.id() + " has no any_of, all_of or numeric criterion");
        if (rule.source == RuleSource::numeric_field && rule.numeric.empty())
            throw CompileError("rule " + rule.id() + " reads a numeric field but has no numeric predicate");
        CompiledRule cr;
        cr.rule = rule;
        auto compile = [&](const std::vector<std::string>& pats, std::vector<std::regex>& out) {
            for (const auto& p : pats) {
                if (p == "@negation") {
                    for (const auto& g : guards) out.emplace_back(g, flags);
                    continue;
                }
                try {
                    out.emplace_back(p, flags);
                } catch (const std::regex_error& e) {
                    throw CompileError("rule " + rule.id() + ": invalid pattern '" + p + "': " + e.what());
                }
            }
        };
        compile(rule.any_of, cr.any_of);
        compile(rule.all_of, cr.all_of);
        compile(rule.none_of, cr.none_of);
        compiled.push_back(std::move(cr));
    }
    return Matcher(std::move(compiled), rs.cohort);
}

std::string normalize_text(std::string_view text) {
    std::string out;
    bool space = false;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            space = !out.empty();
            continue;
        }
        if (space) out += ' ';
        space = false;
        out += ch;
    }
    return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        auto s = normalize_text(cur);
        if (!s.empty()) out.push_back(std::move(s));
        cur.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        const bool at_break = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
        if (c == ';' || c == '!' || c == '?' || c == '\n' || c == '\r' || (c == '.' && at_break)) {
            flush();
        } else {
            cur += c;
        }
    }
    flush();
    return out;
}

namespace {

bool any_match(const std::vector<std::regex>& pats, const std::string& s) {
    for (const auto& p : pats)
        if (std::regex_search(s, p)) return true;
    return false;
}

bool all_match(const std::vector<std::regex>& pats, const std::string& s) {
    if (pats.empty()) return false;
    for (const auto& p : pats)
        if (!std::regex_search(s, p)) return false;
    return true;
}

// A unit fires when its positive criterion holds and no guard matches in the same unit.
bool unit_fires(const CompiledRule& r, const std::string& unit) {
    if (!(any_match(r.any_of, unit) || all_match(r.all_of, unit))) return false;
    return !any_match(r.none_of, unit);
}

}  // namespace

MappingResult map_record(const Matcher& matcher, std::string_view report, const std::map<std::string, std::string>& fields) {
    MappingResult res;
    const auto sentences = split_sentences(report);
    for (const auto& cr : matcher.rules()) {
        const auto& r = cr.rule;
        bool fired = false;
        if (r.source == RuleSource::report_text) {
            for (const auto& s : sentences)
                if (unit_fires(cr, s)) {
                    fired = true;
                    break;
                }
        } else if (r.source == RuleSource::structured_label) {
            for (const auto& [name, value] : fields) {
                if (!r.fields.empty() && std::find(r.fields.begin(), r.fields.end(), name) == r.fields.end()) continue;
                if (unit_fires(cr, normalize_text(value))) {
                    fired = true;
                    break;
                }
            }
        }
        if (!fired && !r.numeric.empty()) {
            bool ok = true;
            for (const auto& pred : r.numeric) {
                auto it = fields.find(pred.field);
                if (it == fields.end()) {
                    res.warnings.push_back("rule " + r.id() + ": field '" + pred.field + "' missing; rule skipped");
                    ok = false;
                    break;
                }
                const std::string v = trim(it->second);
                char* end = nullptr;
                const double x = std::strtod(v.c_str(), &end);
                if (v.empty() || end == v.c_str() || !std::isfinite(x)) {
                    res.warnings.push_back("rule " + r.id() + ": field '" + pred.field + "' is not numeric; rule skipped");
                    ok = false;
                    break;
                }
                if (!pred.holds(x)) ok = false;
            }
            fired = ok;
        }
        if (fired) res.labels.insert(r.target);
    }
    return res;
}

std::string format_count_percent(long count, long total) {
    std::string digits = std::to_string(count < 0 ? -count : count);
    std::string grouped;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i && (digits.size() - i) % 3 == 0) grouped += ',';
        grouped += digits[i];
    }
    if (count < 0) grouped = "-" + grouped;
    const double pct = total > 0 ? 100.0 * static_cast<double>(count) / static_cast<double>(total) : 0.0;
    char buf[32];
    std::snprintf(buf, sizeof buf, " (%.2f%%)", pct);
    return grouped + buf;
}

std::vector<PrevalenceRow> prevalence_table(const std::map<std::string, std::set<std::string>>& labels,
                                            const std::vector<std::string>& label_order, long n_records) {
    std::vector<PrevalenceRow> rows;
    for (const auto& label : label_order) {
        PrevalenceRow row;
        row.label = label;
        row.total = n_records;
        for (const auto& [rid, set] : labels)
            if (set.count(label)) ++row.count;
        row.text = format_count_percent(row.count, n_records);
        rows.push_back(row);
    }
    return rows;
}

std::string prevalence_csv(const std::vector<PrevalenceRow>& rows) {
    std::string out = "label_id,count,total,summary\n";
    for (const auto& r : rows) out += csv_line({r.label, std::to_string(r.count), std::to_string(r.total), r.text});
    return out;
}

}  // namespace ecgclip
