#include "retkit/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace retkit {

using nlohmann::json;

namespace {

Protocol protocol_from_string(const std::string& s) {
    if (s == "unconstrained") return Protocol::Unconstrained;
    if (s == "constrained_by_category") return Protocol::ConstrainedByCategory;
    if (s == "cross_domain") return Protocol::CrossDomain;
    throw ValidationError("unknown protocol: '" + s + "'");
}

/// mAP first, then Acc@k by ascending k, then anything else alphabetically.
std::vector<std::string> metric_column_order(const std::map<std::string, double>& values) {
    std::vector<std::string> names;
    for (const auto& [name, value] : values) names.push_back(name);
    std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
        const auto rank = [](const std::string& n) -> std::pair<int, long> {
            if (n == "mAP") return {0, 0};
            if (n.rfind("Acc@", 0) == 0) return {1, std::strtol(n.c_str() + 4, nullptr, 10)};
            return {2, 0};
        };
        const auto ra = rank(a), rb = rank(b);
        return ra != rb ? ra < rb : a < b;
    });
    return names;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

} // namespace

json report_to_json(const MetricsReport& report) {
    json doc;
    doc["schema_version"] = 1;
    doc["protocol"] = to_string(report.protocol);
    doc["estimated"] = report.estimated;
    doc["n_queries_total"] = report.n_queries_total;
    doc["n_queries_skipped"] = report.n_queries_skipped;
    doc["overall"] = report.overall;
    json per_category = json::object();
    for (const auto& [category, cm] : report.per_category)
        per_category[category] = {{"n_queries", cm.n_queries}, {"metrics", cm.values}};
    doc["per_category"] = per_category;
    doc["category_simple_mean"] = report.category_simple_mean;
    doc["category_weighted_mean"] = report.category_weighted_mean;
    if (report.estimated) doc["penalties"] = report.penalties;
    return doc;
}

MetricsReport report_from_json(const json& doc) {
    MetricsReport report;
    try {
        report.protocol = protocol_from_string(doc.at("protocol").get<std::string>());
        report.estimated = doc.at("estimated").get<bool>();
        report.n_queries_total = doc.at("n_queries_total").get<std::int64_t>();
        report.n_queries_skipped = doc.at("n_queries_skipped").get<std::int64_t>();
        report.overall = doc.at("overall").get<std::map<std::string, double>>();
        for (const auto& [category, entry] : doc.at("per_category").items()) {
            CategoryMetrics cm;
            cm.n_queries = entry.at("n_queries").get<std::int64_t>();
            cm.values = entry.at("metrics").get<std::map<std::string, double>>();
            report.per_category.emplace(category, std::move(cm));
        }
        report.category_simple_mean =
            doc.at("category_simple_mean").get<std::map<std::string, double>>();
        report.category_weighted_mean =
            doc.at("category_weighted_mean").get<std::map<std::string, double>>();
        if (doc.contains("penalties"))
            report.penalties = doc.at("penalties").get<std::map<std::string, double>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed report document: ") + e.what());
    }
    return report;
}

std::string report_to_csv(const MetricsReport& report) {
    std::ostringstream out;
    out << "protocol,section,category,n_queries,metric,value,estimated\n";
    const std::string protocol = to_string(report.protocol);
    const std::string star = report.estimated ? "true" : "false";
    const auto emit = [&](const std::string& section, const std::string& category,
                          std::int64_t n_queries, const std::map<std::string, double>& values) {
        for (const auto& name : metric_column_order(values))
            out << protocol << ',' << section << ',' << category << ',' << n_queries << ',' << name
                << ',' << values.at(name) << ',' << star << '\n';
    };
    for (const auto& [category, cm] : report.per_category)
        emit("per_category", category, cm.n_queries, cm.values);
    if (!report.category_simple_mean.empty())
        emit("category_simple_mean", "", report.n_queries_total, report.category_simple_mean);
    if (!report.category_weighted_mean.empty())
        emit("category_weighted_mean", "", report.n_queries_total, report.category_weighted_mean);
    emit("overall", "", report.n_queries_total, report.overall);
    if (report.estimated) emit("penalty", "", report.n_queries_total, report.penalties);
    return out.str();
}

std::string render_report_table(const MetricsReport& report) {
    const std::vector<std::string> columns = metric_column_order(report.overall);
    const char* mark = report.estimated ? "*" : "";

    std::size_t name_width = std::string("Average over categories").size();
    for (const auto& [category, cm] : report.per_category)
        name_width = std::max(name_width, category.size());

    std::ostringstream out;
    out << "protocol: " << to_string(report.protocol);
    if (report.estimated) out << "  (* = estimated)";
    out << "\n";
    out << "queries: " << report.n_queries_total << "  skipped: " << report.n_queries_skipped
        << "\n\n";

    const std::size_t cell_width = 6 + (report.estimated ? 1 : 0); // "0.0000" plus the star
    std::vector<std::size_t> widths;
    for (const auto& c : columns) widths.push_back(std::max(c.size(), cell_width));

    out << std::string(name_width, ' ') << "  " << "     n";
    for (std::size_t i = 0; i < columns.size(); ++i)
        out << "  " << std::string(widths[i] - columns[i].size(), ' ') << columns[i];
    out << "\n";

    const auto row = [&](const std::string& name, std::int64_t n,
                         const std::map<std::string, double>& values) {
        out << name << std::string(name_width - name.size(), ' ') << "  ";
        if (n >= 0) {
            std::string ns = std::to_string(n);
            out << std::string(6 - std::min<std::size_t>(6, ns.size()), ' ') << ns;
        } else {
            out << "     -";
        }
        for (std::size_t i = 0; i < columns.size(); ++i) {
            const std::string cell = fmt(values.at(columns[i])) + mark;
            out << "  " << std::string(widths[i] > cell.size() ? widths[i] - cell.size() : 0, ' ')
                << cell;
        }
        out << "\n";
    };

    for (const auto& [category, cm] : report.per_category) row(category, cm.n_queries, cm.values);
    if (!report.per_category.empty()) {
        if (!report.category_simple_mean.empty())
            row("Average over categories", -1, report.category_simple_mean);
        if (!report.category_weighted_mean.empty())
            row("Weighted average", -1, report.category_weighted_mean);
    }
    if (report.protocol != Protocol::ConstrainedByCategory || report.estimated)
        row("Unconstrained retrieval", report.n_queries_total, report.overall);
    return out.str();
}

} // namespace retkit
