#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "retkit/metrics.hpp"

namespace retkit {

/// Deterministic JSON document (keys sorted, no timestamps) so identical runs
/// serialize byte-identically. Callers add volatile metadata under a separate
/// "meta" key.
nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);

/// Flat CSV: one row per (section, category, metric).
std::string report_to_csv(const MetricsReport& report);

/// Human-readable table: one row per category, then the simple and weighted
/// category averages and, for unconstrained runs, the whole-gallery row.
/// Estimated values are marked with '*'.
std::string render_report_table(const MetricsReport& report);

} // namespace retkit
