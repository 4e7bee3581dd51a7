#pragma once

#include "dnx/ablation.hpp"

namespace dnx {

// Self-contained SVG scatter of ranked records: one marker per record,
// Pareto-optimal ones filled, axes labeled with the metric names. Output is a
// pure function of the input bytes.
// Metrics: params | macs | final_loss_mean | final_loss_std | wall_seconds
std::string scatter_svg(const std::vector<RankedRecord>& records,
                        const std::string& x_metric,
                        const std::string& y_metric);

}  // namespace dnx
