#include "dnx/svg_plot.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

namespace dnx {

namespace {

double metric_value(const RunRecord& r, const std::string& metric) {
  if (metric == "params") return static_cast<double>(r.params);
  if (metric == "macs") return static_cast<double>(r.macs);
  if (metric == "final_loss_mean") return r.final_loss_mean;
  if (metric == "final_loss_std") return r.final_loss_std;
  if (metric == "wall_seconds") return r.wall_seconds;
  throw ConfigError("unknown plot metric '" + metric + "'");
}

std::string fmt(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

std::string scatter_svg(const std::vector<RankedRecord>& records,
                        const std::string& x_metric,
                        const std::string& y_metric) {
  constexpr double width = 640, height = 480;
  constexpr double ml = 80, mr = 24, mt = 24, mb = 56;
  const double plot_w = width - ml - mr;
  const double plot_h = height - mt - mb;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!records.empty()) {
    xmin = ymin = std::numeric_limits<double>::infinity();
    xmax = ymax = -std::numeric_limits<double>::infinity();
    for (const RankedRecord& r : records) {
      const double x = metric_value(r.record, x_metric);
      const double y = metric_value(r.record, y_metric);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    if (xmin == xmax) {
      xmin -= 0.5;
      xmax += 0.5;
    }
    if (ymin == ymax) {
      ymin -= 0.5;
      ymax += 0.5;
    }
    const double xpad = 0.05 * (xmax - xmin);
    const double ypad = 0.05 * (ymax - ymin);
    xmin -= xpad;
    xmax += xpad;
    ymin -= ypad;
    ymax += ypad;
  }

  auto sx = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * plot_w; };
  auto sy = [&](double v) {
    return mt + plot_h - (v - ymin) / (ymax - ymin) * plot_h;
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
         "height=\"480\" viewBox=\"0 0 640 480\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"white\"/>\n";
  svg += "<line x1=\"" + fmt(ml, "%.2f") + "\" y1=\"" + fmt(mt + plot_h, "%.2f") +
         "\" x2=\"" + fmt(ml + plot_w, "%.2f") + "\" y2=\"" +
         fmt(mt + plot_h, "%.2f") + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt(ml, "%.2f") + "\" y1=\"" + fmt(mt, "%.2f") +
         "\" x2=\"" + fmt(ml, "%.2f") + "\" y2=\"" + fmt(mt + plot_h, "%.2f") +
         "\" stroke=\"black\"/>\n";

  constexpr int ticks = 5;
  for (int i = 0; i < ticks; ++i) {
    const double frac = static_cast<double>(i) / (ticks - 1);
    const double xv = xmin + frac * (xmax - xmin);
    const double yv = ymin + frac * (ymax - ymin);
    const double px = ml + frac * plot_w;
    const double py = mt + plot_h - frac * plot_h;
    svg += "<line x1=\"" + fmt(px, "%.2f") + "\" y1=\"" + fmt(mt + plot_h, "%.2f") +
           "\" x2=\"" + fmt(px, "%.2f") + "\" y2=\"" +
           fmt(mt + plot_h + 5, "%.2f") + "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + fmt(px, "%.2f") + "\" y=\"" +
           fmt(mt + plot_h + 18, "%.2f") +
           "\" font-size=\"10\" text-anchor=\"middle\">" + fmt(xv, "%.4g") +
           "</text>\n";
    svg += "<line x1=\"" + fmt(ml - 5, "%.2f") + "\" y1=\"" + fmt(py, "%.2f") +
           "\" x2=\"" + fmt(ml, "%.2f") + "\" y2=\"" + fmt(py, "%.2f") +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + fmt(ml - 8, "%.2f") + "\" y=\"" + fmt(py + 3, "%.2f") +
           "\" font-size=\"10\" text-anchor=\"end\">" + fmt(yv, "%.4g") +
           "</text>\n";
  }

  svg += "<text x=\"" + fmt(ml + plot_w / 2, "%.2f") + "\" y=\"" +
         fmt(height - 12, "%.2f") +
         "\" font-size=\"12\" text-anchor=\"middle\">" + x_metric + "</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt(mt + plot_h / 2, "%.2f") +
         "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         fmt(mt + plot_h / 2, "%.2f") + ")\">" + y_metric + "</text>\n";

  for (const RankedRecord& r : records) {
    const double px = sx(metric_value(r.record, x_metric));
    const double py = sy(metric_value(r.record, y_metric));
    if (r.pareto) {
      svg += "<circle cx=\"" + fmt(px, "%.2f") + "\" cy=\"" + fmt(py, "%.2f") +
             "\" r=\"4\" fill=\"#d62728\" stroke=\"#d62728\"/>\n";
    } else {
      svg += "<circle cx=\"" + fmt(px, "%.2f") + "\" cy=\"" + fmt(py, "%.2f") +
             "\" r=\"4\" fill=\"none\" stroke=\"#1f77b4\"/>\n";
    }
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace dnx
