#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cisseg/errors.hpp"
#include "cisseg/harness/metrics.hpp"
#include "cisseg/io.hpp"

namespace cisseg {

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << body;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string optional_cell(const std::optional<double>& v) { return v ? io::format_double(*v) : ""; }

}  // namespace detail

inline std::string metrics_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << "step,class,dsc,method\n";
  for (const MetricsReport& r : reports)
    for (const ClassScore& s : r.per_class)
      out << s.step << ',' << s.cls << ',' << io::format_double(s.dsc) << ',' << s.method << '\n';
  return out.str();
}

// The "new" cell is empty for steps that have no new classes yet.
inline std::string summary_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << "step,method,old,new,all\n";
  for (const MetricsReport& r : reports)
    for (const StepSummary& s : r.summary)
      out << s.step << ',' << s.method << ',' << io::format_double(s.agg.old_dsc) << ','
          << detail::optional_cell(s.agg.new_dsc) << ',' << io::format_double(s.agg.all_dsc) << '\n';
  return out.str();
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  detail::write_text(path, metrics_csv(reports));
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  detail::write_text(path, summary_csv(reports));
}

/// Line chart of All-DSC (solid) and Old-DSC (dashed) per step, one colour per method.
inline std::string summary_svg(const std::vector<MetricsReport>& reports) {
  constexpr double W = 480, H = 320, L = 50, R = 130, T = 20, B = 40;
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  int max_step = 1;
  for (const auto& r : reports)
    for (const auto& s : r.summary) max_step = std::max(max_step, s.step);
  auto x_of = [&](int step) {
    return max_step == 1 ? L + (W - L - R) / 2 : L + (W - L - R) * (step - 1) / (max_step - 1);
  };
  auto y_of = [&](double v) { return T + (H - T - B) * (1.0 - v); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << W - R << "\" y2=\"" << y_of(0) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << y_of(0) << "\" x2=\"" << L << "\" y2=\"" << y_of(1) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    svg << "<text x=\"" << L - 6 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (int s = 1; s <= max_step; ++s)
    svg << "<text x=\"" << x_of(s) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << s << "</text>\n";
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 6 << "\" text-anchor=\"middle\">step</text>\n";
  svg << "<text x=\"12\" y=\"" << H / 2 << "\" transform=\"rotate(-90 12 " << H / 2 << ")\" text-anchor=\"middle\">DSC</text>\n";

  for (std::size_t m = 0; m < reports.size(); ++m) {
    const char* colour = colours[m % std::size(colours)];
    std::ostringstream all, old;
    for (const auto& s : reports[m].summary) {
      all << x_of(s.step) << ',' << y_of(s.agg.all_dsc) << ' ';
      old << x_of(s.step) << ',' << y_of(s.agg.old_dsc) << ' ';
    }
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"" << all.str() << "\"/>\n";
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-dasharray=\"4 3\" points=\"" << old.str() << "\"/>\n";
    const double ly = T + 16.0 * static_cast<double>(m);
    svg << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << W - R + 34 << "\" y=\"" << ly + 4 << "\">" << reports[m].method << "</text>\n";
  }
  svg << "<text x=\"" << W - R + 10 << "\" y=\"" << H - B << "\">solid: All, dashed: Old</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

inline void write_summary_svg(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  detail::write_text(path, summary_svg(reports));
}

}  // namespace cisseg
