#pragma once

#include <string>

namespace detgen {

// Emits the report bundle (CSV curves, SVG heat map, SVG scatter overlays)
// into <run_dir>/report/. Missing inputs become listed gaps, not failures.
void write_report(const std::string& run_dir);

}  // namespace detgen
