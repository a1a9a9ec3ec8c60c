#include <cmath>
#include <cstdio>
#include <ostream>

#include "cappa/evalsuite.hpp"

namespace cappa::eval {
namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void write_perturb_csv(std::ostream& out, const PerturbReport& report) {
  out << "scorer,kind,pairs,wins,accuracy\n";
  for (std::size_t s = 0; s < report.scorers.size(); ++s) {
    for (const auto& r : report.table[s]) {
      out << report.scorers[s] << ',' << data::kind_name(r.kind) << ',' << r.pairs << ',' << r.wins << ','
          << num(r.accuracy) << '\n';
    }
  }
}

void write_probe_csv(std::ostream& out, const ProbeResult& result) {
  out << "probe,shots,metric,value\n";
  const auto kind = probe_kind_name(result.kind);
  out << kind << ',' << result.shots << ",accuracy," << num(result.accuracy) << '\n';
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    out << kind << ',' << result.shots << ",class_" << c << ',' << num(result.per_class[c]) << '\n';
  }
}

void write_retrieval_csv(std::ostream& out, const RetrievalResult& result) {
  out << "direction,recall_at_1\n";
  out << "image_to_text," << num(result.image_to_text) << '\n';
  out << "text_to_image," << num(result.text_to_image) << '\n';
}

}  // namespace cappa::eval
