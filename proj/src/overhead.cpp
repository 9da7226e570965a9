#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "stacktag/harness.hpp"

namespace stacktag::harness {

using namespace stacktag::ir;
using json = nlohmann::json;

uint64_t instruction_count(const Function& f) {
  uint64_t n = 0;
  for (const auto& b : f.blocks) {
    n += b.phis.size() + b.body.size() + 1;  // terminator included
  }
  return n;
}

// Static frame depth under the machine's downward bump allocation. Dynamic
// allocas contribute nothing here; their cost is runtime-sized.
uint64_t static_frame_bytes(const Function& f) {
  uint64_t cursor = 0;
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      const auto* a = std::get_if<Alloca>(&inst);
      if (!a || a->is_dynamic()) continue;
      uint64_t down = cursor + a->size;
      uint64_t rem = down % a->align;
      if (rem != 0) down += a->align - rem;
      cursor = down;
    }
  }
  return cursor;
}

OverheadReport measure_overhead(const Program& plain, const Program& instrumented,
                                const analysis::AnalysisResult& result) {
  OverheadReport report;
  for (size_t i = 0; i < plain.functions.size(); ++i) {
    FunctionOverhead fo;
    fo.name = plain.functions[i].name;
    fo.insts_before = instruction_count(plain.functions[i]);
    fo.frame_before = static_frame_bytes(plain.functions[i]);
    const Function* g = instrumented.find_function(fo.name);
    fo.insts_after = g ? instruction_count(*g) : 0;
    fo.frame_after = g ? static_frame_bytes(*g) : 0;
    report.insts_before += fo.insts_before;
    report.insts_after += fo.insts_after;
    report.frame_before += fo.frame_before;
    report.frame_after += fo.frame_after;
    report.functions.push_back(std::move(fo));
  }
  auto pct = [](uint64_t before, uint64_t after) {
    if (before == 0) return after == 0 ? 0.0 : 100.0;
    return 100.0 * (static_cast<double>(after) - static_cast<double>(before)) /
           static_cast<double>(before);
  };
  report.inst_delta_pct = pct(report.insts_before, report.insts_after);
  report.frame_delta_pct = pct(report.frame_before, report.frame_after);

  uint64_t total_bytes = 0, safe_bytes = 0;
  for (const auto& a : result.allocations) {
    if (!a.size) continue;  // dynamic
    total_bytes += *a.size;
    if (a.safety.cls != analysis::Safety::Unsafe) safe_bytes += *a.size;
  }
  report.safe_byte_proportion =
      total_bytes == 0 ? 1.0 : static_cast<double>(safe_bytes) / static_cast<double>(total_bytes);
  return report;
}

std::string OverheadReport::to_json() const {
  json j;
  j["schema"] = "stacktag/v1";
  json fns = json::array();
  for (const auto& f : functions) {
    fns.push_back({{"name", f.name},
                   {"insts_before", f.insts_before},
                   {"insts_after", f.insts_after},
                   {"frame_before", f.frame_before},
                   {"frame_after", f.frame_after}});
  }
  j["functions"] = std::move(fns);
  j["totals"] = {{"insts_before", insts_before},
                 {"insts_after", insts_after},
                 {"frame_before", frame_before},
                 {"frame_after", frame_after},
                 {"inst_delta_pct", inst_delta_pct},
                 {"frame_delta_pct", frame_delta_pct},
                 {"safe_byte_proportion", safe_byte_proportion}};
  return j.dump(2);
}

std::string OverheadReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "function" << std::right << std::setw(10) << "insts"
     << std::setw(10) << "insts'" << std::setw(10) << "frame" << std::setw(10) << "frame'"
     << "\n";
  for (const auto& f : functions) {
    os << std::left << std::setw(16) << f.name << std::right << std::setw(10) << f.insts_before
       << std::setw(10) << f.insts_after << std::setw(10) << f.frame_before << std::setw(10)
       << f.frame_after << "\n";
  }
  os << std::fixed << std::setprecision(1);
  os << "instructions: " << insts_before << " -> " << insts_after << " (" << inst_delta_pct
     << "%)\n";
  os << "frame bytes:  " << frame_before << " -> " << frame_after << " (" << frame_delta_pct
     << "%)\n";
  os << "safe bytes:   " << std::setprecision(3) << safe_byte_proportion << "\n";
  return os.str();
}

}  // namespace stacktag::harness
