// Acceptance suite: one line per criterion, nonzero exit on any failure.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stacktag/analysis.hpp"
#include "stacktag/harness.hpp"
#include "stacktag/instrument.hpp"
#include "stacktag/interp.hpp"
#include "stacktag/mte.hpp"
#include "stacktag/parser.hpp"
#include "stacktag/printer.hpp"
#include "stacktag/validate.hpp"

using namespace stacktag;

namespace {

const std::string kCorpus = STACKTAG_CORPUS_DIR;

struct Criterion {
  std::string name;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  bool passed() const { return failures.empty(); }
};

ir::Program load(const std::string& rel, Criterion& c) {
  std::ifstream in(kCorpus + "/" + rel);
  if (!in) {
    c.expect(false, "cannot open " + rel);
    return {};
  }
  std::stringstream ss;
  ss << in.rdbuf();
  auto r = ir::parse_and_validate(ss.str());
  if (!r.ok()) {
    std::string msg = rel + " does not validate";
    if (!r.diagnostics.empty()) msg += ": " + r.diagnostics[0].to_string();
    c.expect(false, msg);
    return {};
  }
  return std::move(*r.program);
}

std::vector<std::string> benign_corpus() {
  std::vector<std::string> files = {
      "listing1.ir", "listing2.ir", "recursion_limit.ir", "coverage.ir",
      "scenarios/s1.ir", "scenarios/s2.ir", "scenarios/s5.ir", "scenarios/s6.ir",
  };
  for (const auto& e : std::filesystem::directory_iterator(kCorpus + "/benign")) {
    if (e.path().extension() == ".ir") {
      files.push_back("benign/" + e.path().filename().string());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

// C1: the corpus transliterations classify exactly as expected.
void golden_classification(Criterion& c) {
  ir::Program l1 = load("listing1.ir", c);
  if (!c.passed()) return;
  auto r1 = analysis::analyze(l1);
  auto cls = [&](const analysis::AnalysisResult& r, const char* fn, const char* name) {
    const auto* a = r.find_alloca(fn, name);
    return a ? a->safety.cls : analysis::Safety::Unsafe;
  };
  c.expect(cls(r1, "main", "buf_lin") == analysis::Safety::Guarded, "buf_lin must be guarded");
  const auto* lin = r1.find_alloca("main", "buf_lin");
  c.expect(lin && lin->linear.max_step && *lin->linear.max_step == 4,
           "buf_lin step must be 4 (< 16)");
  c.expect(cls(r1, "main", "buf_bad") == analysis::Safety::Unsafe, "buf_bad must be unsafe");
  c.expect(cls(r1, "main", "leaked") == analysis::Safety::Unsafe,
           "the slot leaked to a global must be unsafe");

  ir::Program l2 = load("listing2.ir", c);
  if (!c.passed()) return;
  // Before the module pass, B's record is unresolved.
  analysis::ProgramTables local;
  for (uint32_t i = 0; i < l2.functions.size(); ++i) analysis::run_function_pass(l2, i, local);
  uint32_t f1 = 0;
  for (uint32_t i = 0; i < l2.functions.size(); ++i) {
    if (l2.functions[i].name == "func_1") f1 = i;
  }
  auto b_id = *l2.find_function("func_1")->value_by_name("B");
  const auto& b_local = local.at(analysis::BaseId{f1, analysis::BaseKind::Alloca, b_id});
  c.expect(b_local.range.empty() && b_local.stored_in.size() == 1,
           "B must be unresolved before the module pass");

  auto r2 = analysis::analyze(l2);
  const auto* a_rep = r2.find_alloca("func_1", "A");
  c.expect(a_rep && a_rep->safety.cls == analysis::Safety::Provable &&
               a_rep->safety.pointer_safe,
           "A must be provable and pointer-safe");
  c.expect(cls(r2, "func_1", "B") == analysis::Safety::Provable,
           "B must become provable through func_2");
}

// C2: the six security scenarios.
void security_scenarios(Criterion& c) {
  for (const auto& s : harness::scenario_suite()) {
    auto report = harness::run_bundled_scenario(s, kCorpus);
    if (report.error) {
      c.expect(false, s.id + " error: " + *report.error);
      continue;
    }
    c.expect(report.pass, s.id + " failed: " + report.to_string());
    if (s.id == "s3") c.expect(report.observed.trapped_at_guard, "s3 must trap at the guard");
  }
}

// C3: conservativeness fuzzing plus the oracle self-test.
void conservativeness_fuzzing(Criterion& c) {
  harness::FuzzParams params;
  params.seed = 1;
  params.program_count = 1000;
  params.inputs_per_program = 4;
  auto report = harness::fuzz_conservativeness(params);
  c.expect(report.safe_violations == 0,
           "oracle violations on provable/implicit allocations: " +
               std::to_string(report.safe_violations));
  c.expect(report.guarded_oob_runs == report.guarded_trap_coincidences,
           "guarded overflows missing traps: " +
               std::to_string(report.guarded_oob_runs - report.guarded_trap_coincidences));
  c.expect(report.guarded_oob_runs > 0, "fuzzing never exercised a guarded overflow");
  c.expect(report.transparency_failures == 0,
           "clean runs diverged: " + std::to_string(report.transparency_failures));
  c.expect(report.plan_problems == 0, "invalid tag plans generated");
  for (size_t i = 0; i < report.findings.size() && i < 5; ++i) {
    c.expect(false, report.findings[i].kind + " seed=" +
                        std::to_string(report.findings[i].program_seed) + " " +
                        report.findings[i].detail);
  }

  harness::FuzzParams weak = params;
  weak.program_count = 150;
  weak.analysis.weaken_for_selftest = true;
  auto weak_report = harness::fuzz_conservativeness(weak);
  c.expect(weak_report.safe_violations >= 1,
           "the weakened analysis must trip the oracle at least once");
}

// C4: transparency over the benign corpus, elision on and off.
void transparency(Criterion& c) {
  auto files = benign_corpus();
  c.expect(files.size() >= 20, "benign corpus must hold at least 20 programs");
  for (bool elide : {true, false}) {
    for (const auto& f : files) {
      ir::Program p = load(f, c);
      if (p.functions.empty()) continue;
      analysis::AnalysisOptions aopts;
      aopts.static_elision = elide;
      auto result = analysis::analyze(p, aopts);
      auto instr = instrument::instrument_program(p, result, {});
      auto v = interp::run_paired(p, instr.program, {});
      c.expect(v.equal, f + (elide ? " (elision)" : " (no elision)") + " diverged");
      c.expect(!v.instrumented.trapped(), f + " trapped while instrumented");
    }
  }
}

// C5: machine-model conformance by enumeration.
void machine_model(Criterion& c) {
  using namespace stacktag::mte;
  // tag/check round-trip over every tag
  for (int t = 0; t < 16; ++t) {
    TagMemory tm;
    tm.map_region(0x4000, 32, kSafeDefaultTag);
    bool ok = tm.set_allocation_tags(0x4000, 32, static_cast<uint8_t>(t));
    auto r = check_access(tm, with_tag(PointerValue{0x4010}, static_cast<uint8_t>(t)), 8,
                          MteConfig{}, false);
    c.expect(ok && r.allowed(), "tag/check round trip failed for tag " + std::to_string(t));
  }
  // all 16x16 pairs
  for (int at = 0; at < 16; ++at) {
    for (int mt = 0; mt < 16; ++mt) {
      TagMemory tm;
      tm.map_region(0x8000, 16, static_cast<uint8_t>(mt));
      auto r = check_access(tm, with_tag(PointerValue{0x8000}, static_cast<uint8_t>(at)), 4,
                            MteConfig{}, false);
      c.expect(r.allowed() == (at == mt),
               "pair " + std::to_string(at) + "/" + std::to_string(mt) + " misjudged");
    }
  }
  // wildcard is off by default and applies only to 0b0000
  {
    TagMemory tm;
    tm.map_region(0x8000, 16, 0b0110);
    c.expect(!check_access(tm, with_tag(PointerValue{0x8000}, 0), 4, MteConfig{}, false).allowed(),
             "wildcard must be off by default");
    c.expect(check_access(tm, with_tag(PointerValue{0x8000}, 0), 4, MteConfig{true}, false)
                 .allowed(),
             "enabled wildcard must bypass checks for tag 0");
    c.expect(!check_access(tm, with_tag(PointerValue{0x8000}, 1), 4, MteConfig{true}, false)
                  .allowed(),
             "wildcard must only apply to tag 0");
  }
  // multi-granule straddle
  for (int second = 0; second < 16; ++second) {
    TagMemory tm;
    tm.map_region(0x9000, 16, 7);
    tm.map_region(0x9010, 16, static_cast<uint8_t>(second));
    auto r = check_access(tm, with_tag(PointerValue{0x900c}, 7), 8, MteConfig{}, false);
    c.expect(r.allowed() == (second == 7), "straddle rule misjudged");
  }
  // frame-base accesses are unchecked but must be mapped
  {
    TagMemory tm;
    tm.map_region(0xa000, 16, 3);
    c.expect(check_access(tm, with_tag(PointerValue{0xa000}, 9), 8, MteConfig{}, true).allowed(),
             "frame-base access must skip the tag compare");
    c.expect(!check_access(tm, with_tag(PointerValue{0xb000}, 9), 8, MteConfig{}, true).allowed(),
             "frame-base access must still require mapping");
  }
  // granule rounding
  {
    TagMemory tm;
    tm.map_region(0xc000, 48, kSafeDefaultTag);
    tm.set_allocation_tags(0xc000, 1, 5);
    c.expect(tm.tag_at(0xc000) == uint8_t{5} && tm.tag_at(0xc010) == kSafeDefaultTag,
             "size 1 must tag exactly one granule");
    tm.set_allocation_tags(0xc010, 17, 6);
    c.expect(tm.tag_at(0xc010) == uint8_t{6} && tm.tag_at(0xc020) == uint8_t{6},
             "size 17 must tag two granules");
  }
}

// C6: static-overhead analogue.
void static_overhead(Criterion& c) {
  // deterministic reports, non-negative deltas everywhere
  for (const auto& f : benign_corpus()) {
    ir::Program p = load(f, c);
    if (p.functions.empty()) continue;
    auto result = analysis::analyze(p);
    auto instr = instrument::instrument_program(p, result, {});
    auto r1 = harness::measure_overhead(p, instr.program, result);
    auto r2 = harness::measure_overhead(p, instr.program, result);
    c.expect(r1.to_json() == r2.to_json(), f + " report not deterministic");
    c.expect(r1.inst_delta_pct >= 0.0 && r1.frame_delta_pct >= 0.0,
             f + " has a negative overhead delta");
  }
  // a 1-byte unsafe alloca costs one padded granule
  {
    auto r = ir::parse_and_validate(
        "global @g 8\nfunc @main() {\nentry:\n  %t = alloca 1\n  store.ptr [@g + 0] = %t\n"
        "  ret 0\n}\n");
    c.expect(r.ok(), "inline 1-byte program must validate");
    if (r.ok()) {
      auto result = analysis::analyze(*r.program);
      auto instr = instrument::instrument_program(*r.program, result, {});
      auto rep = harness::measure_overhead(*r.program, instr.program, result);
      c.expect(rep.frame_before == 1 && rep.frame_after == 16,
               "1-byte unsafe alloca must pad 1 -> 16");
    }
  }
  // a fully safe program shows zero frame delta
  {
    ir::Program p = load("benign/b10_pure_scalars.ir", c);
    auto result = analysis::analyze(p);
    auto instr = instrument::instrument_program(p, result, {});
    auto rep = harness::measure_overhead(p, instr.program, result);
    c.expect(rep.frame_delta_pct == 0.0 && rep.inst_delta_pct == 0.0,
             "fully safe program must cost nothing");
  }
}

// C7: fixpoint termination on the crafted recursion.
void fixpoint_termination(Criterion& c) {
  ir::Program p = load("recursion_limit.ir", c);
  if (p.functions.empty()) return;
  analysis::AnalysisOptions opts;  // default limit
  auto result = analysis::analyze(p, opts);
  c.expect(result.stats.unsafe_by_limit > 0, "the limit must mark records unsafe");
  c.expect(!result.stats.limit_hit_functions.empty(), "limit telemetry must name functions");
  c.expect(result.stats.function_pops <= p.functions.size() * (opts.limit + 2),
           "module pass iterations exceed the limit bound");
  const auto* buf = result.find_alloca("main", "buf");
  c.expect(buf && buf->safety.cls == analysis::Safety::Unsafe,
           "the recursive buffer must end up unsafe");
}

// C8: parser round-trip over the corpus plus 500 generated programs.
void parser_round_trip(Criterion& c) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(kCorpus)) {
    if (e.is_regular_file() && e.path().extension() == ".ir") {
      files.push_back(std::filesystem::relative(e.path(), kCorpus).string());
    }
  }
  c.expect(!files.empty(), "corpus is empty");
  auto round_trip = [&](const ir::Program& p, const std::string& what) {
    std::string t1 = ir::print_program(p);
    auto p1 = ir::parse_program(t1);
    if (!p1.ok()) {
      c.expect(false, what + ": printed text does not reparse");
      return;
    }
    std::string t2 = ir::print_program(*p1.program);
    auto p2 = ir::parse_program(t2);
    c.expect(p2.ok() && t1 == t2 && *p1.program == *p2.program, what + ": round trip differs");
  };
  for (const auto& f : files) {
    Criterion dummy{"", {}};
    ir::Program p = load(f, dummy);
    c.expect(dummy.passed(), f + " failed to load");
    if (!p.functions.empty()) round_trip(p, f);
  }
  for (uint64_t seed = 1; seed <= 500; ++seed) {
    ir::Program p = harness::generate_program(seed);
    if (!ir::validate(p).empty()) {
      c.expect(false, "generated program " + std::to_string(seed) + " does not validate");
      continue;
    }
    round_trip(p, "seed " + std::to_string(seed));
  }
}

}  // namespace

int main() {
  struct Entry {
    const char* name;
    void (*fn)(Criterion&);
  };
  const Entry entries[] = {
      {"C1 golden classification", golden_classification},
      {"C2 security scenarios s1-s6", security_scenarios},
      {"C3 conservativeness fuzzing (1000 x 4) + oracle self-test", conservativeness_fuzzing},
      {"C4 transparency over the benign corpus (elision on/off)", transparency},
      {"C5 machine-model conformance", machine_model},
      {"C6 static-overhead analogue", static_overhead},
      {"C7 fixpoint termination telemetry", fixpoint_termination},
      {"C8 parser round-trip (corpus + 500 generated)", parser_round_trip},
  };
  int failed = 0;
  for (const auto& e : entries) {
    Criterion c{e.name, {}};
    auto start = std::chrono::steady_clock::now();
    e.fn(c);
    auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %s (%.2fs)\n", c.passed() ? "PASS" : "FAIL", e.name, secs);
    for (const auto& f : c.failures) std::printf("        - %s\n", f.c_str());
    if (!c.passed()) ++failed;
  }
  if (failed > 0) {
    std::printf("%d criterion(s) failed\n", failed);
    return 1;
  }
  std::printf("all acceptance criteria passed\n");
  return 0;
}
