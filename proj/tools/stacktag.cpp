#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "stacktag/analysis.hpp"
#include "stacktag/harness.hpp"
#include "stacktag/instrument.hpp"
#include "stacktag/interp.hpp"
#include "stacktag/parser.hpp"
#include "stacktag/printer.hpp"
#include "stacktag/validate.hpp"

using json = nlohmann::json;
using namespace stacktag;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitTrap = 2;
constexpr int kExitExhausted = 3;
constexpr int kExitUsage = 64;
constexpr int kExitInput = 65;

#ifndef STACKTAG_DEFAULT_CORPUS
#define STACKTAG_DEFAULT_CORPUS ""
#endif

struct CommonOpts {
  uint32_t limit = 32;
  uint32_t guard_width = 1;
  bool wildcard = false;
  bool no_elision = false;
  bool weaken = false;
  uint64_t seed = 1;
  uint64_t step_budget = 10'000'000;
  std::string output = "json";
  std::string trace_file;
  std::vector<std::string> pure_externals;

  analysis::AnalysisOptions analysis_opts() const {
    analysis::AnalysisOptions a;
    a.limit = limit;
    a.guard_bytes = 16 * static_cast<int64_t>(guard_width);
    a.static_elision = !no_elision;
    a.weaken_for_selftest = weaken;
    a.pure_externals.insert(pure_externals.begin(), pure_externals.end());
    return a;
  }
  instrument::InstrumentOptions instrument_opts() const {
    instrument::InstrumentOptions i;
    i.guard_width_granules = guard_width;
    return i;
  }
  interp::RunConfig run_cfg(bool mte) const {
    interp::RunConfig c;
    c.mte = mte;
    c.wildcard = wildcard;
    c.step_budget = step_budget;
    return c;
  }
};

int fail_input(const std::vector<ir::Diagnostic>& diags) {
  for (const auto& d : diags) std::cerr << d.to_string() << "\n";
  return kExitInput;
}

std::optional<ir::Program> load_file(const std::string& path, int& rc) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot open " << path << "\n";
    rc = kExitInput;
    return std::nullopt;
  }
  std::stringstream ss;
  ss << in.rdbuf();
  auto loaded = ir::parse_and_validate(ss.str());
  if (!loaded.ok()) {
    rc = fail_input(loaded.diagnostics);
    return std::nullopt;
  }
  return std::move(loaded.program);
}

json range_json(const analysis::ByteRange& r) {
  if (r.empty()) return "empty";
  if (r.full()) return "full";
  json j;
  j["lo"] = r.lo == analysis::ByteRange::kMin ? json("-inf") : json(r.lo);
  j["hi"] = r.hi == analysis::ByteRange::kMax ? json("+inf") : json(r.hi);
  return j;
}

json analysis_json(const ir::Program& p, const analysis::AnalysisResult& r) {
  json j;
  j["schema"] = "stacktag/v1";
  json allocs = json::array();
  for (const auto& a : r.allocations) {
    json e;
    e["function"] = a.function;
    e["alloca"] = "%" + a.name;
    if (a.size) {
      e["size"] = *a.size;
    } else {
      e["size"] = "dynamic";
    }
    e["class"] = std::string(analysis::safety_name(a.safety.cls));
    e["pointer_safe"] = a.safety.pointer_safe;
    e["range"] = range_json(a.range);
    if (a.linear.any()) {
      json lin;
      lin["start"] = range_json(a.linear.start_range);
      lin["range"] = range_json(a.linear.linear_range);
      if (a.linear.max_step) lin["step"] = *a.linear.max_step;
      e["linear"] = std::move(lin);
    } else {
      e["linear"] = nullptr;
    }
    allocs.push_back(std::move(e));
  }
  j["allocations"] = std::move(allocs);
  json sites = json::array();
  for (const auto& s : r.tfp_sites) {
    json e;
    e["function"] = p.functions[s.func].name;
    e["block"] = p.functions[s.func].blocks[s.block].label;
    e["index"] = s.index;
    switch (s.kind) {
      case analysis::TfpSiteKind::PtrLoad: e["site"] = "ptr-load"; break;
      case analysis::TfpSiteKind::Gep: e["site"] = "gep"; break;
      case analysis::TfpSiteKind::IntToPtrCast: e["site"] = "inttoptr"; break;
    }
    e["action"] = std::string(analysis::tfp_action_name(s.action));
    sites.push_back(std::move(e));
  }
  j["tfp_sites"] = std::move(sites);
  j["stats"] = {{"function_pops", r.stats.function_pops},
                {"merges", r.stats.merges},
                {"rounds", r.stats.rounds},
                {"limit_hit_functions", r.stats.limit_hit_functions},
                {"unsafe_by_limit", r.stats.unsafe_by_limit},
                {"useinfo_count", r.stats.useinfo_count}};
  return j;
}

std::string analysis_table(const analysis::AnalysisResult& r) {
  std::ostringstream os;
  for (const auto& a : r.allocations) {
    os << a.function << " %" << a.name << ": " << analysis::safety_name(a.safety.cls)
       << (a.safety.pointer_safe ? ", pointer-safe" : "");
    if (a.size) {
      os << " (size " << *a.size << ")";
    } else {
      os << " (dynamic)";
    }
    os << "\n";
  }
  os << "pops=" << r.stats.function_pops << " rounds=" << r.stats.rounds
     << " unsafe_by_limit=" << r.stats.unsafe_by_limit << "\n";
  return os.str();
}

json plan_json(const instrument::TagPlan& plan) {
  json j;
  j["schema"] = "stacktag/v1";
  json frames = json::array();
  for (const auto& fr : plan.frames) {
    json f;
    f["function"] = fr.function;
    f["static_bytes"] = fr.static_bytes;
    f["reset_tags"] = fr.needs_reset_tags;
    json slots = json::array();
    for (const auto& s : fr.slots) {
      slots.push_back({{"name", s.is_guard ? s.name : "%" + s.name},
                       {"guard", s.is_guard},
                       {"offset", s.offset},
                       {"size", s.size},
                       {"padded_size", s.padded_size},
                       {"align", s.align},
                       {"tag", s.tag},
                       {"class", std::string(analysis::safety_name(s.safety.cls))},
                       {"pointer_safe", s.safety.pointer_safe}});
    }
    f["slots"] = std::move(slots);
    json dyn = json::array();
    for (const auto& [vid, tag] : fr.dynamic_tags) {
      (void)vid;
      dyn.push_back(tag);
    }
    f["dynamic_tags"] = std::move(dyn);
    frames.push_back(std::move(f));
  }
  j["frames"] = std::move(frames);
  j["tfp_sites"] = json::array();
  for (const auto& s : plan.tfp_sites) {
    j["tfp_sites"].push_back({{"func", s.func},
                              {"block", s.block},
                              {"index", s.index},
                              {"action", std::string(analysis::tfp_action_name(s.action))}});
  }
  return j;
}

class TraceHooks : public interp::Hooks {
 public:
  explicit TraceHooks(const std::string& path) : out_(path) {}
  bool ok() const { return out_.good(); }

  void on_step(const interp::StepInfo& si) override {
    out_ << json{{"event", "step"},
                 {"step", si.step},
                 {"function", std::string(si.function)},
                 {"block", si.block},
                 {"index", si.flat_index}}
                .dump()
         << "\n";
  }
  void on_check(const interp::CheckEvent& ev) override {
    json j{{"event", "check"},     {"op", std::string(ev.op)},
           {"address", ev.address}, {"width", ev.width},
           {"addr_tag", ev.address_tag}, {"via_frame_base", ev.via_frame_base},
           {"allowed", ev.allowed}};
    if (ev.allocation_tag) j["alloc_tag"] = *ev.allocation_tag;
    out_ << j.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

int outcome_exit(const interp::Outcome& o) {
  switch (o.status) {
    case interp::Outcome::Status::Finished: return kExitOk;
    case interp::Outcome::Status::Trapped: return kExitTrap;
    case interp::Outcome::Status::Exhausted: return kExitExhausted;
  }
  return kExitOk;
}

void print_outcome(const interp::Outcome& o, const std::string& mode) {
  if (mode == "json") {
    json j;
    switch (o.status) {
      case interp::Outcome::Status::Finished: j["status"] = "finished"; break;
      case interp::Outcome::Status::Trapped: j["status"] = "trapped"; break;
      case interp::Outcome::Status::Exhausted: j["status"] = "exhausted"; break;
    }
    j["return"] = o.return_value;
    j["output"] = o.output;
    j["steps"] = o.steps;
    if (o.trap) {
      json t;
      t["kind"] = std::string(interp::trap_kind_name(o.trap->kind));
      t["address"] = o.trap->address;
      t["addr_tag"] = o.trap->address_tag;
      if (o.trap->allocation_tag) t["alloc_tag"] = *o.trap->allocation_tag;
      t["function"] = o.trap->function;
      t["block"] = o.trap->block;
      j["trap"] = std::move(t);
    }
    std::cout << j.dump(2) << "\n";
    return;
  }
  for (int64_t v : o.output) std::cout << "out " << v << "\n";
  switch (o.status) {
    case interp::Outcome::Status::Finished:
      std::cout << "finished: " << o.return_value << " (" << o.steps << " steps)\n";
      break;
    case interp::Outcome::Status::Trapped:
      std::cout << "trapped: " << interp::trap_kind_name(o.trap->kind) << " at address "
                << o.trap->address << " in @" << o.trap->function << "\n";
      break;
    case interp::Outcome::Status::Exhausted:
      std::cout << "exhausted step budget\n";
      break;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stacktag: stack-safety classification, tagging instrumentation, and a tagged-memory machine"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config")->configurable(false);
  app.allow_config_extras(false);

  CommonOpts opts;
  app.add_option("--limit", opts.limit, "module-pass visit limit per function")->configurable(true);
  app.add_option("--guard-width", opts.guard_width, "guard width in 16-byte granules")
      ->configurable(true);
  app.add_flag("--wildcard", opts.wildcard, "enable the wildcard address tag 0b0000")
      ->configurable(true);
  app.add_flag("--no-elision", opts.no_elision, "disable static elision of load enforcement")
      ->configurable(true);
  app.add_flag("--weaken-analysis", opts.weaken, "deliberately misclassify (oracle self-test)")
      ->configurable(true);
  app.add_option("--seed", opts.seed, "random seed")->configurable(true);
  app.add_option("--step-budget", opts.step_budget, "interpreter step budget")->configurable(true);
  app.add_option("--output", opts.output, "output format: json|table")
      ->check(CLI::IsMember({"json", "table"}))
      ->configurable(true);
  app.add_option("--trace", opts.trace_file, "write a JSON-lines trace of steps and checks")
      ->configurable(true);
  app.add_option("--pure-external", opts.pure_externals,
                 "undefined callee treated as capturing no pointers (repeatable)")
      ->configurable(true);

  // analyze
  std::string an_file;
  auto* an = app.add_subcommand("analyze", "classify stack allocations");
  an->add_option("file", an_file, "IR source")->required();

  // instrument
  std::string in_file, in_out;
  auto* ins = app.add_subcommand("instrument", "rewrite a program with tagging and enforcement");
  ins->add_option("file", in_file, "IR source")->required();
  ins->add_option("-o,--out", in_out, "output path (default: <file>.instr.ir)");

  // run
  std::string run_file;
  std::vector<int64_t> run_args;
  bool no_mte = false;
  auto* rn = app.add_subcommand("run", "execute a program on the tagged machine");
  rn->add_option("file", run_file, "IR source")->required();
  rn->add_option("--args", run_args, "entry inputs (written to the @args global)");
  rn->add_flag("--no-mte", no_mte, "tag-blind execution");

  // attack
  std::string at_file, at_scenario, at_script;
  auto* at = app.add_subcommand("attack", "run an adversary scenario");
  at->add_option("file", at_file, "IR source (defaults to the bundled scenario program)");
  at->add_option("--scenario", at_scenario, "bundled scenario id (s1..s6)");
  at->add_option("--script", at_script, "adversary script JSON");

  // fuzz
  uint32_t fz_count = 1000, fz_inputs = 4;
  auto* fz = app.add_subcommand("fuzz", "conservativeness fuzzing against the bounds oracle");
  fz->add_option("--count", fz_count, "number of generated programs");
  fz->add_option("--inputs", fz_inputs, "inputs per program");

  // report
  std::string rp_file;
  auto* rp = app.add_subcommand("report", "static overhead report");
  rp->add_option("file", rp_file, "IR source")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    int rc = kExitOk;
    if (an->parsed()) {
      auto p = load_file(an_file, rc);
      if (!p) return rc;
      auto result = analysis::analyze(*p, opts.analysis_opts());
      if (opts.output == "json") {
        std::cout << analysis_json(*p, result).dump(2) << "\n";
      } else {
        std::cout << analysis_table(result);
      }
      return kExitOk;
    }
    if (ins->parsed()) {
      auto p = load_file(in_file, rc);
      if (!p) return rc;
      auto result = analysis::analyze(*p, opts.analysis_opts());
      auto out = instrument::instrument_program(*p, result, opts.instrument_opts());
      std::string out_path = in_out.empty() ? in_file + ".instr.ir" : in_out;
      std::ofstream of(out_path);
      of << ir::print_program(out.program);
      std::ofstream pf(out_path + ".tagplan.json");
      pf << plan_json(out.plan).dump(2) << "\n";
      std::cerr << "wrote " << out_path << " and " << out_path << ".tagplan.json\n";
      return kExitOk;
    }
    if (rn->parsed()) {
      auto p = load_file(run_file, rc);
      if (!p) return rc;
      interp::RunConfig cfg = opts.run_cfg(!no_mte);
      if (ir::has_instrumentation_ops(*p) && no_mte) {
        std::cerr << "note: instrumentation ops degrade to no-ops with --no-mte\n";
      }
      interp::Machine m(*p, cfg);
      std::unique_ptr<TraceHooks> trace;
      if (!opts.trace_file.empty()) {
        trace = std::make_unique<TraceHooks>(opts.trace_file);
        if (!trace->ok()) {
          std::cerr << "error: cannot open trace file\n";
          return kExitInput;
        }
      }
      auto outcome = m.run(run_args, trace.get());
      print_outcome(outcome, opts.output);
      return outcome_exit(outcome);
    }
    if (at->parsed()) {
      if (at_scenario.empty() == at_script.empty()) {
        std::cerr << "error: pass exactly one of --scenario or --script\n";
        return kExitUsage;
      }
      if (!at_scenario.empty()) {
        const harness::Scenario* s = harness::find_scenario(at_scenario);
        if (!s) {
          std::cerr << "error: unknown scenario " << at_scenario << "\n";
          return kExitUsage;
        }
        std::string corpus = STACKTAG_DEFAULT_CORPUS;
        harness::ScenarioReport report;
        if (!at_file.empty()) {
          auto p = load_file(at_file, rc);
          if (!p) return rc;
          if (ir::has_instrumentation_ops(*p)) {
            // Already instrumented: run it as-is. Inject-target checks fall
            // back to live granule tags without a plan.
            report = harness::run_scenario(s->id, *p, instrument::TagPlan{}, s->script,
                                           s->script.expectation, nullptr);
          } else {
            auto result = analysis::analyze(*p, opts.analysis_opts());
            auto instr = instrument::instrument_program(*p, result, opts.instrument_opts());
            report = harness::run_scenario(s->id, instr.program, instr.plan, s->script,
                                           s->script.expectation, &*p);
          }
        } else {
          report = harness::run_bundled_scenario(*s, corpus, opts.analysis_opts(),
                                                 opts.instrument_opts());
        }
        std::cout << report.to_string() << "\n";
        return report.pass ? kExitOk : (report.error ? kExitInput : 1);
      }
      auto p = load_file(at_file, rc);
      if (!p) return rc;
      std::ifstream sf(at_script);
      if (!sf) {
        std::cerr << "error: cannot open " << at_script << "\n";
        return kExitInput;
      }
      std::stringstream ss;
      ss << sf.rdbuf();
      auto script = harness::parse_script_json(ss.str());
      ir::Program instr_prog;
      instrument::TagPlan plan;
      const ir::Program* plain = nullptr;
      if (ir::has_instrumentation_ops(*p)) {
        instr_prog = *p;
        // The plan is unavailable for pre-instrumented inputs; target checks
        // fall back to live granule tags only.
      } else {
        auto result = analysis::analyze(*p, opts.analysis_opts());
        auto out = instrument::instrument_program(*p, result, opts.instrument_opts());
        instr_prog = std::move(out.program);
        plan = std::move(out.plan);
        plain = &*p;
      }
      auto report = harness::run_scenario("script", instr_prog, plan, script, script.expectation,
                                          plain);
      std::cout << report.to_string() << "\n";
      return report.pass ? kExitOk : (report.error ? kExitInput : 1);
    }
    if (fz->parsed()) {
      harness::FuzzParams params;
      params.seed = opts.seed;
      params.program_count = fz_count;
      params.inputs_per_program = fz_inputs;
      params.analysis = opts.analysis_opts();
      params.instrument = opts.instrument_opts();
      auto report = harness::fuzz_conservativeness(params);
      std::cout << (opts.output == "json" ? report.to_json() : report.to_table()) << "\n";
      return report.ok() ? kExitOk : 1;
    }
    if (rp->parsed()) {
      auto p = load_file(rp_file, rc);
      if (!p) return rc;
      auto result = analysis::analyze(*p, opts.analysis_opts());
      auto out = instrument::instrument_program(*p, result, opts.instrument_opts());
      auto report = harness::measure_overhead(*p, out.program, result);
      std::cout << (opts.output == "json" ? report.to_json() : report.to_table()) << "\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitUsage;
}
