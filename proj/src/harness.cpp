#include "stacktag/harness.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "stacktag/parser.hpp"
#include "stacktag/validate.hpp"

namespace stacktag::harness {

using namespace stacktag::ir;
using json = nlohmann::json;

std::string_view expectation_name(Expectation e) {
  switch (e) {
    case Expectation::MustTrap: return "trap";
    case Expectation::MustPreserve: return "preserve";
    case Expectation::MustFinishEqual: return "finish-equal";
  }
  return "trap";
}

// ---- script JSON ----

namespace {

AddressRef address_from_json(const json& j) {
  AddressRef a;
  if (j.contains("raw")) {
    a.kind = AddressRef::Kind::Raw;
    a.raw = j.at("raw").get<uint64_t>();
    return a;
  }
  if (j.contains("global")) {
    a.kind = AddressRef::Kind::Global;
    a.name = j.at("global").get<std::string>();
    a.offset = j.value("offset", int64_t{0});
    return a;
  }
  a.kind = AddressRef::Kind::Slot;
  a.function = j.at("function").get<std::string>();
  a.name = j.at("alloca").get<std::string>();
  a.offset = j.value("offset", int64_t{0});
  return a;
}

json address_to_json(const AddressRef& a) {
  json j;
  switch (a.kind) {
    case AddressRef::Kind::Raw: j["raw"] = a.raw; break;
    case AddressRef::Kind::Global:
      j["global"] = a.name;
      j["offset"] = a.offset;
      break;
    case AddressRef::Kind::Slot:
      j["function"] = a.function;
      j["alloca"] = a.name;
      j["offset"] = a.offset;
      break;
  }
  return j;
}

PointerSpec pointer_from_json(const json& j) {
  PointerSpec p;
  if (j.contains("raw")) {
    p.raw = j.at("raw").get<uint64_t>();
    return p;
  }
  p.points_to = address_from_json(j.at("to"));
  p.tag = j.at("tag").get<uint8_t>();
  return p;
}

json pointer_to_json(const PointerSpec& p) {
  json j;
  if (p.raw) {
    j["raw"] = *p.raw;
  } else if (p.points_to) {
    j["to"] = address_to_json(*p.points_to);
    j["tag"] = p.tag;
  }
  return j;
}

std::vector<uint8_t> bytes_from_hex(const std::string& hex) {
  std::vector<uint8_t> out;
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::runtime_error("bad hex digit in script bytes");
  };
  if (hex.size() % 2 != 0) throw std::runtime_error("odd hex length in script bytes");
  for (size_t i = 0; i + 1 < hex.size() + 1 && i < hex.size(); i += 2) {
    out.push_back(static_cast<uint8_t>(nib(hex[i]) * 16 + nib(hex[i + 1])));
  }
  return out;
}

std::string bytes_to_hex(const std::vector<uint8_t>& bytes) {
  static const char* hexd = "0123456789abcdef";
  std::string s;
  for (uint8_t b : bytes) {
    s.push_back(hexd[b >> 4]);
    s.push_back(hexd[b & 0xf]);
  }
  return s;
}

}  // namespace

AdversaryScript parse_script_json(const std::string& text) {
  json j = json::parse(text);
  AdversaryScript s;
  if (j.contains("breakpoint")) {
    const auto& b = j.at("breakpoint");
    Breakpoint bp;
    bp.function = b.at("function").get<std::string>();
    if (b.contains("value")) {
      bp.value = b.at("value").get<std::string>();
    } else {
      bp.flat_index = b.at("index").get<uint32_t>();
    }
    bp.hit = b.value("hit", 1u);
    s.breakpoint = bp;
  }
  if (j.contains("args")) s.args = j.at("args").get<std::vector<int64_t>>();
  if (j.contains("preserve")) s.preserve = address_from_json(j.at("preserve"));
  std::string ex = j.value("expect", "trap");
  if (ex == "trap") {
    s.expectation = Expectation::MustTrap;
  } else if (ex == "preserve") {
    s.expectation = Expectation::MustPreserve;
  } else if (ex == "finish-equal") {
    s.expectation = Expectation::MustFinishEqual;
  } else {
    throw std::runtime_error("unknown expectation: " + ex);
  }
  for (const auto& a : j.value("actions", json::array())) {
    if (a.contains("disclose")) {
      ActionDisclose d;
      d.at = address_from_json(a.at("disclose").at("at"));
      d.len = a.at("disclose").at("len").get<uint64_t>();
      s.actions.push_back(d);
    } else if (a.contains("corrupt_unsafe")) {
      const auto& c = a.at("corrupt_unsafe");
      ActionCorrupt ac;
      ac.at = address_from_json(c.at("at"));
      if (c.contains("pointer")) {
        ac.pointer = pointer_from_json(c.at("pointer"));
      } else {
        ac.bytes = bytes_from_hex(c.at("bytes").get<std::string>());
      }
      s.actions.push_back(ac);
    } else if (a.contains("inject_pointer")) {
      const auto& ij = a.at("inject_pointer");
      ActionInject ai;
      ai.at = address_from_json(ij.at("at"));
      ai.value = pointer_from_json(ij.at("value"));
      s.actions.push_back(ai);
    } else {
      throw std::runtime_error("unknown action in script");
    }
  }
  return s;
}

std::string script_to_json(const AdversaryScript& s) {
  json j;
  j["schema"] = "stacktag/v1";
  if (s.breakpoint) {
    json b = {{"function", s.breakpoint->function}, {"hit", s.breakpoint->hit}};
    if (!s.breakpoint->value.empty()) {
      b["value"] = s.breakpoint->value;
    } else {
      b["index"] = s.breakpoint->flat_index;
    }
    j["breakpoint"] = std::move(b);
  }
  if (!s.args.empty()) j["args"] = s.args;
  if (s.preserve) j["preserve"] = address_to_json(*s.preserve);
  j["expect"] = std::string(expectation_name(s.expectation));
  json actions = json::array();
  for (const auto& a : s.actions) {
    std::visit(
        [&](const auto& act) {
          using T = std::decay_t<decltype(act)>;
          if constexpr (std::is_same_v<T, ActionDisclose>) {
            actions.push_back({{"disclose", {{"at", address_to_json(act.at)}, {"len", act.len}}}});
          } else if constexpr (std::is_same_v<T, ActionCorrupt>) {
            json c = {{"at", address_to_json(act.at)}};
            if (act.pointer) {
              c["pointer"] = pointer_to_json(*act.pointer);
            } else {
              c["bytes"] = bytes_to_hex(act.bytes);
            }
            actions.push_back({{"corrupt_unsafe", c}});
          } else {
            actions.push_back({{"inject_pointer",
                                {{"at", address_to_json(act.at)},
                                 {"value", pointer_to_json(act.value)}}}});
          }
        },
        a);
  }
  j["actions"] = std::move(actions);
  return j.dump(2);
}

// ---- scenario engine ----

uint32_t flat_index_of(const ir::Function& f, uint32_t block, uint32_t body_index) {
  uint32_t flat = 0;
  for (uint32_t bi = 0; bi < block; ++bi) {
    flat += static_cast<uint32_t>(f.blocks[bi].body.size()) + 1;
  }
  return flat + body_index;
}

std::optional<uint32_t> flat_index_of_def(const ir::Function& f, std::string_view value) {
  std::string_view name = value;
  if (!name.empty() && name[0] == '%') name.remove_prefix(1);
  auto vid = f.value_by_name(name);
  if (!vid) return std::nullopt;
  for (uint32_t bi = 0; bi < f.blocks.size(); ++bi) {
    const auto& b = f.blocks[bi];
    for (uint32_t k = 0; k < b.body.size(); ++k) {
      if (auto r = result_of(b.body[k]); r && *r == *vid) return flat_index_of(f, bi, k);
    }
  }
  return std::nullopt;
}

namespace {

struct ScriptError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ScenarioHooks : public interp::Hooks {
 public:
  ScenarioHooks(const AdversaryScript& script, const instrument::TagPlan& plan)
      : script_(script), plan_(plan) {}

  void on_step(const interp::StepInfo& si) override {
    if (!script_.breakpoint || fired_) return;
    const Breakpoint& bp = *script_.breakpoint;
    if (si.function != bp.function || si.flat_index != bp.flat_index) return;
    if (++hits_ < bp.hit) return;
    fired_ = true;
    try {
      take_preserve_snapshot(*si.machine);
      for (const auto& a : script_.actions) apply(*si.machine, a);
    } catch (const ScriptError& e) {
      error_ = e.what();
    }
  }

  void on_frame_pop(const interp::FramePopInfo& fp) override {
    if (!script_.preserve || !snapshot_ || preserve_checked_) return;
    if (script_.preserve->kind == AddressRef::Kind::Slot &&
        fp.function != script_.preserve->function) {
      return;
    }
    check_preserve(*fp.machine);
  }

  // Called by the engine after the run in case the frame never popped.
  void final_check(interp::Machine& m) {
    if (script_.preserve && snapshot_ && !preserve_checked_) check_preserve(m);
  }

  bool fired() const { return fired_; }
  bool preserved() const { return preserved_; }
  const std::optional<std::string>& error() const { return error_; }
  const std::vector<std::string>& log() const { return log_; }

 private:
  const AdversaryScript& script_;
  const instrument::TagPlan& plan_;
  uint32_t hits_ = 0;
  bool fired_ = false;
  std::optional<std::string> error_;
  std::optional<std::pair<uint64_t, std::vector<uint8_t>>> snapshot_;  // (addr, bytes)
  bool preserve_checked_ = false;
  bool preserved_ = true;
  std::vector<std::string> log_;

  uint64_t resolve(interp::Machine& m, const AddressRef& a, uint64_t span) {
    switch (a.kind) {
      case AddressRef::Kind::Raw: return a.raw + static_cast<uint64_t>(a.offset);
      case AddressRef::Kind::Global: {
        auto g = m.global_address(a.name);
        if (!g) throw ScriptError("script references unknown global @" + a.name);
        return *g + static_cast<uint64_t>(a.offset);
      }
      case AddressRef::Kind::Slot: {
        auto s = m.resolve_slot(a.function, a.name);
        if (!s) throw ScriptError("script references slot %" + a.name + " with no live frame");
        if (a.offset < 0 || static_cast<uint64_t>(a.offset) + span > s->size) {
          throw ScriptError("script offset outside slot %" + a.name);
        }
        return s->address + static_cast<uint64_t>(a.offset);
      }
    }
    return 0;
  }

  uint64_t forge_pointer(interp::Machine& m, const PointerSpec& p) {
    if (p.raw) return *p.raw;
    uint64_t addr = resolve(m, *p.points_to, 0);
    return mte::with_tag(mte::PointerValue{addr}, p.tag).raw;
  }

  void take_preserve_snapshot(interp::Machine& m) {
    if (!script_.preserve) return;
    uint64_t size = 8;
    if (script_.preserve->kind == AddressRef::Kind::Slot) {
      auto s = m.resolve_slot(script_.preserve->function, script_.preserve->name);
      if (!s) throw ScriptError("preserve slot not live at breakpoint");
      size = s->size;
    }
    uint64_t addr = resolve(m, *script_.preserve, 0);
    snapshot_ = {addr, m.read_bytes(addr, size)};
  }

  void check_preserve(interp::Machine& m) {
    preserve_checked_ = true;
    auto now = m.read_bytes(snapshot_->first, snapshot_->second.size());
    preserved_ = (now == snapshot_->second);
  }

  void apply(interp::Machine& m, const AdversaryAction& action) {
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, ActionDisclose>) {
            uint64_t addr = resolve(m, a.at, a.len);
            auto bytes = m.read_bytes(addr, a.len);
            std::string tags;
            for (uint64_t g = addr / 16; g <= (addr + std::max<uint64_t>(a.len, 1) - 1) / 16;
                 ++g) {
              auto t = m.allocation_tag(g * 16);
              tags += t ? std::to_string(*t) : std::string("-");
              tags += " ";
            }
            log_.push_back("disclose @" + std::to_string(addr) + " bytes=" + bytes_to_hex(bytes) +
                           " tags=" + tags);
          } else if constexpr (std::is_same_v<T, ActionCorrupt>) {
            std::vector<uint8_t> bytes = a.bytes;
            if (a.pointer) {
              uint64_t v = forge_pointer(m, *a.pointer);
              bytes.resize(8);
              for (int i = 0; i < 8; ++i) bytes[i] = static_cast<uint8_t>(v >> (8 * i));
            }
            uint64_t addr = resolve(m, a.at, bytes.size());
            for (uint64_t g = addr / 16; g <= (addr + bytes.size() - 1) / 16; ++g) {
              auto t = m.allocation_tag(g * 16);
              if (!t) throw ScriptError("corrupt-unsafe touches unmapped memory");
              if ((*t & 0b1000) != 0) {
                throw ScriptError("corrupt-unsafe rejected: granule tag has the top bit set");
              }
            }
            m.write_bytes(addr, bytes);
            log_.push_back("corrupt @" + std::to_string(addr) + " len=" +
                           std::to_string(bytes.size()));
          } else {
            // InjectPointer: target must be an 8-byte pointer slot inside a
            // pointer-unsafe allocation (tag families 0b10xx and 0b0xxx).
            if (a.at.kind == AddressRef::Kind::Slot) {
              auto tag = plan_.tag_of(a.at.function, a.at.name);
              const instrument::FrameLayout* fr = plan_.frame_for(a.at.function);
              bool pointer_safe = false;
              if (fr) {
                for (const auto& s : fr->slots) {
                  if (!s.is_guard && s.name == a.at.name) pointer_safe = s.safety.pointer_safe;
                }
              }
              (void)tag;
              if (pointer_safe) {
                throw ScriptError("inject rejected: target allocation is pointer-safe");
              }
            }
            uint64_t addr = resolve(m, a.at, 8);
            if (addr % 8 != 0) throw ScriptError("inject target not 8-aligned");
            for (uint64_t g = addr / 16; g <= (addr + 7) / 16; ++g) {
              auto t = m.allocation_tag(g * 16);
              if (!t) throw ScriptError("inject target unmapped");
              if ((*t >> 2) == 0b11) {
                throw ScriptError("inject rejected: target granule is tagged pointer-safe");
              }
            }
            uint64_t v = forge_pointer(m, a.value);
            m.write_u64(addr, v);
            log_.push_back("inject @" + std::to_string(addr) + " value=" + std::to_string(v));
          }
        },
        action);
  }
};

}  // namespace

std::string ScenarioReport::to_string() const {
  std::ostringstream os;
  os << id << " [" << expectation_name(expectation) << "] ";
  if (error) {
    os << "ERROR: " << *error;
    return os.str();
  }
  os << (pass ? "PASS" : "FAIL");
  using S = interp::Outcome::Status;
  switch (observed.outcome.status) {
    case S::Finished: os << " (finished ret=" << observed.outcome.return_value << ")"; break;
    case S::Trapped:
      os << " (trapped " << interp::trap_kind_name(observed.outcome.trap->kind);
      if (observed.trapped_at_guard) os << " at guard";
      os << ")";
      break;
    case S::Exhausted: os << " (exhausted)"; break;
  }
  return os.str();
}

ScenarioReport run_scenario(std::string id, const ir::Program& instrumented,
                            const instrument::TagPlan& plan, const AdversaryScript& script_in,
                            Expectation expectation, const ir::Program* plain,
                            interp::RunConfig base_cfg) {
  ScenarioReport report;
  report.id = std::move(id);
  report.expectation = expectation;

  // Value-anchored breakpoints resolve against the program being executed.
  AdversaryScript script = script_in;
  if (script.breakpoint && !script.breakpoint->value.empty()) {
    const ir::Function* f = instrumented.find_function(script.breakpoint->function);
    std::optional<uint32_t> idx;
    if (f) idx = flat_index_of_def(*f, script.breakpoint->value);
    if (!idx) {
      report.error = "breakpoint value " + script.breakpoint->value + " not found in @" +
                     script.breakpoint->function;
      return report;
    }
    script.breakpoint->flat_index = *idx;
  }

  interp::Outcome reference;
  if (expectation == Expectation::MustFinishEqual) {
    if (plain) {
      interp::RunConfig pc = base_cfg;
      pc.mte = false;
      interp::Machine pm(*plain, pc);
      reference = pm.run(script.args);
    } else {
      interp::RunConfig rc = base_cfg;
      rc.mte = true;
      interp::Machine rm(instrumented, rc);
      reference = rm.run(script.args);
    }
  }

  interp::RunConfig cfg = base_cfg;
  cfg.mte = true;
  interp::Machine machine(instrumented, cfg);
  ScenarioHooks hooks(script, plan);
  report.observed.outcome = machine.run(script.args, &hooks);
  hooks.final_check(machine);

  if (hooks.error()) {
    report.error = hooks.error();
    report.pass = false;
    return report;
  }
  if (script.breakpoint && !hooks.fired()) {
    report.error = "breakpoint never reached";
    report.pass = false;
    return report;
  }
  report.observed.preserved = hooks.preserved();
  report.observed.action_log = hooks.log();
  if (report.observed.outcome.trapped() && report.observed.outcome.trap->allocation_tag) {
    report.observed.trapped_at_guard =
        *report.observed.outcome.trap->allocation_tag == mte::kGuardTag;
  }

  switch (expectation) {
    case Expectation::MustTrap:
      report.pass = report.observed.outcome.trapped();
      break;
    case Expectation::MustPreserve:
      report.pass = report.observed.outcome.finished() && hooks.preserved();
      break;
    case Expectation::MustFinishEqual: {
      bool equal = report.observed.outcome.finished() && reference.finished() &&
                   report.observed.outcome.return_value == reference.return_value &&
                   report.observed.outcome.output == reference.output;
      report.observed.compared_equal = equal;
      report.pass = equal;
      break;
    }
  }
  return report;
}

ScenarioReport run_bundled_scenario(const Scenario& s, const std::string& corpus_dir,
                                    const analysis::AnalysisOptions& aopts,
                                    const instrument::InstrumentOptions& iopts) {
  std::ifstream in(corpus_dir + "/" + s.program_file);
  if (!in) {
    ScenarioReport r;
    r.id = s.id;
    r.error = "cannot open " + corpus_dir + "/" + s.program_file;
    return r;
  }
  std::stringstream ss;
  ss << in.rdbuf();
  auto loaded = ir::parse_and_validate(ss.str());
  if (!loaded.ok()) {
    ScenarioReport r;
    r.id = s.id;
    r.error = "program does not validate: " +
              (loaded.diagnostics.empty() ? std::string("?") : loaded.diagnostics[0].to_string());
    return r;
  }
  auto result = analysis::analyze(*loaded.program, aopts);
  auto instr = instrument::instrument_program(*loaded.program, result, iopts);
  return run_scenario(s.id, instr.program, instr.plan, s.script, s.script.expectation,
                      &*loaded.program);
}

// ---- fuzzing ----

FuzzReport fuzz_conservativeness(const FuzzParams& params) {
  FuzzReport report;
  std::mt19937_64 arg_rng(params.seed * 0x9e3779b97f4a7c15ull + 1);

  for (uint32_t n = 0; n < params.program_count; ++n) {
    uint64_t program_seed = params.seed + n;
    ir::Program prog = generate_program(program_seed, params.generator);
    ++report.programs;

    analysis::AnalysisResult result = analysis::analyze(prog, params.analysis);
    instrument::InstrumentResult instr =
        instrument::instrument_program(prog, result, params.instrument);
    auto plan_problems = instrument::validate_tag_plan(instr.plan);
    if (!plan_problems.empty()) {
      ++report.plan_problems;
      if (report.findings.size() < params.max_findings) {
        report.findings.push_back({program_seed, {}, "plan-invalid", plan_problems[0]});
      }
      continue;
    }

    for (uint32_t k = 0; k < params.inputs_per_program; ++k) {
      std::vector<int64_t> args(4);
      for (auto& a : args) a = static_cast<int64_t>(arg_rng() % 13);
      ++report.runs;

      OracleOutcome oracle = oracle_run(prog, args);
      interp::RunConfig cfg;
      cfg.mte = true;
      interp::Machine m(instr.program, cfg);
      interp::Outcome tagged = m.run(args);

      bool guarded_oob = false, unsafe_oob = false;
      for (const auto& v : oracle.violations) {
        const analysis::AllocaReport* rep = nullptr;
        for (const auto& a : result.allocations) {
          if (a.function == v.function && a.name == v.alloca_name) rep = &a;
        }
        if (!rep) continue;
        switch (rep->safety.cls) {
          case analysis::Safety::Implicit:
          case analysis::Safety::Provable:
            ++report.safe_violations;
            if (report.findings.size() < params.max_findings) {
              report.findings.push_back(
                  {program_seed, args, "safe-violation",
                   v.function + "/%" + v.alloca_name + " off=" + std::to_string(v.rel_offset) +
                       " class=" + std::string(analysis::safety_name(rep->safety.cls))});
            }
            break;
          case analysis::Safety::Guarded: {
            // Overflows confined to the slot's own granule padding are below
            // the 16-byte detection granularity; the guard guarantee starts
            // at the granule-rounded extent.
            int64_t padded = rep->size
                                 ? static_cast<int64_t>(mte::round_up_to_granule(*rep->size))
                                 : 0;
            if (v.rel_offset < 0 ||
                v.rel_offset + static_cast<int64_t>(v.width) > padded) {
              guarded_oob = true;
            }
            break;
          }
          case analysis::Safety::Unsafe: unsafe_oob = true; break;
        }
      }
      if (guarded_oob) {
        ++report.guarded_oob_runs;
        if (tagged.trapped()) {
          ++report.guarded_trap_coincidences;
        } else if (report.findings.size() < params.max_findings) {
          report.findings.push_back({program_seed, args, "guard-miss",
                                     "oracle saw a guarded overflow but the tagged run did not trap"});
        }
      }
      if (unsafe_oob) ++report.unsafe_oob_runs;
      if (oracle.clean()) {
        ++report.clean_runs;
        bool equal = tagged.finished() && tagged.return_value == oracle.return_value &&
                     tagged.output == oracle.output;
        if (!equal) {
          ++report.transparency_failures;
          if (report.findings.size() < params.max_findings) {
            std::string detail = tagged.trapped()
                                     ? "tagged run trapped (" +
                                           std::string(interp::trap_kind_name(tagged.trap->kind)) +
                                           " in " + tagged.trap->function + ")"
                                     : "outputs diverge";
            report.findings.push_back({program_seed, args, "transparency", detail});
          }
        }
      }
    }
  }
  return report;
}

std::string FuzzReport::to_json() const {
  json j;
  j["schema"] = "stacktag/v1";
  j["programs"] = programs;
  j["runs"] = runs;
  j["safe_violations"] = safe_violations;
  j["guarded_oob_runs"] = guarded_oob_runs;
  j["guarded_trap_coincidences"] = guarded_trap_coincidences;
  j["unsafe_oob_runs"] = unsafe_oob_runs;
  j["clean_runs"] = clean_runs;
  j["transparency_failures"] = transparency_failures;
  j["plan_problems"] = plan_problems;
  j["ok"] = ok();
  json fs = json::array();
  for (const auto& f : findings) {
    fs.push_back({{"seed", f.program_seed}, {"args", f.args}, {"kind", f.kind}, {"detail", f.detail}});
  }
  j["findings"] = std::move(fs);
  return j.dump(2);
}

std::string FuzzReport::to_table() const {
  std::ostringstream os;
  os << "programs                  " << programs << "\n"
     << "runs                      " << runs << "\n"
     << "safe violations           " << safe_violations << "\n"
     << "guarded OOB runs          " << guarded_oob_runs << "\n"
     << "  trapped in tagged run   " << guarded_trap_coincidences << "\n"
     << "unsafe OOB runs           " << unsafe_oob_runs << "\n"
     << "clean runs                " << clean_runs << "\n"
     << "transparency failures     " << transparency_failures << "\n"
     << "plan problems             " << plan_problems << "\n"
     << "verdict                   " << (ok() ? "OK" : "FINDINGS") << "\n";
  for (const auto& f : findings) {
    os << "  [" << f.kind << "] seed=" << f.program_seed << " " << f.detail << "\n";
  }
  return os.str();
}

}  // namespace stacktag::harness
