#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "stacktag/analysis.hpp"
#include "stacktag/instrument.hpp"
#include "stacktag/interp.hpp"
#include "stacktag/ir.hpp"

// Adversary scenario engine, conservativeness fuzz oracle, and static
// overhead reporting.
namespace stacktag::harness {

// ---- adversary scripts ----

struct AddressRef {
  enum class Kind : uint8_t { Slot, Global, Raw } kind = Kind::Raw;
  std::string function;  // Slot
  std::string name;      // Slot: value name, Global: global name
  int64_t offset = 0;
  uint64_t raw = 0;
};

// A pointer value the adversary writes: either an address resolved at apply
// time with a chosen address tag, or a raw 64-bit literal.
struct PointerSpec {
  std::optional<AddressRef> points_to;
  uint8_t tag = 0;
  std::optional<uint64_t> raw;
};

struct ActionDisclose {
  AddressRef at;
  uint64_t len = 0;
};
// Direct byte corruption; permitted only on granules whose allocation tag
// has a clear top bit.
struct ActionCorrupt {
  AddressRef at;
  std::vector<uint8_t> bytes;
  std::optional<PointerSpec> pointer;  // write a forged pointer instead of bytes
};
// Overwrites an 8-byte pointer slot inside a pointer-unsafe allocation.
struct ActionInject {
  AddressRef at;
  PointerSpec value;
};
using AdversaryAction = std::variant<ActionDisclose, ActionCorrupt, ActionInject>;

struct Breakpoint {
  std::string function;
  uint32_t flat_index = 0;  // body instructions then terminator, blocks in order
  uint32_t hit = 1;
  // When set, the index is resolved from the instruction defining this value
  // in the program actually executed; robust across instrumentation.
  std::string value;
};

// Flat instruction index of (block, body position) within a function.
uint32_t flat_index_of(const ir::Function& f, uint32_t block, uint32_t body_index);
// Index of the instruction defining `value`, if any.
std::optional<uint32_t> flat_index_of_def(const ir::Function& f, std::string_view value);

enum class Expectation : uint8_t { MustTrap, MustPreserve, MustFinishEqual };
std::string_view expectation_name(Expectation e);

struct AdversaryScript {
  std::optional<Breakpoint> breakpoint;
  std::vector<AdversaryAction> actions;
  std::vector<int64_t> args;
  std::optional<AddressRef> preserve;  // slot whose bytes MustPreserve checks
  Expectation expectation = Expectation::MustTrap;
};

AdversaryScript parse_script_json(const std::string& text);  // throws std::runtime_error
std::string script_to_json(const AdversaryScript& script);

// ---- scenario engine ----

struct ScenarioObserved {
  interp::Outcome outcome;
  bool preserved = true;
  bool compared_equal = false;
  bool trapped_at_guard = false;
  std::vector<std::string> action_log;
};

struct ScenarioReport {
  std::string id;
  Expectation expectation = Expectation::MustTrap;
  ScenarioObserved observed;
  bool pass = false;
  std::optional<std::string> error;  // script constraint violation, not a fail verdict

  std::string to_string() const;
};

ScenarioReport run_scenario(std::string id, const ir::Program& instrumented,
                            const instrument::TagPlan& plan, const AdversaryScript& script,
                            Expectation expectation, const ir::Program* plain = nullptr,
                            interp::RunConfig base_cfg = {});

struct Scenario {
  std::string id;
  std::string title;
  std::string requirement;
  std::string program_file;  // path relative to the corpus directory
  AdversaryScript script;
};
const std::vector<Scenario>& scenario_suite();
const Scenario* find_scenario(std::string_view id);

ScenarioReport run_bundled_scenario(const Scenario& s, const std::string& corpus_dir,
                                    const analysis::AnalysisOptions& aopts = {},
                                    const instrument::InstrumentOptions& iopts = {});

// ---- bounds-tracking oracle (tag-blind) ----

struct OracleViolation {
  enum class Kind : uint8_t { OutOfBounds, UseAfterDeath } kind = Kind::OutOfBounds;
  std::string function;
  std::string alloca_name;
  uint64_t address = 0;
  uint64_t width = 0;
  int64_t rel_offset = 0;  // access start relative to the allocation base
};

struct OracleOutcome {
  enum class Status : uint8_t { Finished, Exhausted, Stuck } status = Status::Finished;
  int64_t return_value = 0;
  std::vector<int64_t> output;
  std::vector<OracleViolation> violations;
  uint64_t steps = 0;

  bool clean() const { return status == Status::Finished && violations.empty(); }
};

// Executes the plain program with based-on provenance and bounds/lifetime
// tracking. Never consults tags or the tag plan; violations are recorded and
// execution continues.
OracleOutcome oracle_run(const ir::Program& p, const std::vector<int64_t>& args,
                         uint64_t step_budget = 2'000'000);

// ---- random program generation ----

struct GeneratorParams {
  uint32_t max_functions = 4;  // including the entry
  uint32_t max_loops = 3;
  uint32_t max_allocas = 6;
};

ir::Program generate_program(uint64_t seed, const GeneratorParams& params = {});

// ---- conservativeness fuzzing ----

struct FuzzParams {
  uint64_t seed = 1;
  uint32_t program_count = 1000;
  uint32_t inputs_per_program = 4;
  GeneratorParams generator;
  analysis::AnalysisOptions analysis;
  instrument::InstrumentOptions instrument;
  uint32_t max_findings = 25;
};

struct FuzzFinding {
  uint64_t program_seed = 0;
  std::vector<int64_t> args;
  std::string kind;  // safe-violation | guard-miss | transparency | plan-invalid
  std::string detail;
};

struct FuzzReport {
  uint64_t programs = 0;
  uint64_t runs = 0;
  uint64_t safe_violations = 0;
  uint64_t guarded_oob_runs = 0;
  uint64_t guarded_trap_coincidences = 0;
  uint64_t unsafe_oob_runs = 0;
  uint64_t clean_runs = 0;
  uint64_t transparency_failures = 0;
  uint64_t plan_problems = 0;
  std::vector<FuzzFinding> findings;

  bool ok() const {
    return safe_violations == 0 && guarded_oob_runs == guarded_trap_coincidences &&
           transparency_failures == 0 && plan_problems == 0;
  }
  std::string to_json() const;
  std::string to_table() const;
};

FuzzReport fuzz_conservativeness(const FuzzParams& params);

// ---- static overhead ----

struct FunctionOverhead {
  std::string name;
  uint64_t insts_before = 0, insts_after = 0;
  uint64_t frame_before = 0, frame_after = 0;
};

struct OverheadReport {
  std::vector<FunctionOverhead> functions;
  uint64_t insts_before = 0, insts_after = 0;
  uint64_t frame_before = 0, frame_after = 0;
  double inst_delta_pct = 0.0;
  double frame_delta_pct = 0.0;
  double safe_byte_proportion = 1.0;

  std::string to_json() const;
  std::string to_table() const;
};

OverheadReport measure_overhead(const ir::Program& plain, const ir::Program& instrumented,
                                const analysis::AnalysisResult& result);

uint64_t static_frame_bytes(const ir::Function& f);
uint64_t instruction_count(const ir::Function& f);

}  // namespace stacktag::harness
