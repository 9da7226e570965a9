#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stacktag/ir.hpp"

// Two-pass memory-safety analysis: a local function pass builds one UseInfo
// per base pointer (allocas, pointer arguments, pointer loads), and an
// interprocedural fixpoint merges them across call and store/load links
// until nothing changes or the per-function visit limit is hit.
namespace stacktag::analysis {

// Half-open byte interval with saturating endpoints. lo == hi means empty;
// saturated endpoints stand in for "unbounded on that side".
struct ByteRange {
  static constexpr int64_t kMin = INT64_MIN;
  static constexpr int64_t kMax = INT64_MAX;

  int64_t lo = 0;
  int64_t hi = 0;

  static ByteRange empty_range() { return {0, 0}; }
  static ByteRange full_range() { return {kMin, kMax}; }
  static ByteRange of(int64_t lo, int64_t hi) { return {lo, hi}; }

  bool empty() const { return lo == hi; }
  bool full() const { return lo == kMin && hi == kMax; }

  // Smallest covering interval.
  ByteRange union_with(const ByteRange& o) const;
  ByteRange offset_by(int64_t delta) const;
  // Subset test against [bound_lo, bound_hi); empty ranges are inside.
  bool within(int64_t bound_lo, int64_t bound_hi) const;
  bool contains(const ByteRange& o) const;

  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

int64_t sat_add(int64_t a, int64_t b);
int64_t sat_mul(int64_t a, int64_t b);

// Linear (induction-driven) access facts: the range linear accesses may
// cover, the footprint of the first iteration, and the largest byte step.
struct LinearAccessInfo {
  ByteRange linear_range = ByteRange::empty_range();
  ByteRange start_range = ByteRange::empty_range();
  std::optional<int64_t> max_step;

  bool any() const { return !start_range.empty() || !linear_range.empty(); }
  void merge(const LinearAccessInfo& o, int64_t offset);

  friend bool operator==(const LinearAccessInfo&, const LinearAccessInfo&) = default;
};

enum class BaseKind : uint8_t { Alloca, Argument, LoadSite };

struct BaseId {
  uint32_t func = 0;
  BaseKind kind = BaseKind::Alloca;
  uint32_t id = 0;  // alloca/load result ValueId, or parameter index

  auto operator<=>(const BaseId&) const = default;
};

struct CallRecord {
  std::string callee;
  uint32_t param_index = 0;
  int64_t offset = 0;
  auto operator<=>(const CallRecord&) const = default;
};

struct StoreRecord {
  BaseId site;
  int64_t value_offset = 0;
  auto operator<=>(const StoreRecord&) const = default;
};

struct UseInfo {
  BaseId base;
  ByteRange range = ByteRange::empty_range();  // arbitrary (non-linear) accesses
  LinearAccessInfo linear;
  std::vector<CallRecord> calls;
  std::vector<StoreRecord> stored_in;
  std::vector<BaseId> derefed_by;
  bool unsafe = false;
  bool pointer_unsafe = false;
  uint32_t depth = 0;
  std::string unsafe_reason;

  // Access-kind facts backing the pointer-safety approximation.
  bool has_ptr_access = false;
  bool has_int_access = false;
  bool ptr_access_misaligned = false;  // some ptr access not at a constant 8-aligned offset
  // True while every use is a direct load/store of the base at a constant
  // offset: the candidate set for the implicit class.
  bool direct_only = true;

  void set_unsafe(std::string_view reason);

  friend bool operator==(const UseInfo&, const UseInfo&) = default;
};

using ProgramTables = std::map<BaseId, UseInfo>;

enum class Safety : uint8_t { Implicit, Provable, Guarded, Unsafe };
std::string_view safety_name(Safety s);

struct SafetyClass {
  Safety cls = Safety::Unsafe;
  bool pointer_safe = false;
  friend bool operator==(const SafetyClass&, const SafetyClass&) = default;
};

enum class TfpSiteKind : uint8_t { PtrLoad, Gep, IntToPtrCast };
enum class TfpAction : uint8_t { None, TfpLoad, ClearLoaded, HardenGep, UntagCast };
std::string_view tfp_action_name(TfpAction a);

struct TfpSiteReport {
  uint32_t func = 0;
  uint32_t block = 0;
  uint32_t index = 0;
  TfpSiteKind kind = TfpSiteKind::PtrLoad;
  TfpAction action = TfpAction::None;
  auto operator<=>(const TfpSiteReport&) const = default;
};

struct AllocaReport {
  uint32_t func = 0;
  ir::ValueId value = ir::kNoValue;
  std::string function;
  std::string name;
  std::optional<uint64_t> size;  // nullopt for dynamic allocas
  bool dynamic = false;
  SafetyClass safety;
  ByteRange range = ByteRange::empty_range();
  LinearAccessInfo linear;
  uint32_t block = 0;
  uint32_t index = 0;
};

struct PassStats {
  uint64_t function_pops = 0;
  uint64_t merges = 0;
  uint64_t rounds = 0;
  std::vector<std::string> limit_hit_functions;
  uint64_t unsafe_by_limit = 0;
  uint64_t useinfo_count = 0;
};

struct AnalysisOptions {
  uint32_t limit = 32;                  // per-function module-pass visits
  int64_t guard_bytes = 16;             // granule size times guard width
  std::set<std::string> pure_externals; // undefined callees that capture nothing
  bool static_elision = true;           // resolve TFP actions from static classes
  bool weaken_for_selftest = false;     // misclassify on purpose (oracle self-test)
};

struct AnalysisResult {
  ProgramTables tables;
  std::vector<AllocaReport> allocations;
  std::vector<TfpSiteReport> tfp_sites;
  PassStats stats;

  const AllocaReport* find_alloca(std::string_view function, std::string_view name) const;
  const AllocaReport* find_alloca(uint32_t func, ir::ValueId value) const;
  const UseInfo* find_use_info(const BaseId& id) const;
};

// ---- operations ----

// Local pass over one function; fills `tables` with one UseInfo per base.
void run_function_pass(const ir::Program& p, uint32_t func_index, ProgramTables& tables);

// Interprocedural fixpoint per the worklist scheme: per-function visit
// counters, callee-argument merging, store/load resolution, caller
// re-enqueueing, and setAllToUnsafe once a counter reaches the limit.
void run_module_pass(const ir::Program& p, ProgramTables& tables, const AnalysisOptions& opts,
                     PassStats& stats);

// Widens `dst` with `src` shifted by `offset` bytes. Appends (offset-adjusted)
// call/store/load links; monotone and idempotent.
void merge_use_info(UseInfo& dst, const UseInfo& src, int64_t offset);

// Final pointer-safety sweep: an allocation is pointer-safe when it is safe
// and either never holds pointers or is used purely at pointer kind on
// aligned slots.
void check_pointer_safety(ProgramTables& tables);
bool currently_pointer_unsafe(const UseInfo& u);

// Per-allocation classification plus the TFP site list.
AnalysisResult classify(const ir::Program& p, ProgramTables tables, const AnalysisOptions& opts,
                        PassStats stats);

// Whole pipeline. Throws std::invalid_argument on instrumented input.
AnalysisResult analyze(const ir::Program& p, const AnalysisOptions& opts = {});

// ---- linear-access detection (exposed for tests) ----

struct InductionFact {
  int64_t initial = 0;  // index units
  int64_t step = 0;     // index units per iteration, signed
};

// Recognizes a single-phi affine recurrence: phi(const, add/sub(phi, const)).
std::optional<InductionFact> recognize_induction(const ir::Function& f, ir::ValueId index);

// Linear fact for one access through `gep` at `access_offset`/`width`.
// nullopt = index not recognized; the access must widen the arbitrary range.
std::optional<LinearAccessInfo> detect_linear_access(const ir::Function& f, const ir::Gep& gep,
                                                     int64_t access_offset, uint8_t width);

}  // namespace stacktag::analysis
