#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stacktag/analysis.hpp"
#include "stacktag/ir.hpp"
#include "stacktag/mte.hpp"

// Rewrites a classified program: granule-aligned frame layout with guard
// granules, entry-time tagging, return-time tag reset, and the tag-forgery
// prevention rewrites (load enforcement, gep hardening, cast untagging).
namespace stacktag::instrument {

struct FrameSlot {
  std::string name;                      // value name, or "__guardN"
  ir::ValueId value = ir::kNoValue;      // kNoValue for guards
  bool is_guard = false;
  uint64_t offset = 0;                   // frame_base - slot_address
  uint64_t size = 0;
  uint64_t padded_size = 0;
  uint32_t align = 1;
  uint8_t tag = mte::kSafeDefaultTag;
  analysis::SafetyClass safety;

  bool needs_settag() const { return tag != mte::kSafeDefaultTag; }
};

struct FrameLayout {
  std::string function;
  uint32_t func = 0;
  std::vector<FrameSlot> slots;                  // allocation order = descending addresses
  std::vector<ir::ValueId> dynamic_allocas;
  std::map<ir::ValueId, uint8_t> dynamic_tags;
  uint64_t static_bytes = 0;                     // total frame depth of static slots
  bool needs_reset_tags = false;
};

struct TagPlan {
  std::vector<FrameLayout> frames;  // one per function, indexed by function
  std::vector<analysis::TfpSiteReport> tfp_sites;

  const FrameLayout* frame_for(std::string_view function) const;
  std::optional<uint8_t> tag_of(std::string_view function, std::string_view alloca) const;
};

struct InstrumentOptions {
  uint32_t guard_width_granules = 1;
};

// Layout for one function: default-tag slots first, then granule-aligned
// tagged slots with guards where a Guarded slot would touch a same-tag
// neighbour (frame edges count as default-tagged).
FrameLayout layout_frame(const ir::Program& p, uint32_t func_index,
                         const analysis::AnalysisResult& result, const InstrumentOptions& opts);

TagPlan build_tag_plan(const ir::Program& p, const analysis::AnalysisResult& result,
                       const InstrumentOptions& opts);

// Checks the plan invariants: granule alignment and padding of tagged slots,
// no 0b0000 slot tags, guarded slots bounded by differently-tagged granules,
// adjacent unsafe slots differing. Returns human-readable problems.
std::vector<std::string> validate_tag_plan(const TagPlan& plan);

struct InstrumentResult {
  ir::Program program;
  TagPlan plan;
};

// Full rewrite. Throws std::invalid_argument when the input already contains
// instrumentation ops (instrumenting twice is an error, never a double
// application).
InstrumentResult instrument_program(const ir::Program& p, const analysis::AnalysisResult& result,
                                    const InstrumentOptions& opts = {});

}  // namespace stacktag::instrument
