#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "stacktag/ir.hpp"
#include "stacktag/mte.hpp"

// Executes plain or instrumented programs on the tagged-memory model with
// frame management, dynamic allocation, and trap reporting.
namespace stacktag::interp {

struct RunConfig {
  bool mte = true;
  bool wildcard = false;
  uint64_t step_budget = 10'000'000;
  uint32_t max_call_depth = 512;
  bool check_frame_hygiene = false;  // assert non-default slots read back default on return
  uint64_t stack_top = uint64_t{1} << 40;
  uint64_t globals_base = 0x10000;
  uint64_t stack_bytes = uint64_t{64} << 20;
};

enum class TrapKind : uint8_t {
  TagMismatch,
  Unmapped,
  UndefinedFunction,
  StackOverflow,
  DivideByZero,
  SetTagFault,
  FrameHygiene,
};
std::string_view trap_kind_name(TrapKind k);

struct TrapInfo {
  TrapKind kind = TrapKind::TagMismatch;
  uint64_t address = 0;
  uint64_t width = 0;
  uint8_t address_tag = 0;
  std::optional<uint8_t> allocation_tag;
  std::string function;
  std::string block;
  int64_t instr_index = -1;
  uint64_t step = 0;
};

struct Outcome {
  enum class Status : uint8_t { Finished, Trapped, Exhausted } status = Status::Finished;
  int64_t return_value = 0;
  std::vector<int64_t> output;
  std::optional<TrapInfo> trap;
  uint64_t steps = 0;

  bool finished() const { return status == Status::Finished; }
  bool trapped() const { return status == Status::Trapped; }
};

struct CheckEvent {
  std::string_view op;  // "load" | "store" | "settag" | "tfp-read"
  uint64_t address = 0;
  uint64_t width = 0;
  uint8_t address_tag = 0;
  std::optional<uint8_t> allocation_tag;
  bool via_frame_base = false;
  bool allowed = true;
};

class Machine;

struct StepInfo {
  Machine* machine = nullptr;
  uint32_t func = 0;
  std::string_view function;
  uint32_t block = 0;
  uint32_t flat_index = 0;  // body instructions then terminator, per block in order
  uint64_t step = 0;
};

struct FramePopInfo {
  Machine* machine = nullptr;
  uint32_t func = 0;
  std::string_view function;
};

// Observer interface; the scenario engine and the trace logger hang off it.
struct Hooks {
  virtual ~Hooks() = default;
  virtual void on_step(const StepInfo&) {}
  virtual void on_check(const CheckEvent&) {}
  virtual void on_frame_pop(const FramePopInfo&) {}
};

struct SlotInfo {
  uint64_t address = 0;
  uint64_t size = 0;  // reserved bytes
};

class Machine {
 public:
  // The machine owns its program copy; callers may pass temporaries.
  Machine(ir::Program p, RunConfig cfg);

  Outcome run(const std::vector<int64_t>& args, Hooks* hooks = nullptr);

  // Raw state access for the adversary harness and tests. Writes bypass tag
  // checks on purpose; capability constraints live in the harness.
  std::optional<SlotInfo> resolve_slot(std::string_view function, std::string_view value) const;
  std::optional<uint64_t> global_address(std::string_view name) const;
  std::vector<uint8_t> read_bytes(uint64_t address, uint64_t len) const;
  void write_bytes(uint64_t address, const std::vector<uint8_t>& bytes);
  std::optional<uint8_t> allocation_tag(uint64_t address) const;
  uint64_t read_u64(uint64_t address) const;
  void write_u64(uint64_t address, uint64_t value);

  const RunConfig& config() const { return cfg_; }
  const ir::Program& program() const { return prog_; }

 private:
  friend struct Executor;
  const ir::Program prog_;
  RunConfig cfg_;

  struct FunctionMeta {
    std::map<std::string, uint32_t, std::less<>> block_index;
    std::vector<uint32_t> flat_base;  // per block
    std::vector<bool> is_alloca_result;
    std::optional<ir::Kind> ret_kind;
  };
  std::vector<FunctionMeta> meta_;

  struct Frame {
    uint32_t func = 0;
    uint64_t frame_base = 0;
    uint64_t cursor = 0;
    uint32_t block = 0;
    uint32_t pc = 0;  // body index; == body.size() means terminator
    ir::ValueId pending_result = ir::kNoValue;  // call result binding on return
    std::vector<uint64_t> values;
    std::map<ir::ValueId, SlotInfo> slots;
    std::vector<std::pair<uint64_t, uint64_t>> spans;  // mapped (addr, bytes)
  };
  std::vector<Frame> frames_;

  std::unordered_map<uint64_t, uint8_t> memory_;
  mte::TagMemory tags_;
  std::map<std::string, uint64_t, std::less<>> global_addr_;
  std::vector<int64_t> output_;
  uint64_t steps_ = 0;
};

// Runs both programs and compares observable behaviour: equal means both
// finish with the same return value and output log and the instrumented run
// never traps.
struct PairVerdict {
  bool equal = false;
  Outcome plain;
  Outcome instrumented;
};
PairVerdict run_paired(const ir::Program& plain, const ir::Program& instrumented,
                       const std::vector<int64_t>& args, RunConfig base_cfg = {});

}  // namespace stacktag::interp
