#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

// Core SSA IR: a small, stack-oriented language with explicit byte-level
// loads/stores, pointer arithmetic via gep, and an extension set of
// tagging ops that only appear in instrumented programs.
namespace stacktag::ir {

enum class Kind : uint8_t { Int, Ptr };

using ValueId = uint32_t;
inline constexpr ValueId kNoValue = 0xffffffffu;

// An instruction operand: SSA value, integer immediate, or global address.
struct Operand {
  enum class Tag : uint8_t { Value, Imm, Global } tag = Tag::Imm;
  ValueId value = kNoValue;
  int64_t imm = 0;
  uint32_t global = 0;

  static Operand val(ValueId v) {
    Operand o;
    o.tag = Tag::Value;
    o.value = v;
    return o;
  }
  static Operand immediate(int64_t v) {
    Operand o;
    o.tag = Tag::Imm;
    o.imm = v;
    return o;
  }
  static Operand global_ref(uint32_t g) {
    Operand o;
    o.tag = Tag::Global;
    o.global = g;
    return o;
  }
  bool is_value() const { return tag == Tag::Value; }
  bool is_imm() const { return tag == Tag::Imm; }
  bool is_global() const { return tag == Tag::Global; }

  friend bool operator==(const Operand&, const Operand&) = default;
};

enum class IntOpKind : uint8_t { Add, Sub, Mul, Div, Rem, And, Or, Xor, Shl, Lshr, Ashr };
enum class CmpKind : uint8_t { Eq, Ne, Lt, Le, Gt, Ge };

// Stack allocation. Static form reserves `size` bytes; dynamic form
// reserves `count * size` bytes where `count` is a runtime value and
// `size` is the element size.
struct Alloca {
  ValueId result = kNoValue;
  uint64_t size = 0;
  std::optional<Operand> count;
  uint32_t align = 1;

  bool is_dynamic() const { return count.has_value(); }
  friend bool operator==(const Alloca&, const Alloca&) = default;
};

struct Load {
  ValueId result = kNoValue;
  Operand addr;
  int64_t offset = 0;
  uint8_t width = 8;
  Kind kind = Kind::Int;
  friend bool operator==(const Load&, const Load&) = default;
};

struct Store {
  Operand addr;
  int64_t offset = 0;
  uint8_t width = 8;
  Kind kind = Kind::Int;
  Operand value;
  friend bool operator==(const Store&, const Store&) = default;
};

// Address computation: result = base + index * scale + offset.
// With fix_tag set (instrumented form) the result keeps the address tag
// of the base regardless of what the arithmetic did to the high bits.
struct Gep {
  ValueId result = kNoValue;
  Operand base;
  Operand index;
  int64_t scale = 1;
  int64_t offset = 0;
  bool fix_tag = false;
  friend bool operator==(const Gep&, const Gep&) = default;
};

struct Call {
  ValueId result = kNoValue;  // kNoValue when the call has no result
  std::string callee;
  std::vector<Operand> args;
  friend bool operator==(const Call&, const Call&) = default;
};

struct IntToPtr {
  ValueId result = kNoValue;
  Operand value;
  friend bool operator==(const IntToPtr&, const IntToPtr&) = default;
};

struct PtrToInt {
  ValueId result = kNoValue;
  Operand value;
  friend bool operator==(const PtrToInt&, const PtrToInt&) = default;
};

struct IntOp {
  ValueId result = kNoValue;
  IntOpKind op = IntOpKind::Add;
  Operand lhs, rhs;
  friend bool operator==(const IntOp&, const IntOp&) = default;
};

struct Cmp {
  ValueId result = kNoValue;
  CmpKind rel = CmpKind::Eq;
  Operand lhs, rhs;
  friend bool operator==(const Cmp&, const Cmp&) = default;
};

struct ConstInt {
  ValueId result = kNoValue;
  int64_t value = 0;
  friend bool operator==(const ConstInt&, const ConstInt&) = default;
};

// Debug output: appends the operand's value to the run's output log.
struct Output {
  Operand value;
  friend bool operator==(const Output&, const Output&) = default;
};

// ---- instrumentation-only ops ----

// Writes the address tag of `addr` over all granules covered by
// [addr, addr + roundup16(size)).
struct SetTag {
  Operand addr;
  Operand size;
  friend bool operator==(const SetTag&, const SetTag&) = default;
};

// result = base with address tag replaced by the constant `tag`.
struct TagPtr {
  ValueId result = kNoValue;
  Operand base;
  uint8_t tag = 0;
  friend bool operator==(const TagPtr&, const TagPtr&) = default;
};

// result = value with bit 59 (top address-tag bit) cleared.
struct ClearTopTagBit {
  ValueId result = kNoValue;
  Operand value;
  friend bool operator==(const ClearTopTagBit&, const ClearTopTagBit&) = default;
};

// Enforced form of a loaded pointer: reads the allocation tag of the
// granule the value was loaded from; if its top two bits are 11 the value
// passes through unchanged, otherwise its top tag bit is cleared.
struct TfpLoad {
  ValueId result = kNoValue;
  Operand value;
  Operand src_addr;
  int64_t src_offset = 0;
  friend bool operator==(const TfpLoad&, const TfpLoad&) = default;
};

// Restores the default tag over every slot of the current frame.
struct RetagFrame {
  friend bool operator==(const RetagFrame&, const RetagFrame&) = default;
};

using Instruction = std::variant<Alloca, Load, Store, Gep, Call, IntToPtr, PtrToInt, IntOp,
                                 Cmp, ConstInt, Output, SetTag, TagPtr, ClearTopTagBit,
                                 TfpLoad, RetagFrame>;

struct Phi {
  ValueId result = kNoValue;
  std::vector<std::pair<std::string, Operand>> incoming;  // (pred label, value)
  friend bool operator==(const Phi&, const Phi&) = default;
};

// Placeholder for blocks the parser closed without a terminator line;
// rejected by the validator.
struct Unterminated {
  friend bool operator==(const Unterminated&, const Unterminated&) = default;
};
struct Br {
  std::string target;
  friend bool operator==(const Br&, const Br&) = default;
};
struct CondBr {
  Operand cond;
  std::string if_true, if_false;
  friend bool operator==(const CondBr&, const CondBr&) = default;
};
struct Ret {
  std::optional<Operand> value;
  friend bool operator==(const Ret&, const Ret&) = default;
};
using Terminator = std::variant<Unterminated, Br, CondBr, Ret>;

struct BasicBlock {
  std::string label;
  std::vector<Phi> phis;
  std::vector<Instruction> body;
  Terminator term = Unterminated{};
  bool terminated() const { return !std::holds_alternative<Unterminated>(term); }
  friend bool operator==(const BasicBlock&, const BasicBlock&) = default;
};

struct Param {
  std::string name;
  Kind kind = Kind::Int;
  friend bool operator==(const Param&, const Param&) = default;
};

struct Function {
  std::string name;
  std::vector<Param> params;
  bool reset_tags = false;
  std::vector<BasicBlock> blocks;
  // ValueId -> source name, without the leading '%'. Params occupy the
  // first ids in declaration order.
  std::vector<std::string> value_names;

  // Registers a fresh value; the hint is uniqued if already taken.
  ValueId new_value(std::string hint);
  std::optional<ValueId> value_by_name(std::string_view name) const;
  const BasicBlock* block_by_label(std::string_view label) const;

  friend bool operator==(const Function&, const Function&) = default;
};

struct GlobalDef {
  std::string name;
  uint64_t size = 0;
  std::vector<uint8_t> init;
  friend bool operator==(const GlobalDef&, const GlobalDef&) = default;
};

struct Program {
  std::vector<GlobalDef> globals;
  std::vector<Function> functions;
  std::string entry = "main";

  const Function* find_function(std::string_view name) const;
  Function* find_function(std::string_view name);
  std::optional<uint32_t> global_index(std::string_view name) const;

  friend bool operator==(const Program&, const Program&) = default;
};

struct Location {
  std::string function;
  std::string block;
  int32_t index = -1;  // instruction index in block body; -1 = block/phi level
  friend bool operator==(const Location&, const Location&) = default;
};

enum class Severity : uint8_t { Error, Warning };

struct Diagnostic {
  Severity severity = Severity::Error;
  std::string message;
  uint32_t line = 0;  // 1-based; 0 = not tied to source text
  uint32_t col = 0;
  std::optional<Location> loc;

  std::string to_string() const;
};

// ---- helpers ----

std::optional<ValueId> result_of(const Instruction& inst);
bool is_instrumentation_op(const Instruction& inst);
bool has_instrumentation_ops(const Function& f);
bool has_instrumentation_ops(const Program& p);

void for_each_operand(Instruction& inst, const std::function<void(Operand&)>& fn);
void for_each_operand(const Instruction& inst, const std::function<void(const Operand&)>& fn);

// Best-effort per-value kinds; full consistency is the validator's job.
std::vector<Kind> compute_value_kinds(const Program& p, const Function& f);
// Return kind of a function: nullopt when all rets are bare. Inconsistent
// functions are reported by the validator; this helper picks the first ret.
std::optional<Kind> return_kind(const Program& p, const Function& f);

std::string_view int_op_name(IntOpKind op);
std::string_view cmp_name(CmpKind rel);
std::optional<IntOpKind> int_op_from_name(std::string_view s);
std::optional<CmpKind> cmp_from_name(std::string_view s);

}  // namespace stacktag::ir
