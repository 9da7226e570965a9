#include <cstdint>
#include <map>
#include <unordered_map>

#include "stacktag/harness.hpp"

// Shadow bounds-tracking interpreter. Deliberately written apart from the
// tagged machine: no tag memory, no pointer tag bits, no TagPlan. Every
// pointer value carries the identity of the allocation it is based on;
// accesses outside that allocation's bounds or lifetime are recorded as
// violations and execution continues.
namespace stacktag::harness {

using namespace stacktag::ir;

namespace {

constexpr uint64_t kStackTop = uint64_t{1} << 40;
constexpr uint64_t kGlobalsBase = 0x10000;
constexpr int32_t kNoProv = -1;

struct AllocationRecord {
  std::string function;
  std::string name;
  uint64_t base = 0;
  uint64_t size = 0;
  bool live = true;
};

struct ShadowValue {
  uint64_t raw = 0;
  int32_t prov = kNoProv;
};

struct Frame {
  uint32_t func = 0;
  uint64_t cursor = 0;
  uint32_t block = 0;
  uint32_t pc = 0;
  ValueId pending = kNoValue;
  std::vector<ShadowValue> values;
  std::vector<int32_t> owned;  // allocation handles to retire on return
};

class Oracle {
 public:
  Oracle(const Program& p, uint64_t budget) : p_(p), budget_(budget) {}

  OracleOutcome run(const std::vector<int64_t>& args) {
    uint64_t gaddr = kGlobalsBase;
    for (const auto& g : p_.globals) {
      for (size_t i = 0; i < g.init.size(); ++i) memory_[gaddr + i] = g.init[i];
      globals_[g.name] = gaddr;
      gaddr += (g.size + 15) / 16 * 16;
    }
    if (auto it = globals_.find("args"); it != globals_.end()) {
      const GlobalDef* g = nullptr;
      for (const auto& gg : p_.globals) {
        if (gg.name == "args") g = &gg;
      }
      for (size_t i = 0; i < args.size() && i < g->size / 8; ++i) {
        uint64_t v = static_cast<uint64_t>(args[i]);
        for (int b = 0; b < 8; ++b) {
          memory_[it->second + i * 8 + b] = static_cast<uint8_t>(v >> (8 * b));
        }
      }
    }
    uint32_t entry = UINT32_MAX;
    for (uint32_t i = 0; i < p_.functions.size(); ++i) {
      if (p_.functions[i].name == p_.entry) entry = i;
    }
    if (entry == UINT32_MAX) {
      out_.status = OracleOutcome::Status::Stuck;
      return std::move(out_);
    }
    push_frame(entry, {}, kNoValue);

    while (!frames_.empty()) {
      if (steps_ >= budget_) {
        out_.status = OracleOutcome::Status::Exhausted;
        break;
      }
      ++steps_;
      Frame& fr = frames_.back();
      const Function& f = p_.functions[fr.func];
      const BasicBlock& b = f.blocks[fr.block];
      uint32_t pc = fr.pc;
      bool ok;
      if (pc < b.body.size()) {
        bool is_call = std::holds_alternative<Call>(b.body[pc]);
        ok = exec(b.body[pc]);
        if (ok && !is_call) frames_.back().pc += 1;
      } else {
        ok = exec_term(b.term);
      }
      if (!ok) {
        out_.status = OracleOutcome::Status::Stuck;
        break;
      }
      if (done_) break;
    }
    out_.steps = steps_;
    return std::move(out_);
  }

 private:
  const Program& p_;
  uint64_t budget_;
  uint64_t steps_ = 0;
  bool done_ = false;
  OracleOutcome out_;
  std::unordered_map<uint64_t, uint8_t> memory_;
  std::map<uint64_t, int32_t> ptr_shadow_;  // stored-pointer provenance by address
  std::map<std::string, uint64_t, std::less<>> globals_;
  std::vector<AllocationRecord> allocs_;
  std::vector<Frame> frames_;

  Frame& frame() { return frames_.back(); }
  const Function& fn() { return p_.functions[frame().func]; }

  ShadowValue eval(const Operand& op) {
    switch (op.tag) {
      case Operand::Tag::Value: return frame().values[op.value];
      case Operand::Tag::Imm: return {static_cast<uint64_t>(op.imm), kNoProv};
      case Operand::Tag::Global: return {globals_.at(p_.globals[op.global].name), kNoProv};
    }
    return {};
  }

  void push_frame(uint32_t func, const std::vector<ShadowValue>& args, ValueId pending) {
    Frame fr;
    fr.func = func;
    fr.cursor = frames_.empty() ? kStackTop : frames_.back().cursor;
    fr.values.assign(p_.functions[func].value_names.size(), ShadowValue{});
    fr.pending = pending;
    for (size_t i = 0; i < args.size(); ++i) fr.values[i] = args[i];
    frames_.push_back(std::move(fr));
  }

  void record_violation(OracleViolation::Kind kind, int32_t prov, uint64_t addr, uint64_t width) {
    const AllocationRecord& a = allocs_[prov];
    OracleViolation v;
    v.kind = kind;
    v.function = a.function;
    v.alloca_name = a.name;
    v.address = addr;
    v.width = width;
    v.rel_offset = static_cast<int64_t>(addr - a.base);
    out_.violations.push_back(std::move(v));
  }

  void check_access(const ShadowValue& ptr, uint64_t addr, uint64_t width) {
    if (ptr.prov == kNoProv) return;  // globals and wild pointers are out of scope
    const AllocationRecord& a = allocs_[ptr.prov];
    if (!a.live) {
      record_violation(OracleViolation::Kind::UseAfterDeath, ptr.prov, addr, width);
      return;
    }
    int64_t rel = static_cast<int64_t>(addr - a.base);
    if (rel < 0 || static_cast<uint64_t>(rel) + width > a.size) {
      record_violation(OracleViolation::Kind::OutOfBounds, ptr.prov, addr, width);
    }
  }

  uint64_t load_bytes(uint64_t addr, uint64_t width) {
    uint64_t v = 0;
    for (uint64_t i = 0; i < width; ++i) {
      auto it = memory_.find(addr + i);
      v |= static_cast<uint64_t>(it == memory_.end() ? 0 : it->second) << (8 * i);
    }
    return v;
  }

  void invalidate_ptr_shadow(uint64_t addr, uint64_t width) {
    uint64_t lo = addr >= 7 ? addr - 7 : 0;
    for (uint64_t a = lo; a < addr + width; ++a) ptr_shadow_.erase(a);
  }

  void store_bytes(uint64_t addr, uint64_t width, uint64_t value) {
    for (uint64_t i = 0; i < width; ++i) memory_[addr + i] = static_cast<uint8_t>(value >> (8 * i));
  }

  bool exec(const Instruction& inst) {
    return std::visit([&](const auto& i) { return exec_one(i); }, inst);
  }

  bool exec_one(const Alloca& a) {
    Frame& fr = frame();
    uint64_t bytes = a.size;
    if (a.is_dynamic()) {
      int64_t count = static_cast<int64_t>(eval(*a.count).raw);
      if (count < 0 || count > (1 << 20)) return false;
      bytes = static_cast<uint64_t>(count) * a.size;
      if (bytes > (1 << 20)) return false;
    }
    fr.cursor -= bytes;
    fr.cursor = fr.cursor / a.align * a.align;
    uint64_t addr = fr.cursor;
    for (uint64_t i = 0; i < bytes; ++i) memory_.erase(addr + i);
    invalidate_ptr_shadow(addr, bytes == 0 ? 1 : bytes);
    int32_t handle = static_cast<int32_t>(allocs_.size());
    allocs_.push_back({fn().name, fn().value_names[a.result], addr, bytes, true});
    fr.owned.push_back(handle);
    fr.values[a.result] = {addr, handle};
    return true;
  }

  bool exec_one(const Load& l) {
    ShadowValue p = eval(l.addr);
    uint64_t addr = p.raw + static_cast<uint64_t>(l.offset);
    check_access(p, addr, l.width);
    ShadowValue v{load_bytes(addr, l.width), kNoProv};
    if (l.kind == Kind::Ptr) {
      auto it = ptr_shadow_.find(addr);
      if (it != ptr_shadow_.end()) v.prov = it->second;
    }
    frame().values[l.result] = v;
    return true;
  }

  bool exec_one(const Store& s) {
    ShadowValue p = eval(s.addr);
    uint64_t addr = p.raw + static_cast<uint64_t>(s.offset);
    check_access(p, addr, s.width);
    ShadowValue v = eval(s.value);
    invalidate_ptr_shadow(addr, s.width);
    store_bytes(addr, s.width, v.raw);
    if (s.kind == Kind::Ptr) ptr_shadow_[addr] = v.prov;
    return true;
  }

  bool exec_one(const Gep& g) {
    ShadowValue base = eval(g.base);
    uint64_t idx = eval(g.index).raw;
    frame().values[g.result] = {
        base.raw + idx * static_cast<uint64_t>(g.scale) + static_cast<uint64_t>(g.offset),
        base.prov};
    return true;
  }

  bool exec_one(const Call& c) {
    const Function* callee = p_.find_function(c.callee);
    if (!callee) return false;
    if (frames_.size() > 512) return false;
    uint32_t idx = 0;
    for (uint32_t i = 0; i < p_.functions.size(); ++i) {
      if (&p_.functions[i] == callee) idx = i;
    }
    std::vector<ShadowValue> args;
    for (const auto& a : c.args) args.push_back(eval(a));
    push_frame(idx, args, c.result);
    return true;
  }

  bool exec_one(const IntToPtr& i) {
    frame().values[i.result] = {eval(i.value).raw, kNoProv};
    return true;
  }
  bool exec_one(const PtrToInt& i) {
    frame().values[i.result] = {eval(i.value).raw, kNoProv};
    return true;
  }

  bool exec_one(const IntOp& i) {
    int64_t a = static_cast<int64_t>(eval(i.lhs).raw);
    int64_t b = static_cast<int64_t>(eval(i.rhs).raw);
    uint64_t ua = static_cast<uint64_t>(a), ub = static_cast<uint64_t>(b);
    uint64_t r = 0;
    switch (i.op) {
      case IntOpKind::Add: r = ua + ub; break;
      case IntOpKind::Sub: r = ua - ub; break;
      case IntOpKind::Mul: r = ua * ub; break;
      case IntOpKind::Div:
        if (b == 0) return false;
        r = (a == INT64_MIN && b == -1) ? ua : static_cast<uint64_t>(a / b);
        break;
      case IntOpKind::Rem:
        if (b == 0) return false;
        r = (a == INT64_MIN && b == -1) ? 0 : static_cast<uint64_t>(a % b);
        break;
      case IntOpKind::And: r = ua & ub; break;
      case IntOpKind::Or: r = ua | ub; break;
      case IntOpKind::Xor: r = ua ^ ub; break;
      case IntOpKind::Shl: r = ua << (ub & 63); break;
      case IntOpKind::Lshr: r = ua >> (ub & 63); break;
      case IntOpKind::Ashr: r = static_cast<uint64_t>(a >> (ub & 63)); break;
    }
    frame().values[i.result] = {r, kNoProv};
    return true;
  }

  bool exec_one(const Cmp& c) {
    int64_t a = static_cast<int64_t>(eval(c.lhs).raw);
    int64_t b = static_cast<int64_t>(eval(c.rhs).raw);
    bool r = false;
    switch (c.rel) {
      case CmpKind::Eq: r = a == b; break;
      case CmpKind::Ne: r = a != b; break;
      case CmpKind::Lt: r = a < b; break;
      case CmpKind::Le: r = a <= b; break;
      case CmpKind::Gt: r = a > b; break;
      case CmpKind::Ge: r = a >= b; break;
    }
    frame().values[c.result] = {r ? uint64_t{1} : uint64_t{0}, kNoProv};
    return true;
  }

  bool exec_one(const ConstInt& c) {
    frame().values[c.result] = {static_cast<uint64_t>(c.value), kNoProv};
    return true;
  }

  bool exec_one(const Output& o) {
    out_.output.push_back(static_cast<int64_t>(eval(o.value).raw));
    return true;
  }

  // Instrumentation ops should not appear in oracle inputs; treat them as
  // inert so a misuse is at least deterministic.
  bool exec_one(const SetTag&) { return true; }
  bool exec_one(const TagPtr& t) {
    frame().values[t.result] = eval(t.base);
    return true;
  }
  bool exec_one(const ClearTopTagBit& c) {
    frame().values[c.result] = eval(c.value);
    return true;
  }
  bool exec_one(const TfpLoad& t) {
    frame().values[t.result] = eval(t.value);
    return true;
  }
  bool exec_one(const RetagFrame&) { return true; }

  bool exec_term(const Terminator& term) {
    return std::visit(
        [&](const auto& t) -> bool {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, Unterminated>) {
            return false;
          } else if constexpr (std::is_same_v<T, Br>) {
            return jump(t.target);
          } else if constexpr (std::is_same_v<T, CondBr>) {
            return jump(eval(t.cond).raw != 0 ? t.if_true : t.if_false);
          } else if constexpr (std::is_same_v<T, Ret>) {
            ShadowValue rv = t.value ? eval(*t.value) : ShadowValue{};
            for (int32_t h : frame().owned) allocs_[h].live = false;
            ValueId pending = frame().pending;
            frames_.pop_back();
            if (frames_.empty()) {
              out_.status = OracleOutcome::Status::Finished;
              out_.return_value = static_cast<int64_t>(rv.raw);
              done_ = true;
              return true;
            }
            if (pending != kNoValue) frames_.back().values[pending] = rv;
            frames_.back().pc += 1;
            return true;
          }
        },
        term);
  }

  bool jump(std::string_view target) {
    Frame& fr = frame();
    const Function& f = fn();
    uint32_t to = UINT32_MAX;
    for (uint32_t i = 0; i < f.blocks.size(); ++i) {
      if (f.blocks[i].label == target) to = i;
    }
    if (to == UINT32_MAX) return false;
    const std::string& from = f.blocks[fr.block].label;
    std::vector<std::pair<ValueId, ShadowValue>> updates;
    for (const auto& phi : f.blocks[to].phis) {
      for (const auto& [label, op] : phi.incoming) {
        if (label == from) {
          updates.emplace_back(phi.result, eval(op));
          break;
        }
      }
    }
    for (auto& [vid, v] : updates) fr.values[vid] = v;
    fr.block = to;
    fr.pc = 0;
    return true;
  }
};

}  // namespace

OracleOutcome oracle_run(const Program& p, const std::vector<int64_t>& args,
                         uint64_t step_budget) {
  return Oracle(p, step_budget).run(args);
}

}  // namespace stacktag::harness
