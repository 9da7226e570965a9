#include "stacktag/interp.hpp"

#include <cassert>
#include <cstring>

namespace stacktag::interp {

using namespace stacktag::ir;

std::string_view trap_kind_name(TrapKind k) {
  switch (k) {
    case TrapKind::TagMismatch: return "tag-mismatch";
    case TrapKind::Unmapped: return "unmapped";
    case TrapKind::UndefinedFunction: return "undefined-function";
    case TrapKind::StackOverflow: return "stack-overflow";
    case TrapKind::DivideByZero: return "divide-by-zero";
    case TrapKind::SetTagFault: return "settag-fault";
    case TrapKind::FrameHygiene: return "frame-hygiene";
  }
  return "trap";
}

namespace {
uint64_t align_down_u(uint64_t v, uint64_t a) { return v / a * a; }
constexpr uint64_t kMaxSingleAlloc = uint64_t{1} << 20;
}  // namespace

Machine::Machine(ir::Program p, RunConfig cfg) : prog_(std::move(p)), cfg_(cfg) {
  meta_.resize(prog_.functions.size());
  for (size_t i = 0; i < prog_.functions.size(); ++i) {
    const Function& f = prog_.functions[i];
    FunctionMeta& m = meta_[i];
    m.is_alloca_result.assign(f.value_names.size(), false);
    uint32_t flat = 0;
    m.flat_base.resize(f.blocks.size());
    for (uint32_t bi = 0; bi < f.blocks.size(); ++bi) {
      m.block_index[f.blocks[bi].label] = bi;
      m.flat_base[bi] = flat;
      flat += static_cast<uint32_t>(f.blocks[bi].body.size()) + 1;
      for (const auto& inst : f.blocks[bi].body) {
        if (const auto* a = std::get_if<Alloca>(&inst)) {
          if (a->result < m.is_alloca_result.size()) m.is_alloca_result[a->result] = true;
        }
      }
    }
    m.ret_kind = return_kind(prog_, f);
  }
}

std::optional<SlotInfo> Machine::resolve_slot(std::string_view function,
                                              std::string_view value) const {
  for (auto it = frames_.rbegin(); it != frames_.rend(); ++it) {
    const Function& f = prog_.functions[it->func];
    if (f.name != function) continue;
    auto vid = f.value_by_name(value);
    if (!vid) return std::nullopt;
    auto sit = it->slots.find(*vid);
    if (sit == it->slots.end()) return std::nullopt;
    return sit->second;
  }
  return std::nullopt;
}

std::optional<uint64_t> Machine::global_address(std::string_view name) const {
  auto it = global_addr_.find(name);
  if (it == global_addr_.end()) return std::nullopt;
  return it->second;
}

std::vector<uint8_t> Machine::read_bytes(uint64_t address, uint64_t len) const {
  std::vector<uint8_t> out(len, 0);
  for (uint64_t i = 0; i < len; ++i) {
    auto it = memory_.find(address + i);
    if (it != memory_.end()) out[i] = it->second;
  }
  return out;
}

void Machine::write_bytes(uint64_t address, const std::vector<uint8_t>& bytes) {
  for (uint64_t i = 0; i < bytes.size(); ++i) memory_[address + i] = bytes[i];
}

std::optional<uint8_t> Machine::allocation_tag(uint64_t address) const {
  return tags_.tag_at(address);
}

uint64_t Machine::read_u64(uint64_t address) const {
  uint64_t v = 0;
  auto bytes = read_bytes(address, 8);
  for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[i];
  return v;
}

void Machine::write_u64(uint64_t address, uint64_t value) {
  std::vector<uint8_t> bytes(8);
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<uint8_t>(value >> (8 * i));
  write_bytes(address, bytes);
}

// ---- executor ----

struct Executor {
  Machine& m;
  Hooks* hooks;
  std::optional<TrapInfo> trap;
  std::optional<int64_t> result;

  const Program& prog() const { return m.prog_; }
  Machine::Frame& frame() { return m.frames_.back(); }
  const Function& fn() { return prog().functions[frame().func]; }

  void set_trap(TrapKind kind, uint64_t address, uint64_t width, uint8_t addr_tag,
                std::optional<uint8_t> alloc_tag) {
    TrapInfo t;
    t.kind = kind;
    t.address = address;
    t.width = width;
    t.address_tag = addr_tag;
    t.allocation_tag = alloc_tag;
    const auto& fr = frame();
    t.function = prog().functions[fr.func].name;
    t.block = prog().functions[fr.func].blocks[fr.block].label;
    t.instr_index = static_cast<int64_t>(fr.pc);
    t.step = m.steps_;
    trap = std::move(t);
  }

  uint64_t eval(const Operand& op) {
    switch (op.tag) {
      case Operand::Tag::Value: return frame().values[op.value];
      case Operand::Tag::Imm: return static_cast<uint64_t>(op.imm);
      case Operand::Tag::Global: {
        const auto& g = prog().globals[op.global];
        uint64_t addr = m.global_addr_.at(g.name);
        return mte::with_tag(mte::PointerValue{addr}, mte::kGlobalRegionTag).raw;
      }
    }
    return 0;
  }

  void set_value(ValueId v, uint64_t raw) { frame().values[v] = raw; }

  bool push_frame(uint32_t func_idx, const std::vector<uint64_t>& args, ValueId pending) {
    if (m.frames_.size() >= m.cfg_.max_call_depth) {
      set_trap(TrapKind::StackOverflow, 0, 0, 0, std::nullopt);
      return false;
    }
    uint64_t base = m.frames_.empty() ? m.cfg_.stack_top : m.frames_.back().cursor;
    Machine::Frame fr;
    fr.func = func_idx;
    fr.frame_base = align_down_u(base, mte::kGranuleBytes);
    fr.cursor = fr.frame_base;
    fr.values.assign(prog().functions[func_idx].value_names.size(), 0);
    fr.pending_result = pending;
    for (size_t i = 0; i < args.size(); ++i) fr.values[i] = args[i];
    m.frames_.push_back(std::move(fr));
    return true;
  }

  void emit_check(std::string_view op, uint64_t addr, uint64_t width, uint8_t addr_tag,
                  std::optional<uint8_t> alloc_tag, bool vfb, bool allowed) {
    if (!hooks) return;
    CheckEvent ev;
    ev.op = op;
    ev.address = addr;
    ev.width = width;
    ev.address_tag = addr_tag;
    ev.allocation_tag = alloc_tag;
    ev.via_frame_base = vfb;
    ev.allowed = allowed;
    hooks->on_check(ev);
  }

  // Tag/mapping check for a data access. Returns false and traps on denial.
  bool access(std::string_view op, mte::PointerValue p, uint64_t width, bool via_frame_base) {
    if (m.cfg_.mte) {
      mte::MteConfig mc{m.cfg_.wildcard};
      auto r = mte::check_access(m.tags_, p, width, mc, via_frame_base);
      emit_check(op, p.address(), width, p.address_tag(),
                 r.verdict == mte::Verdict::Unmapped ? std::nullopt
                                                     : std::optional<uint8_t>(r.allocation_tag),
                 via_frame_base, r.allowed());
      if (!r.allowed()) {
        set_trap(r.verdict == mte::Verdict::Unmapped ? TrapKind::Unmapped : TrapKind::TagMismatch,
                 r.fault_address, width, r.address_tag,
                 r.verdict == mte::Verdict::Unmapped ? std::nullopt
                                                     : std::optional<uint8_t>(r.allocation_tag));
        return false;
      }
      return true;
    }
    // Tag-blind mode: only mapping is enforced.
    uint64_t addr = p.address();
    for (uint64_t g = addr / mte::kGranuleBytes; g <= (addr + width - 1) / mte::kGranuleBytes;
         ++g) {
      if (!m.tags_.is_mapped(g * mte::kGranuleBytes)) {
        emit_check(op, addr, width, p.address_tag(), std::nullopt, via_frame_base, false);
        set_trap(TrapKind::Unmapped, g * mte::kGranuleBytes, width, p.address_tag(), std::nullopt);
        return false;
      }
    }
    emit_check(op, addr, width, p.address_tag(), std::nullopt, via_frame_base, true);
    return true;
  }

  uint64_t load_bytes(uint64_t addr, uint64_t width) {
    uint64_t v = 0;
    for (uint64_t i = 0; i < width; ++i) {
      auto it = m.memory_.find(addr + i);
      uint8_t b = it == m.memory_.end() ? 0 : it->second;
      v |= static_cast<uint64_t>(b) << (8 * i);
    }
    return v;
  }

  void store_bytes(uint64_t addr, uint64_t width, uint64_t value) {
    for (uint64_t i = 0; i < width; ++i) {
      m.memory_[addr + i] = static_cast<uint8_t>(value >> (8 * i));
    }
  }

  bool exec_alloca(const Alloca& a) {
    auto& fr = frame();
    uint64_t bytes = a.size;
    if (a.is_dynamic()) {
      int64_t count = static_cast<int64_t>(eval(*a.count));
      if (count < 0 || static_cast<uint64_t>(count) > kMaxSingleAlloc / a.size) {
        set_trap(TrapKind::StackOverflow, 0, 0, 0, std::nullopt);
        return false;
      }
      bytes = static_cast<uint64_t>(count) * a.size;
    }
    if (bytes > kMaxSingleAlloc) {
      set_trap(TrapKind::StackOverflow, 0, 0, 0, std::nullopt);
      return false;
    }
    uint64_t limit = m.cfg_.stack_top - m.cfg_.stack_bytes;
    if (fr.cursor < limit + bytes + 64) {
      set_trap(TrapKind::StackOverflow, 0, 0, 0, std::nullopt);
      return false;
    }
    fr.cursor -= bytes;
    fr.cursor = align_down_u(fr.cursor, a.align);
    uint64_t addr = fr.cursor;
    for (uint64_t i = 0; i < bytes; ++i) m.memory_.erase(addr + i);
    if (bytes > 0) m.tags_.map_region(addr, bytes, mte::kSafeDefaultTag);
    fr.slots[a.result] = {addr, bytes};
    fr.spans.emplace_back(addr, bytes);
    set_value(a.result, mte::with_tag(mte::PointerValue{addr}, mte::kSafeDefaultTag).raw);
    return true;
  }

  bool via_frame_base_operand(const Operand& addr) {
    if (!addr.is_value()) return false;
    const auto& meta = m.meta_[frame().func];
    return addr.value < meta.is_alloca_result.size() && meta.is_alloca_result[addr.value];
  }

  mte::PointerValue effective(uint64_t base_raw, int64_t offset) {
    uint64_t addr = (mte::PointerValue{base_raw}.address() + static_cast<uint64_t>(offset)) &
                    mte::kAddressMask;
    return mte::PointerValue{(base_raw & ~mte::kAddressMask) | addr};
  }

  // Returns false when a trap fired; pc advancing is the caller's concern.
  bool exec_instruction(const Instruction& inst) {
    return std::visit([&](const auto& i) { return exec_one(i); }, inst);
  }

  bool exec_one(const Alloca& a) { return exec_alloca(a); }

  bool exec_one(const Load& l) {
    mte::PointerValue p = effective(eval(l.addr), l.offset);
    if (!access("load", p, l.width, via_frame_base_operand(l.addr))) return false;
    set_value(l.result, load_bytes(p.address(), l.width));
    return true;
  }

  bool exec_one(const Store& s) {
    mte::PointerValue p = effective(eval(s.addr), s.offset);
    if (!access("store", p, s.width, via_frame_base_operand(s.addr))) return false;
    store_bytes(p.address(), s.width, eval(s.value));
    return true;
  }

  bool exec_one(const Gep& g) {
    uint64_t base = eval(g.base);
    uint64_t idx = eval(g.index);
    uint64_t raw = base + idx * static_cast<uint64_t>(g.scale) + static_cast<uint64_t>(g.offset);
    if (g.fix_tag) raw = (raw & ~mte::kTagMask) | (base & mte::kTagMask);
    set_value(g.result, raw);
    return true;
  }

  bool exec_one(const Call& c) {
    const Function* callee = prog().find_function(c.callee);
    if (!callee) {
      set_trap(TrapKind::UndefinedFunction, 0, 0, 0, std::nullopt);
      return false;
    }
    uint32_t idx = 0;
    for (uint32_t i = 0; i < prog().functions.size(); ++i) {
      if (&prog().functions[i] == callee) idx = i;
    }
    std::vector<uint64_t> args;
    args.reserve(c.args.size());
    for (const auto& a : c.args) args.push_back(eval(a));
    return push_frame(idx, args, c.result);
  }

  bool exec_one(const IntToPtr& i) {
    set_value(i.result, eval(i.value));
    return true;
  }
  bool exec_one(const PtrToInt& i) {
    set_value(i.result, eval(i.value));
    return true;
  }

  bool exec_one(const IntOp& i) {
    int64_t a = static_cast<int64_t>(eval(i.lhs));
    int64_t b = static_cast<int64_t>(eval(i.rhs));
    uint64_t ua = static_cast<uint64_t>(a), ub = static_cast<uint64_t>(b);
    uint64_t r = 0;
    switch (i.op) {
      case IntOpKind::Add: r = ua + ub; break;
      case IntOpKind::Sub: r = ua - ub; break;
      case IntOpKind::Mul: r = ua * ub; break;
      case IntOpKind::Div:
        if (b == 0) {
          set_trap(TrapKind::DivideByZero, 0, 0, 0, std::nullopt);
          return false;
        }
        r = (a == INT64_MIN && b == -1) ? ua : static_cast<uint64_t>(a / b);
        break;
      case IntOpKind::Rem:
        if (b == 0) {
          set_trap(TrapKind::DivideByZero, 0, 0, 0, std::nullopt);
          return false;
        }
        r = (a == INT64_MIN && b == -1) ? 0 : static_cast<uint64_t>(a % b);
        break;
      case IntOpKind::And: r = ua & ub; break;
      case IntOpKind::Or: r = ua | ub; break;
      case IntOpKind::Xor: r = ua ^ ub; break;
      case IntOpKind::Shl: r = ua << (ub & 63); break;
      case IntOpKind::Lshr: r = ua >> (ub & 63); break;
      case IntOpKind::Ashr: r = static_cast<uint64_t>(a >> (ub & 63)); break;
    }
    set_value(i.result, r);
    return true;
  }

  bool exec_one(const Cmp& c) {
    int64_t a = static_cast<int64_t>(eval(c.lhs));
    int64_t b = static_cast<int64_t>(eval(c.rhs));
    bool r = false;
    switch (c.rel) {
      case CmpKind::Eq: r = a == b; break;
      case CmpKind::Ne: r = a != b; break;
      case CmpKind::Lt: r = a < b; break;
      case CmpKind::Le: r = a <= b; break;
      case CmpKind::Gt: r = a > b; break;
      case CmpKind::Ge: r = a >= b; break;
    }
    set_value(c.result, r ? 1 : 0);
    return true;
  }

  bool exec_one(const ConstInt& c) {
    set_value(c.result, static_cast<uint64_t>(c.value));
    return true;
  }

  bool exec_one(const Output& o) {
    m.output_.push_back(static_cast<int64_t>(eval(o.value)));
    return true;
  }

  bool exec_one(const SetTag& s) {
    if (!m.cfg_.mte) return true;
    mte::PointerValue p{eval(s.addr)};
    int64_t size = static_cast<int64_t>(eval(s.size));
    if (size < 0) {
      set_trap(TrapKind::SetTagFault, p.address(), 0, p.address_tag(), std::nullopt);
      return false;
    }
    if (!m.tags_.set_allocation_tags(p.address(), static_cast<uint64_t>(size), p.address_tag())) {
      emit_check("settag", p.address(), static_cast<uint64_t>(size), p.address_tag(), std::nullopt,
                 false, false);
      set_trap(TrapKind::SetTagFault, p.address(), static_cast<uint64_t>(size), p.address_tag(),
               std::nullopt);
      return false;
    }
    emit_check("settag", p.address(), static_cast<uint64_t>(size), p.address_tag(), std::nullopt,
               false, true);
    return true;
  }

  bool exec_one(const TagPtr& t) {
    uint64_t base = eval(t.base);
    set_value(t.result, m.cfg_.mte ? mte::with_tag(mte::PointerValue{base}, t.tag).raw : base);
    return true;
  }

  bool exec_one(const ClearTopTagBit& c) {
    uint64_t v = eval(c.value);
    set_value(c.result, m.cfg_.mte ? mte::clear_top_tag_bit(mte::PointerValue{v}).raw : v);
    return true;
  }

  bool exec_one(const TfpLoad& t) {
    uint64_t loaded = eval(t.value);
    if (!m.cfg_.mte) {
      set_value(t.result, loaded);
      return true;
    }
    mte::PointerValue src = effective(eval(t.src_addr), t.src_offset);
    auto tag = m.tags_.tag_at(src.address());
    emit_check("tfp-read", src.address(), 1, src.address_tag(), tag, false, tag.has_value());
    if (!tag) {
      set_trap(TrapKind::Unmapped, src.address(), 1, src.address_tag(), std::nullopt);
      return false;
    }
    if ((*tag >> 2) == 0b11) {
      set_value(t.result, loaded);
    } else {
      set_value(t.result, mte::clear_top_tag_bit(mte::PointerValue{loaded}).raw);
    }
    return true;
  }

  bool exec_one(const RetagFrame&) {
    if (!m.cfg_.mte) return true;
    for (const auto& [addr, size] : frame().spans) {
      if (size > 0) m.tags_.map_region(addr, size, mte::kSafeDefaultTag);
    }
    return true;
  }

  bool exec_terminator(const Terminator& term) {
    return std::visit(
        [&](const auto& t) -> bool {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, Unterminated>) {
            set_trap(TrapKind::UndefinedFunction, 0, 0, 0, std::nullopt);
            return false;
          } else if constexpr (std::is_same_v<T, Br>) {
            return jump(t.target);
          } else if constexpr (std::is_same_v<T, CondBr>) {
            return jump(eval(t.cond) != 0 ? t.if_true : t.if_false);
          } else if constexpr (std::is_same_v<T, Ret>) {
            return do_return(t);
          }
        },
        term);
  }

  bool jump(std::string_view target) {
    auto& fr = frame();
    const Function& f = fn();
    const auto& meta = m.meta_[fr.func];
    uint32_t to = meta.block_index.at(std::string(target));
    const std::string& from_label = f.blocks[fr.block].label;
    const BasicBlock& dest = f.blocks[to];
    // Parallel phi evaluation: read all incomings before writing.
    std::vector<std::pair<ValueId, uint64_t>> updates;
    updates.reserve(dest.phis.size());
    for (const auto& phi : dest.phis) {
      for (const auto& [label, op] : phi.incoming) {
        if (label == from_label) {
          updates.emplace_back(phi.result, eval(op));
          break;
        }
      }
    }
    for (const auto& [vid, raw] : updates) set_value(vid, raw);
    fr.block = to;
    fr.pc = 0;
    return true;
  }

  bool do_return(const Ret& r) {
    uint64_t rv = r.value ? eval(*r.value) : 0;
    if (m.cfg_.check_frame_hygiene && m.cfg_.mte) {
      for (const auto& [addr, size] : frame().spans) {
        if (size == 0) continue;
        for (uint64_t a = align_down_u(addr, mte::kGranuleBytes); a < addr + size;
             a += mte::kGranuleBytes) {
          auto tag = m.tags_.tag_at(a);
          if (tag && *tag != mte::kSafeDefaultTag) {
            set_trap(TrapKind::FrameHygiene, a, 0, 0, tag);
            return false;
          }
        }
      }
    }
    if (hooks) {
      FramePopInfo info;
      info.machine = &m;
      info.func = frame().func;
      info.function = fn().name;
      hooks->on_frame_pop(info);
    }
    ValueId pending = frame().pending_result;
    m.frames_.pop_back();
    if (m.frames_.empty()) {
      result = static_cast<int64_t>(rv);
      return true;
    }
    auto& caller = m.frames_.back();
    if (pending != kNoValue) caller.values[pending] = rv;
    caller.pc += 1;
    return true;
  }
};

Outcome Machine::run(const std::vector<int64_t>& args, Hooks* hooks) {
  frames_.clear();
  memory_.clear();
  tags_ = mte::TagMemory{};
  global_addr_.clear();
  output_.clear();
  steps_ = 0;

  Outcome out;
  // Globals live in a low segment, one 16-aligned region each.
  uint64_t gaddr = cfg_.globals_base;
  for (const auto& g : prog_.globals) {
    tags_.map_region(gaddr, g.size, mte::kGlobalRegionTag);
    for (size_t i = 0; i < g.init.size(); ++i) memory_[gaddr + i] = g.init[i];
    global_addr_[g.name] = gaddr;
    gaddr += mte::round_up_to_granule(g.size);
  }
  if (auto it = global_addr_.find("args"); it != global_addr_.end()) {
    const GlobalDef* g = nullptr;
    for (const auto& gg : prog_.globals) {
      if (gg.name == "args") g = &gg;
    }
    uint64_t max_args = g->size / 8;
    for (size_t i = 0; i < args.size() && i < max_args; ++i) {
      uint64_t v = static_cast<uint64_t>(args[i]);
      for (int b = 0; b < 8; ++b) memory_[it->second + i * 8 + b] = static_cast<uint8_t>(v >> (8 * b));
    }
  }

  Executor ex{*this, hooks, std::nullopt, std::nullopt};

  uint32_t entry_idx = UINT32_MAX;
  for (uint32_t i = 0; i < prog_.functions.size(); ++i) {
    if (prog_.functions[i].name == prog_.entry) entry_idx = i;
  }
  if (entry_idx == UINT32_MAX) {
    out.status = Outcome::Status::Trapped;
    TrapInfo t;
    t.kind = TrapKind::UndefinedFunction;
    out.trap = t;
    return out;
  }
  ex.push_frame(entry_idx, {}, kNoValue);

  while (!frames_.empty()) {
    if (steps_ >= cfg_.step_budget) {
      out.status = Outcome::Status::Exhausted;
      out.output = output_;
      out.steps = steps_;
      return out;
    }
    ++steps_;
    Machine::Frame& fr = frames_.back();
    const Function& f = prog_.functions[fr.func];
    const BasicBlock& b = f.blocks[fr.block];
    if (hooks) {
      StepInfo si;
      si.machine = this;
      si.func = fr.func;
      si.function = f.name;
      si.block = fr.block;
      si.flat_index = meta_[fr.func].flat_base[fr.block] + fr.pc;
      si.step = steps_;
      hooks->on_step(si);
    }
    bool ok;
    uint32_t pc = fr.pc;
    if (pc < b.body.size()) {
      // A call pushes a frame and has its pc advanced at return; anything
      // else advances here. frames_ may reallocate during exec, so re-fetch.
      bool is_call = std::holds_alternative<Call>(b.body[pc]);
      ok = ex.exec_instruction(b.body[pc]);
      if (ok && !is_call) frames_.back().pc += 1;
    } else {
      ok = ex.exec_terminator(b.term);
    }
    if (!ok) {
      out.status = Outcome::Status::Trapped;
      out.trap = ex.trap;
      out.output = output_;
      out.steps = steps_;
      return out;
    }
    if (ex.result) {
      out.status = Outcome::Status::Finished;
      out.return_value = *ex.result;
      out.output = output_;
      out.steps = steps_;
      return out;
    }
  }
  out.status = Outcome::Status::Finished;
  out.output = output_;
  out.steps = steps_;
  return out;
}

PairVerdict run_paired(const ir::Program& plain, const ir::Program& instrumented,
                       const std::vector<int64_t>& args, RunConfig base_cfg) {
  PairVerdict v;
  RunConfig pc = base_cfg;
  pc.mte = false;
  Machine pm(plain, pc);
  v.plain = pm.run(args);

  RunConfig ic = base_cfg;
  ic.mte = true;
  Machine im(instrumented, ic);
  v.instrumented = im.run(args);

  v.equal = v.plain.finished() && v.instrumented.finished() &&
            v.plain.return_value == v.instrumented.return_value &&
            v.plain.output == v.instrumented.output;
  return v;
}

}  // namespace stacktag::interp
