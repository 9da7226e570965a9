#include "stacktag/analysis.hpp"

#include <algorithm>
#include <cassert>
#include <deque>
#include <stdexcept>

namespace stacktag::analysis {

using namespace stacktag::ir;

// ---- ranges ----

int64_t sat_add(int64_t a, int64_t b) {
  int64_t r;
  if (__builtin_add_overflow(a, b, &r)) return b > 0 ? ByteRange::kMax : ByteRange::kMin;
  return r;
}

int64_t sat_mul(int64_t a, int64_t b) {
  int64_t r;
  if (__builtin_mul_overflow(a, b, &r)) {
    return ((a > 0) == (b > 0)) ? ByteRange::kMax : ByteRange::kMin;
  }
  return r;
}

ByteRange ByteRange::union_with(const ByteRange& o) const {
  if (empty()) return o;
  if (o.empty()) return *this;
  return {std::min(lo, o.lo), std::max(hi, o.hi)};
}

ByteRange ByteRange::offset_by(int64_t delta) const {
  if (empty()) return *this;
  ByteRange r;
  r.lo = lo == kMin ? kMin : sat_add(lo, delta);
  r.hi = hi == kMax ? kMax : sat_add(hi, delta);
  return r;
}

bool ByteRange::within(int64_t bound_lo, int64_t bound_hi) const {
  if (empty()) return true;
  return lo >= bound_lo && hi <= bound_hi;
}

bool ByteRange::contains(const ByteRange& o) const {
  if (o.empty()) return true;
  if (empty()) return false;
  return lo <= o.lo && hi >= o.hi;
}

void LinearAccessInfo::merge(const LinearAccessInfo& o, int64_t offset) {
  if (!o.any() && !o.max_step) return;
  linear_range = linear_range.union_with(o.linear_range.offset_by(offset));
  start_range = start_range.union_with(o.start_range.offset_by(offset));
  if (o.max_step) max_step = std::max(max_step.value_or(0), *o.max_step);
}

void UseInfo::set_unsafe(std::string_view reason) {
  if (unsafe) return;
  unsafe = true;
  pointer_unsafe = true;
  unsafe_reason = std::string(reason);
}

std::string_view safety_name(Safety s) {
  switch (s) {
    case Safety::Implicit: return "implicit";
    case Safety::Provable: return "provable";
    case Safety::Guarded: return "guarded";
    case Safety::Unsafe: return "unsafe";
  }
  return "unsafe";
}

std::string_view tfp_action_name(TfpAction a) {
  switch (a) {
    case TfpAction::None: return "none";
    case TfpAction::TfpLoad: return "tfp-load";
    case TfpAction::ClearLoaded: return "clear-loaded";
    case TfpAction::HardenGep: return "harden-gep";
    case TfpAction::UntagCast: return "untag-cast";
  }
  return "none";
}

// ---- function indexing ----

namespace {

struct DefSite {
  enum class Where : uint8_t { Param, Phi, Body } where = Where::Body;
  uint32_t block = 0;
  uint32_t index = 0;
};

struct FunctionIndex {
  const Function* f = nullptr;
  std::map<ValueId, DefSite> defs;

  explicit FunctionIndex(const Function& fn) : f(&fn) {
    for (uint32_t i = 0; i < fn.params.size(); ++i) {
      defs[i] = {DefSite::Where::Param, 0, i};
    }
    for (uint32_t bi = 0; bi < fn.blocks.size(); ++bi) {
      const auto& b = fn.blocks[bi];
      for (uint32_t pi = 0; pi < b.phis.size(); ++pi) {
        defs[b.phis[pi].result] = {DefSite::Where::Phi, bi, pi};
      }
      for (uint32_t k = 0; k < b.body.size(); ++k) {
        if (auto r = result_of(b.body[k])) defs[*r] = {DefSite::Where::Body, bi, k};
      }
    }
  }

  const Instruction* body_def(ValueId v) const {
    auto it = defs.find(v);
    if (it == defs.end() || it->second.where != DefSite::Where::Body) return nullptr;
    return &f->blocks[it->second.block].body[it->second.index];
  }
  const Phi* phi_def(ValueId v) const {
    auto it = defs.find(v);
    if (it == defs.end() || it->second.where != DefSite::Where::Phi) return nullptr;
    return &f->blocks[it->second.block].phis[it->second.index];
  }
  bool is_param(ValueId v) const {
    auto it = defs.find(v);
    return it != defs.end() && it->second.where == DefSite::Where::Param;
  }
};

struct Root {
  enum class Kind : uint8_t { Alloca, Arg, LoadSite, Global, Other } kind = Kind::Other;
  ValueId value = kNoValue;
  uint32_t arg_index = 0;
  uint32_t global = 0;
};

// Chases constant-offset gep chains back to an address root.
Root resolve_root(const FunctionIndex& fi, const Operand& addr) {
  Operand cur = addr;
  for (int depth = 0; depth < 256; ++depth) {
    if (cur.is_global()) return {Root::Kind::Global, kNoValue, 0, cur.global};
    if (cur.is_imm()) return {};
    ValueId v = cur.value;
    if (fi.is_param(v)) return {Root::Kind::Arg, v, v, 0};
    if (const Instruction* def = fi.body_def(v)) {
      if (std::holds_alternative<Alloca>(*def)) return {Root::Kind::Alloca, v, 0, 0};
      if (const auto* l = std::get_if<Load>(def)) {
        return l->kind == Kind::Ptr ? Root{Root::Kind::LoadSite, v, 0, 0} : Root{};
      }
      if (const auto* g = std::get_if<Gep>(def)) {
        cur = g->base;
        continue;
      }
      return {};
    }
    return {};  // phi or unknown
  }
  return {};
}

}  // namespace

// ---- linear access recognition ----

std::optional<InductionFact> recognize_induction(const Function& f, ValueId index) {
  FunctionIndex fi(f);
  const Phi* phi = fi.phi_def(index);
  if (!phi || phi->incoming.size() != 2) return std::nullopt;

  std::optional<int64_t> initial;
  std::optional<ValueId> step_value;
  for (const auto& [label, op] : phi->incoming) {
    if (op.is_imm()) {
      if (initial) return std::nullopt;  // two constant edges: no recurrence
      initial = op.imm;
    } else if (op.is_value()) {
      if (step_value) return std::nullopt;
      step_value = op.value;
    } else {
      return std::nullopt;
    }
  }
  if (!initial || !step_value) return std::nullopt;
  const Instruction* def = fi.body_def(*step_value);
  if (!def) return std::nullopt;
  const auto* op = std::get_if<IntOp>(def);
  if (!op) return std::nullopt;
  auto is_phi_val = [&](const Operand& o) { return o.is_value() && o.value == index; };
  if (op->op == IntOpKind::Add) {
    if (is_phi_val(op->lhs) && op->rhs.is_imm()) return InductionFact{*initial, op->rhs.imm};
    if (is_phi_val(op->rhs) && op->lhs.is_imm()) return InductionFact{*initial, op->lhs.imm};
    return std::nullopt;
  }
  if (op->op == IntOpKind::Sub) {
    if (is_phi_val(op->lhs) && op->rhs.is_imm()) return InductionFact{*initial, -op->rhs.imm};
    return std::nullopt;
  }
  return std::nullopt;
}

std::optional<LinearAccessInfo> detect_linear_access(const Function& f, const Gep& gep,
                                                     int64_t access_offset, uint8_t width) {
  auto footprint = [&](int64_t start) {
    return ByteRange::of(start, sat_add(start, width));
  };
  if (gep.index.is_imm()) {
    int64_t c = sat_add(sat_add(sat_mul(gep.index.imm, gep.scale), gep.offset), access_offset);
    LinearAccessInfo info;
    info.start_range = footprint(c);
    info.linear_range = info.start_range;
    return info;
  }
  if (!gep.index.is_value()) return std::nullopt;
  auto ind = recognize_induction(f, gep.index.value);
  if (!ind) return std::nullopt;
  int64_t start = sat_add(sat_add(sat_mul(ind->initial, gep.scale), gep.offset), access_offset);
  int64_t step = sat_mul(ind->step, gep.scale);
  LinearAccessInfo info;
  info.start_range = footprint(start);
  if (step == 0) {
    info.linear_range = info.start_range;
    return info;
  }
  info.max_step = step < 0 ? -step : step;
  if (step > 0) {
    info.linear_range = ByteRange::of(start, ByteRange::kMax);
  } else {
    info.linear_range = ByteRange::of(ByteRange::kMin, sat_add(start, width));
  }
  return info;
}

// ---- function pass ----

namespace {

struct Off {
  enum class Mode : uint8_t { Exact, Induction, Unknown } mode = Mode::Exact;
  int64_t exact = 0;
  int64_t start = 0;
  int64_t step = 0;
  auto operator<=>(const Off&) const = default;

  static Off exactly(int64_t v) { return {Mode::Exact, v, 0, 0}; }
  static Off induction(int64_t start, int64_t step) { return {Mode::Induction, 0, start, step}; }
  static Off unknown() { return {Mode::Unknown, 0, 0, 0}; }
};

class BaseWalker {
 public:
  BaseWalker(const Program& p, uint32_t func_index, const FunctionIndex& fi, ValueId base_value,
             UseInfo& u, const std::set<std::string>* pure_externals)
      : p_(p), func_(func_index), fi_(fi), base_value_(base_value), u_(u),
        pure_externals_(pure_externals) {}

  void run() {
    enqueue(base_value_, Off::exactly(0));
    while (!work_.empty()) {
      auto [v, off] = work_.front();
      work_.pop_front();
      visit_uses(v, off);
    }
  }

 private:
  const Program& p_;
  uint32_t func_;
  const FunctionIndex& fi_;
  ValueId base_value_;
  UseInfo& u_;
  const std::set<std::string>* pure_externals_;
  std::deque<std::pair<ValueId, Off>> work_;
  std::map<ValueId, std::set<Off>> seen_;

  void enqueue(ValueId v, Off off) {
    auto& s = seen_[v];
    if (s.contains(off)) return;
    if (!s.empty() && !s.contains(off)) off = Off::unknown();
    if (s.contains(off)) return;
    s.insert(off);
    work_.emplace_back(v, off);
  }

  void record_access(Off off, int64_t aoff, uint8_t width, Kind kind) {
    switch (off.mode) {
      case Off::Mode::Exact: {
        int64_t b = sat_add(off.exact, aoff);
        u_.range = u_.range.union_with(ByteRange::of(b, sat_add(b, width)));
        if (kind == Kind::Ptr) {
          u_.has_ptr_access = true;
          if (b % 8 != 0 || width != 8) u_.ptr_access_misaligned = true;
        } else {
          u_.has_int_access = true;
        }
        break;
      }
      case Off::Mode::Induction: {
        int64_t s = sat_add(off.start, aoff);
        auto fp = ByteRange::of(s, sat_add(s, width));
        u_.linear.start_range = u_.linear.start_range.union_with(fp);
        int64_t step = off.step < 0 ? -off.step : off.step;
        u_.linear.max_step = std::max(u_.linear.max_step.value_or(0), step);
        if (off.step > 0) {
          u_.linear.linear_range =
              u_.linear.linear_range.union_with(ByteRange::of(s, ByteRange::kMax));
        } else {
          u_.linear.linear_range =
              u_.linear.linear_range.union_with(ByteRange::of(ByteRange::kMin, sat_add(s, width)));
        }
        if (kind == Kind::Ptr) {
          u_.has_ptr_access = true;
          u_.ptr_access_misaligned = true;
        } else {
          u_.has_int_access = true;
        }
        break;
      }
      case Off::Mode::Unknown:
        u_.range = ByteRange::full_range();
        if (kind == Kind::Ptr) {
          u_.has_ptr_access = true;
          u_.ptr_access_misaligned = true;
        } else {
          u_.has_int_access = true;
        }
        break;
    }
  }

  bool uses_value(const Operand& op, ValueId v) const { return op.is_value() && op.value == v; }

  void visit_uses(ValueId v, Off off) {
    const Function& f = *fi_.f;
    for (uint32_t bi = 0; bi < f.blocks.size(); ++bi) {
      const auto& b = f.blocks[bi];
      for (const auto& phi : b.phis) {
        for (const auto& [label, op] : phi.incoming) {
          if (uses_value(op, v)) {
            u_.direct_only = false;
            enqueue(phi.result, off);
          }
        }
      }
      for (const auto& inst : b.body) {
        visit_instruction(inst, v, off);
        if (u_.unsafe) return;
      }
      std::visit(
          [&](const auto& t) {
            using T = std::decay_t<decltype(t)>;
            if constexpr (std::is_same_v<T, Ret>) {
              if (t.value && uses_value(*t.value, v)) {
                u_.direct_only = false;
                u_.set_unsafe("pointer returned");
              }
            } else if constexpr (std::is_same_v<T, CondBr>) {
              if (uses_value(t.cond, v)) u_.direct_only = false;
            }
          },
          b.term);
      if (u_.unsafe) return;
    }
  }

  void visit_instruction(const Instruction& inst, ValueId v, Off off) {
    std::visit(
        [&](const auto& i) {
          using T = std::decay_t<decltype(i)>;
          if constexpr (std::is_same_v<T, Load>) {
            if (uses_value(i.addr, v)) {
              if (v != base_value_) u_.direct_only = false;
              record_access(off, i.offset, i.width, i.kind);
              if (i.kind == Kind::Ptr) {
                BaseId site{func_, BaseKind::LoadSite, i.result};
                if (std::find(u_.derefed_by.begin(), u_.derefed_by.end(), site) ==
                    u_.derefed_by.end()) {
                  u_.derefed_by.push_back(site);
                }
              }
            }
          } else if constexpr (std::is_same_v<T, Store>) {
            if (uses_value(i.addr, v)) {
              if (v != base_value_) u_.direct_only = false;
              record_access(off, i.offset, i.width, i.kind);
            }
            if (uses_value(i.value, v)) {
              u_.direct_only = false;
              handle_pointer_store(i, off);
            }
          } else if constexpr (std::is_same_v<T, Gep>) {
            if (uses_value(i.base, v)) {
              u_.direct_only = false;
              enqueue(i.result, derived_offset(i, off));
            }
          } else if constexpr (std::is_same_v<T, Call>) {
            bool used = false;
            for (uint32_t j = 0; j < i.args.size(); ++j) {
              if (!uses_value(i.args[j], v)) continue;
              used = true;
              handle_call_arg(i, j, off);
              if (u_.unsafe) return;
            }
            if (used) u_.direct_only = false;
          } else if constexpr (std::is_same_v<T, PtrToInt>) {
            if (uses_value(i.value, v)) {
              u_.direct_only = false;
              u_.set_unsafe("pointer cast to integer");
            }
          } else if constexpr (std::is_same_v<T, Output>) {
            if (uses_value(i.value, v)) {
              u_.direct_only = false;
              u_.set_unsafe("pointer value observed");
            }
          } else if constexpr (std::is_same_v<T, Cmp>) {
            if (uses_value(i.lhs, v) || uses_value(i.rhs, v)) u_.direct_only = false;
          } else if constexpr (std::is_same_v<T, Alloca>) {
            // count operand is an integer; nothing to do for pointer bases
          } else {
            // Any other use of a tracked pointer is outside the model.
            bool used = false;
            for_each_operand(Instruction{i}, [&](const Operand& op) {
              if (uses_value(op, v)) used = true;
            });
            if (used) {
              u_.direct_only = false;
              u_.set_unsafe("unsupported pointer use");
            }
          }
        },
        inst);
  }

  Off derived_offset(const Gep& g, Off off) const {
    if (g.index.is_imm()) {
      int64_t delta = sat_add(sat_mul(g.index.imm, g.scale), g.offset);
      switch (off.mode) {
        case Off::Mode::Exact: return Off::exactly(sat_add(off.exact, delta));
        case Off::Mode::Induction: return Off::induction(sat_add(off.start, delta), off.step);
        case Off::Mode::Unknown: return Off::unknown();
      }
    }
    if (off.mode != Off::Mode::Exact) return Off::unknown();
    if (g.index.is_value()) {
      if (auto ind = recognize_induction(*fi_.f, g.index.value)) {
        int64_t start =
            sat_add(off.exact, sat_add(sat_mul(ind->initial, g.scale), g.offset));
        int64_t step = sat_mul(ind->step, g.scale);
        if (step == 0) return Off::exactly(start);
        return Off::induction(start, step);
      }
    }
    return Off::unknown();
  }

  void handle_pointer_store(const Store& s, Off off) {
    if (off.mode != Off::Mode::Exact) {
      u_.set_unsafe("pointer with non-constant offset stored to memory");
      return;
    }
    Root root = resolve_root(fi_, s.addr);
    switch (root.kind) {
      case Root::Kind::Alloca:
        u_.stored_in.push_back({BaseId{func_, BaseKind::Alloca, root.value}, off.exact});
        break;
      case Root::Kind::Arg:
        u_.stored_in.push_back({BaseId{func_, BaseKind::Argument, root.arg_index}, off.exact});
        break;
      case Root::Kind::LoadSite:
        u_.stored_in.push_back({BaseId{func_, BaseKind::LoadSite, root.value}, off.exact});
        break;
      case Root::Kind::Global:
        u_.set_unsafe("pointer stored to a global");
        return;
      case Root::Kind::Other:
        u_.set_unsafe("pointer stored to an unresolved location");
        return;
    }
    std::sort(u_.stored_in.begin(), u_.stored_in.end());
    u_.stored_in.erase(std::unique(u_.stored_in.begin(), u_.stored_in.end()),
                       u_.stored_in.end());
  }

  void handle_call_arg(const Call& c, uint32_t arg_index, Off off) {
    const Function* callee = p_.find_function(c.callee);
    if (!callee) {
      if (pure_externals_ && pure_externals_->contains(c.callee)) return;
      u_.set_unsafe("pointer escapes to undefined function @" + c.callee);
      return;
    }
    if (off.mode != Off::Mode::Exact) {
      u_.set_unsafe("pointer with non-constant offset passed to call");
      return;
    }
    CallRecord rec{c.callee, arg_index, off.exact};
    if (std::find(u_.calls.begin(), u_.calls.end(), rec) == u_.calls.end()) {
      u_.calls.push_back(std::move(rec));
      std::sort(u_.calls.begin(), u_.calls.end());
    }
  }
};

}  // namespace

namespace {

void run_function_pass_impl(const Program& p, uint32_t func_index, ProgramTables& tables,
                            const std::set<std::string>* pure_externals) {
  const Function& f = p.functions[func_index];
  FunctionIndex fi(f);
  auto walk = [&](BaseId id, ValueId value) {
    UseInfo u;
    u.base = id;
    BaseWalker(p, func_index, fi, value, u, pure_externals).run();
    tables[id] = std::move(u);
  };
  for (uint32_t i = 0; i < f.params.size(); ++i) {
    if (f.params[i].kind == Kind::Ptr) walk(BaseId{func_index, BaseKind::Argument, i}, i);
  }
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      if (const auto* a = std::get_if<Alloca>(&inst)) {
        walk(BaseId{func_index, BaseKind::Alloca, a->result}, a->result);
      } else if (const auto* l = std::get_if<Load>(&inst)) {
        if (l->kind == Kind::Ptr) walk(BaseId{func_index, BaseKind::LoadSite, l->result}, l->result);
      }
    }
  }
}

}  // namespace

void run_function_pass(const Program& p, uint32_t func_index, ProgramTables& tables) {
  run_function_pass_impl(p, func_index, tables, nullptr);
}

// ---- merging ----

void merge_use_info(UseInfo& dst, const UseInfo& src_ref, int64_t offset) {
  const UseInfo src = src_ref;  // copy: src may alias dst (recursive links)
  dst.range = dst.range.union_with(src.range.offset_by(offset));
  dst.linear.merge(src.linear, offset);
  auto append_sorted = [](auto& dst_list, const auto& src_list, auto make) {
    for (const auto& e : src_list) {
      auto rec = make(e);
      if (std::find(dst_list.begin(), dst_list.end(), rec) == dst_list.end()) {
        dst_list.push_back(std::move(rec));
      }
    }
    std::sort(dst_list.begin(), dst_list.end());
  };
  append_sorted(dst.calls, src.calls, [&](const CallRecord& c) {
    return CallRecord{c.callee, c.param_index, sat_add(c.offset, offset)};
  });
  append_sorted(dst.stored_in, src.stored_in, [&](const StoreRecord& s) {
    return StoreRecord{s.site, sat_add(s.value_offset, offset)};
  });
  append_sorted(dst.derefed_by, src.derefed_by, [](const BaseId& d) { return d; });
  dst.has_ptr_access |= src.has_ptr_access;
  dst.has_int_access |= src.has_int_access;
  dst.ptr_access_misaligned |= src.ptr_access_misaligned;
  if (src.has_ptr_access && offset % 8 != 0) dst.ptr_access_misaligned = true;
  if (src.unsafe && !dst.unsafe) {
    dst.set_unsafe(src.unsafe_reason.empty() ? "merged from unsafe use" : src.unsafe_reason);
  }
  dst.pointer_unsafe |= src.pointer_unsafe;
}

// ---- pointer safety ----

bool currently_pointer_unsafe(const UseInfo& u) {
  if (u.unsafe || u.pointer_unsafe) return true;
  if (!u.has_ptr_access) return false;  // never holds pointers: vacuously safe
  if (u.has_int_access) return true;    // mixed-kind use can corrupt pointer slots
  return u.ptr_access_misaligned;
}

void check_pointer_safety(ProgramTables& tables) {
  for (auto& [id, u] : tables) {
    u.pointer_unsafe = currently_pointer_unsafe(u);
  }
}

// ---- module pass ----

namespace {

void set_all_to_unsafe(ProgramTables& tables, uint32_t func, PassStats& stats) {
  for (auto& [id, u] : tables) {
    if (id.func != func || u.unsafe) continue;
    u.set_unsafe("analysis depth limit reached");
    ++stats.unsafe_by_limit;
  }
}

// Processes every UseInfo of one function once. Returns true when anything
// widened. `visit` is the function's current visit count, recorded on every
// record this visit widened; `record_cap` bounds the linkage lists (cyclic
// call chains with moving offsets grow them without bound, which is exactly
// the complexity the depth limit exists to cut off).
bool process_function(const Program& p, uint32_t func, ProgramTables& tables,
                      const std::map<std::string, uint32_t>& fn_index, PassStats& stats,
                      uint32_t visit, size_t record_cap, bool& capped) {
  (void)p;
  bool changed = false;
  for (auto& [id, u] : tables) {
    if (id.func != func) continue;
    if (u.unsafe) continue;
    UseInfo before = u;

    size_t ncalls = u.calls.size();
    for (size_t i = 0; i < ncalls && !u.unsafe; ++i) {
      CallRecord rec = u.calls[i];
      auto cit = fn_index.find(rec.callee);
      if (cit == fn_index.end()) {
        u.set_unsafe("call record for undefined function");
        break;
      }
      auto it = tables.find(BaseId{cit->second, BaseKind::Argument, rec.param_index});
      if (it == tables.end()) {
        u.set_unsafe("callee argument has no analysis record");
        break;
      }
      merge_use_info(u, it->second, rec.offset);
      ++stats.merges;
    }

    size_t nstores = u.stored_in.size();
    for (size_t i = 0; i < nstores && !u.unsafe; ++i) {
      StoreRecord rec = u.stored_in[i];
      auto sit = tables.find(rec.site);
      if (sit == tables.end()) {
        u.set_unsafe("storage site has no analysis record");
        break;
      }
      const UseInfo& site = sit->second;
      if (site.unsafe) {
        u.set_unsafe("stored in an unsafe location");
        break;
      }
      if (currently_pointer_unsafe(site)) {
        u.set_unsafe("stored in a pointer-unsafe location");
        break;
      }
      std::vector<BaseId> derefs = site.derefed_by;
      for (const auto& d : derefs) {
        auto dit = tables.find(d);
        if (dit == tables.end()) {
          u.set_unsafe("load site has no analysis record");
          break;
        }
        merge_use_info(u, dit->second, rec.value_offset);
        ++stats.merges;
      }
    }

    if (!u.unsafe &&
        (u.calls.size() > record_cap || u.stored_in.size() > record_cap ||
         u.derefed_by.size() > record_cap)) {
      u.set_unsafe("analysis depth limit reached");
      ++stats.unsafe_by_limit;
      capped = true;
    }
    if (!(u == before)) {
      changed = true;
      u.depth = visit;
    }
  }
  return changed;
}

}  // namespace

void run_module_pass(const Program& p, ProgramTables& tables, const AnalysisOptions& opts,
                     PassStats& stats) {
  // Static call graph over defined callees.
  std::map<std::string, uint32_t> fn_index;
  for (uint32_t i = 0; i < p.functions.size(); ++i) fn_index[p.functions[i].name] = i;
  std::vector<std::set<uint32_t>> callers(p.functions.size());
  for (uint32_t i = 0; i < p.functions.size(); ++i) {
    for (const auto& b : p.functions[i].blocks) {
      for (const auto& inst : b.body) {
        if (const auto* c = std::get_if<Call>(&inst)) {
          auto it = fn_index.find(c->callee);
          if (it != fn_index.end()) callers[it->second].insert(i);
        }
      }
    }
  }

  std::vector<uint32_t> counter(p.functions.size(), 0);
  std::vector<bool> exhausted(p.functions.size(), false);
  std::set<uint32_t> limit_hits;

  // Outer rounds reseed every function until a full round is quiet; this
  // covers widenings that arrive through store/load links the caller graph
  // alone does not expose.
  for (;;) {
    ++stats.rounds;
    std::deque<uint32_t> work;
    std::vector<bool> in_list(p.functions.size(), false);
    for (uint32_t i = 0; i < p.functions.size(); ++i) {
      work.push_back(i);
      in_list[i] = true;
    }
    bool any_change = false;
    while (!work.empty()) {
      uint32_t fidx = work.front();
      work.pop_front();
      in_list[fidx] = false;
      if (counter[fidx] >= opts.limit) {
        if (!exhausted[fidx]) {
          exhausted[fidx] = true;
          limit_hits.insert(fidx);
          set_all_to_unsafe(tables, fidx, stats);
          any_change = true;
          for (uint32_t c : callers[fidx]) {
            if (!in_list[c]) {
              work.push_front(c);
              in_list[c] = true;
            }
          }
        }
        continue;
      }
      ++counter[fidx];
      ++stats.function_pops;
      bool capped = false;
      bool changed = process_function(p, fidx, tables, fn_index, stats, counter[fidx],
                                      8 * static_cast<size_t>(opts.limit) + 64, capped);
      if (capped) limit_hits.insert(fidx);
      if (changed) {
        any_change = true;
        // Changed tables: callers must re-merge, and the function itself
        // re-runs to resolve intra-function store/load chains.
        if (!in_list[fidx]) {
          work.push_front(fidx);
          in_list[fidx] = true;
        }
        for (uint32_t c : callers[fidx]) {
          if (!in_list[c]) {
            work.push_front(c);
            in_list[c] = true;
          }
        }
      }
    }
    if (!any_change) break;
  }

  for (uint32_t f : limit_hits) stats.limit_hit_functions.push_back(p.functions[f].name);
  stats.useinfo_count = tables.size();
}

// ---- classification ----

namespace {

SafetyClass classify_alloca(const Alloca& a, const UseInfo& u, const AnalysisOptions& opts) {
  SafetyClass out;
  auto finish_unsafe = [&]() {
    out.cls = Safety::Unsafe;
    out.pointer_safe = false;
    return out;
  };

  if (a.is_dynamic()) return finish_unsafe();
  if (u.unsafe) {
    if (!opts.weaken_for_selftest) return finish_unsafe();
  }
  int64_t size = static_cast<int64_t>(a.size);
  ByteRange total = u.range.union_with(u.linear.linear_range).union_with(u.linear.start_range);

  bool kind_pure = !(u.has_ptr_access && u.has_int_access);
  if (!u.unsafe && u.direct_only && kind_pure && total.within(0, size)) {
    out.cls = Safety::Implicit;
    out.pointer_safe = true;
    return out;
  }
  if (!u.unsafe && total.within(0, size)) {
    out.cls = Safety::Provable;
    out.pointer_safe = !u.pointer_unsafe;
    return out;
  }
  bool guardable = !u.unsafe && u.range.within(0, size) && !u.linear.start_range.empty() &&
                   u.linear.start_range.within(0, size) && u.linear.max_step.has_value() &&
                   *u.linear.max_step > 0 && *u.linear.max_step < opts.guard_bytes;
  if (guardable) {
    out.cls = Safety::Guarded;
    out.pointer_safe = !u.pointer_unsafe;
    return out;
  }
  if (opts.weaken_for_selftest) {
    // Deliberate misclassification used by the oracle self-test.
    out.cls = Safety::Provable;
    out.pointer_safe = !u.pointer_unsafe;
    return out;
  }
  return finish_unsafe();
}

}  // namespace

const AllocaReport* AnalysisResult::find_alloca(std::string_view function,
                                                std::string_view name) const {
  for (const auto& a : allocations) {
    if (a.function == function && a.name == name) return &a;
  }
  return nullptr;
}

const AllocaReport* AnalysisResult::find_alloca(uint32_t func, ir::ValueId value) const {
  for (const auto& a : allocations) {
    if (a.func == func && a.value == value) return &a;
  }
  return nullptr;
}

const UseInfo* AnalysisResult::find_use_info(const BaseId& id) const {
  auto it = tables.find(id);
  return it == tables.end() ? nullptr : &it->second;
}

AnalysisResult classify(const Program& p, ProgramTables tables, const AnalysisOptions& opts,
                        PassStats stats) {
  AnalysisResult result;
  result.tables = std::move(tables);
  result.stats = std::move(stats);

  for (uint32_t fi = 0; fi < p.functions.size(); ++fi) {
    const Function& f = p.functions[fi];
    for (uint32_t bi = 0; bi < f.blocks.size(); ++bi) {
      const auto& b = f.blocks[bi];
      for (uint32_t k = 0; k < b.body.size(); ++k) {
        const auto* a = std::get_if<Alloca>(&b.body[k]);
        if (!a) continue;
        auto it = result.tables.find(BaseId{fi, BaseKind::Alloca, a->result});
        assert(it != result.tables.end());
        AllocaReport rep;
        rep.func = fi;
        rep.value = a->result;
        rep.function = f.name;
        rep.name = f.value_names[a->result];
        rep.dynamic = a->is_dynamic();
        if (!a->is_dynamic()) rep.size = a->size;
        rep.safety = classify_alloca(*a, it->second, opts);
        rep.range = it->second.range;
        rep.linear = it->second.linear;
        rep.block = bi;
        rep.index = k;
        result.allocations.push_back(std::move(rep));
      }
    }
  }

  // TFP sites. Loads of pointer kind always carry an action unless statically
  // elided; geps with value indices (or absurd constant offsets) are hardened;
  // integer-to-pointer casts are always untagged.
  for (uint32_t fi = 0; fi < p.functions.size(); ++fi) {
    const Function& f = p.functions[fi];
    FunctionIndex findex(f);
    for (uint32_t bi = 0; bi < f.blocks.size(); ++bi) {
      const auto& b = f.blocks[bi];
      for (uint32_t k = 0; k < b.body.size(); ++k) {
        const auto& inst = b.body[k];
        if (const auto* l = std::get_if<Load>(&inst)) {
          if (l->kind != Kind::Ptr) continue;
          TfpAction action = TfpAction::TfpLoad;
          if (opts.static_elision) {
            Root root = resolve_root(findex, l->addr);
            if (root.kind == Root::Kind::Alloca) {
              if (const AllocaReport* rep = result.find_alloca(fi, root.value)) {
                if (rep->safety.cls == Safety::Unsafe) {
                  action = TfpAction::ClearLoaded;
                } else if (rep->safety.pointer_safe) {
                  action = TfpAction::None;
                }
              }
            }
          }
          result.tfp_sites.push_back({fi, bi, k, TfpSiteKind::PtrLoad, action});
        } else if (const auto* g = std::get_if<Gep>(&inst)) {
          bool harden = false;
          if (g->index.is_value()) {
            harden = true;
          } else if (g->index.is_imm()) {
            int64_t delta = sat_add(sat_mul(g->index.imm, g->scale), g->offset);
            constexpr int64_t kHuge = int64_t{1} << 47;
            if (delta > kHuge || delta < -kHuge) harden = true;
          }
          if (harden) {
            result.tfp_sites.push_back({fi, bi, k, TfpSiteKind::Gep, TfpAction::HardenGep});
          }
        } else if (std::holds_alternative<IntToPtr>(inst)) {
          result.tfp_sites.push_back({fi, bi, k, TfpSiteKind::IntToPtrCast, TfpAction::UntagCast});
        }
      }
    }
  }
  std::sort(result.tfp_sites.begin(), result.tfp_sites.end());
  return result;
}

AnalysisResult analyze(const Program& p, const AnalysisOptions& opts) {
  if (has_instrumentation_ops(p)) {
    throw std::invalid_argument("program is already instrumented");
  }
  ProgramTables tables;
  for (uint32_t i = 0; i < p.functions.size(); ++i) {
    run_function_pass_impl(p, i, tables, &opts.pure_externals);
  }
  PassStats stats;
  run_module_pass(p, tables, opts, stats);
  check_pointer_safety(tables);
  return classify(p, std::move(tables), opts, std::move(stats));
}

}  // namespace stacktag::analysis
