#include "stacktag/validate.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "stacktag/parser.hpp"

namespace stacktag::ir {

namespace {

struct Cfg {
  std::map<std::string, size_t, std::less<>> index;
  std::vector<std::vector<size_t>> preds;
  std::vector<std::vector<size_t>> succs;
};

std::vector<std::string> targets_of(const Terminator& t) {
  if (const auto* br = std::get_if<Br>(&t)) return {br->target};
  if (const auto* cbr = std::get_if<CondBr>(&t)) return {cbr->if_true, cbr->if_false};
  return {};
}

class FunctionChecker {
 public:
  FunctionChecker(const Program& p, const Function& f, std::vector<Diagnostic>& diags)
      : p_(p), f_(f), diags_(diags) {}

  void run() {
    if (f_.blocks.empty()) {
      error("function has no blocks", {});
      return;
    }
    check_blocks();
    if (!build_cfg()) return;
    check_phi_edges();
    compute_dominators();
    collect_defs();
    if (fatal_) return;
    kinds_ = compute_value_kinds(p_, f_);
    check_uses_and_kinds();
    check_rets();
    check_allocas();
  }

 private:
  const Program& p_;
  const Function& f_;
  std::vector<Diagnostic>& diags_;
  Cfg cfg_;
  bool fatal_ = false;
  // def site per value: (block, position). Params: (0, -2). Phis: (b, -1).
  std::map<ValueId, std::pair<size_t, int64_t>> defs_;
  std::vector<std::vector<bool>> dom_;  // dom_[b][d]: d dominates b
  std::vector<Kind> kinds_;

  void error(std::string msg, Location loc) {
    Diagnostic d;
    d.severity = Severity::Error;
    d.message = std::move(msg);
    loc.function = f_.name;
    d.loc = std::move(loc);
    diags_.push_back(std::move(d));
  }

  void check_blocks() {
    for (const auto& b : f_.blocks) {
      if (!b.terminated()) {
        error("block without terminator", {.block = b.label});
        fatal_ = true;
      }
    }
  }

  bool build_cfg() {
    size_t n = f_.blocks.size();
    for (size_t i = 0; i < n; ++i) cfg_.index[f_.blocks[i].label] = i;
    cfg_.preds.resize(n);
    cfg_.succs.resize(n);
    bool ok = true;
    for (size_t i = 0; i < n; ++i) {
      for (const auto& t : targets_of(f_.blocks[i].term)) {
        auto it = cfg_.index.find(t);
        if (it == cfg_.index.end()) {
          error("branch to unknown block '" + t + "'", {.block = f_.blocks[i].label});
          ok = false;
          continue;
        }
        if (it->second == 0) {
          error("branch to the entry block is not allowed", {.block = f_.blocks[i].label});
          ok = false;
          continue;
        }
        cfg_.succs[i].push_back(it->second);
        if (std::find(cfg_.preds[it->second].begin(), cfg_.preds[it->second].end(), i) ==
            cfg_.preds[it->second].end()) {
          cfg_.preds[it->second].push_back(i);
        }
      }
    }
    if (!f_.blocks[0].phis.empty()) {
      error("entry block cannot have phis", {.block = f_.blocks[0].label});
      ok = false;
    }
    fatal_ = fatal_ || !ok;
    return ok;
  }

  void check_phi_edges() {
    for (size_t i = 0; i < f_.blocks.size(); ++i) {
      const auto& b = f_.blocks[i];
      std::set<std::string> pred_labels;
      for (size_t pi : cfg_.preds[i]) pred_labels.insert(f_.blocks[pi].label);
      for (const auto& phi : b.phis) {
        std::set<std::string> seen;
        for (const auto& [label, op] : phi.incoming) {
          if (!seen.insert(label).second) {
            error("phi has duplicate incoming edge from '" + label + "'", {.block = b.label});
          }
          if (!pred_labels.contains(label)) {
            error("phi incoming edge from non-predecessor '" + label + "'", {.block = b.label});
          }
          (void)op;
        }
        for (const auto& pl : pred_labels) {
          if (!seen.contains(pl)) {
            error("phi missing incoming edge from predecessor '" + pl + "'", {.block = b.label});
          }
        }
      }
    }
  }

  void compute_dominators() {
    size_t n = f_.blocks.size();
    dom_.assign(n, std::vector<bool>(n, true));
    dom_[0].assign(n, false);
    dom_[0][0] = true;
    bool changed = true;
    while (changed) {
      changed = false;
      for (size_t b = 1; b < n; ++b) {
        std::vector<bool> nd(n, true);
        if (cfg_.preds[b].empty()) {
          // unreachable block: dominated by everything by convention
          nd.assign(n, true);
        } else {
          for (size_t p : cfg_.preds[b]) {
            for (size_t k = 0; k < n; ++k) nd[k] = nd[k] && dom_[p][k];
          }
        }
        nd[b] = true;
        if (nd != dom_[b]) {
          dom_[b] = std::move(nd);
          changed = true;
        }
      }
    }
  }

  void collect_defs() {
    for (size_t i = 0; i < f_.params.size(); ++i) {
      defs_[static_cast<ValueId>(i)] = {0, -2};
    }
    for (size_t bi = 0; bi < f_.blocks.size(); ++bi) {
      const auto& b = f_.blocks[bi];
      for (const auto& phi : b.phis) {
        if (defs_.contains(phi.result)) {
          error("duplicate definition of %" + f_.value_names[phi.result], {.block = b.label});
          fatal_ = true;
        }
        defs_[phi.result] = {bi, -1};
      }
      for (size_t k = 0; k < b.body.size(); ++k) {
        if (auto r = result_of(b.body[k])) {
          if (defs_.contains(*r)) {
            error("duplicate definition of %" + f_.value_names[*r],
                  {.block = b.label, .index = static_cast<int32_t>(k)});
            fatal_ = true;
          }
          defs_[*r] = {bi, static_cast<int64_t>(k)};
        }
      }
    }
  }

  bool dominates(size_t def_block, int64_t def_pos, size_t use_block, int64_t use_pos) const {
    if (def_block == use_block) return def_pos < use_pos;
    return dom_[use_block][def_block];
  }

  void check_use(const Operand& op, size_t block, int64_t pos, const char* what) {
    if (!op.is_value()) return;
    auto it = defs_.find(op.value);
    const std::string vname =
        op.value < f_.value_names.size() ? f_.value_names[op.value] : "<bad>";
    if (it == defs_.end()) {
      error(std::string("use of undefined value %") + vname + " in " + what,
            {.block = f_.blocks[block].label, .index = static_cast<int32_t>(pos)});
      return;
    }
    if (!dominates(it->second.first, it->second.second, block, pos)) {
      error("use before def: %" + vname,
            {.block = f_.blocks[block].label, .index = static_cast<int32_t>(pos)});
    }
  }

  bool is_ptrish(const Operand& op) const {
    if (op.is_global()) return true;
    if (op.is_imm()) return op.imm == 0;
    return op.value < kinds_.size() && kinds_[op.value] == Kind::Ptr;
  }
  bool is_intish(const Operand& op) const {
    if (op.is_imm()) return true;
    if (op.is_global()) return false;
    return op.value < kinds_.size() && kinds_[op.value] == Kind::Int;
  }

  void kind_error(const char* what, size_t bi, int64_t pos) {
    error(std::string("operand kind mismatch in ") + what,
          {.block = f_.blocks[bi].label, .index = static_cast<int32_t>(pos)});
  }

  void check_uses_and_kinds() {
    for (size_t bi = 0; bi < f_.blocks.size(); ++bi) {
      const auto& b = f_.blocks[bi];
      for (const auto& phi : b.phis) {
        bool any_ptr = false, any_nonzero_imm = false, any_int = false;
        for (const auto& [label, op] : phi.incoming) {
          auto pit = cfg_.index.find(label);
          if (pit != cfg_.index.end() && op.is_value()) {
            const auto& pred = f_.blocks[pit->second];
            check_use(op, pit->second, static_cast<int64_t>(pred.body.size()), "phi");
          }
          if (op.is_value()) {
            (kinds_[op.value] == Kind::Ptr ? any_ptr : any_int) = true;
          } else if (op.is_global()) {
            any_ptr = true;
          } else if (op.imm != 0) {
            any_nonzero_imm = true;
          }
        }
        if (any_ptr && (any_int || any_nonzero_imm)) {
          error("phi mixes pointer and integer incoming values", {.block = b.label});
        }
      }
      for (size_t k = 0; k < b.body.size(); ++k) {
        const auto& inst = b.body[k];
        int64_t pos = static_cast<int64_t>(k);
        for_each_operand(inst, [&](const Operand& op) { check_use(op, bi, pos, "instruction"); });
        check_inst_kinds(inst, bi, pos);
      }
      int64_t tpos = static_cast<int64_t>(b.body.size());
      std::visit(
          [&](const auto& t) {
            using T = std::decay_t<decltype(t)>;
            if constexpr (std::is_same_v<T, CondBr>) {
              check_use(t.cond, bi, tpos, "branch");
              if (!is_intish(t.cond)) kind_error("branch condition", bi, tpos);
            } else if constexpr (std::is_same_v<T, Ret>) {
              if (t.value) check_use(*t.value, bi, tpos, "ret");
            }
          },
          b.term);
    }
  }

  void check_inst_kinds(const Instruction& inst, size_t bi, int64_t pos) {
    std::visit(
        [&](const auto& i) {
          using T = std::decay_t<decltype(i)>;
          if constexpr (std::is_same_v<T, Alloca>) {
            if (i.count && !is_intish(*i.count)) kind_error("alloca count", bi, pos);
            if (i.count && !i.count->is_value()) kind_error("alloca count (must be a value)", bi, pos);
          } else if constexpr (std::is_same_v<T, Load>) {
            if (!is_ptrish(i.addr) || i.addr.is_imm()) kind_error("load address", bi, pos);
            if (i.kind == Kind::Ptr && i.width != 8) kind_error("pointer load width", bi, pos);
          } else if constexpr (std::is_same_v<T, Store>) {
            if (!is_ptrish(i.addr) || i.addr.is_imm()) kind_error("store address", bi, pos);
            if (i.kind == Kind::Ptr && i.width != 8) kind_error("pointer store width", bi, pos);
            if (i.kind == Kind::Ptr && !is_ptrish(i.value)) kind_error("stored pointer", bi, pos);
            if (i.kind == Kind::Int && !is_intish(i.value)) kind_error("stored integer", bi, pos);
          } else if constexpr (std::is_same_v<T, Gep>) {
            if (!is_ptrish(i.base) || i.base.is_imm()) kind_error("gep base", bi, pos);
            if (!is_intish(i.index)) kind_error("gep index", bi, pos);
          } else if constexpr (std::is_same_v<T, Call>) {
            const Function* callee = p_.find_function(i.callee);
            if (callee) {
              if (callee->params.size() != i.args.size()) {
                error("call argument count mismatch for @" + i.callee,
                      {.block = f_.blocks[bi].label, .index = static_cast<int32_t>(pos)});
                return;
              }
              for (size_t a = 0; a < i.args.size(); ++a) {
                bool want_ptr = callee->params[a].kind == Kind::Ptr;
                if (want_ptr && !is_ptrish(i.args[a])) kind_error("call argument", bi, pos);
                if (!want_ptr && !is_intish(i.args[a])) kind_error("call argument", bi, pos);
              }
              if (i.result != kNoValue && !return_kind(p_, *callee).has_value()) {
                error("call captures result of a function with no return value",
                      {.block = f_.blocks[bi].label, .index = static_cast<int32_t>(pos)});
              }
            }
          } else if constexpr (std::is_same_v<T, IntToPtr>) {
            if (!is_intish(i.value)) kind_error("inttoptr operand", bi, pos);
          } else if constexpr (std::is_same_v<T, PtrToInt>) {
            if (!is_ptrish(i.value) || i.value.is_imm()) kind_error("ptrtoint operand", bi, pos);
          } else if constexpr (std::is_same_v<T, IntOp>) {
            if (!is_intish(i.lhs) || !is_intish(i.rhs)) kind_error("arithmetic operand", bi, pos);
          } else if constexpr (std::is_same_v<T, Cmp>) {
            bool lp = is_ptrish(i.lhs) && !i.lhs.is_imm();
            bool rp = is_ptrish(i.rhs) && !i.rhs.is_imm();
            if (lp || rp) {
              // pointer comparison: the other side must be a pointer or null
              if (!is_ptrish(i.lhs) || !is_ptrish(i.rhs)) kind_error("pointer comparison", bi, pos);
            } else {
              if (!is_intish(i.lhs) || !is_intish(i.rhs)) kind_error("comparison operand", bi, pos);
            }
          } else if constexpr (std::is_same_v<T, SetTag>) {
            if (!is_ptrish(i.addr) || i.addr.is_imm()) kind_error("settag address", bi, pos);
            if (!is_intish(i.size)) kind_error("settag size", bi, pos);
          } else if constexpr (std::is_same_v<T, TagPtr>) {
            if (!is_ptrish(i.base) || i.base.is_imm()) kind_error("tagptr base", bi, pos);
          } else if constexpr (std::is_same_v<T, ClearTopTagBit>) {
            if (!is_ptrish(i.value) || i.value.is_imm()) kind_error("cleartop operand", bi, pos);
          } else if constexpr (std::is_same_v<T, TfpLoad>) {
            if (!is_ptrish(i.value)) kind_error("tfpload value", bi, pos);
            if (!is_ptrish(i.src_addr) || i.src_addr.is_imm()) kind_error("tfpload source", bi, pos);
          }
        },
        inst);
  }

  void check_rets() {
    std::optional<bool> has_value;
    std::optional<Kind> kind;
    for (const auto& b : f_.blocks) {
      const auto* ret = std::get_if<Ret>(&b.term);
      if (!ret) continue;
      bool hv = ret->value.has_value();
      if (has_value && *has_value != hv) {
        error("inconsistent returns: some return a value, some do not", {.block = b.label});
        return;
      }
      has_value = hv;
      if (hv) {
        Kind k = Kind::Int;
        if (ret->value->is_global()) k = Kind::Ptr;
        if (ret->value->is_value()) k = kinds_[ret->value->value];
        if (kind && *kind != k) {
          error("inconsistent return kinds", {.block = b.label});
          return;
        }
        kind = k;
      }
    }
    if (f_.name == p_.entry && kind && *kind == Kind::Ptr) {
      error("entry function must return an integer (or nothing)", {});
    }
  }

  void check_allocas() {
    for (size_t bi = 0; bi < f_.blocks.size(); ++bi) {
      const auto& b = f_.blocks[bi];
      for (size_t k = 0; k < b.body.size(); ++k) {
        const auto* a = std::get_if<Alloca>(&b.body[k]);
        if (!a) continue;
        if (!a->is_dynamic() && bi != 0) {
          error("static alloca outside the entry block",
                {.block = b.label, .index = static_cast<int32_t>(k)});
        }
      }
    }
  }
};

}  // namespace

std::vector<Diagnostic> validate(const Program& p) {
  std::vector<Diagnostic> diags;
  std::set<std::string> fnames, gnames;
  for (const auto& f : p.functions) {
    if (!fnames.insert(f.name).second) {
      Diagnostic d{Severity::Error, "duplicate function @" + f.name};
      diags.push_back(std::move(d));
    }
  }
  for (const auto& g : p.globals) {
    if (!gnames.insert(g.name).second) {
      diags.push_back(Diagnostic{Severity::Error, "duplicate global @" + g.name});
    }
    if (g.size < 1) diags.push_back(Diagnostic{Severity::Error, "global @" + g.name + " has size 0"});
    if (g.init.size() > g.size) {
      diags.push_back(Diagnostic{Severity::Error, "global @" + g.name + " initializer too long"});
    }
  }
  const Function* entry = p.find_function(p.entry);
  if (!entry) {
    diags.push_back(Diagnostic{Severity::Error, "missing entry function @" + p.entry});
  } else if (!entry->params.empty()) {
    diags.push_back(Diagnostic{Severity::Error, "entry function @" + p.entry + " must take no parameters"});
  }
  for (const auto& f : p.functions) {
    FunctionChecker(p, f, diags).run();
  }
  return diags;
}

LoadedProgram parse_and_validate(std::string_view text) {
  LoadedProgram out;
  ParseResult pr = parse_program(text);
  out.diagnostics = std::move(pr.diagnostics);
  if (!pr.program) return out;
  auto vd = validate(*pr.program);
  for (auto& d : vd) out.diagnostics.push_back(std::move(d));
  if (out.diagnostics.empty()) out.program = std::move(pr.program);
  return out;
}

}  // namespace stacktag::ir
