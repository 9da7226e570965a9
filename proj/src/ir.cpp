#include "stacktag/ir.hpp"

#include <algorithm>

namespace stacktag::ir {

ValueId Function::new_value(std::string hint) {
  if (hint.empty()) hint = "v";
  std::string name = hint;
  int suffix = 0;
  while (value_by_name(name).has_value()) {
    name = hint + "." + std::to_string(suffix++);
  }
  value_names.push_back(std::move(name));
  return static_cast<ValueId>(value_names.size() - 1);
}

std::optional<ValueId> Function::value_by_name(std::string_view name) const {
  for (size_t i = 0; i < value_names.size(); ++i) {
    if (value_names[i] == name) return static_cast<ValueId>(i);
  }
  return std::nullopt;
}

const BasicBlock* Function::block_by_label(std::string_view label) const {
  for (const auto& b : blocks) {
    if (b.label == label) return &b;
  }
  return nullptr;
}

const Function* Program::find_function(std::string_view name) const {
  for (const auto& f : functions) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

Function* Program::find_function(std::string_view name) {
  for (auto& f : functions) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

std::optional<uint32_t> Program::global_index(std::string_view name) const {
  for (size_t i = 0; i < globals.size(); ++i) {
    if (globals[i].name == name) return static_cast<uint32_t>(i);
  }
  return std::nullopt;
}

std::string Diagnostic::to_string() const {
  std::string s = severity == Severity::Error ? "error: " : "warning: ";
  s += message;
  if (line > 0) {
    s += " (line " + std::to_string(line) + ", col " + std::to_string(col) + ")";
  }
  if (loc) {
    s += " [@" + loc->function;
    if (!loc->block.empty()) s += "/" + loc->block;
    if (loc->index >= 0) s += "#" + std::to_string(loc->index);
    s += "]";
  }
  return s;
}

std::optional<ValueId> result_of(const Instruction& inst) {
  return std::visit(
      [](const auto& i) -> std::optional<ValueId> {
        using T = std::decay_t<decltype(i)>;
        if constexpr (std::is_same_v<T, Store> || std::is_same_v<T, Output> ||
                      std::is_same_v<T, SetTag> || std::is_same_v<T, RetagFrame>) {
          return std::nullopt;
        } else if constexpr (std::is_same_v<T, Call>) {
          if (i.result == kNoValue) return std::nullopt;
          return i.result;
        } else {
          return i.result;
        }
      },
      inst);
}

bool is_instrumentation_op(const Instruction& inst) {
  if (std::holds_alternative<SetTag>(inst) || std::holds_alternative<TagPtr>(inst) ||
      std::holds_alternative<ClearTopTagBit>(inst) || std::holds_alternative<TfpLoad>(inst) ||
      std::holds_alternative<RetagFrame>(inst)) {
    return true;
  }
  if (const auto* g = std::get_if<Gep>(&inst)) return g->fix_tag;
  return false;
}

bool has_instrumentation_ops(const Function& f) {
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      if (is_instrumentation_op(inst)) return true;
    }
  }
  return false;
}

bool has_instrumentation_ops(const Program& p) {
  return std::any_of(p.functions.begin(), p.functions.end(),
                     [](const Function& f) { return has_instrumentation_ops(f); });
}

namespace {

template <typename Inst, typename Fn>
void visit_operands(Inst& i, Fn&& fn) {
  using T = std::decay_t<Inst>;
  if constexpr (std::is_same_v<std::remove_const_t<T>, Alloca>) {
    if (i.count) fn(*i.count);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, Load>) {
    fn(i.addr);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, Store>) {
    fn(i.addr);
    fn(i.value);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, Gep>) {
    fn(i.base);
    fn(i.index);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, Call>) {
    for (auto& a : i.args) fn(a);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, IntToPtr> ||
                       std::is_same_v<std::remove_const_t<T>, PtrToInt> ||
                       std::is_same_v<std::remove_const_t<T>, ClearTopTagBit> ||
                       std::is_same_v<std::remove_const_t<T>, Output>) {
    fn(i.value);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, IntOp> ||
                       std::is_same_v<std::remove_const_t<T>, Cmp>) {
    fn(i.lhs);
    fn(i.rhs);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, SetTag>) {
    fn(i.addr);
    fn(i.size);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, TagPtr>) {
    fn(i.base);
  } else if constexpr (std::is_same_v<std::remove_const_t<T>, TfpLoad>) {
    fn(i.value);
    fn(i.src_addr);
  }
  // ConstInt, RetagFrame: no operands
}

}  // namespace

void for_each_operand(Instruction& inst, const std::function<void(Operand&)>& fn) {
  std::visit([&](auto& i) { visit_operands(i, fn); }, inst);
}

void for_each_operand(const Instruction& inst, const std::function<void(const Operand&)>& fn) {
  std::visit([&](const auto& i) { visit_operands(i, fn); }, inst);
}

std::vector<Kind> compute_value_kinds(const Program& p, const Function& f) {
  std::vector<Kind> kinds(f.value_names.size(), Kind::Int);
  for (size_t i = 0; i < f.params.size() && i < kinds.size(); ++i) {
    kinds[i] = f.params[i].kind;
  }
  auto set = [&](ValueId v, Kind k) {
    if (v != kNoValue && v < kinds.size()) kinds[v] = k;
  };
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      std::visit(
          [&](const auto& i) {
            using T = std::decay_t<decltype(i)>;
            if constexpr (std::is_same_v<T, Alloca> || std::is_same_v<T, Gep> ||
                          std::is_same_v<T, IntToPtr> || std::is_same_v<T, TagPtr> ||
                          std::is_same_v<T, ClearTopTagBit> || std::is_same_v<T, TfpLoad>) {
              set(i.result, Kind::Ptr);
            } else if constexpr (std::is_same_v<T, Load>) {
              set(i.result, i.kind);
            } else if constexpr (std::is_same_v<T, Call>) {
              if (i.result != kNoValue) {
                Kind k = Kind::Int;
                if (const Function* callee = p.find_function(i.callee)) {
                  k = return_kind(p, *callee).value_or(Kind::Int);
                }
                set(i.result, k);
              }
            } else if constexpr (std::is_same_v<T, PtrToInt> || std::is_same_v<T, IntOp> ||
                                 std::is_same_v<T, Cmp> || std::is_same_v<T, ConstInt>) {
              set(i.result, Kind::Int);
            }
          },
          inst);
    }
  }
  // Phis: propagate from incoming values until stable (phi-of-phi chains).
  for (int pass = 0; pass < 4; ++pass) {
    bool changed = false;
    for (const auto& b : f.blocks) {
      for (const auto& phi : b.phis) {
        Kind k = Kind::Int;
        for (const auto& [label, op] : phi.incoming) {
          if (op.is_value() && op.value < kinds.size() && kinds[op.value] == Kind::Ptr) {
            k = Kind::Ptr;
          }
          if (op.is_global()) k = Kind::Ptr;
        }
        if (phi.result < kinds.size() && kinds[phi.result] != k) {
          kinds[phi.result] = k;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  return kinds;
}

std::optional<Kind> return_kind(const Program& p, const Function& f) {
  auto kinds = [&]() -> std::vector<Kind> {
    // Avoid infinite recursion through call kinds: only direct defs matter
    // for the values that can appear in ret position in practice; a ret of
    // a recursive call result defaults to Int which matches the validator's
    // treatment.
    std::vector<Kind> ks(f.value_names.size(), Kind::Int);
    for (size_t i = 0; i < f.params.size() && i < ks.size(); ++i) ks[i] = f.params[i].kind;
    for (const auto& b : f.blocks) {
      for (const auto& inst : b.body) {
        std::visit(
            [&](const auto& ii) {
              using T = std::decay_t<decltype(ii)>;
              if constexpr (std::is_same_v<T, Alloca> || std::is_same_v<T, Gep> ||
                            std::is_same_v<T, IntToPtr> || std::is_same_v<T, TagPtr> ||
                            std::is_same_v<T, ClearTopTagBit> || std::is_same_v<T, TfpLoad>) {
                if (ii.result < ks.size()) ks[ii.result] = Kind::Ptr;
              } else if constexpr (std::is_same_v<T, Load>) {
                if (ii.result < ks.size()) ks[ii.result] = ii.kind;
              }
            },
            inst);
      }
    }
    return ks;
  }();
  (void)p;
  for (const auto& b : f.blocks) {
    if (const auto* ret = std::get_if<Ret>(&b.term)) {
      if (!ret->value) continue;
      if (ret->value->is_value() && ret->value->value < kinds.size()) {
        return kinds[ret->value->value];
      }
      if (ret->value->is_global()) return Kind::Ptr;
      return Kind::Int;
    }
  }
  return std::nullopt;
}

std::string_view int_op_name(IntOpKind op) {
  switch (op) {
    case IntOpKind::Add: return "add";
    case IntOpKind::Sub: return "sub";
    case IntOpKind::Mul: return "mul";
    case IntOpKind::Div: return "div";
    case IntOpKind::Rem: return "rem";
    case IntOpKind::And: return "and";
    case IntOpKind::Or: return "or";
    case IntOpKind::Xor: return "xor";
    case IntOpKind::Shl: return "shl";
    case IntOpKind::Lshr: return "lshr";
    case IntOpKind::Ashr: return "ashr";
  }
  return "add";
}

std::string_view cmp_name(CmpKind rel) {
  switch (rel) {
    case CmpKind::Eq: return "eq";
    case CmpKind::Ne: return "ne";
    case CmpKind::Lt: return "lt";
    case CmpKind::Le: return "le";
    case CmpKind::Gt: return "gt";
    case CmpKind::Ge: return "ge";
  }
  return "eq";
}

std::optional<IntOpKind> int_op_from_name(std::string_view s) {
  static constexpr std::pair<std::string_view, IntOpKind> table[] = {
      {"add", IntOpKind::Add},   {"sub", IntOpKind::Sub}, {"mul", IntOpKind::Mul},
      {"div", IntOpKind::Div},   {"rem", IntOpKind::Rem}, {"and", IntOpKind::And},
      {"or", IntOpKind::Or},     {"xor", IntOpKind::Xor}, {"shl", IntOpKind::Shl},
      {"lshr", IntOpKind::Lshr}, {"ashr", IntOpKind::Ashr}};
  for (const auto& [name, op] : table) {
    if (name == s) return op;
  }
  return std::nullopt;
}

std::optional<CmpKind> cmp_from_name(std::string_view s) {
  static constexpr std::pair<std::string_view, CmpKind> table[] = {
      {"eq", CmpKind::Eq}, {"ne", CmpKind::Ne}, {"lt", CmpKind::Lt},
      {"le", CmpKind::Le}, {"gt", CmpKind::Gt}, {"ge", CmpKind::Ge}};
  for (const auto& [name, rel] : table) {
    if (name == s) return rel;
  }
  return std::nullopt;
}

}  // namespace stacktag::ir
