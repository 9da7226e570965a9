#include "stacktag/printer.hpp"

#include <sstream>

namespace stacktag::ir {

namespace {

class Printer {
 public:
  explicit Printer(const Program& p) : p_(p) {}

  std::string program() {
    for (const auto& g : p_.globals) {
      out_ << "global @" << g.name << " " << g.size;
      if (!g.init.empty()) {
        out_ << " = 0x";
        static const char* hex = "0123456789abcdef";
        for (uint8_t b : g.init) out_ << hex[b >> 4] << hex[b & 0xf];
      }
      out_ << "\n";
    }
    if (!p_.globals.empty()) out_ << "\n";
    bool first = true;
    for (const auto& f : p_.functions) {
      if (!first) out_ << "\n";
      first = false;
      function(f);
    }
    return out_.str();
  }

  void function(const Function& f) {
    fn_ = &f;
    out_ << "func @" << f.name << "(";
    for (size_t i = 0; i < f.params.size(); ++i) {
      if (i) out_ << ", ";
      out_ << "%" << f.params[i].name << ": " << (f.params[i].kind == Kind::Ptr ? "ptr" : "i64");
    }
    out_ << ")";
    if (f.reset_tags) out_ << " [reset-tags]";
    out_ << " {\n";
    for (const auto& b : f.blocks) {
      out_ << b.label << ":\n";
      for (const auto& phi : b.phis) {
        out_ << "  %" << name(phi.result) << " = phi ";
        for (size_t i = 0; i < phi.incoming.size(); ++i) {
          if (i) out_ << ", ";
          out_ << "[ " << operand(phi.incoming[i].second) << ", " << phi.incoming[i].first << " ]";
        }
        out_ << "\n";
      }
      for (const auto& inst : b.body) instruction(inst);
      terminator(b.term);
    }
    out_ << "}\n";
    fn_ = nullptr;
  }

 private:
  const Program& p_;
  const Function* fn_ = nullptr;
  std::ostringstream out_;

  std::string name(ValueId v) const { return fn_->value_names[v]; }

  std::string operand(const Operand& o) const {
    switch (o.tag) {
      case Operand::Tag::Value: return "%" + name(o.value);
      case Operand::Tag::Imm: return std::to_string(o.imm);
      case Operand::Tag::Global: return "@" + p_.globals[o.global].name;
    }
    return "?";
  }

  std::string addr(const Operand& base, int64_t off) const {
    std::string s = "[" + operand(base);
    if (off < 0) {
      s += " - " + std::to_string(-off);
    } else {
      s += " + " + std::to_string(off);
    }
    return s + "]";
  }

  static std::string_view suffix(uint8_t width, Kind kind) {
    if (kind == Kind::Ptr) return "ptr";
    switch (width) {
      case 1: return "i8";
      case 2: return "i16";
      case 4: return "i32";
      default: return "i64";
    }
  }

  void instruction(const Instruction& inst) {
    out_ << "  ";
    std::visit(
        [&](const auto& i) {
          using T = std::decay_t<decltype(i)>;
          if constexpr (std::is_same_v<T, Alloca>) {
            out_ << "%" << name(i.result) << " = alloca ";
            if (i.count) {
              out_ << operand(*i.count) << " x " << i.size;
            } else {
              out_ << i.size;
            }
            if (i.align != 1) out_ << ", align " << i.align;
          } else if constexpr (std::is_same_v<T, Load>) {
            out_ << "%" << name(i.result) << " = load." << suffix(i.width, i.kind) << " "
                 << addr(i.addr, i.offset);
          } else if constexpr (std::is_same_v<T, Store>) {
            out_ << "store." << suffix(i.width, i.kind) << " " << addr(i.addr, i.offset) << " = "
                 << operand(i.value);
          } else if constexpr (std::is_same_v<T, Gep>) {
            out_ << "%" << name(i.result) << " = " << (i.fix_tag ? "gep.fixtag" : "gep") << " "
                 << operand(i.base) << ", " << operand(i.index) << ", scale " << i.scale
                 << ", off " << i.offset;
          } else if constexpr (std::is_same_v<T, Call>) {
            if (i.result != kNoValue) out_ << "%" << name(i.result) << " = ";
            out_ << "call @" << i.callee << "(";
            for (size_t k = 0; k < i.args.size(); ++k) {
              if (k) out_ << ", ";
              out_ << operand(i.args[k]);
            }
            out_ << ")";
          } else if constexpr (std::is_same_v<T, IntToPtr>) {
            out_ << "%" << name(i.result) << " = inttoptr " << operand(i.value);
          } else if constexpr (std::is_same_v<T, PtrToInt>) {
            out_ << "%" << name(i.result) << " = ptrtoint " << operand(i.value);
          } else if constexpr (std::is_same_v<T, IntOp>) {
            out_ << "%" << name(i.result) << " = " << int_op_name(i.op) << " " << operand(i.lhs)
                 << ", " << operand(i.rhs);
          } else if constexpr (std::is_same_v<T, Cmp>) {
            out_ << "%" << name(i.result) << " = cmp " << cmp_name(i.rel) << " " << operand(i.lhs)
                 << ", " << operand(i.rhs);
          } else if constexpr (std::is_same_v<T, ConstInt>) {
            out_ << "%" << name(i.result) << " = const " << i.value;
          } else if constexpr (std::is_same_v<T, Output>) {
            out_ << "output " << operand(i.value);
          } else if constexpr (std::is_same_v<T, SetTag>) {
            out_ << "settag " << operand(i.addr) << ", " << operand(i.size);
          } else if constexpr (std::is_same_v<T, TagPtr>) {
            out_ << "%" << name(i.result) << " = tagptr " << operand(i.base) << ", "
                 << static_cast<int>(i.tag);
          } else if constexpr (std::is_same_v<T, ClearTopTagBit>) {
            out_ << "%" << name(i.result) << " = cleartop " << operand(i.value);
          } else if constexpr (std::is_same_v<T, TfpLoad>) {
            out_ << "%" << name(i.result) << " = tfpload " << operand(i.value) << ", "
                 << addr(i.src_addr, i.src_offset);
          } else if constexpr (std::is_same_v<T, RetagFrame>) {
            out_ << "retagframe";
          }
        },
        inst);
    out_ << "\n";
  }

  void terminator(const Terminator& term) {
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, Unterminated>) {
            // invalid program; nothing to print
          } else if constexpr (std::is_same_v<T, Br>) {
            out_ << "  br " << t.target << "\n";
          } else if constexpr (std::is_same_v<T, CondBr>) {
            out_ << "  br " << operand(t.cond) << ", " << t.if_true << ", " << t.if_false << "\n";
          } else if constexpr (std::is_same_v<T, Ret>) {
            out_ << "  ret";
            if (t.value) out_ << " " << operand(*t.value);
            out_ << "\n";
          }
        },
        term);
  }
};

}  // namespace

std::string print_program(const Program& p) { return Printer(p).program(); }

std::string print_function(const Program& p, const Function& f) {
  Printer pr(p);
  // Reuse the program printer on a single function by printing it directly.
  Program tmp;
  tmp.globals = p.globals;
  tmp.functions.push_back(f);
  std::string all = print_program(tmp);
  // Strip the globals preamble.
  auto pos = all.find("func @");
  return pos == std::string::npos ? all : all.substr(pos);
}

}  // namespace stacktag::ir
