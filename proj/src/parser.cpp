#include "stacktag/parser.hpp"

#include <cctype>
#include <charconv>
#include <map>
#include <set>
#include <string>

namespace stacktag::ir {

namespace {

struct Token {
  std::string text;
  uint32_t col = 0;  // 1-based
};

bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}
bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

// Tokenizes one line; drops ';' comments. Numbers keep a leading '-'.
std::optional<std::string> tokenize(std::string_view line, std::vector<Token>& out) {
  size_t i = 0;
  while (i < line.size()) {
    char c = line[i];
    if (c == ';') break;
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    uint32_t col = static_cast<uint32_t>(i + 1);
    if (c == '%' || c == '@') {
      size_t j = i + 1;
      if (j >= line.size() || !(is_ident_start(line[j]) || std::isdigit(static_cast<unsigned char>(line[j])))) {
        return "expected identifier after '" + std::string(1, c) + "'";
      }
      while (j < line.size() && is_ident_char(line[j])) ++j;
      out.push_back({std::string(line.substr(i, j - i)), col});
      i = j;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '-' && i + 1 < line.size() && std::isdigit(static_cast<unsigned char>(line[i + 1])))) {
      size_t j = i + 1;
      while (j < line.size() && (std::isalnum(static_cast<unsigned char>(line[j])))) ++j;
      out.push_back({std::string(line.substr(i, j - i)), col});
      i = j;
      continue;
    }
    if (is_ident_start(c)) {
      size_t j = i + 1;
      while (j < line.size() && is_ident_char(line[j])) ++j;
      out.push_back({std::string(line.substr(i, j - i)), col});
      i = j;
      continue;
    }
    switch (c) {
      case '(': case ')': case '{': case '}': case '[': case ']':
      case ',': case ':': case '=': case '+': case '-':
        out.push_back({std::string(1, c), col});
        ++i;
        continue;
      default:
        return std::string("unexpected character '") + c + "'";
    }
  }
  return std::nullopt;
}

struct ParseError {
  std::string message;
  uint32_t line = 0;
  uint32_t col = 0;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  ParseResult run() {
    ParseResult result;
    split_lines();
    try {
      prescan_globals();
      parse_functions();
      finish();
      result.program = std::move(program_);
    } catch (const ParseError& e) {
      Diagnostic d;
      d.severity = Severity::Error;
      d.message = e.message;
      d.line = e.line;
      d.col = e.col;
      result.diagnostics.push_back(std::move(d));
    }
    for (auto& d : deferred_diags_) result.diagnostics.push_back(std::move(d));
    if (!result.diagnostics.empty()) result.program.reset();
    return result;
  }

 private:
  std::string_view text_;
  std::vector<std::string_view> lines_;
  Program program_;
  std::vector<Diagnostic> deferred_diags_;

  // per-line parse state
  std::vector<Token> toks_;
  size_t pos_ = 0;
  uint32_t lineno_ = 0;

  // per-function state
  Function* fn_ = nullptr;
  std::map<std::string, ValueId, std::less<>> interned_;
  std::set<ValueId> defined_;
  std::map<ValueId, std::pair<uint32_t, uint32_t>> first_use_;  // id -> (line, col)

  [[noreturn]] void fail(const std::string& msg, uint32_t col = 0) {
    throw ParseError{msg, lineno_, col == 0 ? cur_col() : col};
  }

  uint32_t cur_col() {
    if (pos_ < toks_.size()) return toks_[pos_].col;
    if (!toks_.empty()) return toks_.back().col + static_cast<uint32_t>(toks_.back().text.size());
    return 1;
  }

  void split_lines() {
    size_t start = 0;
    for (size_t i = 0; i <= text_.size(); ++i) {
      if (i == text_.size() || text_[i] == '\n') {
        lines_.push_back(text_.substr(start, i - start));
        start = i + 1;
      }
    }
  }

  bool load_line(size_t idx) {
    toks_.clear();
    pos_ = 0;
    lineno_ = static_cast<uint32_t>(idx + 1);
    if (auto err = tokenize(lines_[idx], toks_)) {
      fail(*err, 1);
    }
    return !toks_.empty();
  }

  bool at_end() const { return pos_ >= toks_.size(); }
  const Token& peek() {
    if (at_end()) fail("unexpected end of line");
    return toks_[pos_];
  }
  Token take() {
    if (at_end()) fail("unexpected end of line");
    return toks_[pos_++];
  }
  bool accept(std::string_view t) {
    if (!at_end() && toks_[pos_].text == t) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(std::string_view t) {
    if (!accept(t)) fail("expected '" + std::string(t) + "'");
  }
  void expect_line_end() {
    if (!at_end()) fail("trailing tokens on line");
  }

  int64_t expect_int() {
    Token t = take();
    std::string_view s = t.text;
    bool neg = false;
    if (!s.empty() && s[0] == '-') neg = true;
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      fail("expected integer, got '" + t.text + "'", t.col);
    }
    (void)neg;
    return v;
  }

  std::string expect_local_name() {
    Token t = take();
    if (t.text.size() < 2 || t.text[0] != '%') fail("expected %value", t.col);
    return t.text.substr(1);
  }

  std::string expect_global_name() {
    Token t = take();
    if (t.text.size() < 2 || t.text[0] != '@') fail("expected @name", t.col);
    return t.text.substr(1);
  }

  std::string expect_word() {
    Token t = take();
    if (t.text.empty() || !(is_ident_start(t.text[0]))) fail("expected identifier", t.col);
    return t.text;
  }

  ValueId intern_use(const std::string& name, uint32_t col) {
    auto it = interned_.find(name);
    if (it != interned_.end()) {
      if (!defined_.contains(it->second)) {
        first_use_.try_emplace(it->second, std::make_pair(lineno_, col));
      }
      return it->second;
    }
    ValueId id = static_cast<ValueId>(fn_->value_names.size());
    fn_->value_names.push_back(name);
    interned_.emplace(name, id);
    first_use_.try_emplace(id, std::make_pair(lineno_, col));
    return id;
  }

  ValueId intern_def(const std::string& name, uint32_t col) {
    auto it = interned_.find(name);
    ValueId id;
    if (it != interned_.end()) {
      id = it->second;
      if (defined_.contains(id)) fail("duplicate definition of %" + name, col);
    } else {
      id = static_cast<ValueId>(fn_->value_names.size());
      fn_->value_names.push_back(name);
      interned_.emplace(name, id);
    }
    defined_.insert(id);
    first_use_.erase(id);
    return id;
  }

  Operand parse_operand() {
    Token t = peek();
    if (t.text[0] == '%') {
      take();
      return Operand::val(intern_use(t.text.substr(1), t.col));
    }
    if (t.text[0] == '@') {
      take();
      auto gi = program_.global_index(t.text.substr(1));
      if (!gi) fail("unknown identifier @" + t.text.substr(1), t.col);
      return Operand::global_ref(*gi);
    }
    if (t.text == "null") {
      take();
      return Operand::immediate(0);
    }
    return Operand::immediate(expect_int());
  }

  // [%p + 8] / [%p - 8] / [@g + 0]
  std::pair<Operand, int64_t> parse_addr() {
    expect("[");
    Operand base = parse_operand();
    int64_t off = 0;
    if (accept("+")) {
      off = expect_int();
    } else if (accept("-")) {
      Token t = peek();
      off = -expect_int();
      (void)t;
    }
    expect("]");
    return {base, off};
  }

  void prescan_globals() {
    for (size_t i = 0; i < lines_.size(); ++i) {
      if (!load_line(i)) continue;
      if (toks_[0].text != "global") continue;
      take();  // global
      GlobalDef g;
      g.name = expect_global_name();
      if (program_.global_index(g.name)) fail("duplicate definition of @" + g.name);
      int64_t size = expect_int();
      if (size < 1) fail("global size must be positive");
      g.size = static_cast<uint64_t>(size);
      if (accept("=")) {
        Token t = take();
        std::string_view h = t.text;
        if (h.size() < 3 || h[0] != '0' || (h[1] != 'x' && h[1] != 'X')) {
          fail("expected hex initializer 0x...", t.col);
        }
        h.remove_prefix(2);
        if (h.size() % 2 != 0) fail("hex initializer needs an even digit count", t.col);
        for (size_t k = 0; k + 1 < h.size() + 1 && k < h.size(); k += 2) {
          auto nib = [&](char c) -> int {
            if (c >= '0' && c <= '9') return c - '0';
            if (c >= 'a' && c <= 'f') return c - 'a' + 10;
            if (c >= 'A' && c <= 'F') return c - 'A' + 10;
            fail("bad hex digit in initializer", t.col);
          };
          g.init.push_back(static_cast<uint8_t>(nib(h[k]) * 16 + nib(h[k + 1])));
        }
        if (g.init.size() > g.size) fail("initializer longer than global size", t.col);
      }
      expect_line_end();
      program_.globals.push_back(std::move(g));
    }
  }

  void parse_functions() {
    size_t i = 0;
    while (i < lines_.size()) {
      if (!load_line(i)) {
        ++i;
        continue;
      }
      if (toks_[0].text == "global") {
        ++i;
        continue;
      }
      if (toks_[0].text == "func") {
        i = parse_function(i);
        continue;
      }
      fail("expected 'func' or 'global' at top level");
    }
  }

  // Returns the index of the line after the closing '}'.
  size_t parse_function(size_t header_idx) {
    load_line(header_idx);
    Function f;
    fn_ = &f;
    interned_.clear();
    defined_.clear();
    first_use_.clear();

    expect("func");
    f.name = expect_global_name();
    if (program_.find_function(f.name)) fail("duplicate definition of @" + f.name);
    expect("(");
    if (!accept(")")) {
      while (true) {
        Param p;
        Token t = take();
        if (t.text.size() < 2 || t.text[0] != '%') fail("expected %param", t.col);
        p.name = t.text.substr(1);
        expect(":");
        std::string k = expect_word();
        if (k == "i64") {
          p.kind = Kind::Int;
        } else if (k == "ptr") {
          p.kind = Kind::Ptr;
        } else {
          fail("parameter kind must be i64 or ptr");
        }
        f.params.push_back(p);
        ValueId id = static_cast<ValueId>(f.value_names.size());
        if (interned_.contains(p.name)) fail("duplicate parameter %" + p.name, t.col);
        f.value_names.push_back(p.name);
        interned_.emplace(p.name, id);
        defined_.insert(id);
        if (accept(")")) break;
        expect(",");
      }
    }
    if (accept("[")) {
      while (true) {
        std::string attr = expect_word();
        if (attr == "reset") {
          // tolerate "reset - tags" tokenization of reset-tags
          expect("-");
          std::string rest = expect_word();
          if (rest != "tags") fail("unknown attribute");
          f.reset_tags = true;
        } else if (attr == "reset-tags") {
          f.reset_tags = true;
        } else {
          fail("unknown attribute '" + attr + "'");
        }
        if (accept("]")) break;
        expect(",");
      }
    }
    expect("{");
    expect_line_end();

    BasicBlock* block = nullptr;
    size_t i = header_idx + 1;
    bool closed = false;
    for (; i < lines_.size(); ++i) {
      if (!load_line(i)) continue;
      if (toks_[0].text == "}") {
        take();
        expect_line_end();
        closed = true;
        ++i;
        break;
      }
      // Label line: ident ':'
      if (toks_.size() == 2 && toks_[1].text == ":" && is_ident_start(toks_[0].text[0])) {
        for (const auto& b : f.blocks) {
          if (b.label == toks_[0].text) fail("duplicate block label '" + toks_[0].text + "'");
        }
        f.blocks.push_back(BasicBlock{});
        f.blocks.back().label = toks_[0].text;
        block = &f.blocks.back();
        continue;
      }
      if (!block) fail("instruction outside of a block (missing label?)");
      parse_block_line(*block);
    }
    if (!closed) fail("missing '}' at end of function");

    // Every referenced value must have a definition somewhere in the body.
    for (const auto& [name, id] : interned_) {
      if (!defined_.contains(id)) {
        auto it = first_use_.find(id);
        Diagnostic d;
        d.severity = Severity::Error;
        d.message = "unknown identifier %" + name + " in @" + f.name;
        if (it != first_use_.end()) {
          d.line = it->second.first;
          d.col = it->second.second;
        }
        deferred_diags_.push_back(std::move(d));
      }
    }
    fn_ = nullptr;
    program_.functions.push_back(std::move(f));
    return i;
  }

  void parse_block_line(BasicBlock& block) {
    Token first = peek();

    if (first.text == "br") {
      take();
      if (block.terminated()) fail("block '" + block.label + "' has multiple terminators");
      // br %c, a, b  |  br a
      if (!at_end() && peek().text[0] == '%') {
        Operand cond = parse_operand();
        expect(",");
        std::string t1 = expect_word();
        expect(",");
        std::string t2 = expect_word();
        expect_line_end();
        block.term = CondBr{cond, t1, t2};
      } else {
        std::string t1 = expect_word();
        expect_line_end();
        block.term = Br{t1};
      }
      return;
    }
    if (first.text == "ret") {
      take();
      if (block.terminated()) fail("block '" + block.label + "' has multiple terminators");
      Ret r;
      if (!at_end()) r.value = parse_operand();
      expect_line_end();
      block.term = r;
      return;
    }
    if (first.text == "store" || first.text.rfind("store.", 0) == 0) {
      parse_store(block);
      return;
    }
    if (first.text == "call") {
      take();
      Call c;
      c.callee = expect_global_name();
      parse_call_args(c);
      expect_line_end();
      append(block, std::move(c));
      return;
    }
    if (first.text == "output") {
      take();
      Output o;
      o.value = parse_operand();
      expect_line_end();
      append(block, std::move(o));
      return;
    }
    if (first.text == "settag") {
      take();
      SetTag s;
      s.addr = parse_operand();
      expect(",");
      s.size = parse_operand();
      expect_line_end();
      append(block, std::move(s));
      return;
    }
    if (first.text == "retagframe") {
      take();
      expect_line_end();
      append(block, RetagFrame{});
      return;
    }
    // Defining instruction: %x = op ...
    if (first.text[0] != '%') fail("expected instruction", first.col);
    Token def = take();
    expect("=");
    std::string op = expect_word();

    if (op == "phi") {
      Phi phi;
      phi.result = intern_def(def.text.substr(1), def.col);
      while (true) {
        expect("[");
        Operand v = parse_operand();
        expect(",");
        std::string label = expect_word();
        expect("]");
        phi.incoming.emplace_back(label, v);
        if (!accept(",")) break;
      }
      expect_line_end();
      if (!block.body.empty() || block.terminated()) {
        fail("phi must precede all instructions in its block", def.col);
      }
      block.phis.push_back(std::move(phi));
      return;
    }

    Instruction inst = parse_defining_op(op, def);
    expect_line_end();
    append(block, std::move(inst));
  }

  void append(BasicBlock& block, Instruction inst) {
    if (block.terminated()) {
      fail("instruction after terminator in block '" + block.label + "'");
    }
    block.body.push_back(std::move(inst));
  }

  void parse_call_args(Call& c) {
    expect("(");
    if (accept(")")) return;
    while (true) {
      c.args.push_back(parse_operand());
      if (accept(")")) break;
      expect(",");
    }
  }

  static std::optional<std::pair<uint8_t, Kind>> width_of_suffix(std::string_view s) {
    if (s == "i8") return {{1, Kind::Int}};
    if (s == "i16") return {{2, Kind::Int}};
    if (s == "i32") return {{4, Kind::Int}};
    if (s == "i64") return {{8, Kind::Int}};
    if (s == "ptr") return {{8, Kind::Ptr}};
    return std::nullopt;
  }

  void parse_store(BasicBlock& block) {
    Token t = take();
    auto dot = t.text.find('.');
    if (dot == std::string::npos) fail("store needs a width suffix, e.g. store.i32", t.col);
    auto wk = width_of_suffix(std::string_view(t.text).substr(dot + 1));
    if (!wk) fail("bad store width suffix", t.col);
    Store s;
    s.width = wk->first;
    s.kind = wk->second;
    auto [addr, off] = parse_addr();
    s.addr = addr;
    s.offset = off;
    expect("=");
    s.value = parse_operand();
    expect_line_end();
    append(block, std::move(s));
  }

  Instruction parse_defining_op(const std::string& op, const Token& def) {
    auto res = [&] { return intern_def(def.text.substr(1), def.col); };

    if (op == "alloca") {
      Alloca a;
      Token t = peek();
      if (t.text[0] == '%') {
        a.count = parse_operand();
        std::string x = expect_word();
        if (x != "x") fail("expected 'x' in dynamic alloca");
        int64_t elem = expect_int();
        if (elem < 1) fail("alloca element size must be positive");
        a.size = static_cast<uint64_t>(elem);
        a.align = 1;
      } else {
        int64_t size = expect_int();
        if (size < 1) fail("alloca size must be positive");
        a.size = static_cast<uint64_t>(size);
      }
      if (accept(",")) {
        std::string al = expect_word();
        if (al != "align") fail("expected 'align'");
        int64_t v = expect_int();
        if (v < 1 || v > 64 || (v & (v - 1)) != 0) fail("align must be a power of two <= 64");
        a.align = static_cast<uint32_t>(v);
      }
      a.result = res();
      return a;
    }
    if (op.rfind("load.", 0) == 0) {
      auto wk = width_of_suffix(std::string_view(op).substr(5));
      if (!wk) fail("bad load width suffix");
      Load l;
      l.width = wk->first;
      l.kind = wk->second;
      auto [addr, off] = parse_addr();
      l.addr = addr;
      l.offset = off;
      l.result = res();
      return l;
    }
    if (op == "gep" || op == "gep.fixtag") {
      Gep g;
      g.fix_tag = (op == "gep.fixtag");
      g.base = parse_operand();
      expect(",");
      g.index = parse_operand();
      expect(",");
      std::string sc = expect_word();
      if (sc != "scale") fail("expected 'scale'");
      g.scale = expect_int();
      expect(",");
      std::string of = expect_word();
      if (of != "off") fail("expected 'off'");
      g.offset = expect_int();
      g.result = res();
      return g;
    }
    if (op == "call") {
      Call c;
      c.callee = expect_global_name();
      parse_call_args(c);
      c.result = res();
      return c;
    }
    if (op == "inttoptr") {
      IntToPtr i;
      i.value = parse_operand();
      i.result = res();
      return i;
    }
    if (op == "ptrtoint") {
      PtrToInt i;
      i.value = parse_operand();
      i.result = res();
      return i;
    }
    if (op == "cmp") {
      Cmp c;
      std::string rel = expect_word();
      auto r = cmp_from_name(rel);
      if (!r) fail("unknown comparison '" + rel + "'");
      c.rel = *r;
      c.lhs = parse_operand();
      expect(",");
      c.rhs = parse_operand();
      c.result = res();
      return c;
    }
    if (op == "const") {
      ConstInt c;
      c.value = expect_int();
      c.result = res();
      return c;
    }
    if (op == "tagptr") {
      TagPtr t;
      t.base = parse_operand();
      expect(",");
      int64_t tag = expect_int();
      if (tag < 0 || tag > 15) fail("tag must be in [0, 15]");
      t.tag = static_cast<uint8_t>(tag);
      t.result = res();
      return t;
    }
    if (op == "cleartop") {
      ClearTopTagBit c;
      c.value = parse_operand();
      c.result = res();
      return c;
    }
    if (op == "tfpload") {
      TfpLoad t;
      t.value = parse_operand();
      expect(",");
      auto [addr, off] = parse_addr();
      t.src_addr = addr;
      t.src_offset = off;
      t.result = res();
      return t;
    }
    if (auto iop = int_op_from_name(op)) {
      IntOp i;
      i.op = *iop;
      i.lhs = parse_operand();
      expect(",");
      i.rhs = parse_operand();
      i.result = res();
      return i;
    }
    fail("unknown instruction '" + op + "'");
  }

  void finish() {
    if (program_.functions.empty()) {
      throw ParseError{"no functions in program", 1, 1};
    }
  }
};

}  // namespace

ParseResult parse_program(std::string_view text) { return Parser(text).run(); }

}  // namespace stacktag::ir
