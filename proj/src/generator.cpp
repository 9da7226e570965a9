#include <random>

#include "stacktag/harness.hpp"

// Random well-formed programs for the conservativeness fuzz loop: bounded
// straight-line code with loops (affine and unknown bounds), diamonds,
// pointer stores through local cells and globals, helper calls with constant
// pointer offsets, and occasional dynamic allocas. Inputs arrive through the
// @args global so runs can push loops past their bounds.
namespace stacktag::harness {

using namespace stacktag::ir;

namespace {

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  uint64_t next() { return eng_(); }
  uint32_t below(uint32_t n) { return n == 0 ? 0 : static_cast<uint32_t>(eng_() % n); }
  int64_t range(int64_t lo, int64_t hi) {  // inclusive
    return lo + static_cast<int64_t>(eng_() % static_cast<uint64_t>(hi - lo + 1));
  }
  bool chance(uint32_t percent) { return below(100) < percent; }

 private:
  std::mt19937_64 eng_;
};

struct FnBuilder {
  Function f;
  Program* prog = nullptr;
  size_t cur = 0;
  int label_n = 0;

  explicit FnBuilder(std::string name) {
    f.name = std::move(name);
    f.blocks.push_back(BasicBlock{});
    f.blocks[0].label = "entry";
  }

  ValueId param(std::string name, Kind k) {
    f.params.push_back({name, k});
    f.value_names.push_back(std::move(name));
    return static_cast<ValueId>(f.value_names.size() - 1);
  }

  ValueId val(const std::string& hint) { return f.new_value(hint); }
  BasicBlock& block() { return f.blocks[cur]; }
  void emit(Instruction i) { block().body.push_back(std::move(i)); }

  size_t new_block(const std::string& hint) {
    f.blocks.push_back(BasicBlock{});
    f.blocks.back().label = hint + std::to_string(label_n++);
    return f.blocks.size() - 1;
  }

  void br_to(size_t target) {
    block().term = Br{f.blocks[target].label};
    cur = target;
  }
};

struct SlotDesc {
  ValueId value = kNoValue;
  uint64_t size = 0;
  bool is_cell = false;     // 8-byte pointer cell
  bool cell_ready = false;  // cell holds a valid pointer
  uint64_t pointee_size = 0;
};

class ProgramGen {
 public:
  ProgramGen(uint64_t seed, const GeneratorParams& params) : rng_(seed), params_(params) {}

  Program build() {
    prog_.entry = "main";
    GlobalDef args;
    args.name = "args";
    args.size = 32;
    prog_.globals.push_back(args);
    use_gptr_ = rng_.chance(50);
    if (use_gptr_) {
      GlobalDef g;
      g.name = "gcell";
      g.size = 8;
      prog_.globals.push_back(g);
    }
    uint32_t helpers = rng_.below(params_.max_functions);  // 0..max-1
    for (uint32_t i = 0; i < helpers; ++i) build_helper(i, helpers);
    build_main();
    return std::move(prog_);
  }

 private:
  Rng rng_;
  GeneratorParams params_;
  Program prog_;
  bool use_gptr_ = false;

  Operand gi(int64_t v) { return Operand::immediate(v); }

  Operand global_ref(const std::string& name) {
    return Operand::global_ref(*prog_.global_index(name));
  }

  // Helpers take (%p: ptr, %n: i64); their behaviour shapes what the caller's
  // allocation can prove.
  void build_helper(uint32_t index, uint32_t total) {
    FnBuilder b("helper" + std::to_string(index));
    ValueId p = b.param("p", Kind::Ptr);
    ValueId n = b.param("n", Kind::Int);
    uint32_t kind = rng_.below(5);
    if (kind == 2 && index + 1 >= total) kind = 0;
    if (kind == 3 && !use_gptr_) kind = 0;
    switch (kind) {
      case 0: {  // constant accesses within [0, 8)
        b.emit(Store{Operand::val(p), 0, 8, Kind::Int, Operand::val(n)});
        ValueId v = b.val("v");
        b.emit(Load{v, Operand::val(p), 0, 8, Kind::Int});
        b.block().term = Ret{Operand::val(v)};
        break;
      }
      case 1: {  // small affine loop over the argument
        int64_t elems = rng_.range(1, 2);
        size_t head = b.new_block("h");
        size_t body = b.new_block("l");
        size_t exit = b.new_block("x");
        b.br_to(head);
        ValueId i = b.val("i");
        ValueId inext = b.f.new_value("i.next");
        b.block().phis.push_back(
            Phi{i, {{"entry", gi(0)}, {b.f.blocks[body].label, Operand::val(inext)}}});
        ValueId c = b.val("c");
        b.emit(Cmp{c, CmpKind::Lt, Operand::val(i), gi(elems)});
        b.block().term = CondBr{Operand::val(c), b.f.blocks[body].label, b.f.blocks[exit].label};
        b.cur = body;
        ValueId q = b.val("q");
        b.emit(Gep{q, Operand::val(p), Operand::val(i), 4, 0, false});
        b.emit(Store{Operand::val(q), 0, 4, Kind::Int, gi(rng_.range(1, 9))});
        b.emit(IntOp{inext, IntOpKind::Add, Operand::val(i), gi(1)});
        b.block().term = Br{b.f.blocks[head].label};
        b.cur = exit;
        b.block().term = Ret{Operand::val(n)};
        break;
      }
      case 2: {  // pass deeper with a constant offset
        int64_t off = rng_.chance(50) ? 8 : 0;
        ValueId q = b.val("q");
        b.emit(Gep{q, Operand::val(p), gi(0), 1, off, false});
        ValueId r = b.val("r");
        b.emit(Call{r, "helper" + std::to_string(index + 1), {Operand::val(q), Operand::val(n)}});
        b.block().term = Ret{Operand::val(r)};
        break;
      }
      case 3: {  // escape to a global, then use through the reload
        b.emit(Store{global_ref("gcell"), 0, 8, Kind::Ptr, Operand::val(p)});
        ValueId r = b.val("r");
        b.emit(Load{r, global_ref("gcell"), 0, 8, Kind::Ptr});
        b.emit(Store{Operand::val(r), 0, 8, Kind::Int, Operand::val(n)});
        b.block().term = Ret{Operand::val(n)};
        break;
      }
      default: {  // round-trip through a local pointer cell
        ValueId cell = b.val("cell");
        b.block().body.insert(b.block().body.begin(), Alloca{cell, 8, std::nullopt, 1});
        b.emit(Store{Operand::val(cell), 0, 8, Kind::Ptr, Operand::val(p)});
        ValueId r = b.val("r");
        b.emit(Load{r, Operand::val(cell), 0, 8, Kind::Ptr});
        b.emit(Store{Operand::val(r), 0, 8, Kind::Int, Operand::val(n)});
        b.block().term = Ret{Operand::val(n)};
        break;
      }
    }
    prog_.functions.push_back(std::move(b.f));
  }

  void build_main() {
    FnBuilder b("main");

    uint32_t nslots = 2 + rng_.below(params_.max_allocas - 1);
    static constexpr uint64_t kSizes[] = {8, 16, 16, 32, 48};
    std::vector<SlotDesc> slots;
    for (uint32_t i = 0; i < nslots; ++i) {
      SlotDesc s;
      s.value = b.val("s" + std::to_string(i));
      if (i > 0 && rng_.chance(25)) {
        s.size = 8;
        s.is_cell = true;
      } else {
        s.size = kSizes[rng_.below(5)];
      }
      b.emit(Alloca{s.value, s.size, std::nullopt, 1});
      slots.push_back(s);
    }

    // Inputs.
    ValueId arg0 = b.val("a0"), arg1 = b.val("a1"), arg2 = b.val("a2");
    b.emit(Load{arg0, global_ref("args"), 0, 8, Kind::Int});
    b.emit(Load{arg1, global_ref("args"), 8, 8, Kind::Int});
    b.emit(Load{arg2, global_ref("args"), 16, 8, Kind::Int});

    ValueId acc = b.val("acc");
    b.emit(ConstInt{acc, 0});

    uint32_t loops = 0;
    uint32_t nops = 3 + rng_.below(7);
    for (uint32_t op = 0; op < nops; ++op) {
      uint32_t pick = rng_.below(11);
      SlotDesc& slot = slots[rng_.below(static_cast<uint32_t>(slots.size()))];
      switch (pick) {
        case 0:
        case 1: {  // constant in-bounds store + load into acc
          int64_t off = 8 * rng_.range(0, static_cast<int64_t>(slot.size / 8) - 1);
          if (slot.is_cell && slot.cell_ready) break;  // keep cells kind-pure once live
          b.emit(Store{Operand::val(slot.value), off, 8, Kind::Int, Operand::val(arg0)});
          ValueId v = b.val("v");
          b.emit(Load{v, Operand::val(slot.value), off, 8, Kind::Int});
          ValueId nacc = b.val("acc");
          b.emit(IntOp{nacc, IntOpKind::Add, Operand::val(acc), Operand::val(v)});
          acc = nacc;
          slot.is_cell = false;
          break;
        }
        case 2: {  // constant gep access, occasionally past the end
          if (slot.is_cell) break;
          int64_t idx = rng_.range(0, static_cast<int64_t>(slot.size / 4) - 1);
          if (rng_.chance(12)) idx += static_cast<int64_t>(slot.size / 4);  // deliberate OOB
          ValueId q = b.val("q");
          b.emit(Gep{q, Operand::val(slot.value), gi(idx), 4, 0, false});
          b.emit(Store{Operand::val(q), 0, 4, Kind::Int, gi(rng_.range(0, 99))});
          break;
        }
        case 3:
        case 4: {  // affine loop; bound constant or from inputs
          if (loops >= params_.max_loops || slot.is_cell) break;
          ++loops;
          bool arg_bound = rng_.chance(60);
          int64_t scale = rng_.chance(70) ? 4 : 8;
          int64_t max_elems = static_cast<int64_t>(slot.size) / scale;
          Operand bound = arg_bound ? Operand::val(arg1) : gi(rng_.range(1, max_elems));
          size_t head = b.new_block("h");
          size_t body = b.new_block("l");
          size_t exit = b.new_block("x");
          std::string pred = b.block().label;
          b.br_to(head);
          ValueId i = b.val("i");
          ValueId inext = b.f.new_value("i.next");
          b.block().phis.push_back(
              Phi{i, {{pred, gi(0)}, {b.f.blocks[body].label, Operand::val(inext)}}});
          ValueId c = b.val("c");
          b.emit(Cmp{c, CmpKind::Lt, Operand::val(i), bound});
          b.block().term =
              CondBr{Operand::val(c), b.f.blocks[body].label, b.f.blocks[exit].label};
          b.cur = body;
          ValueId q = b.val("q");
          b.emit(Gep{q, Operand::val(slot.value), Operand::val(i), scale, 0, false});
          b.emit(Store{Operand::val(q), 0, static_cast<uint8_t>(scale == 8 ? 8 : 4), Kind::Int,
                       Operand::val(arg0)});
          b.emit(IntOp{inext, IntOpKind::Add, Operand::val(i), gi(1)});
          b.block().term = Br{b.f.blocks[head].label};
          b.cur = exit;
          break;
        }
        case 5: {  // pointer cell round trip
          SlotDesc* cell = nullptr;
          SlotDesc* pointee = nullptr;
          for (auto& s : slots) {
            if (s.is_cell && !cell) cell = &s;
            if (!s.is_cell && s.size >= 8 && !pointee) pointee = &s;
          }
          if (!cell || !pointee) break;
          if (!cell->cell_ready && rng_.chance(25)) {
            // poison the cell with a narrow integer write first: it stays
            // usable but stops being pointer-safe
            b.emit(Store{Operand::val(cell->value), 0, 1, Kind::Int, gi(0)});
          }
          b.emit(Store{Operand::val(cell->value), 0, 8, Kind::Ptr, Operand::val(pointee->value)});
          cell->cell_ready = true;
          cell->pointee_size = pointee->size;
          ValueId r = b.val("r");
          b.emit(Load{r, Operand::val(cell->value), 0, 8, Kind::Ptr});
          b.emit(Store{Operand::val(r), 0, 8, Kind::Int, Operand::val(arg2)});
          break;
        }
        case 6: {  // escape through the global pointer cell
          if (!use_gptr_ || slot.is_cell || slot.size < 8) break;
          b.emit(Store{global_ref("gcell"), 0, 8, Kind::Ptr, Operand::val(slot.value)});
          ValueId r = b.val("r");
          b.emit(Load{r, global_ref("gcell"), 0, 8, Kind::Ptr});
          b.emit(Store{Operand::val(r), 0, 8, Kind::Int, gi(rng_.range(0, 50))});
          break;
        }
        case 7: {  // helper call with a constant offset
          uint32_t nhelp = static_cast<uint32_t>(prog_.functions.size());
          if (nhelp == 0 || slot.is_cell) break;
          uint32_t h = rng_.below(nhelp);
          int64_t off = rng_.chance(30) && slot.size >= 16 ? 8 : 0;
          ValueId q = b.val("q");
          b.emit(Gep{q, Operand::val(slot.value), gi(0), 1, off, false});
          ValueId r = b.val("r");
          b.emit(Call{r, prog_.functions[h].name, {Operand::val(q), Operand::val(arg1)}});
          ValueId nacc = b.val("acc");
          b.emit(IntOp{nacc, IntOpKind::Add, Operand::val(acc), Operand::val(r)});
          acc = nacc;
          break;
        }
        case 8: {  // unknown single index from inputs
          if (slot.is_cell) break;
          ValueId q = b.val("q");
          b.emit(Gep{q, Operand::val(slot.value), Operand::val(arg2), 4, 0, false});
          b.emit(Store{Operand::val(q), 0, 4, Kind::Int, gi(5)});
          break;
        }
        case 9: {  // descending walk; the low bound may push below zero
          if (loops >= params_.max_loops || slot.is_cell) break;
          ++loops;
          int64_t scale = 8;
          int64_t top = static_cast<int64_t>(slot.size) / scale - 1;
          Operand low_bound;
          ValueId lo = kNoValue;
          if (rng_.chance(50)) {
            low_bound = gi(0);
          } else {
            lo = b.val("lo");
            b.emit(IntOp{lo, IntOpKind::Sub, gi(0), Operand::val(arg2)});
            low_bound = Operand::val(lo);
          }
          size_t head = b.new_block("h");
          size_t body = b.new_block("l");
          size_t exit = b.new_block("x");
          std::string pred = b.block().label;
          b.br_to(head);
          ValueId i = b.val("i");
          ValueId inext = b.f.new_value("i.next");
          b.block().phis.push_back(
              Phi{i, {{pred, gi(top)}, {b.f.blocks[body].label, Operand::val(inext)}}});
          ValueId c = b.val("c");
          b.emit(Cmp{c, CmpKind::Ge, Operand::val(i), low_bound});
          b.block().term =
              CondBr{Operand::val(c), b.f.blocks[body].label, b.f.blocks[exit].label};
          b.cur = body;
          ValueId q = b.val("q");
          b.emit(Gep{q, Operand::val(slot.value), Operand::val(i), scale, 0, false});
          b.emit(Store{Operand::val(q), 0, 8, Kind::Int, Operand::val(arg0)});
          b.emit(IntOp{inext, IntOpKind::Sub, Operand::val(i), gi(1)});
          b.block().term = Br{b.f.blocks[head].label};
          b.cur = exit;
          break;
        }
        default: {  // diamond with a phi of constants
          size_t tb = b.new_block("t");
          size_t eb = b.new_block("e");
          size_t jb = b.new_block("j");
          ValueId c = b.val("c");
          b.emit(Cmp{c, CmpKind::Lt, Operand::val(arg0), gi(rng_.range(0, 8))});
          b.block().term = CondBr{Operand::val(c), b.f.blocks[tb].label, b.f.blocks[eb].label};
          b.cur = tb;
          if (!slot.is_cell) {
            b.emit(Store{Operand::val(slot.value), 0, 4, Kind::Int, gi(1)});
          }
          b.block().term = Br{b.f.blocks[jb].label};
          b.cur = eb;
          b.block().term = Br{b.f.blocks[jb].label};
          b.cur = jb;
          ValueId m = b.val("m");
          b.block().phis.push_back(
              Phi{m, {{b.f.blocks[tb].label, gi(3)}, {b.f.blocks[eb].label, gi(4)}}});
          ValueId nacc = b.val("acc");
          b.emit(IntOp{nacc, IntOpKind::Add, Operand::val(acc), Operand::val(m)});
          acc = nacc;
          break;
        }
      }
    }

    // Occasional dynamic alloca behind a positivity check.
    if (rng_.chance(25)) {
      size_t use = b.new_block("d");
      size_t join = b.new_block("j");
      ValueId c = b.val("c");
      b.emit(Cmp{c, CmpKind::Gt, Operand::val(arg1), gi(0)});
      b.block().term = CondBr{Operand::val(c), b.f.blocks[use].label, b.f.blocks[join].label};
      b.cur = use;
      ValueId d = b.val("dyn");
      b.emit(Alloca{d, 8, Operand::val(arg1), 1});
      b.emit(Store{Operand::val(d), 0, 8, Kind::Int, Operand::val(arg0)});
      b.block().term = Br{b.f.blocks[join].label};
      b.cur = join;
    }

    // Read a couple of slots back so corruption shows up in the output.
    for (uint32_t i = 0; i < 2 && i < slots.size(); ++i) {
      if (slots[i].is_cell) continue;
      ValueId v = b.val("v");
      b.emit(Load{v, Operand::val(slots[i].value), 0, 8, Kind::Int});
      ValueId nacc = b.val("acc");
      b.emit(IntOp{nacc, IntOpKind::Add, Operand::val(acc), Operand::val(v)});
      acc = nacc;
    }
    b.emit(Output{Operand::val(acc)});
    b.block().term = Ret{Operand::val(acc)};
    prog_.functions.push_back(std::move(b.f));
  }
};

}  // namespace

Program generate_program(uint64_t seed, const GeneratorParams& params) {
  return ProgramGen(seed, params).build();
}

}  // namespace stacktag::harness
