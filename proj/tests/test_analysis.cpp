#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "stacktag/analysis.hpp"
#include "stacktag/harness.hpp"
#include "stacktag/parser.hpp"
#include "stacktag/validate.hpp"

using namespace stacktag;
using namespace stacktag::analysis;
using stacktag::ir::Program;

namespace {

Program load_corpus(const std::string& name) {
  std::ifstream in(std::string(STACKTAG_CORPUS_DIR) + "/" + name);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  auto r = ir::parse_and_validate(ss.str());
  REQUIRE(r.ok());
  return std::move(*r.program);
}

Program parse(const char* text) {
  auto r = ir::parse_and_validate(text);
  if (!r.ok()) {
    for (auto& d : r.diagnostics) MESSAGE(d.to_string());
  }
  REQUIRE(r.ok());
  return std::move(*r.program);
}

uint32_t func_index(const Program& p, std::string_view name) {
  for (uint32_t i = 0; i < p.functions.size(); ++i) {
    if (p.functions[i].name == name) return i;
  }
  REQUIRE(false);
  return 0;
}

}  // namespace

TEST_CASE("byte range union is the smallest cover") {
  auto a = ByteRange::of(0, 8);
  auto b = ByteRange::of(10, 14);
  CHECK(a.union_with(b) == ByteRange::of(0, 14));
  CHECK(a.union_with(ByteRange::empty_range()) == a);
  CHECK(ByteRange::full_range().union_with(a) == ByteRange::full_range());
  std::mt19937_64 rng(3);
  for (int i = 0; i < 300; ++i) {
    int64_t l1 = static_cast<int64_t>(rng() % 100), l2 = static_cast<int64_t>(rng() % 100);
    auto r1 = ByteRange::of(l1, l1 + 1 + static_cast<int64_t>(rng() % 50));
    auto r2 = ByteRange::of(l2, l2 + 1 + static_cast<int64_t>(rng() % 50));
    auto u = r1.union_with(r2);
    CHECK(u.contains(r1));
    CHECK(u.contains(r2));
    CHECK(u == r2.union_with(r1));
  }
}

TEST_CASE("merge_use_info applies the offset before widening") {
  UseInfo dst, src;
  dst.range = ByteRange::of(0, 8);
  src.range = ByteRange::of(0, 4);
  merge_use_info(dst, src, 10);
  CHECK(dst.range == ByteRange::of(0, 14));
}

TEST_CASE("merge_use_info propagates unsafe monotonically") {
  UseInfo dst, src;
  src.set_unsafe("test");
  merge_use_info(dst, src, 0);
  CHECK(dst.unsafe);
  UseInfo clean;
  merge_use_info(dst, clean, 0);
  CHECK(dst.unsafe);
}

TEST_CASE("merge_use_info is idempotent on identical records") {
  UseInfo u;
  u.range = ByteRange::of(4, 20);
  u.calls.push_back({"f", 0, 8});
  u.linear.start_range = ByteRange::of(0, 4);
  u.linear.linear_range = ByteRange::of(0, ByteRange::kMax);
  u.linear.max_step = 4;
  UseInfo before = u;
  merge_use_info(u, before, 0);
  CHECK(u == before);
}

TEST_CASE("merging only widens (random property)") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200; ++i) {
    UseInfo dst, src;
    dst.range = ByteRange::of(static_cast<int64_t>(rng() % 50), 50 + static_cast<int64_t>(rng() % 50));
    src.range = ByteRange::of(static_cast<int64_t>(rng() % 50), 50 + static_cast<int64_t>(rng() % 50));
    src.unsafe = rng() % 2 == 0;
    int64_t off = static_cast<int64_t>(rng() % 40) - 20;
    UseInfo before = dst;
    merge_use_info(dst, src, off);
    CHECK(dst.range.contains(before.range));
    if (before.unsafe) CHECK(dst.unsafe);
  }
}

TEST_CASE("induction recognition") {
  Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %buf = alloca 16\n"
      "  %n = load.i64 [@args + 0]\n"
      "  br head\n"
      "head:\n"
      "  %i = phi [ 0, entry ], [ %i1, body ]\n"
      "  %c = cmp lt %i, %n\n"
      "  br %c, body, out\n"
      "body:\n"
      "  %q = gep %buf, %i, scale 4, off 0\n"
      "  store.i32 [%q + 0] = 1\n"
      "  %i1 = add %i, 1\n"
      "  br head\n"
      "out:\n"
      "  ret 0\n"
      "}\n");
  const ir::Function& f = *p.find_function("main");
  auto i = f.value_by_name("i");
  REQUIRE(i.has_value());
  auto fact = recognize_induction(f, *i);
  REQUIRE(fact.has_value());
  CHECK(fact->initial == 0);
  CHECK(fact->step == 1);

  // the gep in `body`
  const auto* gep = std::get_if<ir::Gep>(&f.blocks[2].body[0]);
  REQUIRE(gep != nullptr);
  auto lin = detect_linear_access(f, *gep, 0, 4);
  REQUIRE(lin.has_value());
  CHECK(lin->start_range == ByteRange::of(0, 4));
  REQUIRE(lin->max_step.has_value());
  CHECK(*lin->max_step == 4);
  CHECK(lin->linear_range.hi == ByteRange::kMax);
}

TEST_CASE("non-affine index yields no linear fact") {
  Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %buf = alloca 16\n"
      "  %end = load.i64 [@args + 0]\n"
      "  %q = gep %buf, %end, scale 4, off 0\n"
      "  store.i32 [%q + 0] = 9\n"
      "  ret 0\n"
      "}\n");
  const ir::Function& f = *p.find_function("main");
  const auto* gep = std::get_if<ir::Gep>(&f.blocks[0].body[2]);
  REQUIRE(gep != nullptr);
  CHECK_FALSE(detect_linear_access(f, *gep, 0, 4).has_value());

  auto result = analyze(p);
  const auto* rep = result.find_alloca("main", "buf");
  REQUIRE(rep != nullptr);
  CHECK(rep->safety.cls == Safety::Unsafe);
  CHECK(result.find_use_info(BaseId{0, BaseKind::Alloca, rep->value})->range.full());
}

TEST_CASE("constant access has a degenerate linear fact") {
  Program p = parse(
      "func @main() {\n"
      "entry:\n"
      "  %buf = alloca 16\n"
      "  %q = gep %buf, 1, scale 8, off 0\n"
      "  store.i64 [%q + 0] = 1\n"
      "  ret 0\n"
      "}\n");
  const ir::Function& f = *p.find_function("main");
  const auto* gep = std::get_if<ir::Gep>(&f.blocks[0].body[1]);
  auto lin = detect_linear_access(f, *gep, 0, 8);
  REQUIRE(lin.has_value());
  CHECK(lin->start_range == ByteRange::of(8, 16));
  CHECK(lin->linear_range == ByteRange::of(8, 16));
  CHECK_FALSE(lin->max_step.has_value());
}

TEST_CASE("function pass: listing2 local facts") {
  Program p = load_corpus("listing2.ir");
  ProgramTables tables;
  for (uint32_t i = 0; i < p.functions.size(); ++i) run_function_pass(p, i, tables);

  uint32_t f1 = func_index(p, "func_1");
  uint32_t f2 = func_index(p, "func_2");
  const ir::Function& func1 = p.functions[f1];

  auto a_id = *func1.value_by_name("A");
  auto b_id = *func1.value_by_name("B");
  auto ptr_id = *func1.value_by_name("ptr");
  auto load_id = *func1.value_by_name("0");

  const UseInfo& a = tables.at(BaseId{f1, BaseKind::Alloca, a_id});
  CHECK(a.calls.empty());
  CHECK(a.stored_in.empty());
  CHECK_FALSE(a.unsafe);
  CHECK(a.range == ByteRange::of(0, 8));

  const UseInfo& b = tables.at(BaseId{f1, BaseKind::Alloca, b_id});
  CHECK(b.range.empty());
  REQUIRE(b.stored_in.size() == 1);
  CHECK(b.stored_in[0].site == BaseId{f1, BaseKind::Alloca, ptr_id});
  CHECK(b.stored_in[0].value_offset == 0);

  const UseInfo& ls = tables.at(BaseId{f1, BaseKind::LoadSite, load_id});
  REQUIRE(ls.calls.size() == 1);
  CHECK(ls.calls[0].callee == "func_2");
  CHECK(ls.calls[0].param_index == 0);
  CHECK(ls.calls[0].offset == 0);

  const UseInfo& arg = tables.at(BaseId{f2, BaseKind::Argument, 0});
  CHECK(arg.range == ByteRange::of(0, 4));
}

TEST_CASE("pointer cast to integer poisons the allocation") {
  Program p = parse(
      "func @main() {\n"
      "entry:\n"
      "  %a = alloca 8\n"
      "  %x = ptrtoint %a\n"
      "  output %x\n"
      "  ret 0\n"
      "}\n");
  ProgramTables tables;
  run_function_pass(p, 0, tables);
  const UseInfo& u = tables.at(BaseId{0, BaseKind::Alloca, *p.functions[0].value_by_name("a")});
  CHECK(u.unsafe);
}

TEST_CASE("single in-bounds access stays clean") {
  Program p = parse(
      "func @main() {\n"
      "entry:\n"
      "  %a = alloca 16\n"
      "  %v = load.i64 [%a + 0]\n"
      "  ret %v\n"
      "}\n");
  ProgramTables tables;
  run_function_pass(p, 0, tables);
  const UseInfo& u = tables.at(BaseId{0, BaseKind::Alloca, *p.functions[0].value_by_name("a")});
  CHECK_FALSE(u.unsafe);
  CHECK(u.range == ByteRange::of(0, 8));
}

TEST_CASE("module pass: B resolves only interprocedurally") {
  Program p = load_corpus("listing2.ir");
  auto result = analyze(p);
  const auto* a = result.find_alloca("func_1", "A");
  const auto* b = result.find_alloca("func_1", "B");
  REQUIRE(a != nullptr);
  REQUIRE(b != nullptr);
  CHECK(a->safety.cls == Safety::Provable);
  CHECK(a->safety.pointer_safe);
  CHECK(b->safety.cls == Safety::Provable);
  CHECK(b->range == ByteRange::of(0, 4));
}

TEST_CASE("module pass: program without calls converges immediately") {
  Program p = parse(
      "func @main() {\n"
      "entry:\n"
      "  %a = alloca 8\n"
      "  store.i64 [%a + 0] = 1\n"
      "  ret 0\n"
      "}\n");
  ProgramTables tables;
  run_function_pass(p, 0, tables);
  ProgramTables before = tables;
  PassStats stats;
  run_module_pass(p, tables, AnalysisOptions{}, stats);
  CHECK(tables == before);
  CHECK(stats.rounds <= 2);
  CHECK(stats.unsafe_by_limit == 0);
}

TEST_CASE("mutual recursion with growing offsets hits the limit") {
  Program p = load_corpus("recursion_limit.ir");
  AnalysisOptions opts;
  opts.limit = 16;
  auto result = analyze(p, opts);
  CHECK(result.stats.unsafe_by_limit > 0);
  REQUIRE_FALSE(result.stats.limit_hit_functions.empty());
  const auto* buf = result.find_alloca("main", "buf");
  REQUIRE(buf != nullptr);
  CHECK(buf->safety.cls == Safety::Unsafe);
  // pops bounded by functions x limit plus the reseeding rounds
  CHECK(result.stats.function_pops <= (p.functions.size()) * (opts.limit + 2));
}

TEST_CASE("pointer stored into a global marks the source unsafe and pointer-unsafe") {
  Program p = load_corpus("listing1.ir");
  auto result = analyze(p);
  const auto* leaked = result.find_alloca("main", "leaked");
  REQUIRE(leaked != nullptr);
  CHECK(leaked->safety.cls == Safety::Unsafe);
  CHECK_FALSE(leaked->safety.pointer_safe);
  const UseInfo* u = result.find_use_info(BaseId{0, BaseKind::Alloca, leaked->value});
  CHECK(u->unsafe);
  CHECK(u->pointer_unsafe);
}

TEST_CASE("a pure pointer slot is pointer-safe") {
  Program p = parse(
      "func @use(%p: ptr) {\n"
      "entry:\n"
      "  store.i64 [%p + 0] = 3\n"
      "  ret\n"
      "}\n"
      "func @main() {\n"
      "entry:\n"
      "  %data = alloca 8\n"
      "  %cell = alloca 8\n"
      "  store.ptr [%cell + 0] = %data\n"
      "  %r = load.ptr [%cell + 0]\n"
      "  call @use(%r)\n"
      "  ret 0\n"
      "}\n");
  auto result = analyze(p);
  const auto* cell = result.find_alloca("main", "cell");
  REQUIRE(cell != nullptr);
  CHECK(cell->safety.pointer_safe);
  const auto* data = result.find_alloca("main", "data");
  REQUIRE(data != nullptr);
  CHECK(data->safety.cls == Safety::Provable);
}

TEST_CASE("mixed-kind compound slot is pointer-unsafe; stored pointers degrade") {
  Program p = load_corpus("benign/b03_struct_model.ir");
  auto result = analyze(p);
  const auto* s = result.find_alloca("main", "s");
  REQUIRE(s != nullptr);
  CHECK(s->safety.cls == Safety::Guarded);
  CHECK_FALSE(s->safety.pointer_safe);
  const auto* t = result.find_alloca("main", "t");
  REQUIRE(t != nullptr);
  CHECK(t->safety.cls == Safety::Unsafe);
}

TEST_CASE("golden classification for listing1") {
  Program p = load_corpus("listing1.ir");
  auto result = analyze(p);
  const auto* lin = result.find_alloca("main", "buf_lin");
  REQUIRE(lin != nullptr);
  CHECK(lin->safety.cls == Safety::Guarded);
  REQUIRE(lin->linear.max_step.has_value());
  CHECK(*lin->linear.max_step == 4);
  const auto* bad = result.find_alloca("main", "buf_bad");
  REQUIRE(bad != nullptr);
  CHECK(bad->safety.cls == Safety::Unsafe);
}

TEST_CASE("direct-only scalar slots are implicit") {
  Program p = load_corpus("benign/b10_pure_scalars.ir");
  auto result = analyze(p);
  for (const char* name : {"x", "y"}) {
    const auto* rep = result.find_alloca("main", name);
    REQUIRE(rep != nullptr);
    CHECK(rep->safety.cls == Safety::Implicit);
    CHECK(rep->safety.pointer_safe);
  }
}

TEST_CASE("dynamic allocas are always unsafe") {
  Program p = load_corpus("benign/b04_vla.ir");
  auto result = analyze(p);
  const auto* vla = result.find_alloca("main", "vla");
  REQUIRE(vla != nullptr);
  CHECK(vla->dynamic);
  CHECK(vla->safety.cls == Safety::Unsafe);
}

TEST_CASE("guarded soundness precondition holds over corpus and fuzz programs") {
  auto check_program = [](const Program& p) {
    auto result = analyze(p);
    for (const auto& a : result.allocations) {
      if (a.safety.cls != Safety::Guarded) continue;
      REQUIRE(a.size.has_value());
      REQUIRE(a.linear.max_step.has_value());
      CHECK(*a.linear.max_step < 16);
      CHECK(a.linear.start_range.within(0, static_cast<int64_t>(*a.size)));
      CHECK(a.range.within(0, static_cast<int64_t>(*a.size)));
    }
  };
  check_program(load_corpus("listing1.ir"));
  check_program(load_corpus("benign/b01_sum_loop.ir"));
  check_program(load_corpus("benign/b09_underflow.ir"));
  for (uint64_t seed = 100; seed < 160; ++seed) {
    check_program(harness::generate_program(seed));
  }
}

TEST_CASE("classification is deterministic") {
  Program p = load_corpus("listing1.ir");
  auto r1 = analyze(p);
  auto r2 = analyze(p);
  REQUIRE(r1.allocations.size() == r2.allocations.size());
  for (size_t i = 0; i < r1.allocations.size(); ++i) {
    CHECK(r1.allocations[i].safety == r2.allocations[i].safety);
    CHECK(r1.allocations[i].range == r2.allocations[i].range);
  }
  CHECK(r1.tfp_sites == r2.tfp_sites);
  CHECK(r1.tables == r2.tables);
}

TEST_CASE("classification is independent of function order") {
  for (const char* name : {"listing2.ir", "benign/b05_call_chain.ir", "benign/b11_cell_roundtrip.ir"}) {
    CAPTURE(name);
    Program p = load_corpus(name);
    Program reversed = p;
    std::reverse(reversed.functions.begin(), reversed.functions.end());
    REQUIRE(ir::validate(reversed).empty());
    auto a = analyze(p);
    auto b = analyze(reversed);
    REQUIRE(a.allocations.size() == b.allocations.size());
    for (const auto& rep : a.allocations) {
      const auto* other = b.find_alloca(rep.function, rep.name);
      REQUIRE(other != nullptr);
      CHECK(rep.safety == other->safety);
      CHECK(rep.range == other->range);
    }
  }
}

TEST_CASE("undefined callees poison pointer arguments unless allowlisted") {
  const char* text =
      "func @main() {\n"
      "entry:\n"
      "  %a = alloca 8\n"
      "  call @mystery(%a)\n"
      "  ret 0\n"
      "}\n";
  Program p = parse(text);
  auto strict = analyze(p);
  CHECK(strict.find_alloca("main", "a")->safety.cls == Safety::Unsafe);

  AnalysisOptions opts;
  opts.pure_externals.insert("mystery");
  auto lax = analyze(p, opts);
  // still address-taken by the call, so provable rather than implicit
  CHECK(lax.find_alloca("main", "a")->safety.cls == Safety::Provable);
}

TEST_CASE("argument pointers stored in a callee's pure cell stay provable") {
  Program p = parse(
      "func @keep(%p: ptr) {\n"
      "entry:\n"
      "  %cell = alloca 8\n"
      "  store.ptr [%cell + 0] = %p\n"
      "  %r = load.ptr [%cell + 0]\n"
      "  store.i64 [%r + 0] = 9\n"
      "  ret\n"
      "}\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  call @keep(%x)\n"
      "  %v = load.i64 [%x + 0]\n"
      "  ret %v\n"
      "}\n");
  auto result = analyze(p);
  const auto* x = result.find_alloca("main", "x");
  REQUIRE(x != nullptr);
  CHECK(x->safety.cls == Safety::Provable);
  CHECK(x->range == ByteRange::of(0, 8));
}

TEST_CASE("a poisoned callee cell degrades the caller's allocation") {
  Program p = parse(
      "func @keep(%p: ptr) {\n"
      "entry:\n"
      "  %cell = alloca 8\n"
      "  store.i8 [%cell + 0] = 0\n"
      "  store.ptr [%cell + 0] = %p\n"
      "  %r = load.ptr [%cell + 0]\n"
      "  store.i64 [%r + 0] = 9\n"
      "  ret\n"
      "}\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  call @keep(%x)\n"
      "  %v = load.i64 [%x + 0]\n"
      "  ret %v\n"
      "}\n");
  auto result = analyze(p);
  CHECK(result.find_alloca("main", "x")->safety.cls == Safety::Unsafe);
}

TEST_CASE("returned pointers poison their allocation") {
  Program p = parse(
      "func @id(%p: ptr) {\n"
      "entry:\n"
      "  ret %p\n"
      "}\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  %q = call @id(%x)\n"
      "  store.i64 [%q + 0] = 5\n"
      "  %v = load.i64 [%x + 0]\n"
      "  ret %v\n"
      "}\n");
  auto result = analyze(p);
  CHECK(result.find_alloca("main", "x")->safety.cls == Safety::Unsafe);
}

TEST_CASE("negative constant offsets are underflows") {
  Program p = parse(
      "func @main() {\n"
      "entry:\n"
      "  %a = alloca 16\n"
      "  %q = gep %a, 0, scale 1, off -8\n"
      "  store.i64 [%q + 0] = 1\n"
      "  ret 0\n"
      "}\n");
  auto result = analyze(p);
  const auto* a = result.find_alloca("main", "a");
  CHECK(a->safety.cls == Safety::Unsafe);
  CHECK(a->range == ByteRange::of(-8, 0));
}

TEST_CASE("pointer phis over two allocations constrain both") {
  Program p = load_corpus("benign/b12_phi_diamond.ir");
  auto result = analyze(p);
  for (const char* name : {"a", "b"}) {
    const auto* rep = result.find_alloca("main", name);
    REQUIRE(rep != nullptr);
    CHECK(rep->safety.cls == Safety::Provable);
    CHECK(rep->range == ByteRange::of(0, 8));
  }
}

TEST_CASE("storing a pointer through a computed address is unresolvable") {
  Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  %buf = alloca 16\n"
      "  %i = load.i64 [@args + 0]\n"
      "  %q = gep %buf, %i, scale 8, off 0\n"
      "  store.ptr [%q + 0] = %x\n"
      "  ret 0\n"
      "}\n");
  auto result = analyze(p);
  CHECK(result.find_alloca("main", "x")->safety.cls == Safety::Unsafe);
}

TEST_CASE("tfp actions: safe source elided, unsafe source cleared, unknown checked") {
  Program p = parse(
      "global @g 8\n"
      "func @main() {\n"
      "entry:\n"
      "  %safe_cell = alloca 8\n"
      "  %bad = alloca 8\n"
      "  %data = alloca 8\n"
      "  store.ptr [@g + 0] = %bad\n"
      "  store.ptr [%safe_cell + 0] = %data\n"
      "  %p1 = load.ptr [%safe_cell + 0]\n"
      "  %p2 = load.ptr [@g + 0]\n"
      "  %v = load.i64 [%p1 + 0]\n"
      "  %w = load.i64 [%p2 + 0]\n"
      "  %s = add %v, %w\n"
      "  ret %s\n"
      "}\n");
  auto result = analyze(p);
  int elided = 0, tfp = 0;
  for (const auto& site : result.tfp_sites) {
    if (site.kind != TfpSiteKind::PtrLoad) continue;
    if (site.action == TfpAction::None) ++elided;
    if (site.action == TfpAction::TfpLoad) ++tfp;
  }
  CHECK(elided == 1);  // load through the pure pointer cell
  CHECK(tfp == 1);     // load through the global

  AnalysisOptions no_elide;
  no_elide.static_elision = false;
  auto r2 = analyze(p, no_elide);
  for (const auto& site : r2.tfp_sites) {
    if (site.kind == TfpSiteKind::PtrLoad) CHECK(site.action == TfpAction::TfpLoad);
  }
}

TEST_CASE("loads from statically unsafe allocas clear unconditionally") {
  Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %bad = alloca 16\n"
      "  %i = load.i64 [@args + 0]\n"
      "  %q = gep %bad, %i, scale 4, off 0\n"
      "  store.i32 [%q + 0] = 1\n"
      "  %p = load.ptr [%bad + 0]\n"
      "  %c = cmp eq %p, null\n"
      "  output %c\n"
      "  ret 0\n"
      "}\n");
  auto result = analyze(p);
  bool found = false;
  for (const auto& site : result.tfp_sites) {
    if (site.kind == TfpSiteKind::PtrLoad) {
      CHECK(site.action == TfpAction::ClearLoaded);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("weakened analysis reports would-be-unsafe allocations as provable") {
  Program p = load_corpus("listing1.ir");
  AnalysisOptions weak;
  weak.weaken_for_selftest = true;
  auto result = analyze(p, weak);
  CHECK(result.find_alloca("main", "buf_bad")->safety.cls == Safety::Provable);
}
