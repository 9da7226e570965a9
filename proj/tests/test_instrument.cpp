#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "stacktag/analysis.hpp"
#include "stacktag/harness.hpp"
#include "stacktag/instrument.hpp"
#include "stacktag/interp.hpp"
#include "stacktag/parser.hpp"
#include "stacktag/printer.hpp"
#include "stacktag/validate.hpp"

using namespace stacktag;
using namespace stacktag::instrument;
namespace an = stacktag::analysis;

namespace {

ir::Program parse(const char* text) {
  auto r = ir::parse_and_validate(text);
  if (!r.ok()) {
    for (auto& d : r.diagnostics) MESSAGE(d.to_string());
  }
  REQUIRE(r.ok());
  return std::move(*r.program);
}

ir::Program load_corpus(const std::string& name) {
  std::ifstream in(std::string(STACKTAG_CORPUS_DIR) + "/" + name);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  auto r = ir::parse_and_validate(ss.str());
  REQUIRE(r.ok());
  return std::move(*r.program);
}

int count_ops(const ir::Function& f, auto pred) {
  int n = 0;
  for (const auto& b : f.blocks) {
    for (const auto& i : b.body) {
      if (pred(i)) ++n;
    }
  }
  return n;
}

}  // namespace

TEST_CASE("a lone guarded buffer gets a guard on each side") {
  ir::Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %buf = alloca 64\n"
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
  auto result = an::analyze(p);
  REQUIRE(result.find_alloca("main", "buf")->safety.cls == an::Safety::Guarded);
  FrameLayout layout = layout_frame(p, 0, result, {});
  int guards = 0;
  int buf_pos = -1;
  for (size_t i = 0; i < layout.slots.size(); ++i) {
    if (layout.slots[i].is_guard) ++guards;
    if (layout.slots[i].name == "buf") buf_pos = static_cast<int>(i);
  }
  CHECK(guards == 2);
  REQUIRE(buf_pos >= 1);
  CHECK(layout.slots[buf_pos - 1].is_guard);
  CHECK(layout.slots[buf_pos + 1].is_guard);
  CHECK(layout.slots[buf_pos - 1].tag != layout.slots[buf_pos].tag);
  CHECK(layout.slots[buf_pos + 1].tag != layout.slots[buf_pos].tag);
}

TEST_CASE("a differently tagged unsafe neighbour elides the guard between them") {
  ir::Program p = parse(
      "global @args 32\n"
      "global @g 8\n"
      "func @main() {\n"
      "entry:\n"
      "  %buf = alloca 64\n"
      "  %bad = alloca 16\n"
      "  store.ptr [@g + 0] = %bad\n"
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
  auto result = an::analyze(p);
  REQUIRE(result.find_alloca("main", "buf")->safety.cls == an::Safety::Guarded);
  REQUIRE(result.find_alloca("main", "bad")->safety.cls == an::Safety::Unsafe);
  FrameLayout layout = layout_frame(p, 0, result, {});
  // order: guard, buf, bad -- the unsafe slot doubles as the lower guard
  int guards = 0;
  for (const auto& s : layout.slots) {
    if (s.is_guard) ++guards;
  }
  CHECK(guards == 1);
  REQUIRE(layout.slots.size() == 3);
  CHECK(layout.slots[0].is_guard);
  CHECK(layout.slots[1].name == "buf");
  CHECK(layout.slots[2].name == "bad");
  CHECK(validate_tag_plan(build_tag_plan(p, result, {})).empty());
}

TEST_CASE("a 1-byte unsafe slot pads to one granule") {
  ir::Program p = parse(
      "global @g 8\n"
      "func @main() {\n"
      "entry:\n"
      "  %tiny = alloca 1\n"
      "  store.ptr [@g + 0] = %tiny\n"
      "  ret 0\n"
      "}\n");
  auto result = an::analyze(p);
  FrameLayout layout = layout_frame(p, 0, result, {});
  REQUIRE(layout.slots.size() == 1);
  CHECK(layout.slots[0].padded_size == 16);
  CHECK(layout.slots[0].offset % 16 == 0);
  CHECK(layout.static_bytes == 16);
}

TEST_CASE("tag assignment follows the class table") {
  ir::Program p = load_corpus("scenarios/s1.ir");
  auto result = an::analyze(p);
  auto plan = build_tag_plan(p, result, {});
  // secret: provable + pointer-safe -> default tag (no settag)
  CHECK(plan.tag_of("main", "secret") == mte::kSafeDefaultTag);
  // cell: provable but pointer-unsafe -> 0b1000
  CHECK(plan.tag_of("main", "cell") == mte::kPtrUnsafeTag);
  // spare: unsafe -> unsafe family, never wildcard
  auto spare = plan.tag_of("main", "spare");
  REQUIRE(spare.has_value());
  CHECK((*spare & 0b1000) == 0);
  CHECK(*spare != 0);
  CHECK(validate_tag_plan(plan).empty());
}

TEST_CASE("adjacent unsafe slots cycle through distinct tags") {
  ir::Program p = parse(
      "global @g 8\n"
      "func @main() {\n"
      "entry:\n"
      "  %u1 = alloca 8\n"
      "  %u2 = alloca 8\n"
      "  %u3 = alloca 8\n"
      "  store.ptr [@g + 0] = %u1\n"
      "  store.ptr [@g + 0] = %u2\n"
      "  store.ptr [@g + 0] = %u3\n"
      "  ret 0\n"
      "}\n");
  auto result = an::analyze(p);
  FrameLayout layout = layout_frame(p, 0, result, {});
  REQUIRE(layout.slots.size() == 3);
  for (size_t i = 0; i + 1 < layout.slots.size(); ++i) {
    CHECK(layout.slots[i].tag != layout.slots[i + 1].tag);
    CHECK((layout.slots[i].tag & 0b1000) == 0);
    CHECK(layout.slots[i].tag != 0);
  }
  CHECK(validate_tag_plan(build_tag_plan(p, result, {})).empty());
}

TEST_CASE("entry tagging and return resets for a single unsafe slot") {
  ir::Program p = parse(
      "global @g 8\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  store.ptr [@g + 0] = %x\n"
      "  ret 0\n"
      "}\n");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  CHECK(ir::validate(out.program).empty());
  const ir::Function& f = out.program.functions[0];
  int settags = count_ops(f, [](const ir::Instruction& i) {
    return std::holds_alternative<ir::SetTag>(i);
  });
  int tagptrs = count_ops(f, [](const ir::Instruction& i) {
    return std::holds_alternative<ir::TagPtr>(i);
  });
  CHECK(settags == 2);  // one at entry, one reset before ret
  CHECK(tagptrs == 2);
}

TEST_CASE("dynamic allocas force reset-tags and a frame retag") {
  ir::Program p = load_corpus("benign/b04_vla.ir");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  CHECK(ir::validate(out.program).empty());
  const ir::Function& f = *out.program.find_function("main");
  CHECK(f.reset_tags);
  int retags = count_ops(f, [](const ir::Instruction& i) {
    return std::holds_alternative<ir::RetagFrame>(i);
  });
  CHECK(retags == 1);
  int settags = count_ops(f, [](const ir::Instruction& i) {
    return std::holds_alternative<ir::SetTag>(i);
  });
  CHECK(settags >= 1);
}

TEST_CASE("tfp: loaded pointers keep the original for comparisons") {
  ir::Program p = load_corpus("scenarios/s6.ir");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  CHECK(ir::validate(out.program).empty());
  const ir::Function& f = *out.program.find_function("main");
  auto p_id = f.value_by_name("p");
  REQUIRE(p_id.has_value());
  bool has_enforce = false;
  bool cmp_uses_original = false;
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      if (const auto* t = std::get_if<ir::TfpLoad>(&inst)) {
        if (t->value.is_value() && t->value.value == *p_id) has_enforce = true;
      }
      if (const auto* c = std::get_if<ir::ClearTopTagBit>(&inst)) {
        if (c->value.is_value() && c->value.value == *p_id) has_enforce = true;
      }
      if (const auto* c = std::get_if<ir::Cmp>(&inst)) {
        if ((c->lhs.is_value() && c->lhs.value == *p_id) ||
            (c->rhs.is_value() && c->rhs.value == *p_id)) {
          cmp_uses_original = true;
        }
      }
    }
  }
  CHECK(has_enforce);
  CHECK(cmp_uses_original);
}

TEST_CASE("tfp: dereference of a loaded pointer uses the enforced value") {
  ir::Program p = parse(
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %cell = alloca 8\n"
      "  %data = alloca 8\n"
      "  store.i8 [%cell + 0] = 0\n"
      "  store.ptr [%cell + 0] = %data\n"
      "  %p = load.ptr [%cell + 0]\n"
      "  %v = load.i64 [%p + 0]\n"
      "  ret %v\n"
      "}\n");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  const ir::Function& f = *out.program.find_function("main");
  auto enforced = f.value_by_name("p.tfp");
  REQUIRE(enforced.has_value());
  bool deref_enforced = false;
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      if (const auto* l = std::get_if<ir::Load>(&inst)) {
        if (l->kind == ir::Kind::Int && l->addr.is_value() && l->addr.value == *enforced) {
          deref_enforced = true;
        }
      }
    }
  }
  CHECK(deref_enforced);
}

TEST_CASE("tfp: value-indexed geps are hardened, casts are untagged") {
  ir::Program p = load_corpus("scenarios/s5.ir");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  const ir::Function& f = *out.program.find_function("main");
  bool fixtag = false, cleartop = false;
  for (const auto& b : f.blocks) {
    for (const auto& inst : b.body) {
      if (const auto* g = std::get_if<ir::Gep>(&inst)) {
        if (g->fix_tag) fixtag = true;
      }
      if (std::holds_alternative<ir::ClearTopTagBit>(inst)) cleartop = true;
    }
  }
  CHECK(fixtag);
  CHECK(cleartop);
}

TEST_CASE("instrumenting twice is rejected") {
  ir::Program p = load_corpus("listing1.ir");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  CHECK_THROWS_AS(an::analyze(out.program), std::invalid_argument);
  CHECK_THROWS_AS(instrument_program(out.program, result, {}), std::invalid_argument);
}

TEST_CASE("instrumented programs still validate and grow monotonically") {
  for (const char* name : {"listing1.ir", "listing2.ir", "benign/b02_ptr_array.ir",
                           "benign/b03_struct_model.ir", "benign/b09_underflow.ir"}) {
    CAPTURE(name);
    ir::Program p = load_corpus(name);
    auto result = an::analyze(p);
    auto out = instrument_program(p, result, {});
    CHECK(ir::validate(out.program).empty());
    CHECK(harness::instruction_count(*out.program.find_function("main")) >=
          harness::instruction_count(*p.find_function("main")));
    CHECK(harness::static_frame_bytes(*out.program.find_function("main")) >=
          harness::static_frame_bytes(*p.find_function("main")));
    CHECK(validate_tag_plan(out.plan).empty());
  }
}

TEST_CASE("fully safe programs are left untouched") {
  ir::Program p = load_corpus("benign/b10_pure_scalars.ir");
  auto result = an::analyze(p);
  auto out = instrument_program(p, result, {});
  CHECK(out.program == p);
}

TEST_CASE("tag plans of generated programs always validate") {
  for (uint64_t seed = 300; seed < 340; ++seed) {
    CAPTURE(seed);
    ir::Program p = harness::generate_program(seed);
    auto result = an::analyze(p);
    auto out = instrument_program(p, result, {});
    CHECK(ir::validate(out.program).empty());
    CHECK(validate_tag_plan(out.plan).empty());
  }
}

TEST_CASE("multiple returns each get their own reset sequence") {
  ir::Program p = parse(
      "global @g 8\n"
      "global @args 32\n"
      "func @main() {\n"
      "entry:\n"
      "  %x = alloca 8\n"
      "  %n = load.i64 [@args + 0]\n"
      "  store.ptr [@g + 0] = %x\n"
      "  %c = cmp eq %n, 0\n"
      "  br %c, zero, nonzero\n"
      "zero:\n"
      "  ret 0\n"
      "nonzero:\n"
      "  ret 1\n"
      "}\n");
  auto result = an::analyze(p);
  REQUIRE(result.find_alloca("main", "x")->safety.cls == an::Safety::Unsafe);
  auto out = instrument_program(p, result, {});
  CHECK(ir::validate(out.program).empty());
  const ir::Function& f = *out.program.find_function("main");
  int resets = 0;
  for (const auto& b : f.blocks) {
    if (!std::holds_alternative<ir::Ret>(b.term)) continue;
    bool has_settag = false;
    for (const auto& i : b.body) {
      if (std::holds_alternative<ir::SetTag>(i)) has_settag = true;
    }
    CHECK(has_settag);
    ++resets;
  }
  CHECK(resets == 2);
  // both paths must run clean and leave the frame default-tagged
  interp::RunConfig cfg;
  cfg.mte = true;
  cfg.check_frame_hygiene = true;
  for (int64_t n : {0, 1}) {
    interp::Machine m(out.program, cfg);
    auto o = m.run({n});
    CAPTURE(n);
    CHECK(o.finished());
  }
}

TEST_CASE("wider guards change layout and classification in step") {
  ir::Program p = load_corpus("listing1.ir");
  an::AnalysisOptions aopts;
  aopts.guard_bytes = 32;
  auto result = an::analyze(p, aopts);
  InstrumentOptions iopts;
  iopts.guard_width_granules = 2;
  auto plan = build_tag_plan(p, result, iopts);
  CHECK(validate_tag_plan(plan).empty());
  const FrameLayout* fr = plan.frame_for("main");
  REQUIRE(fr != nullptr);
  for (const auto& s : fr->slots) {
    if (s.is_guard) CHECK(s.padded_size == 32);
  }
}
