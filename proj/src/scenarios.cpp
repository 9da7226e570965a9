#include "stacktag/harness.hpp"

// The fixed security scenario suite. Each scenario names a corpus program,
// an adversary script, and the expected outcome; programs are shared with
// the benign corpus where the attack needs a trigger input.
namespace stacktag::harness {

namespace {

AddressRef slot(std::string function, std::string name, int64_t offset = 0) {
  AddressRef a;
  a.kind = AddressRef::Kind::Slot;
  a.function = std::move(function);
  a.name = std::move(name);
  a.offset = offset;
  return a;
}

PointerSpec forged(AddressRef to, uint8_t tag) {
  PointerSpec p;
  p.points_to = std::move(to);
  p.tag = tag;
  return p;
}

std::vector<Scenario> build_suite() {
  std::vector<Scenario> suite;

  {
    // Forge a pointer to a safe slot, with the correct tag read via
    // disclosure, and plant it in a pointer-unsafe cell.
    Scenario s;
    s.id = "s1";
    s.title = "forged-tag pointer injection after full disclosure";
    s.requirement = "resist address tag forgery / memory disclosure";
    s.program_file = "scenarios/s1.ir";
    s.script.args = {0, 0, 0, 0};
    Breakpoint bp;
    bp.function = "main";
    bp.value = "%p";
    s.script.breakpoint = bp;
    ActionDisclose d;
    d.at = slot("main", "secret");
    d.len = 8;
    s.script.actions.push_back(d);
    ActionInject inj;
    inj.at = slot("main", "cell");
    inj.value = forged(slot("main", "secret"), 0b1100);
    s.script.actions.push_back(inj);
    s.script.expectation = Expectation::MustTrap;
    suite.push_back(std::move(s));
  }
  {
    // Fill the unsafe buffer with attacker bytes; the safe key must keep
    // every byte.
    Scenario s;
    s.id = "s2";
    s.title = "unsafe-buffer corruption leaves safe slots untouched";
    s.requirement = "isolate unsafe allocations";
    s.program_file = "scenarios/s2.ir";
    s.script.args = {0, 0, 0, 0};
    Breakpoint bp;
    bp.function = "main";
    bp.value = "%k1";
    s.script.breakpoint = bp;
    ActionCorrupt c;
    c.at = slot("main", "buf");
    c.bytes.assign(32, 0xff);
    s.script.actions.push_back(c);
    s.script.preserve = slot("main", "key");
    s.script.expectation = Expectation::MustPreserve;
    suite.push_back(std::move(s));
  }
  {
    // Linear overflow by one element on a guarded buffer.
    Scenario s;
    s.id = "s3";
    s.title = "guarded linear overflow traps at the guard granule";
    s.requirement = "resist buffer overflow";
    s.program_file = "listing1.ir";
    s.script.args = {5, 0, 0, 0};
    s.script.expectation = Expectation::MustTrap;
    suite.push_back(std::move(s));
  }
  {
    // Use-after-return through a pointer leaked to a global.
    Scenario s;
    s.id = "s4";
    s.title = "dangling pointer to a dead frame traps";
    s.requirement = "isolate safe allocations (temporal)";
    s.program_file = "scenarios/s4.ir";
    s.script.args = {};
    s.script.expectation = Expectation::MustTrap;
    suite.push_back(std::move(s));
  }
  {
    // Plant a forged pointer as an integer; the cast clears the top tag bit.
    Scenario s;
    s.id = "s5";
    s.title = "integer-to-pointer forgery is untagged before use";
    s.requirement = "resist address tag forgery";
    s.program_file = "scenarios/s5.ir";
    s.script.args = {0, 0, 0, 0};
    Breakpoint bp;
    bp.function = "main";
    bp.value = "%x";
    s.script.breakpoint = bp;
    ActionCorrupt c;
    c.at = slot("main", "cell");
    c.pointer = forged(slot("main", "secret"), 0b1100);
    s.script.actions.push_back(c);
    s.script.expectation = Expectation::MustTrap;
    suite.push_back(std::move(s));
  }
  {
    // Benign sentinel flow must be untouched by enforcement.
    Scenario s;
    s.id = "s6";
    s.title = "NULL and all-ones sentinel flow finishes equal";
    s.requirement = "be compatible";
    s.program_file = "scenarios/s6.ir";
    s.script.args = {1, 0, 0, 0};
    s.script.expectation = Expectation::MustFinishEqual;
    suite.push_back(std::move(s));
  }
  return suite;
}

}  // namespace

const std::vector<Scenario>& scenario_suite() {
  static const std::vector<Scenario> suite = build_suite();
  return suite;
}

const Scenario* find_scenario(std::string_view id) {
  for (const auto& s : scenario_suite()) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

}  // namespace stacktag::harness
