#pragma once

#include <vector>

#include "stacktag/ir.hpp"

namespace stacktag::ir {

// Structural validation: SSA dominance, terminator placement, phi edges,
// operand kinds, entry-function shape. Returns an empty list iff the
// program is well-formed.
std::vector<Diagnostic> validate(const Program& p);

// Convenience used by the CLI and tests: parse then validate.
struct LoadedProgram {
  std::optional<Program> program;
  std::vector<Diagnostic> diagnostics;
  bool ok() const { return program.has_value() && diagnostics.empty(); }
};
LoadedProgram parse_and_validate(std::string_view text);

}  // namespace stacktag::ir
