#pragma once

#include <optional>
#include <string_view>
#include <vector>

#include "stacktag/ir.hpp"

namespace stacktag::ir {

struct ParseResult {
  std::optional<Program> program;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return program.has_value() && diagnostics.empty(); }
};

// Parses the line-oriented IR text format. On error the result carries one
// or more diagnostics with line/column information and no program.
ParseResult parse_program(std::string_view text);

}  // namespace stacktag::ir
