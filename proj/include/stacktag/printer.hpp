#pragma once

#include <string>

#include "stacktag/ir.hpp"

namespace stacktag::ir {

// Canonical text form. parse_program(print_program(p)) is structurally
// equal to p for every valid program.
std::string print_program(const Program& p);
std::string print_function(const Program& p, const Function& f);

}  // namespace stacktag::ir
