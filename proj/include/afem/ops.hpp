#pragma once

#include "afem/tape.hpp"

namespace afem::ad {

// Elementwise ops require equal shapes.
Variable add(Variable a, Variable b);
Variable sub(Variable a, Variable b);
Variable mul(Variable a, Variable b);

/// s * x for a rank-0 variable s.
Variable scale(Variable s, Variable x);
Variable scale(double c, Variable x);

/// Sum of all entries (rank-0 result).
Variable sum(Variable x);
/// <w, x> for a fixed weight tensor (rank-0 result).
Variable inner(Variable x, Tensor w);

Variable reshape(Variable x, Shape shape);
Variable tanh(Variable x);
Variable relu(Variable x);

}  // namespace afem::ad
