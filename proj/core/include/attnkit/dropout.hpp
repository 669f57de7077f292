#pragma once

#include "attnkit/matrix.hpp"
#include "attnkit/rng.hpp"

namespace attnkit {

struct DropoutResult {
  Matrix output;
  Matrix mask;  // 1 for kept entries, 0 for dropped
};

/// Inverted dropout: in train mode zeros entries with probability p and
/// scales survivors by 1/(1-p); in eval mode the identity (mask all ones).
/// Requires 0 <= p < 1.
DropoutResult dropout_apply(const Matrix& x, double p, Rng& rng, bool train_mode);

}  // namespace attnkit
