#pragma once

#include <cstddef>

#include "dera/types.hpp"

namespace dera {

// top_k == 0 means "all tokens".
struct DecodingControls {
  double temperature = 1.0;
  std::size_t top_k = 0;
  double top_p = 1.0;

  bool is_identity() const noexcept { return temperature == 1.0 && top_k == 0 && top_p == 1.0; }
};

// Temperature, then top-k, then the top-p nucleus. Ties in the top-k order go
// to the lower token index; the nucleus keeps tokens until the cumulative mass
// reaches top_p (the boundary token is kept). Masked tokens stay masked and
// the result always has at least one unmasked token.
//
// Throws BadControl for temperature <= 0, top_k > V, or top_p outside (0, 1].
LogitVector apply_decoding_controls(const LogitVector& h, const DecodingControls& controls);

void validate_controls(const DecodingControls& controls, std::size_t vocab_size);

}  // namespace dera
