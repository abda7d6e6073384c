#pragma once

#include <string>

namespace dera {

// Shortest decimal that round-trips to the same double; "inf", "-inf", "nan"
// for non-finite values.
std::string format_double(double x);

}  // namespace dera
