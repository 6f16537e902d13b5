// SPDX-License-Identifier: Apache-2.0
#include "xfus/optim.hpp"

namespace xfus {

const char* to_string(OptKind k) { return k == OptKind::sgd ? "sgd" : "adam"; }

OptKind opt_kind_from_string(std::string_view s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "adam") return OptKind::adam;
  fail(ErrorKind::InvalidArgument, "unknown optimizer '" + std::string(s) + "'");
}

}  // namespace xfus
