#pragma once

namespace qbranch {
inline constexpr const char* kVersion = "0.1.0";
}
