#pragma once

namespace storybooth {

inline constexpr const char* kVersion = "storybooth 0.1.0";

} // namespace storybooth
