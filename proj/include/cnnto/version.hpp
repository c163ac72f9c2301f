#pragma once

namespace cnnto {
inline constexpr const char* kToolkitVersion = "0.1.0";
}
