#pragma once

#include <string>
#include <string_view>

namespace crm {

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// Current UTC time as ISO-8601 with millisecond precision.
std::string utc_timestamp();

}  // namespace crm
