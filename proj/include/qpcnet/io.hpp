#pragma once

#include <filesystem>
#include <string>

namespace qpcnet::io {

/// Lower-case hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace qpcnet::io
