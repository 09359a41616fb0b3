#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tforge {

std::string_view trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);

// Splits on '\n', dropping a trailing '\r' from each line.
std::vector<std::string> split_lines(std::string_view s);

// Whitespace-delimited tokens.
std::vector<std::string_view> split_words(std::string_view s);
std::size_t word_count(std::string_view s);

// Joins runs of whitespace into a single space and trims the ends.
std::string collapse_whitespace(std::string_view s);

// Whole-file helpers. write_file_atomic writes to a sibling temp file and
// renames it into place.
std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_nonempty_lines(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
void append_line(const std::filesystem::path& path, std::string_view line);

// Current UTC time as 2026-01-31T12:00:00Z.
std::string utc_timestamp();

}  // namespace tforge
