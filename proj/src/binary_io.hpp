#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace layertracer::detail {

void append_u64_le(std::vector<unsigned char>& out, std::uint64_t v);
void append_f64_le(std::vector<unsigned char>& out, double v);
double read_f64_le(const unsigned char* p);

void write_f64_blob(const std::filesystem::path& path, std::span<const double> values);
// Reads a whole blob; size must be a multiple of 8 (CorruptTrace otherwise).
std::vector<double> read_f64_blob(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

std::string sha256_hex(std::span<const unsigned char> bytes);

// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace layertracer::detail
