#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace ecgclip {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t h = 14695981039346656037ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

// Counter-based stream derivation: the same (seed, stream) always yields the same engine,
// independent of which thread or in which order it is created.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

using CsvRow = std::vector<std::string>;

// Minimal RFC-4180 reader: quoted fields, doubled quotes, CRLF tolerated.
std::vector<CsvRow> parse_csv(std::string_view text);
std::string csv_escape(std::string_view field);
std::string csv_line(const CsvRow& row);

// Reads a CSV file and checks the header matches `expected` exactly; returns data rows.
std::vector<CsvRow> read_csv_table(const std::filesystem::path& path, const CsvRow& expected);

std::string format_double(double v, int precision = 17);

// Runs fn(i) for i in [0, n) on up to `workers` threads. fn must only write to
// per-index state, so results do not depend on the thread count.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

// ECGCLIP_WORKERS, or 1 when unset/invalid.
std::size_t default_workers();

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace ecgclip
