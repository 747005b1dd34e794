#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dissim/tensor.hpp"

namespace dissim {

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Side length in pixels of one heat-map cell.
inline constexpr int kHeatmapCell = 16;

/// Header row "tap_a\tap_b,<col ids>", then one row per row id. Values are
/// printed with 17 significant digits so they reload exactly.
std::string matrix_csv(const Tensor<double>& m, std::span<const int> row_ids, std::span<const int> col_ids);

/// Parses matrix_csv output back into a matrix.
Tensor<double> parse_matrix_csv(std::string_view csv);

/// "tap,lincka" rows for m(i, i), i < min(rows, cols).
std::string diagonal_csv(const Tensor<double>& m, std::span<const int> row_ids);

/// Binary PPM (P6), `cell` pixels per entry. Values are clamped to [0, 1]
/// and mapped to gray level round(255·v): 0 black, 1 white. Row 0 is at the
/// top.
std::vector<unsigned char> render_ppm(const Tensor<double>& m, int cell = kHeatmapCell);

/// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::string_view content);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> content);

}  // namespace dissim
