#include "dissim/export.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace dissim {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void require_matrix(const Tensor<double>& m, const char* what) {
    if (m.rank() != 2) throw ShapeError(std::string(what) + ": expected a matrix");
}

}  // namespace

std::string matrix_csv(const Tensor<double>& m, std::span<const int> row_ids, std::span<const int> col_ids) {
    require_matrix(m, "matrix_csv");
    if (static_cast<int64_t>(row_ids.size()) != m.extent(0) || static_cast<int64_t>(col_ids.size()) != m.extent(1)) {
        throw ShapeError("matrix_csv: id lists do not match the matrix");
    }
    std::string out = "tap_a\\tap_b";
    for (int c : col_ids) out += "," + std::to_string(c);
    out += "\n";
    for (int64_t i = 0; i < m.extent(0); ++i) {
        out += std::to_string(row_ids[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < m.extent(1); ++j) out += "," + num(m.at(i, j));
        out += "\n";
    }
    return out;
}

Tensor<double> parse_matrix_csv(std::string_view csv) {
    std::vector<std::vector<double>> rows;
    size_t pos = csv.find('\n');
    if (pos == std::string_view::npos) throw IoError("matrix csv: missing header");
    ++pos;
    while (pos < csv.size()) {
        size_t end = csv.find('\n', pos);
        if (end == std::string_view::npos) end = csv.size();
        std::string_view line = csv.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        std::vector<double> row;
        size_t cell = line.find(',');
        while (cell != std::string_view::npos) {
            const size_t next = line.find(',', cell + 1);
            const std::string field(line.substr(cell + 1, next == std::string_view::npos ? next : next - cell - 1));
            double v = 0;
            auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
            if (ec != std::errc() || p != field.data() + field.size()) throw IoError("matrix csv: bad value " + field);
            row.push_back(v);
            cell = next;
        }
        if (!rows.empty() && row.size() != rows[0].size()) throw IoError("matrix csv: ragged rows");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) return Tensor<double>(Shape{0, 0});
    Tensor<double> m(Shape{static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())});
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = 0; j < rows[i].size(); ++j) m.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) = rows[i][j];
    }
    return m;
}

std::string diagonal_csv(const Tensor<double>& m, std::span<const int> row_ids) {
    require_matrix(m, "diagonal_csv");
    const int64_t n = std::min(m.extent(0), m.extent(1));
    if (static_cast<int64_t>(row_ids.size()) < n) throw ShapeError("diagonal_csv: too few ids");
    std::string out = "tap,lincka\n";
    for (int64_t i = 0; i < n; ++i) out += std::to_string(row_ids[static_cast<size_t>(i)]) + "," + num(m.at(i, i)) + "\n";
    return out;
}

std::vector<unsigned char> render_ppm(const Tensor<double>& m, int cell) {
    require_matrix(m, "render_ppm");
    if (cell < 1) throw std::invalid_argument("render_ppm: cell size must be positive");
    const int64_t w = m.extent(1) * cell, h = m.extent(0) * cell;
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<size_t>(w * h * 3));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double v = m.at(y / cell, x / cell);
            v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
            const auto g = static_cast<unsigned char>(std::lround(255.0 * v));
            out.insert(out.end(), {g, g, g});
        }
    }
    return out;
}

void write_file(const fs::path& path, std::span<const unsigned char> content) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(content.data()), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_file(const fs::path& path, std::string_view content) {
    write_file(path, std::span(reinterpret_cast<const unsigned char*>(content.data()), content.size()));
}

}  // namespace dissim
