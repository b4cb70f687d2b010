#pragma once

// Two-stage cohort data model and file formats: the canonical cohort CSV,
// the sibling truth CSV, and headerless numeric matrices.  All numbers are
// written with shortest round-trip formatting so equal data means equal
// bytes.

#include <survdtr/tree.hpp>  // Matrix/Vector aliases

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace survdtr {

struct TwoStageRow {
    int id = 0;
    double x1 = 0.0, b1 = 0.0, z1 = 0.0;
    int a1 = 0;
    double time1 = 0.0;  // entrants: Stage-1 duration t1; non-entrants: observed time s1
    int delta1 = 1;      // event indicator for non-entrants (entrants: 1, entry observed)
    int eta = 0;         // Stage-2 entry indicator
    double x2 = std::numeric_limits<double>::quiet_NaN();
    double b2 = std::numeric_limits<double>::quiet_NaN();
    double z2 = std::numeric_limits<double>::quiet_NaN();
    int a2 = -1;
    double time2 = std::numeric_limits<double>::quiet_NaN();
    int delta2 = -1;

    bool is_entrant() const { return eta == 1; }
};

struct TruthRow {
    int id = 0;
    int a1_opt = 0;
    int a2_opt = 0;
    double mean_logt2_opt = 0.0;
    double mean_logtotal_opt = 0.0;
};

inline constexpr const char* kCohortHeader = "id,x1,b1,z1,a1,time1,delta1,eta,x2,b2,z2,a2,time2,delta2";
inline constexpr const char* kTruthHeader = "id,a1_opt,a2_opt,mean_logt2_opt,mean_logtotal_opt";

inline std::string format_double(double v) {
    std::array<char, 40> buf;
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (res.ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
    return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view sv) {
    double v = 0.0;
    const auto* end = sv.data() + sv.size();
    auto res = std::from_chars(sv.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw std::invalid_argument("parse_double: bad number '" + std::string(sv) + "'");
    }
    return v;
}

inline int parse_int(std::string_view sv) {
    int v = 0;
    const auto* end = sv.data() + sv.size();
    auto res = std::from_chars(sv.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) {
        throw std::invalid_argument("parse_int: bad integer '" + std::string(sv) + "'");
    }
    return v;
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

} // namespace detail

inline void write_cohort_csv(const std::string& path, const std::vector<TwoStageRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << kCohortHeader << "\n";
    for (const auto& r : rows) {
        out << r.id << ',' << format_double(r.x1) << ',' << format_double(r.b1) << ','
            << format_double(r.z1) << ',' << r.a1 << ',' << format_double(r.time1) << ','
            << r.delta1 << ',' << r.eta << ',';
        if (r.is_entrant()) {
            out << format_double(r.x2) << ',' << format_double(r.b2) << ',' << format_double(r.z2)
                << ',' << r.a2 << ',' << format_double(r.time2) << ',' << r.delta2;
        } else {
            out << ",,,,,";
        }
        out << "\n";
    }
}

inline std::vector<TwoStageRow> read_cohort_csv(const std::string& path) {
    const auto lines = detail::read_lines(path);
    if (lines.empty() || lines.front() != kCohortHeader) {
        throw std::runtime_error("cohort csv: missing or wrong header in " + path);
    }
    std::vector<TwoStageRow> rows;
    rows.reserve(lines.size() - 1);
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto f = detail::split_fields(lines[ln]);
        if (f.size() != 14) {
            throw std::runtime_error("cohort csv: expected 14 fields, got " + std::to_string(f.size()) +
                                     " on line " + std::to_string(ln + 1));
        }
        TwoStageRow r;
        r.id = parse_int(f[0]);
        r.x1 = parse_double(f[1]);
        r.b1 = parse_double(f[2]);
        r.z1 = parse_double(f[3]);
        r.a1 = parse_int(f[4]);
        r.time1 = parse_double(f[5]);
        r.delta1 = parse_int(f[6]);
        r.eta = parse_int(f[7]);
        if (r.eta == 1) {
            r.x2 = parse_double(f[8]);
            r.b2 = parse_double(f[9]);
            r.z2 = parse_double(f[10]);
            r.a2 = parse_int(f[11]);
            r.time2 = parse_double(f[12]);
            r.delta2 = parse_int(f[13]);
        } else {
            for (std::size_t k = 8; k < 14; ++k) {
                if (!f[k].empty()) {
                    throw std::runtime_error("cohort csv: non-entrant with Stage-2 fields on line " +
                                             std::to_string(ln + 1));
                }
            }
        }
        rows.push_back(r);
    }
    return rows;
}

inline void write_truth_csv(const std::string& path, const std::vector<TruthRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << kTruthHeader << "\n";
    for (const auto& r : rows) {
        out << r.id << ',' << r.a1_opt << ',' << r.a2_opt << ','
            << format_double(r.mean_logt2_opt) << ',' << format_double(r.mean_logtotal_opt) << "\n";
    }
}

inline std::vector<TruthRow> read_truth_csv(const std::string& path) {
    const auto lines = detail::read_lines(path);
    if (lines.empty() || lines.front() != kTruthHeader) {
        throw std::runtime_error("truth csv: missing or wrong header in " + path);
    }
    std::vector<TruthRow> rows;
    rows.reserve(lines.size() - 1);
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto f = detail::split_fields(lines[ln]);
        if (f.size() != 5) {
            throw std::runtime_error("truth csv: expected 5 fields on line " + std::to_string(ln + 1));
        }
        TruthRow r;
        r.id = parse_int(f[0]);
        r.a1_opt = parse_int(f[1]);
        r.a2_opt = parse_int(f[2]);
        r.mean_logt2_opt = parse_double(f[3]);
        r.mean_logtotal_opt = parse_double(f[4]);
        rows.push_back(r);
    }
    return rows;
}

inline void write_matrix_csv(const std::string& path, const Matrix& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j > 0) out << ',';
            out << format_double(m(i, j));
        }
        out << "\n";
    }
}

inline Matrix read_matrix_csv(const std::string& path) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) return Matrix(0, 0);
    const auto first = detail::split_fields(lines.front());
    Matrix m(static_cast<Eigen::Index>(lines.size()), static_cast<Eigen::Index>(first.size()));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto f = detail::split_fields(lines[i]);
        if (f.size() != first.size()) {
            throw std::runtime_error("matrix csv: ragged row " + std::to_string(i + 1) + " in " + path);
        }
        for (std::size_t j = 0; j < f.size(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_double(f[j]);
        }
    }
    return m;
}

} // namespace survdtr
