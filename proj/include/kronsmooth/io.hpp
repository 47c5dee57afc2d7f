#pragma once

// File formats:
//  * matrices: headerless CSV, one row per treatment, shortest round-trip decimals;
//    lines starting with '#' are comments (used for provenance) and are skipped.
//  * models, reports, manifests: JSON with a "format_version" field.

#include "kronsmooth/lowrank_em.hpp"
#include "kronsmooth/diag_smoother.hpp"
#include "kronsmooth/split_eval.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace kronsmooth::io {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
    return {buf, ptr};
}

inline double parse_double(std::string_view s, const std::string& where) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw std::runtime_error("cannot parse number '" + std::string(s) + "' in " + where);
    return v;
}

inline std::string provenance_comment(const std::string& config_hash, std::uint64_t seed) {
    return "# kronsmooth format_version=" + std::to_string(kFormatVersion) + " config_hash=" + config_hash +
           " seed=" + std::to_string(seed);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m, const std::string& comment = {}) {
    auto out = open_out(path);
    if (!comment.empty()) out << comment << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out << ',';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Matrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        std::vector<double> row;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            const std::string_view cell(line.data() + start, (comma == std::string::npos ? line.size() : comma) - start);
            row.push_back(parse_double(cell, path.string() + ":" + std::to_string(lineno)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": ragged row");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error(path.string() + ": no data rows");
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    for (Eigen::Index i = 0; i < m.size(); ++i)
        if (!std::isfinite(m.data()[i])) throw std::runtime_error(path.string() + ": non-finite entry");
    return m;
}

inline MeasurementTensor read_replicates(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw std::invalid_argument("no replicate files given");
    std::vector<Matrix> slices;
    for (const auto& p : paths) slices.push_back(read_matrix_csv(p));
    for (std::size_t i = 1; i < slices.size(); ++i)
        if (slices[i].rows() != slices[0].rows() || slices[i].cols() != slices[0].cols())
            throw std::invalid_argument("replicate " + paths[i].string() + " has a different shape than " + paths[0].string());
    MeasurementTensor x(slices.size(), static_cast<std::size_t>(slices[0].rows()), static_cast<std::size_t>(slices[0].cols()));
    for (std::size_t r = 0; r < slices.size(); ++r) x.set_replicate(r, slices[r]);
    return x;
}

// ---------------------------------------------------------------------------
// JSON helpers

inline json to_json(const Vector& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline json to_json(const Matrix& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        a.push_back(std::move(row));
    }
    return a;
}

inline Vector vector_from_json(const json& a) {
    Vector v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a.at(i).get<double>();
    return v;
}

inline Matrix matrix_from_json(const json& a) {
    const std::size_t rows = a.size();
    const std::size_t cols = rows ? a.at(0).size() : 0;
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        if (a.at(i).size() != cols) throw std::runtime_error("ragged matrix in JSON");
        for (std::size_t j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.at(i).at(j).get<double>();
    }
    return m;
}

inline json kernel_to_json(const SeKernelParams& k) {
    return {{"sigma", to_json(k.sigma)}, {"lengthscale_mode", to_string(k.mode)}, {"alpha", to_json(k.alpha)}, {"jitter", k.jitter}};
}

inline SeKernelParams kernel_from_json(const json& j) {
    SeKernelParams k;
    k.sigma = vector_from_json(j.at("sigma"));
    k.mode = lengthscale_mode_from_string(j.at("lengthscale_mode").get<std::string>());
    k.alpha = vector_from_json(j.at("alpha"));
    k.jitter = j.at("jitter").get<double>();
    return k;
}

inline json model_to_json(const LowRankModel& m) {
    return {{"format_version", kFormatVersion},
            {"model", "lowrank"},
            {"rank", m.rank},
            {"mu_prime", to_json(m.mu_prime)},
            {"kernel", kernel_to_json(m.kernel)},
            {"embedding", to_json(m.embedding.data)},
            {"psi", to_json(m.psi)},
            {"lambda", to_json(m.lambda_rep)},
            {"tau2", m.tau2},
            {"v", to_json(m.v)}};
}

inline void check_version(const json& j) {
    const int v = j.at("format_version").get<int>();
    if (v != kFormatVersion) throw std::runtime_error("unsupported format_version " + std::to_string(v));
}

inline LowRankModel lowrank_model_from_json(const json& j) {
    check_version(j);
    if (j.at("model").get<std::string>() != "lowrank") throw std::runtime_error("not a lowrank model document");
    LowRankModel m;
    m.rank = j.at("rank").get<int>();
    m.mu_prime = vector_from_json(j.at("mu_prime"));
    m.kernel = kernel_from_json(j.at("kernel"));
    m.embedding.data = matrix_from_json(j.at("embedding"));
    m.psi = vector_from_json(j.at("psi"));
    m.lambda_rep = vector_from_json(j.at("lambda"));
    m.tau2 = j.at("tau2").get<double>();
    m.v = matrix_from_json(j.at("v"));
    return m;
}

inline json model_to_json(const DiagModelParams& m) {
    return {{"format_version", kFormatVersion},
            {"model", "diag"},
            {"kernel", kernel_to_json(m.kernel)},
            {"embedding", to_json(m.embedding.data)},
            {"mu", to_json(m.mu)},
            {"lambda", to_json(m.lambda_noise)}};
}

inline DiagModelParams diag_model_from_json(const json& j) {
    check_version(j);
    if (j.at("model").get<std::string>() != "diag") throw std::runtime_error("not a diag model document");
    DiagModelParams m;
    m.kernel = kernel_from_json(j.at("kernel"));
    m.embedding.data = matrix_from_json(j.at("embedding"));
    m.mu = matrix_from_json(j.at("mu"));
    m.lambda_noise = vector_from_json(j.at("lambda"));
    return m;
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// 16 hex digits of FNV-1a over the compact dump (keys are sorted by nlohmann::json).
inline std::string config_hash(const json& config) {
    const std::uint64_t h = fnv1a64(config.dump());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Evaluation outputs

inline void write_curve_csv(const std::filesystem::path& path, const CsepCurve& c, const std::string& comment) {
    auto out = open_out(path);
    if (!comment.empty()) out << comment << '\n';
    out << "subset_size,threshold,csep\n";
    for (const auto& pt : c.points) out << pt.subset_size << ',' << format_double(pt.threshold) << ',' << format_double(pt.csep) << '\n';
}

inline CsepCurve read_curve_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    CsepCurve c;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        if (!header) {
            if (line != "subset_size,threshold,csep") throw std::runtime_error(path.string() + ": unexpected curve header");
            header = true;
            continue;
        }
        std::stringstream ss(line);
        std::string a, b, d;
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, d, ',');
        c.points.push_back({static_cast<std::size_t>(parse_double(a, path.string())), parse_double(d, path.string()),
                            parse_double(b, path.string())});
    }
    return c;
}

inline json control_to_json(const ErrorControlResult& r) {
    return {{"target_v", r.target_v},
            {"csep_threshold", r.csep_threshold},
            {"selected_size", r.selected_size},
            {"selected_threshold", r.selected_threshold},
            {"achieved_csep", r.achieved_csep}};
}

inline void write_type_s_csv(const std::filesystem::path& path, const std::vector<TypeSPoint>& pts, const std::string& comment) {
    auto out = open_out(path);
    if (!comment.empty()) out << comment << '\n';
    out << "threshold,subset_size,type_s\n";
    for (const auto& pt : pts) out << format_double(pt.threshold) << ',' << pt.subset_size << ',' << format_double(pt.type_s) << '\n';
}

inline void write_correlation_csv(const std::filesystem::path& path, const std::vector<std::optional<double>>& c,
                                  const std::string& comment) {
    auto out = open_out(path);
    if (!comment.empty()) out << comment << '\n';
    out << "treatment,correlation\n";
    for (std::size_t i = 0; i < c.size(); ++i) out << i << ',' << (c[i] ? format_double(*c[i]) : std::string("NA")) << '\n';
}

}  // namespace kronsmooth::io
