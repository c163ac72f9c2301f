#pragma once

// File formats for density fields and boundary conditions.
//
//   density PGM : plain "P2", maxval 255, pixel = round(255 * x), one image
//                 row per element row (top row first). Lossy, for viewing.
//   density CSV : nely lines of nelx comma-separated values, row-major,
//                 printed with %.17g so that reading back is lossless.
//   BC JSON     : {"fixed_dofs": [..], "loads": [{"dof": d, "value": v}, ..]}

#include "cnnto/error.hpp"
#include "cnnto/fem.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace cnnto {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path, bool binary = false) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    return out;
}

inline std::ifstream open_for_read(const std::filesystem::path& path, bool binary = false) {
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
    return in;
}

// Little-endian scalar I/O for the binary containers (datasets, models).
template <class T>
void write_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw InputError("unexpected end of binary file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

/// Container layout shared by dataset and model files:
/// 8-byte magic, u64 header length, UTF-8 JSON header, binary payload.
inline void write_container_header(std::ostream& out, const char (&magic)[9], const nlohmann::json& header) {
    out.write(magic, 8);
    const std::string text = header.dump();
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline nlohmann::json read_container_header(std::istream& in, const char (&magic)[9], const std::string& what) {
    char got[8];
    if (!in.read(got, 8) || std::memcmp(got, magic, 8) != 0) throw InputError(what + ": bad magic");
    const auto len = read_le<std::uint64_t>(in);
    if (len > (1u << 26)) throw InputError(what + ": header too large");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw InputError(what + ": truncated header");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(what + ": bad header JSON: " + e.what());
    }
}

inline std::string density_to_pgm(const DensityField& d) {
    std::ostringstream os;
    os << "P2\n" << d.nelx() << ' ' << d.nely() << "\n255\n";
    for (int r = 0; r < d.nely(); ++r) {
        for (int c = 0; c < d.nelx(); ++c) {
            const double x = std::clamp(d(r, c), 0.0, 1.0);
            os << (c ? " " : "") << static_cast<int>(std::lround(255.0 * x));
        }
        os << '\n';
    }
    return os.str();
}

inline void write_density_pgm(const std::filesystem::path& path, const DensityField& d) {
    auto out = open_for_write(path);
    out << density_to_pgm(d);
}

inline std::string density_to_csv(const DensityField& d) {
    std::string s;
    for (int r = 0; r < d.nely(); ++r) {
        for (int c = 0; c < d.nelx(); ++c) {
            if (c) s += ',';
            s += format_double(d(r, c));
        }
        s += '\n';
    }
    return s;
}

inline void write_density_csv(const std::filesystem::path& path, const DensityField& d) {
    auto out = open_for_write(path);
    out << density_to_csv(d);
}

/// The binary flag is set when every value is exactly 0 or 1.
inline DensityField density_from_csv(const std::string& text) {
    std::vector<std::vector<double>> rows;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> row;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t next = line.find(',', pos);
            if (next == std::string::npos) next = line.size();
            const std::string cell = line.substr(pos, next - pos);
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end == cell.c_str()) throw InputError("density CSV: bad cell '" + cell + "'");
            row.push_back(v);
            pos = next + 1;
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw InputError("density CSV: empty file");
    const auto ncols = rows.front().size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ncols));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != ncols) throw InputError("density CSV: ragged rows");
        for (std::size_t c = 0; c < ncols; ++c) m(r, c) = rows[r][c];
    }
    DensityField d(std::move(m), false);
    d.binary = d.is_exactly_binary();
    return d;
}

inline DensityField read_density_csv(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return density_from_csv(ss.str());
}

inline nlohmann::json bc_to_json(const BoundaryConditions& bc) {
    nlohmann::json j;
    j["fixed_dofs"] = bc.fixed_dofs;
    j["loads"] = nlohmann::json::array();
    for (const auto& [dof, value] : bc.loads) j["loads"].push_back({{"dof", dof}, {"value", value}});
    return j;
}

inline BoundaryConditions bc_from_json(const nlohmann::json& j) {
    BoundaryConditions bc;
    try {
        bc.fixed_dofs = j.at("fixed_dofs").get<std::vector<int>>();
        for (const auto& l : j.at("loads")) {
            const int dof = l.at("dof").get<int>();
            if (bc.loads.count(dof)) throw InputError("BC JSON: duplicate load on DOF " + std::to_string(dof));
            bc.loads[dof] = l.at("value").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("BC JSON: ") + e.what());
    }
    bc.normalize();
    return bc;
}

inline BoundaryConditions read_bc_json(const std::filesystem::path& path) {
    auto in = open_for_read(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("BC JSON '" + path.string() + "': " + e.what());
    }
    return bc_from_json(j);
}

inline void write_bc_json(const std::filesystem::path& path, const BoundaryConditions& bc) {
    auto out = open_for_write(path);
    out << bc_to_json(bc).dump(2) << '\n';
}

} // namespace cnnto
