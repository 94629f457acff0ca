#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "geonp/errors.hpp"
#include "geonp/geo/types.hpp"

// Observation CSV layout: lon,lat,agbd[,quality block],e_0,...,e_{9D-1}.
// The six quality columns are optional but all-or-nothing, and embeddings are
// the flattened 3x3xD patch in (row, col, channel) order.

namespace geonp::geo {

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(std::string_view field, std::size_t line_no, const std::string& col) {
    double v = 0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw DataError("line " + std::to_string(line_no) + ": cannot parse " + col + " from '" +
                        std::string(field) + "'");
    return v;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline const std::vector<std::string>& quality_column_names() {
    static const std::vector<std::string> names = {"quality_flag",   "degrade_flag",
                                                   "surface_flag",   "sensitivity_a0",
                                                   "sensitivity_a2", "elev_diff_tdx"};
    return names;
}

}  // namespace detail

struct ObservationFile {
    std::vector<Observation> obs;
    std::size_t embedding_channels = 0;
    bool has_quality = false;
};

inline ObservationFile read_observations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open observations file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": missing header");
    auto header = detail::split_fields(line);

    if (header.size() < 3 || header[0] != "lon" || header[1] != "lat" || header[2] != "agbd")
        throw DataError(path + ": header must start with lon,lat,agbd");
    std::size_t pos = 3;
    bool has_quality = pos < header.size() && header[pos] == "quality_flag";
    if (has_quality) {
        const auto& names = detail::quality_column_names();
        for (const auto& name : names) {
            if (pos >= header.size() || header[pos] != name)
                throw DataError(path + ": quality columns must appear as a full block; expected " +
                                name);
            ++pos;
        }
    }
    const std::size_t n_embed = header.size() - pos;
    if (n_embed == 0 || n_embed % 9 != 0)
        throw DataError(path + ": embedding columns must number 9*D, found " +
                        std::to_string(n_embed));
    for (std::size_t k = 0; k < n_embed; ++k) {
        if (header[pos + k] != "e_" + std::to_string(k))
            throw DataError(path + ": embedding column " + std::to_string(k) + " named '" +
                            header[pos + k] + "', expected e_" + std::to_string(k));
    }

    ObservationFile out;
    out.embedding_channels = n_embed / 9;
    out.has_quality = has_quality;
    const std::size_t want_fields = header.size();

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        auto fields = detail::split_fields(line);
        if (fields.size() != want_fields)
            throw DataError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(want_fields) + " fields, found " +
                            std::to_string(fields.size()));
        Observation o;
        o.lon = detail::parse_double(fields[0], line_no, "lon");
        o.lat = detail::parse_double(fields[1], line_no, "lat");
        o.agbd = detail::parse_double(fields[2], line_no, "agbd");
        std::size_t f = 3;
        if (has_quality) {
            o.quality_flag = detail::parse_double(fields[f++], line_no, "quality_flag");
            o.degrade_flag = detail::parse_double(fields[f++], line_no, "degrade_flag");
            o.surface_flag = detail::parse_double(fields[f++], line_no, "surface_flag");
            o.sensitivity_a0 = detail::parse_double(fields[f++], line_no, "sensitivity_a0");
            o.sensitivity_a2 = detail::parse_double(fields[f++], line_no, "sensitivity_a2");
            o.elev_diff_tdx = detail::parse_double(fields[f++], line_no, "elev_diff_tdx");
        }
        o.patch.resize(n_embed);
        for (std::size_t k = 0; k < n_embed; ++k) {
            double v = detail::parse_double(fields[f + k], line_no, "e_" + std::to_string(k));
            if (!std::isfinite(v))
                throw DataError("line " + std::to_string(line_no) +
                                ": embedding value is not finite in e_" + std::to_string(k));
            o.patch[k] = v;
        }
        if (!std::isfinite(o.lon) || !std::isfinite(o.lat) || !std::isfinite(o.agbd))
            throw DataError("line " + std::to_string(line_no) + ": non-finite coordinate or agbd");
        out.obs.push_back(std::move(o));
    }
    return out;
}

/// Writes observations with full round-trip precision (%.17g). The quality
/// block is emitted only when requested, and then every observation must
/// carry all six fields.
inline void write_observations(const std::string& path, const std::vector<Observation>& obs,
                               std::size_t embedding_channels, bool with_quality) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write observations file: " + path);
    const std::size_t n_embed = 9 * embedding_channels;

    out << "lon,lat,agbd";
    if (with_quality)
        for (const auto& name : detail::quality_column_names()) out << ',' << name;
    for (std::size_t k = 0; k < n_embed; ++k) out << ",e_" << k;
    out << '\n';

    for (const auto& o : obs) {
        if (o.patch.size() != n_embed)
            throw DataError("observation patch has " + std::to_string(o.patch.size()) +
                            " values, expected " + std::to_string(n_embed));
        out << detail::format_double(o.lon) << ',' << detail::format_double(o.lat) << ','
            << detail::format_double(o.agbd);
        if (with_quality) {
            auto need = [](const std::optional<double>& v) {
                if (!v) throw DataError("observation lacks a quality field the header promises");
                return *v;
            };
            out << ',' << detail::format_double(need(o.quality_flag)) << ','
                << detail::format_double(need(o.degrade_flag)) << ','
                << detail::format_double(need(o.surface_flag)) << ','
                << detail::format_double(need(o.sensitivity_a0)) << ','
                << detail::format_double(need(o.sensitivity_a2)) << ','
                << detail::format_double(need(o.elev_diff_tdx));
        }
        for (std::size_t k = 0; k < n_embed; ++k) out << ',' << detail::format_double(o.patch[k]);
        out << '\n';
    }
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace geonp::geo
