#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "moc/errors.hpp"
#include "moc/router.hpp"

namespace moc::workbench {

inline constexpr const char* kRoutingCsvHeader = "head,query_chunk,selected_chunk,count,provenance";

/// One row per non-zero (head, query chunk, selected chunk, provenance)
/// count, ordered by head, query chunk, selected chunk, provenance.
inline void write_routing_csv(std::ostream& os, const ChunkCounts& counts) {
  os << kRoutingCsvHeader << '\n';
  constexpr Provenance kinds[] = {Provenance::Mandatory, Provenance::Routed, Provenance::DroppedIn};
  for (std::size_t h = 0; h < counts.heads(); ++h) {
    for (std::size_t a = 0; a < counts.chunks(); ++a) {
      for (std::size_t b = 0; b < counts.chunks(); ++b) {
        for (Provenance p : kinds) {
          const std::uint64_t n = counts.at(h, p, a, b);
          if (n > 0) os << h << ',' << a << ',' << b << ',' << n << ',' << to_string(p) << '\n';
        }
      }
    }
  }
}

inline Provenance parse_provenance(const std::string& s) {
  if (s == "mandatory") return Provenance::Mandatory;
  if (s == "routed") return Provenance::Routed;
  if (s == "dropped_in") return Provenance::DroppedIn;
  fail(ErrorCode::ParseError, "unknown provenance '" + s + "'");
}

inline ChunkCounts read_routing_csv(std::istream& is, std::size_t heads, std::size_t chunks) {
  ChunkCounts counts(heads, chunks);
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kRoutingCsvHeader, ErrorCode::ParseError,
          "missing routing CSV header");
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    require(fields.size() == 5, ErrorCode::ParseError, "line " + std::to_string(line_no) + " needs 5 fields");
    try {
      const std::size_t h = std::stoul(fields[0]);
      const std::size_t a = std::stoul(fields[1]);
      const std::size_t b = std::stoul(fields[2]);
      const std::uint64_t n = std::stoull(fields[3]);
      require(h < heads && a < chunks && b < chunks, ErrorCode::ParseError,
              "line " + std::to_string(line_no) + " is out of range");
      counts.at(h, parse_provenance(fields[4]), a, b) = n;
    } catch (const std::logic_error&) {
      fail(ErrorCode::ParseError, "line " + std::to_string(line_no) + " has a malformed number");
    }
  }
  return counts;
}

}  // namespace moc::workbench
