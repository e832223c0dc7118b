#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qsteady/types.hpp"

namespace qsteady {

enum class Axis { X, Y };

// Directed bond (a -> b). `wrap` marks bonds that close a periodic boundary.
struct Edge {
  int a = 0;
  int b = 0;
  Axis direction = Axis::X;
  bool wrap = false;
};

// Rectangular lx-by-ly spin-1/2 lattice. Couplings and the drive field are
// given in units of the single-site loss rate `gamma`, which sets the overall
// energy scale of the generator.
struct LatticeSpec {
  int lx = 2;
  int ly = 2;
  bool periodic_x = true;
  bool periodic_y = true;
  double jx = 0.9;
  double jy = 1.0;
  double jz = 1.0;
  double gamma = 1.0;
  double field_h = 0.0;
  double field_theta = 0.0;

  int n_sites() const { return lx * ly; }

  // Site index: x varies fastest, so site(x, y) maps to bit x + lx*y.
  int site(int x, int y) const { return x + lx * y; }

  std::int64_t dim() const { return std::int64_t{1} << n_sites(); }

  void validate() const {
    if (lx < 1 || ly < 1) throw UsageError("lattice extents must be at least 1");
    if (gamma <= 0.0) throw UsageError("gamma must be positive");
    if (n_sites() > 62) throw DimensionError("too many sites to index basis states");
  }

  bool same_geometry(const LatticeSpec& o) const {
    return lx == o.lx && ly == o.ly && periodic_x == o.periodic_x &&
           periodic_y == o.periodic_y;
  }
};

// Nearest-neighbour bonds, one +x and one +y bond per site where they exist.
// Bonds that would connect a site to itself (extent 1 with periodic wrap) are
// dropped. On extent-2 periodic rings each pair appears twice, once as a
// regular bond and once as a wrap, which doubles those couplings on purpose:
// it keeps the bond count at 2*n_sites for every periodic lattice.
inline std::vector<Edge> enumerate_edges(const LatticeSpec& spec) {
  spec.validate();
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(2 * spec.n_sites()));
  for (int y = 0; y < spec.ly; ++y) {
    for (int x = 0; x < spec.lx; ++x) {
      const int i = spec.site(x, y);
      if (x + 1 < spec.lx) {
        edges.push_back({i, spec.site(x + 1, y), Axis::X, false});
      } else if (spec.periodic_x && spec.lx > 1) {
        edges.push_back({i, spec.site(0, y), Axis::X, true});
      }
      if (y + 1 < spec.ly) {
        edges.push_back({i, spec.site(x, y + 1), Axis::Y, false});
      } else if (spec.periodic_y && spec.ly > 1) {
        edges.push_back({i, spec.site(x, 0), Axis::Y, true});
      }
    }
  }
  return edges;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  std::string t = v;
  std::transform(t.begin(), t.end(), t.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw UsageError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
  }
  if (pos != v.size())
    throw UsageError("config key '" + key + "' has trailing junk in '" + v + "'");
  return x;
}

inline int parse_int(const std::string& v, const std::string& key) {
  const double x = parse_double(v, key);
  const int i = static_cast<int>(x);
  if (static_cast<double>(i) != x)
    throw UsageError("config key '" + key + "' expects an integer, got '" + v + "'");
  return i;
}

}  // namespace detail

// Plain key = value format, one pair per line, '#' starts a comment.
// Recognized keys: lx, ly, jx, jy, jz, gamma, h, theta, periodic_x, periodic_y.
inline LatticeSpec parse_lattice_config(std::istream& in) {
  LatticeSpec spec;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key == "lx") spec.lx = detail::parse_int(val, key);
    else if (key == "ly") spec.ly = detail::parse_int(val, key);
    else if (key == "jx") spec.jx = detail::parse_double(val, key);
    else if (key == "jy") spec.jy = detail::parse_double(val, key);
    else if (key == "jz") spec.jz = detail::parse_double(val, key);
    else if (key == "gamma") spec.gamma = detail::parse_double(val, key);
    else if (key == "h") spec.field_h = detail::parse_double(val, key);
    else if (key == "theta") spec.field_theta = detail::parse_double(val, key);
    else if (key == "periodic_x") spec.periodic_x = detail::parse_bool(val, key);
    else if (key == "periodic_y") spec.periodic_y = detail::parse_bool(val, key);
    else throw UsageError("unknown config key '" + key + "' on line " +
                          std::to_string(lineno));
  }
  spec.validate();
  return spec;
}

inline LatticeSpec load_lattice_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  return parse_lattice_config(in);
}

inline void write_lattice_config(std::ostream& out, const LatticeSpec& spec) {
  out.precision(17);
  out << "lx = " << spec.lx << "\n"
      << "ly = " << spec.ly << "\n"
      << "jx = " << spec.jx << "\n"
      << "jy = " << spec.jy << "\n"
      << "jz = " << spec.jz << "\n"
      << "gamma = " << spec.gamma << "\n"
      << "h = " << spec.field_h << "\n"
      << "theta = " << spec.field_theta << "\n"
      << "periodic_x = " << (spec.periodic_x ? "true" : "false") << "\n"
      << "periodic_y = " << (spec.periodic_y ? "true" : "false") << "\n";
}

inline void save_lattice_config(const std::string& path, const LatticeSpec& spec) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file '" + path + "'");
  write_lattice_config(out, spec);
}

}  // namespace qsteady
