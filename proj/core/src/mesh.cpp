#include "vcnn/mesh.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <istream>
#include <sstream>

#include "vcnn/errors.hpp"

namespace vcnn {

namespace {

struct TokenLine {
  int number = 0;
  std::vector<std::string> tokens;
};

[[noreturn]] void fail(int line, const std::string& what) {
  throw DataError("OFF parse error at line " + std::to_string(line) + ": " + what);
}

// Strips comments and blanks; keeps original line numbers for diagnostics.
std::vector<TokenLine> tokenize(std::istream& in) {
  std::vector<TokenLine> lines;
  std::string raw;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    TokenLine line;
    line.number = number;
    std::istringstream ss(raw);
    std::string tok;
    while (ss >> tok) line.tokens.push_back(tok);
    if (!line.tokens.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

long parse_int(const std::string& tok, int line) {
  long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    fail(line, "expected integer, got '" + tok + "'");
  }
  return v;
}

double parse_real(const std::string& tok, int line) {
  try {
    size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size() || !std::isfinite(v)) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(line, "expected number, got '" + tok + "'");
  }
}

}  // namespace

Mesh parse_off(std::istream& in) {
  auto lines = tokenize(in);
  if (lines.empty()) fail(0, "empty input");

  size_t cursor = 0;
  const TokenLine& head = lines[cursor];
  if (head.tokens[0] != "OFF") fail(head.number, "missing OFF magic");

  long nv = 0, nf = 0;
  if (head.tokens.size() == 4) {
    // counts fused onto the magic line
    nv = parse_int(head.tokens[1], head.number);
    nf = parse_int(head.tokens[2], head.number);
    parse_int(head.tokens[3], head.number);
    ++cursor;
  } else if (head.tokens.size() == 1) {
    ++cursor;
    if (cursor >= lines.size()) fail(head.number, "missing counts line");
    const TokenLine& counts = lines[cursor];
    if (counts.tokens.size() != 3) fail(counts.number, "counts line must be 'V F E'");
    nv = parse_int(counts.tokens[0], counts.number);
    nf = parse_int(counts.tokens[1], counts.number);
    parse_int(counts.tokens[2], counts.number);
    ++cursor;
  } else {
    fail(head.number, "malformed OFF header");
  }
  if (nv <= 0) fail(head.number, "vertex count must be positive");
  if (nf <= 0) fail(head.number, "face count must be positive");

  Mesh mesh;
  mesh.vertices.reserve(nv);
  for (long i = 0; i < nv; ++i, ++cursor) {
    if (cursor >= lines.size()) fail(lines.back().number, "unexpected end of file in vertex list");
    const TokenLine& line = lines[cursor];
    if (line.tokens.size() != 3) fail(line.number, "vertex line must have 3 coordinates");
    mesh.vertices.push_back({parse_real(line.tokens[0], line.number),
                             parse_real(line.tokens[1], line.number),
                             parse_real(line.tokens[2], line.number)});
  }

  mesh.faces.reserve(nf);
  for (long i = 0; i < nf; ++i, ++cursor) {
    if (cursor >= lines.size()) fail(lines.back().number, "unexpected end of file in face list");
    const TokenLine& line = lines[cursor];
    const long n = parse_int(line.tokens[0], line.number);
    if (n < 3) fail(line.number, "face must have at least 3 vertices");
    if (line.tokens.size() != static_cast<size_t>(n) + 1) {
      fail(line.number, "face vertex count does not match index list");
    }
    std::vector<int> idx(n);
    for (long k = 0; k < n; ++k) {
      const long v = parse_int(line.tokens[k + 1], line.number);
      if (v < 0 || v >= nv) {
        fail(line.number, "vertex index " + std::to_string(v) + " out of range");
      }
      idx[k] = static_cast<int>(v);
    }
    for (long k = 1; k + 1 < n; ++k) {  // fan triangulation
      mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (cursor != lines.size()) fail(lines[cursor].number, "trailing content after face list");
  return mesh;
}

Mesh parse_off_text(const std::string& text) {
  std::istringstream ss(text);
  return parse_off(ss);
}

Mesh load_off(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open OFF file: " + path);
  try {
    return parse_off(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

namespace {

struct Transform {
  double scale = 1.0;
  std::array<double, 3> center{};  // mesh-space centroid of the bounding box
  double half = 0.0;               // grid-space center (resolution / 2)

  std::array<double, 3> apply(const std::array<double, 3>& p) const {
    return {(p[0] - center[0]) * scale + half,
            (p[1] - center[1]) * scale + half,
            (p[2] - center[2]) * scale + half};
  }
};

inline int clamp_cell(double x, int res) {
  int i = static_cast<int>(std::floor(x));
  if (i < 0) i = 0;
  if (i >= res) i = res - 1;
  return i;
}

}  // namespace

VoxelGrid voxelize_mesh(const Mesh& mesh, int resolution, const VoxelizeOptions& opt) {
  if (mesh.vertices.empty() || mesh.faces.empty()) {
    throw DataError("voxelize_mesh: mesh has no geometry");
  }
  if (resolution < 8) throw DataError("voxelize_mesh: resolution must be >= 8");

  std::array<double, 3> lo{1e300, 1e300, 1e300};
  std::array<double, 3> hi{-1e300, -1e300, -1e300};
  for (const auto& v : mesh.vertices) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
  }
  double extent = 0.0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
  if (extent <= 0.0) throw DataError("voxelize_mesh: mesh has zero extent");

  Transform tf;
  const double span = resolution - 2.0 * opt.pad;
  // Shrink a hair so points on the far bounding plane stay inside the band.
  tf.scale = span * (1.0 - 1e-9) / extent;
  for (int a = 0; a < 3; ++a) tf.center[a] = 0.5 * (lo[a] + hi[a]);
  tf.half = resolution * 0.5;

  VoxelGrid grid = VoxelGrid::cube(resolution);

  for (const auto& f : mesh.faces) {
    const auto a = tf.apply(mesh.vertices[f[0]]);
    const auto b = tf.apply(mesh.vertices[f[1]]);
    const auto c = tf.apply(mesh.vertices[f[2]]);
    // Sample lattice fine enough that adjacent samples are < half a voxel
    // apart; minimum 4x4 per triangle.
    double emax = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
      emax = std::max(emax, std::abs(b[axis] - a[axis]));
      emax = std::max(emax, std::abs(c[axis] - a[axis]));
      emax = std::max(emax, std::abs(c[axis] - b[axis]));
    }
    const int n = std::max(4, static_cast<int>(std::ceil(emax * 2.0)) + 1);
    for (int u = 0; u <= n; ++u) {
      for (int v = 0; v <= n - u; ++v) {
        const double fu = static_cast<double>(u) / n;
        const double fv = static_cast<double>(v) / n;
        const double fw = 1.0 - fu - fv;
        const double px = fw * a[0] + fu * b[0] + fv * c[0];
        const double py = fw * a[1] + fu * b[1] + fv * c[1];
        const double pz = fw * a[2] + fu * b[2] + fv * c[2];
        grid.at(clamp_cell(px, resolution), clamp_cell(py, resolution),
                clamp_cell(pz, resolution)) = 1.0f;
      }
    }
  }

  if (opt.solid) {
    // Flood-fill the exterior from the boundary; whatever empty space is
    // left cannot reach the outside and is interior.
    const int res = resolution;
    std::vector<uint8_t> exterior(grid.size(), 0);
    std::deque<std::array<int, 3>> queue;
    auto push_if_empty = [&](int d, int h, int w) {
      const size_t i = grid.index(d, h, w);
      if (grid.values[i] == 0.0f && !exterior[i]) {
        exterior[i] = 1;
        queue.push_back({d, h, w});
      }
    };
    for (int a = 0; a < res; ++a) {
      for (int b = 0; b < res; ++b) {
        push_if_empty(0, a, b);
        push_if_empty(res - 1, a, b);
        push_if_empty(a, 0, b);
        push_if_empty(a, res - 1, b);
        push_if_empty(a, b, 0);
        push_if_empty(a, b, res - 1);
      }
    }
    while (!queue.empty()) {
      const auto [d, h, w] = queue.front();
      queue.pop_front();
      if (d > 0) push_if_empty(d - 1, h, w);
      if (d + 1 < res) push_if_empty(d + 1, h, w);
      if (h > 0) push_if_empty(d, h - 1, w);
      if (h + 1 < res) push_if_empty(d, h + 1, w);
      if (w > 0) push_if_empty(d, h, w - 1);
      if (w + 1 < res) push_if_empty(d, h, w + 1);
    }
    for (size_t i = 0; i < grid.size(); ++i) {
      if (!exterior[i]) grid.values[i] = 1.0f;
    }
  }
  return grid;
}

}  // namespace vcnn
