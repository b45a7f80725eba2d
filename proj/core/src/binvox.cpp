#include "vcnn/binvox.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vcnn/errors.hpp"

namespace vcnn {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw DataError("binvox: " + what);
}

// Reads one LF-terminated header line starting at pos.
std::string take_line(const std::vector<uint8_t>& bytes, size_t& pos) {
  std::string line;
  while (pos < bytes.size() && bytes[pos] != '\n') {
    line.push_back(static_cast<char>(bytes[pos++]));
  }
  if (pos >= bytes.size()) fail("truncated header");
  ++pos;  // consume '\n'
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

VoxelGrid read_binvox(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  if (take_line(bytes, pos) != "#binvox 1") fail("bad magic (expected '#binvox 1')");

  std::istringstream dim_line(take_line(bytes, pos));
  std::string word;
  int d = 0, h = 0, w = 0;
  if (!(dim_line >> word >> d >> h >> w) || word != "dim" || d <= 0 || h <= 0 || w <= 0) {
    fail("bad dim line");
  }
  if (take_line(bytes, pos).rfind("translate", 0) != 0) fail("missing translate line");
  if (take_line(bytes, pos).rfind("scale", 0) != 0) fail("missing scale line");
  if (take_line(bytes, pos) != "data") fail("missing data marker");

  VoxelGrid grid(d, h, w);
  const size_t total = grid.size();
  size_t filled = 0;
  while (filled < total) {
    if (pos + 1 >= bytes.size()) fail("truncated RLE data");
    const uint8_t value = bytes[pos++];
    const uint8_t count = bytes[pos++];
    if (value != 0 && value != 1) fail("RLE value byte must be 0 or 1");
    if (count == 0) fail("RLE count byte of zero");
    if (filled + count > total) fail("RLE run total exceeds dim^3");
    for (int i = 0; i < count; ++i) grid.values[filled++] = static_cast<float>(value);
  }
  if (pos != bytes.size()) fail("trailing bytes after RLE data");
  return grid;
}

std::vector<uint8_t> write_binvox(const VoxelGrid& grid) {
  if (grid.size() == 0) fail("empty grid");
  for (float v : grid.values) {
    if (v != 0.0f && v != 1.0f) fail("grid is not binary");
  }
  std::string header = "#binvox 1\ndim " + std::to_string(grid.depth) + " " +
                       std::to_string(grid.height) + " " + std::to_string(grid.width) +
                       "\ntranslate 0 0 0\nscale 1\ndata\n";
  std::vector<uint8_t> out(header.begin(), header.end());
  size_t i = 0;
  while (i < grid.size()) {
    const uint8_t value = grid.values[i] != 0.0f ? 1 : 0;
    size_t run = 1;
    while (i + run < grid.size() && run < 255 &&
           (grid.values[i + run] != 0.0f ? 1 : 0) == value) {
      ++run;
    }
    out.push_back(value);
    out.push_back(static_cast<uint8_t>(run));
    i += run;
  }
  return out;
}

VoxelGrid load_binvox(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open binvox file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  try {
    return read_binvox(bytes);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void save_binvox(const VoxelGrid& grid, const std::string& path) {
  const auto bytes = write_binvox(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write binvox file: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  if (!out) throw DataError("short write: " + path);
}

}  // namespace vcnn
