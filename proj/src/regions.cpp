#include "wsr/regions.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "wsr/errors.hpp"

namespace wsr::regions {

using corpus::Patch;
using corpus::SlidePyramid;

static_assert(std::endian::native == std::endian::little,
              "feature store I/O assumes a little-endian host");

int Region::level2_slot() const {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].scale == Scale::Level2) return static_cast<int>(i);
  }
  return -1;
}

std::vector<Scale> Region::scale_tags() const {
  std::vector<Scale> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back(s.scale);
  return out;
}

std::vector<RegionGroup> enumerate_regions(const SlidePyramid& pyr, int grid) {
  if (grid < 1) throw ConfigError("enumerate_regions: grid must be positive");
  const std::size_t n2 = static_cast<std::size_t>(pyr.level2_rows) * pyr.level2_cols;
  const int rows1 = pyr.level2_rows * grid;
  const int cols1 = pyr.level2_cols * grid;
  if (pyr.level2.size() != n2 || pyr.level1.size() != static_cast<std::size_t>(rows1) * cols1) {
    throw ShapeError("enumerate_regions: level-1 grid must be " + std::to_string(grid) +
                     "x the level-2 grid (" + std::to_string(pyr.level2_rows) + "x" +
                     std::to_string(pyr.level2_cols) + " level-2 patches, " +
                     std::to_string(pyr.level1.size()) + " level-1 patches)");
  }
  std::vector<RegionGroup> out;
  for (int i = 0; i < pyr.level2_rows; ++i) {
    for (int j = 0; j < pyr.level2_cols; ++j) {
      RegionGroup g;
      g.level2_row = i;
      g.level2_col = j;
      g.level2_index = i * pyr.level2_cols + j;
      for (int dy = 0; dy < grid; ++dy) {
        for (int dx = 0; dx < grid; ++dx) {
          const int r = i * grid + dy;
          const int c = j * grid + dx;
          g.level1_coords.emplace_back(r, c);
          g.level1_indices.push_back(r * cols1 + c);
        }
      }
      out.push_back(std::move(g));
    }
  }
  return out;
}

Region assemble_region_at(const RegionGroup& group, int grid, int dropped_slot) {
  const int n = grid * grid;
  if (static_cast<int>(group.level1_indices.size()) != n) {
    throw ShapeError("assemble_region: group has " + std::to_string(group.level1_indices.size()) +
                     " candidates, expected " + std::to_string(n));
  }
  if (dropped_slot < 0 || dropped_slot >= n) throw ShapeError("assemble_region: slot out of range");
  Region r;
  r.grid = grid;
  r.level2_row = group.level2_row;
  r.level2_col = group.level2_col;
  r.slots.resize(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    r.slots[static_cast<std::size_t>(s)] =
        s == dropped_slot ? TokenRef{Scale::Level2, group.level2_index}
                          : TokenRef{Scale::Level1, group.level1_indices[static_cast<std::size_t>(s)]};
  }
  return r;
}

Region assemble_region(const RegionGroup& group, int grid, Rng& rng) {
  return assemble_region_at(group, grid, rng.uniform_int(grid * grid));
}

const Patch& token_patch(const SlidePyramid& pyr, const TokenRef& ref) {
  const auto& level = ref.scale == Scale::Level2 ? pyr.level2 : pyr.level1;
  if (ref.index < 0 || ref.index >= static_cast<int>(level.size())) {
    throw ShapeError("token reference out of range");
  }
  return level[static_cast<std::size_t>(ref.index)];
}

void validate_region(const Region& region, const SlidePyramid& pyr) {
  if (static_cast<int>(region.slots.size()) != region.grid * region.grid) {
    throw ShapeError("region slot count does not match grid");
  }
  const auto tags = region.scale_tags();
  if (std::count(tags.begin(), tags.end(), Scale::Level2) != 1) {
    throw ShapeError("region must hold exactly one level-2 token");
  }
  const Patch& first = token_patch(pyr, region.slots.front());
  for (const auto& s : region.slots) {
    const Patch& p = token_patch(pyr, s);
    if (p.size != first.size || p.pixels.size() != first.pixels.size()) {
      throw ShapeError("region tokens differ in shape");
    }
  }
}

double saturation_proxy(const Patch& patch) {
  const std::size_t n = patch.pixels.size() / 3;
  if (n == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* px = &patch.pixels[i * 3];
    acc += std::max({px[0], px[1], px[2]}) - std::min({px[0], px[1], px[2]});
  }
  return acc / static_cast<double>(n);
}

bool is_tissue(const Patch& patch, double threshold) { return saturation_proxy(patch) > threshold; }

std::vector<RegionGroup> filter_tissue(const std::vector<RegionGroup>& groups, const SlidePyramid& pyr,
                                       double threshold) {
  std::vector<RegionGroup> out;
  for (const auto& g : groups) {
    if (is_tissue(pyr.level2.at(static_cast<std::size_t>(g.level2_index)), threshold)) out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------- feature store

std::vector<double> FeatureMatrix::row(int r) const {
  return std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(r) * dim,
                             values.begin() + static_cast<std::ptrdiff_t>(r + 1) * dim);
}

bool FeatureMatrix::same_payload(const FeatureMatrix& other) const {
  return rows == other.rows && dim == other.dim && values.size() == other.values.size() &&
         (values.empty() ||
          std::memcmp(values.data(), other.values.data(), values.size() * sizeof(float)) == 0);
}

namespace {

constexpr char kMagic[4] = {'M', 'R', 'V', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated header: " + what);
  return v;
}

}  // namespace

void write_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  if (m.rows < 0 || m.dim < 0 ||
      m.values.size() != static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.dim)) {
    throw ShapeError("write_features: rows*dim does not match value count");
  }
  for (float v : m.values) {
    if (!std::isfinite(v)) throw FormatError("write_features: non-finite value (NaN/Inf) in " + m.slide_id);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows));
  put_u32(out, static_cast<std::uint32_t>(m.dim));
  out.write(reinterpret_cast<const char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (!out) throw FormatError("write failed for " + path.string());
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad magic in " + path.string());
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kVersion) throw FormatError("unsupported feature store version " + std::to_string(version));
  FeatureMatrix m;
  m.rows = static_cast<int>(get_u32(in, "rows"));
  m.dim = static_cast<int>(get_u32(in, "dim"));
  m.values.resize(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.dim));
  if (!in.read(reinterpret_cast<char*>(m.values.data()),
               static_cast<std::streamsize>(m.values.size() * sizeof(float)))) {
    throw FormatError("truncated payload in " + path.string());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path.string());
  return m;
}

void write_manifest(const std::filesystem::path& path, const FeatureManifest& manifest) {
  nlohmann::json j{{"G", manifest.grid}, {"Q", manifest.q}, {"L", manifest.l}, {"slides", nlohmann::json::object()}};
  for (const auto& [id, e] : manifest.slides) {
    j["slides"][id] = {{"path", e.path},
                       {"model_id", e.model_id},
                       {"region_rows", e.region_rows},
                       {"region_cols", e.region_cols}};
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2);
}

FeatureManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  FeatureManifest m;
  m.grid = j.at("G").get<int>();
  m.q = j.at("Q").get<int>();
  m.l = j.at("L").get<int>();
  for (const auto& [id, e] : j.at("slides").items()) {
    m.slides[id] = ManifestEntry{e.at("path").get<std::string>(), e.at("model_id").get<std::string>(),
                                 e.at("region_rows").get<int>(), e.at("region_cols").get<int>()};
  }
  return m;
}

FeatureMatrix sample_region_features(const FeatureMatrix& features, int region_rows, int region_cols,
                                     int q, int l, Rng& rng) {
  if (features.rows == 0) throw ShapeError("sample_region_features: empty feature set");
  if (q < 1 || l < 1) throw ConfigError("sample_region_features: Q and L must be >= 1");
  if (region_rows * region_cols != features.rows) {
    throw ShapeError("sample_region_features: region grid " + std::to_string(region_rows) + "x" +
                     std::to_string(region_cols) + " does not match " + std::to_string(features.rows) +
                     " rows");
  }
  if (l > region_rows || l > region_cols) {
    throw ConfigError("sample_region_features: window " + std::to_string(l) + "x" + std::to_string(l) +
                      " does not fit the region grid");
  }
  std::vector<int> windows;  // top-left region index
  for (int r = 0; r + l <= region_rows; ++r) {
    for (int c = 0; c + l <= region_cols; ++c) windows.push_back(r * region_cols + c);
  }
  std::vector<int> chosen;
  if (q <= static_cast<int>(windows.size())) {
    // partial Fisher-Yates
    for (int i = 0; i < q; ++i) {
      const int j = i + rng.uniform_int(static_cast<int>(windows.size()) - i);
      std::swap(windows[static_cast<std::size_t>(i)], windows[static_cast<std::size_t>(j)]);
      chosen.push_back(windows[static_cast<std::size_t>(i)]);
    }
  } else {
    for (int i = 0; i < q; ++i) {
      chosen.push_back(windows[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(windows.size())))]);
    }
  }
  FeatureMatrix out;
  out.rows = q * l * l;
  out.dim = features.dim;
  out.model_id = features.model_id;
  out.slide_id = features.slide_id;
  out.values.reserve(static_cast<std::size_t>(out.rows) * out.dim);
  for (int top_left : chosen) {
    const int r0 = top_left / region_cols;
    const int c0 = top_left % region_cols;
    for (int dr = 0; dr < l; ++dr) {
      for (int dc = 0; dc < l; ++dc) {
        const int idx = (r0 + dr) * region_cols + (c0 + dc);
        const auto first = features.values.begin() + static_cast<std::ptrdiff_t>(idx) * features.dim;
        out.values.insert(out.values.end(), first, first + features.dim);
      }
    }
  }
  return out;
}

}  // namespace wsr::regions
