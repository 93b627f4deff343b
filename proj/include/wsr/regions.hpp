#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wsr/corpus.hpp"
#include "wsr/rng.hpp"

namespace wsr::regions {

enum class Scale : std::uint8_t { Level1, Level2 };

// One level-2 patch and the G x G level-1 patches spatially underneath it.
struct RegionGroup {
  int level2_row = 0;
  int level2_col = 0;
  int level2_index = 0;
  std::vector<int> level1_indices;                 // row-major within the group
  std::vector<std::pair<int, int>> level1_coords;  // (row, col) in the level-1 grid
};

struct TokenRef {
  Scale scale = Scale::Level1;
  int index = 0;  // into SlidePyramid::level1 or ::level2
};

// G x G multi-scale token grid: exactly one slot holds the level-2 patch.
struct Region {
  int grid = 4;
  std::vector<TokenRef> slots;  // row-major
  std::string slide_id;
  int level2_row = 0;
  int level2_col = 0;

  int level2_slot() const;
  std::vector<Scale> scale_tags() const;
};

std::vector<RegionGroup> enumerate_regions(const corpus::SlidePyramid& pyramid, int grid);

// Drops one level-1 slot uniformly at random and puts the level-2 patch there.
Region assemble_region(const RegionGroup& group, int grid, Rng& rng);
// Same, with the dropped slot given explicitly.
Region assemble_region_at(const RegionGroup& group, int grid, int dropped_slot);

const corpus::Patch& token_patch(const corpus::SlidePyramid& pyramid, const TokenRef& ref);
// Throws ShapeError unless the region satisfies the one-level-2 and
// uniform-token-shape invariants against its pyramid.
void validate_region(const Region& region, const corpus::SlidePyramid& pyramid);

// Mean per-pixel (max - min) over RGB; a cheap saturation proxy.
double saturation_proxy(const corpus::Patch& patch);
bool is_tissue(const corpus::Patch& patch, double threshold = 0.02);
std::vector<RegionGroup> filter_tissue(const std::vector<RegionGroup>& groups,
                                       const corpus::SlidePyramid& pyramid, double threshold = 0.02);

// ---------------------------------------------------------------- feature store

struct FeatureMatrix {
  int rows = 0;
  int dim = 0;
  std::vector<float> values;  // row-major
  std::string model_id;
  std::string slide_id;

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * dim + c]; }
  std::vector<double> row(int r) const;
  // Bitwise comparison of shape and payload; provenance is not compared.
  bool same_payload(const FeatureMatrix& other) const;
};

// "MRVF", version u32, rows u32, dim u32, rows*dim little-endian float32.
void write_features(const std::filesystem::path& path, const FeatureMatrix& m);
FeatureMatrix read_features(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string model_id;
  int region_rows = 0;  // slide region-grid geometry
  int region_cols = 0;
};

struct FeatureManifest {
  int grid = 4;
  int q = 1;
  int l = 1;
  std::map<std::string, ManifestEntry> slides;
};

void write_manifest(const std::filesystem::path& path, const FeatureManifest& manifest);
FeatureManifest read_manifest(const std::filesystem::path& path);

// Q contiguous L x L windows over the slide's region grid (row-major region
// rows in `features`). Windows are drawn without replacement when Q does not
// exceed the window count, with replacement otherwise. Output has Q*L*L rows.
FeatureMatrix sample_region_features(const FeatureMatrix& features, int region_rows,
                                     int region_cols, int q, int l, Rng& rng);

}  // namespace wsr::regions
