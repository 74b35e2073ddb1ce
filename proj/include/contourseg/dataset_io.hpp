#pragma once

#include <string>
#include <vector>

#include "contourseg/data.hpp"
#include "contourseg/volume.hpp"

namespace contourseg {

// Binary volume file ("CSV1"): magic, dims, num_classes, dtype codes, then
// the raw little-endian intensity (f64) and label (u16) blocks.
void save_sample(const std::string& path, const Sample& sample);
Sample load_sample(const std::string& path);

// JSON manifest describing a dataset directory: volume dims, class count,
// and one file entry per volume with its train/val/test assignment. File
// names are stored relative to the manifest's directory.
struct ManifestEntry {
  std::string file;
  std::string split;
};

struct DatasetManifest {
  int num_classes = 0;
  Dims3 shape{0, 0, 0};
  std::vector<ManifestEntry> entries;
  std::string base_dir;  // set by load_manifest; joined onto entry files

  std::vector<std::string> files_for(const std::string& split) const;
};

void save_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::string& path);

// Generates the spec's volumes into dir (vol_0000.csv1, ...) and writes
// manifest.json assigning the first num_train volumes to "train", the next
// num_val to "val", and the last num_test to "test". The counts must sum to
// spec.num_volumes.
DatasetManifest write_dataset(const std::string& dir, const DatasetSpec& spec,
                              int num_train, int num_val, int num_test);

// Loads every volume of one split, checking dims and class count against
// the manifest.
std::vector<Sample> load_split(const DatasetManifest& manifest, const std::string& split);

}  // namespace contourseg
