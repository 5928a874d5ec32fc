#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepctr/data.hpp"
#include "deepctr/json_util.hpp"

namespace deepctr {

/// Shape of a synthetic CTR dataset. True click probability is
/// sigmoid(base + sum of basic-feature weights + gender x category interaction
///         + visual_weight * (2 s - 1))
/// where s in [0,1] is the brightness of a coloured patch planted in the image.
struct SynthSpec {
  std::size_t n_images = 1000;
  double mean_impressions_per_image = 60.0;
  double count_sigma = 0.8;                  // log-normal skew of per-image counts
  std::size_t fixed_impressions_per_image = 0;  // > 0 overrides the skewed counts
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t n_categories = 4;
  std::size_t images_per_group = 4;  // ad group: images sharing a group feature
  std::size_t n_zones = 50;
  std::size_t n_targets = 10;
  std::size_t n_genders = 2;
  std::size_t n_ages = 8;
  std::size_t n_power = 5;
  std::size_t n_noise = 200;  // one-hot field with zero true weight
  double base_logit = -1.5;
  double basic_weight_scale = 0.5;
  double interaction_scale = 1.0;
  double visual_weight = 1.5;
  double cold_group_fraction = 0.1;
  double test_fraction = 0.2;
  double valid_fraction = 0.1;  // warm impressions held out for checkpoint selection

  std::size_t n_groups() const { return (n_images + images_per_group - 1) / images_per_group; }
  std::size_t dim() const;
  /// Throws ConfigError on an unusable spec.
  void validate() const;
};

void to_json(json& j, const SynthSpec& s);
SynthSpec synth_spec_from_json(const json& j);

struct PlantedPatch {
  std::string image_id;
  std::size_t group = 0;
  std::size_t category = 0;
  std::size_t x = 0, y = 0, size = 0;
  double intensity = 0.0;
  bool cold = false;  // whole ad group withheld from training
};

struct SynthDataset {
  SynthSpec spec;
  std::uint64_t seed = 0;
  std::vector<Impression> impressions;  // log order
  std::vector<double> true_prob;
  std::vector<double> basic_logit;  // logit without the visual term
  ImageStore images;
  std::vector<PlantedPatch> patches;  // by image index in `images`
  std::vector<std::size_t> train_rows, valid_rows, test_rows, cold_rows;
};

SynthDataset synth_build(const SynthSpec& spec, std::uint64_t seed);

/// Writes impressions.tsv, train.tsv, valid.tsv, test.tsv, test_cold.tsv, truth.tsv,
/// patches.tsv, dataset.json and images/<id>.ppm under out_dir.
void synth_write(const SynthDataset& data, const std::filesystem::path& out_dir);

inline SynthDataset synth_generate(const SynthSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
  auto d = synth_build(spec, seed);
  synth_write(d, out_dir);
  return d;
}

/// Contents of dataset.json.
struct DatasetMeta {
  std::size_t dim = 0;
  std::size_t channels = 3, height = 0, width = 0;
  std::size_t n_categories = 0;
  std::size_t n_impressions = 0;
  std::size_t n_images = 0;
};

DatasetMeta load_dataset_meta(const std::filesystem::path& dataset_dir);

/// Planted-patch records (category, location, intensity) from patches.tsv.
std::vector<PlantedPatch> load_patches(const std::filesystem::path& path);

}  // namespace deepctr
