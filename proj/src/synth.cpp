#include "deepctr/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "deepctr/layers.hpp"
#include "deepctr/rng.hpp"

namespace deepctr {

std::size_t SynthSpec::dim() const {
  return n_zones + n_groups() + n_targets + n_categories + n_genders + n_ages + n_power + n_noise;
}

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("synth spec: " + m); };
  if (n_images == 0) fail("n_images must be positive");
  if (fixed_impressions_per_image == 0 && !(mean_impressions_per_image >= 1.0)) {
    fail("mean_impressions_per_image must be >= 1");
  }
  if (count_sigma < 0.0) fail("count_sigma must be >= 0");
  if (image_size < 4) fail("image_size must be >= 4");
  if (patch_size == 0 || patch_size > image_size) fail("patch_size must be in [1, image_size]");
  if (n_categories == 0 || images_per_group == 0) fail("n_categories and images_per_group must be positive");
  if (n_zones == 0 || n_targets == 0 || n_genders == 0 || n_ages == 0 || n_power == 0) {
    fail("every basic field needs at least one value");
  }
  if (!(cold_group_fraction >= 0.0 && cold_group_fraction < 1.0)) fail("cold_group_fraction must be in [0,1)");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("test_fraction must be in [0,1)");
  if (!(valid_fraction >= 0.0 && test_fraction + valid_fraction < 1.0)) {
    fail("valid_fraction must be >= 0 with test_fraction + valid_fraction < 1");
  }
}

void to_json(json& j, const SynthSpec& s) {
  j = json{{"n_images", s.n_images},
           {"mean_impressions_per_image", s.mean_impressions_per_image},
           {"count_sigma", s.count_sigma},
           {"fixed_impressions_per_image", s.fixed_impressions_per_image},
           {"image_size", s.image_size},
           {"patch_size", s.patch_size},
           {"n_categories", s.n_categories},
           {"images_per_group", s.images_per_group},
           {"n_zones", s.n_zones},
           {"n_targets", s.n_targets},
           {"n_genders", s.n_genders},
           {"n_ages", s.n_ages},
           {"n_power", s.n_power},
           {"n_noise", s.n_noise},
           {"base_logit", s.base_logit},
           {"basic_weight_scale", s.basic_weight_scale},
           {"interaction_scale", s.interaction_scale},
           {"visual_weight", s.visual_weight},
           {"cold_group_fraction", s.cold_group_fraction},
           {"test_fraction", s.test_fraction},
           {"valid_fraction", s.valid_fraction}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  StrictReader r(j, "synth spec");
  r.get("n_images", s.n_images)
      .get("mean_impressions_per_image", s.mean_impressions_per_image)
      .get("count_sigma", s.count_sigma)
      .get("fixed_impressions_per_image", s.fixed_impressions_per_image)
      .get("image_size", s.image_size)
      .get("patch_size", s.patch_size)
      .get("n_categories", s.n_categories)
      .get("images_per_group", s.images_per_group)
      .get("n_zones", s.n_zones)
      .get("n_targets", s.n_targets)
      .get("n_genders", s.n_genders)
      .get("n_ages", s.n_ages)
      .get("n_power", s.n_power)
      .get("n_noise", s.n_noise)
      .get("base_logit", s.base_logit)
      .get("basic_weight_scale", s.basic_weight_scale)
      .get("interaction_scale", s.interaction_scale)
      .get("visual_weight", s.visual_weight)
      .get("cold_group_fraction", s.cold_group_fraction)
      .get("test_fraction", s.test_fraction)
      .get("valid_fraction", s.valid_fraction)
      .finish();
  s.validate();
  return s;
}

namespace {

struct FieldLayout {
  std::size_t zone, group, target, category, gender, age, power, noise;

  explicit FieldLayout(const SynthSpec& s) {
    zone = 0;
    group = zone + s.n_zones;
    target = group + s.n_groups();
    category = target + s.n_targets;
    gender = category + s.n_categories;
    age = gender + s.n_genders;
    power = age + s.n_ages;
    noise = power + s.n_power;
  }
};

// Fully saturated colour for a category: at least one channel is zero, so the
// patch never looks grey.
std::array<double, 3> category_hue(std::size_t category, std::size_t n_categories) {
  const double h = 6.0 * static_cast<double>(category) / static_cast<double>(n_categories);
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

Tensor render_image(const SynthSpec& s, const PlantedPatch& patch, Rng& rng) {
  const std::size_t n = s.image_size;
  Tensor img({3, n, n});
  std::vector<double> gray(n * n);
  const double base = rng.uniform(0.25, 0.75);
  for (double& g : gray) g = base + rng.uniform(-0.08, 0.08);
  for (int k = 0; k < 2; ++k) {
    const std::size_t w = 4 + rng.uniform_index(n / 3), h = 4 + rng.uniform_index(n / 3);
    const std::size_t x0 = rng.uniform_index(n - std::min(w, n - 1)), y0 = rng.uniform_index(n - std::min(h, n - 1));
    const double level = rng.uniform();
    for (std::size_t y = y0; y < std::min(n, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(n, x0 + w); ++x) gray[y * n + x] = level;
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n * n; ++i) img[c * n * n + i] = std::clamp(gray[i], 0.0, 1.0);

  const auto hue = category_hue(patch.category, s.n_categories);
  const double level = 0.3 + 0.7 * patch.intensity;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = patch.y; y < patch.y + patch.size; ++y)
      for (std::size_t x = patch.x; x < patch.x + patch.size; ++x) img[(c * n + y) * n + x] = hue[c] * level;
  // quantise exactly as the stored file will be
  return pnm_to_tensor(tensor_to_pnm(img));
}

std::string image_name(std::size_t i, std::size_t n) {
  const std::size_t width = std::max<std::size_t>(5, std::to_string(n).size());
  std::string num = std::to_string(i);
  return "img" + std::string(width - num.size(), '0') + num;
}

}  // namespace

SynthDataset synth_build(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  SynthDataset d;
  d.spec = spec;
  d.seed = seed;
  Rng rng(derive_seed(seed, streams::kSynth));
  const FieldLayout f(spec);
  const double ws = spec.basic_weight_scale;

  auto draw = [&](std::size_t count, double scale) {
    std::vector<double> w(count);
    for (double& v : w) v = rng.normal(0.0, scale);
    return w;
  };
  const auto w_zone = draw(spec.n_zones, ws);
  const auto w_group = draw(spec.n_groups(), ws);
  const auto w_target = draw(spec.n_targets, 0.6 * ws);
  const auto w_category = draw(spec.n_categories, 0.6 * ws);
  const auto w_gender = draw(spec.n_genders, 0.6 * ws);
  const auto w_age = draw(spec.n_ages, 0.6 * ws);
  const auto w_power = draw(spec.n_power, 0.6 * ws);
  const auto w_inter = draw(spec.n_genders * spec.n_categories, spec.interaction_scale);

  std::vector<std::size_t> group_category(spec.n_groups());
  for (auto& c : group_category) c = rng.uniform_index(spec.n_categories);

  std::vector<std::size_t> group_order(spec.n_groups());
  std::iota(group_order.begin(), group_order.end(), 0);
  for (std::size_t i = group_order.size(); i > 1; --i) std::swap(group_order[i - 1], group_order[rng.uniform_index(i)]);
  const auto n_cold = static_cast<std::size_t>(std::floor(spec.cold_group_fraction * static_cast<double>(spec.n_groups())));
  std::vector<bool> group_cold(spec.n_groups(), false);
  for (std::size_t i = 0; i < n_cold; ++i) group_cold[group_order[i]] = true;

  for (std::size_t i = 0; i < spec.n_images; ++i) {
    PlantedPatch p;
    p.image_id = image_name(i, spec.n_images);
    p.group = i / spec.images_per_group;
    p.category = group_category[p.group];
    p.size = spec.patch_size;
    p.x = rng.uniform_index(spec.image_size - spec.patch_size + 1);
    p.y = rng.uniform_index(spec.image_size - spec.patch_size + 1);
    p.intensity = rng.uniform();
    p.cold = group_cold[p.group];
    d.images.add(p.image_id, render_image(spec, p, rng));
    d.patches.push_back(std::move(p));
  }

  struct Pending {
    Impression imp;
    double basic_logit, prob;
    bool cold;
  };
  std::vector<Pending> rows;
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    const PlantedPatch& p = d.patches[i];
    std::size_t count = spec.fixed_impressions_per_image;
    if (count == 0) {
      const double sg = spec.count_sigma;
      const double c = spec.mean_impressions_per_image * std::exp(sg * rng.normal() - 0.5 * sg * sg);
      count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(c)));
    }
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t zone = rng.uniform_index(spec.n_zones);
      const std::size_t target = rng.uniform_index(spec.n_targets);
      const std::size_t gender = rng.uniform_index(spec.n_genders);
      const std::size_t age = rng.uniform_index(spec.n_ages);
      const std::size_t power = rng.uniform_index(spec.n_power);
      Impression imp;
      imp.image_id = p.image_id;
      imp.features = {{f.zone + zone, 1.0},         {f.group + p.group, 1.0}, {f.target + target, 1.0},
                      {f.category + p.category, 1.0}, {f.gender + gender, 1.0}, {f.age + age, 1.0},
                      {f.power + power, 1.0}};
      if (spec.n_noise > 0) imp.features.push_back({f.noise + rng.uniform_index(spec.n_noise), 1.0});
      const double basic = spec.base_logit + w_zone[zone] + w_group[p.group] + w_target[target] +
                           w_category[p.category] + w_gender[gender] + w_age[age] + w_power[power] +
                           w_inter[gender * spec.n_categories + p.category];
      const double prob = sigmoid(basic + spec.visual_weight * (2.0 * p.intensity - 1.0));
      imp.label = rng.bernoulli(prob) ? 1 : 0;
      rows.push_back({std::move(imp), basic, prob, p.cold});
    }
  }

  // log order: shuffled
  for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.uniform_index(i)]);
  d.impressions.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].cold) {
      d.test_rows.push_back(r);
      d.cold_rows.push_back(r);
    } else {
      const double u = rng.uniform();
      if (u < spec.test_fraction) {
        d.test_rows.push_back(r);
      } else if (u < spec.test_fraction + spec.valid_fraction) {
        d.valid_rows.push_back(r);
      } else {
        d.train_rows.push_back(r);
      }
    }
    d.basic_logit.push_back(rows[r].basic_logit);
    d.true_prob.push_back(rows[r].prob);
    d.impressions.push_back(std::move(rows[r].imp));
  }
  return d;
}

namespace {

void write_subset(const std::filesystem::path& path, const std::vector<Impression>& all, const std::vector<std::size_t>& rows) {
  std::vector<Impression> subset;
  subset.reserve(rows.size());
  for (std::size_t r : rows) subset.push_back(all[r]);
  write_impressions(path, subset);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void synth_write(const SynthDataset& d, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  write_impressions(out_dir / "impressions.tsv", d.impressions);
  write_subset(out_dir / "train.tsv", d.impressions, d.train_rows);
  write_subset(out_dir / "valid.tsv", d.impressions, d.valid_rows);
  write_subset(out_dir / "test.tsv", d.impressions, d.test_rows);
  write_subset(out_dir / "test_cold.tsv", d.impressions, d.cold_rows);

  {
    std::ofstream truth(out_dir / "truth.tsv", std::ios::trunc);
    for (std::size_t r = 0; r < d.impressions.size(); ++r) {
      truth << d.impressions[r].image_id << '\t' << r << '\t' << format_double(d.true_prob[r]) << '\n';
    }
    if (!truth) throw std::runtime_error("synth_write: cannot write truth.tsv");
  }
  {
    std::ofstream patches(out_dir / "patches.tsv", std::ios::trunc);
    for (const auto& p : d.patches) {
      patches << p.image_id << '\t' << p.category << '\t' << p.x << '\t' << p.y << '\t' << p.size << '\t'
              << format_double(p.intensity) << '\t' << (p.cold ? 1 : 0) << '\n';
    }
    if (!patches) throw std::runtime_error("synth_write: cannot write patches.tsv");
  }
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    write_pnm(out_dir / "images" / (d.images.id_at(i) + ".ppm"), tensor_to_pnm(d.images.at(i)));
  }

  const Shape& shape = d.images.image_shape();
  json meta{{"dim", d.spec.dim()},
            {"channels", shape[0]},
            {"height", shape[1]},
            {"width", shape[2]},
            {"n_categories", d.spec.n_categories},
            {"n_impressions", d.impressions.size()},
            {"n_images", d.images.size()},
            {"n_train", d.train_rows.size()},
            {"n_valid", d.valid_rows.size()},
            {"n_test", d.test_rows.size()},
            {"n_test_cold", d.cold_rows.size()},
            {"seed", d.seed},
            {"spec", d.spec}};
  std::ofstream(out_dir / "dataset.json", std::ios::trunc) << meta.dump(2) << '\n';
}

DatasetMeta load_dataset_meta(const std::filesystem::path& dataset_dir) {
  std::ifstream in(dataset_dir / "dataset.json");
  if (!in) throw std::runtime_error((dataset_dir / "dataset.json").string() + ": cannot open");
  const json j = json::parse(in);
  DatasetMeta m;
  m.dim = j.at("dim").get<std::size_t>();
  m.channels = j.at("channels").get<std::size_t>();
  m.height = j.at("height").get<std::size_t>();
  m.width = j.at("width").get<std::size_t>();
  m.n_categories = j.at("n_categories").get<std::size_t>();
  m.n_impressions = j.at("n_impressions").get<std::size_t>();
  m.n_images = j.at("n_images").get<std::size_t>();
  return m;
}

std::vector<PlantedPatch> load_patches(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::vector<PlantedPatch> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    PlantedPatch p;
    int cold = 0;
    if (!(ls >> p.image_id >> p.category >> p.x >> p.y >> p.size >> p.intensity >> cold)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed patch record");
    }
    p.cold = cold != 0;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace deepctr
