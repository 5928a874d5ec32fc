#include "deepctr/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace deepctr {

namespace {

[[noreturn]] void malformed(const std::string& source, std::size_t line, const std::string& what) {
  throw FormatError(source + ":" + std::to_string(line) + ": " + what);
}

std::size_t parse_index(std::string_view s, const std::string& source, std::size_t line) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) malformed(source, line, "bad feature index '" + std::string(s) + "'");
  return v;
}

double parse_value(std::string_view s, const std::string& source, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) malformed(source, line, "bad feature value '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::vector<Impression> parse_impressions(std::istream& in, std::size_t dim, const std::string& source) {
  std::vector<Impression> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) malformed(source, lineno, "expected 3 tab-separated fields");
    if (line.find('\t', t2 + 1) != std::string::npos) malformed(source, lineno, "too many fields");

    Impression imp;
    imp.image_id = line.substr(0, t1);
    if (imp.image_id.empty()) malformed(source, lineno, "empty image id");
    const std::string_view label(line.data() + t1 + 1, t2 - t1 - 1);
    if (label == "0") {
      imp.label = 0;
    } else if (label == "1") {
      imp.label = 1;
    } else {
      malformed(source, lineno, "label must be 0 or 1, got '" + std::string(label) + "'");
    }

    std::string_view feats(line.data() + t2 + 1, line.size() - t2 - 1);
    while (!feats.empty()) {
      const auto comma = feats.find(',');
      const std::string_view item = feats.substr(0, comma);
      const auto colon = item.find(':');
      if (colon == std::string_view::npos) malformed(source, lineno, "feature '" + std::string(item) + "' lacks ':'");
      SparseEntry e{parse_index(item.substr(0, colon), source, lineno), parse_value(item.substr(colon + 1), source, lineno)};
      if (e.index >= dim) {
        malformed(source, lineno, "feature index " + std::to_string(e.index) + " >= dim " + std::to_string(dim));
      }
      imp.features.push_back(e);
      feats = comma == std::string_view::npos ? std::string_view{} : feats.substr(comma + 1);
    }
    std::sort(imp.features.begin(), imp.features.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    for (std::size_t i = 1; i < imp.features.size(); ++i) {
      if (imp.features[i].index == imp.features[i - 1].index) {
        malformed(source, lineno, "duplicate feature index " + std::to_string(imp.features[i].index));
      }
    }
    out.push_back(std::move(imp));
  }
  return out;
}

std::vector<Impression> load_impressions(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open impressions file");
  return parse_impressions(in, dim, path.string());
}

void write_impressions(std::ostream& out, std::span<const Impression> rows) {
  char buf[64];
  for (const auto& imp : rows) {
    out << imp.image_id << '\t' << imp.label << '\t';
    for (std::size_t i = 0; i < imp.features.size(); ++i) {
      if (i) out << ',';
      // shortest round-trip representation
      const auto r = std::to_chars(buf, buf + sizeof buf, imp.features[i].value);
      out << imp.features[i].index << ':' << std::string_view(buf, static_cast<std::size_t>(r.ptr - buf));
    }
    out << '\n';
  }
}

void write_impressions(const std::filesystem::path& path, std::span<const Impression> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  write_impressions(out, rows);
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

SparseBatch features_of(std::span<const Impression> impressions, std::span<const std::size_t> rows, std::size_t dim) {
  SparseBatch v(dim);
  for (std::size_t r : rows) v.append_row(impressions[r].features);
  return v;
}

SparseBatch features_of(std::span<const Impression> impressions, std::size_t dim) {
  SparseBatch v(dim);
  for (const auto& imp : impressions) v.append_row(imp.features);
  return v;
}

std::vector<double> labels_of(std::span<const Impression> impressions) {
  std::vector<double> y;
  y.reserve(impressions.size());
  for (const auto& imp : impressions) y.push_back(static_cast<double>(imp.label));
  return y;
}

// --- images ----------------------------------------------------------------------

std::filesystem::path image_path(const std::filesystem::path& root, const std::string& image_id) {
  auto p = root / (image_id + ".ppm");
  if (!std::filesystem::exists(p)) {
    auto gray = root / (image_id + ".pgm");
    if (std::filesystem::exists(gray)) return gray;
  }
  return p;
}

Tensor read_image_file(const std::filesystem::path& path) { return pnm_to_tensor(read_pnm(path)); }

ImageStore ImageStore::load(const std::filesystem::path& root, std::span<const std::string> ids, std::size_t side) {
  ImageStore store;
  for (const auto& id : ids) {
    if (store.contains(id)) continue;
    const auto path = image_path(root, id);
    if (!std::filesystem::exists(path)) throw std::out_of_range("image store: no file for image id '" + id + "' under " + root.string());
    Tensor image = read_image_file(path);
    if (side != 0 && (image.dim(1) != side || image.dim(2) != side)) image = center_resize(image, side);
    store.add(id, std::move(image));
  }
  return store;
}

void ImageStore::add(std::string id, Tensor image) {
  require_rank(image, 3, "ImageStore::add");
  if (images_.empty()) {
    shape_ = image.shape();
  } else if (image.shape() != shape_) {
    throw DimensionError("ImageStore: image '" + id + "' has shape " + shape_string(image.shape()) +
                         ", store holds " + shape_string(shape_));
  }
  if (index_.contains(id)) throw std::invalid_argument("ImageStore: duplicate id '" + id + "'");
  index_.emplace(id, images_.size());
  ids_.push_back(std::move(id));
  images_.push_back(std::move(image));
}

std::size_t ImageStore::index_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw std::out_of_range("image store: unknown image id '" + id + "'");
  return it->second;
}

Tensor load_image(const ImageStore& store, const std::string& image_id) { return store.get(image_id); }

// --- grouping --------------------------------------------------------------------

GroupIndex build_group_index(std::span<const Impression> impressions) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < impressions.size(); ++r) groups[impressions[r].image_id].push_back(r);
  GroupIndex g;
  g.total = impressions.size();
  g.image_ids.reserve(groups.size());
  g.rows.reserve(groups.size());
  for (auto& [id, rows] : groups) {
    g.image_ids.push_back(id);
    g.rows.push_back(std::move(rows));
  }
  return g;
}

std::vector<std::string> unique_image_ids(std::span<const Impression> impressions) {
  std::vector<std::string> ids;
  ids.reserve(impressions.size());
  for (const auto& imp : impressions) ids.push_back(imp.image_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace deepctr
