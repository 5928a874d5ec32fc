#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepctr/netpbm.hpp"
#include "deepctr/sparse.hpp"
#include "deepctr/tensor.hpp"

namespace deepctr {

/// One logged ad display: image, click label and index-encoded basic features.
struct Impression {
  std::string image_id;
  int label = 0;
  SparseRow features;

  friend bool operator==(const Impression&, const Impression&) = default;
};

// Impression log: one record per line,
//   image_id <TAB> label <TAB> idx:val[,idx:val...]
// with base-0 indices. An impression without features leaves the third field
// empty.
std::vector<Impression> parse_impressions(std::istream& in, std::size_t dim, const std::string& source = "<stream>");
std::vector<Impression> load_impressions(const std::filesystem::path& path, std::size_t dim);
void write_impressions(std::ostream& out, std::span<const Impression> rows);
void write_impressions(const std::filesystem::path& path, std::span<const Impression> rows);

/// CSR batch holding the features of `rows` (in that order).
SparseBatch features_of(std::span<const Impression> impressions, std::span<const std::size_t> rows, std::size_t dim);
SparseBatch features_of(std::span<const Impression> impressions, std::size_t dim);
std::vector<double> labels_of(std::span<const Impression> impressions);

/// Immutable image_id -> [c x h x w] tensor map backed by <root>/<id>.ppm.
class ImageStore {
 public:
  ImageStore() = default;

  /// Loads every listed id from root; all images must share one shape. With
  /// `side` set, images of any other size are center-resized to side x side.
  static ImageStore load(const std::filesystem::path& root, std::span<const std::string> ids, std::size_t side = 0);

  /// In-memory construction (generator, tests).
  void add(std::string id, Tensor image);

  bool contains(const std::string& id) const { return index_.contains(id); }
  std::size_t index_of(const std::string& id) const;
  const Tensor& get(const std::string& id) const { return images_[index_of(id)]; }
  const Tensor& at(std::size_t index) const { return images_.at(index); }
  const std::string& id_at(std::size_t index) const { return ids_.at(index); }
  std::size_t size() const { return images_.size(); }
  const Shape& image_shape() const { return shape_; }

 private:
  std::vector<std::string> ids_;
  std::vector<Tensor> images_;
  std::unordered_map<std::string, std::size_t> index_;
  Shape shape_;
};

std::filesystem::path image_path(const std::filesystem::path& root, const std::string& image_id);
/// Reads <root>/<id>.ppm (or .pgm) into a channels-first tensor in [0, 1].
Tensor read_image_file(const std::filesystem::path& path);
/// Copy of the stored image; throws std::out_of_range on a missing id.
Tensor load_image(const ImageStore& store, const std::string& image_id);

/// Impression rows partitioned by image. Ids are in lexicographic order.
struct GroupIndex {
  std::vector<std::string> image_ids;
  std::vector<std::vector<std::size_t>> rows;  // rows[g] = impression rows of image_ids[g]
  std::size_t total = 0;

  std::size_t size() const { return image_ids.size(); }
  std::size_t count(std::size_t g) const { return rows[g].size(); }
};

GroupIndex build_group_index(std::span<const Impression> impressions);

/// Distinct image ids referenced by the impressions, sorted.
std::vector<std::string> unique_image_ids(std::span<const Impression> impressions);

}  // namespace deepctr
