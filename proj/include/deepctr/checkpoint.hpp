#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepctr/json_util.hpp"
#include "deepctr/netpbm.hpp"  // FormatError
#include "deepctr/network.hpp"

namespace deepctr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named tensors plus a JSON header (net config, iteration, seeds, schedule
/// state). On disk: "DCTR", u32 version, u64 header length, header bytes,
/// u64 tensor count, then per tensor u32 name length, name, u32 rank,
/// u64 dims, f64 values. All integers and floats little-endian.
struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  void put(std::string name, Tensor t);
};

std::string checkpoint_bytes(const Checkpoint& c);
Checkpoint checkpoint_parse(std::string_view bytes, const std::string& source = "<memory>");

/// Writes via a temporary file and rename.
void checkpoint_save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint checkpoint_load(const std::filesystem::path& path);

/// Values, momentum buffers (as "<name>@momentum") and buffers under prefix.
void store_state(Checkpoint& c, std::span<const ParamRef> params, std::span<const BufferRef> buffers,
                 const std::string& prefix = "", bool with_momentum = true);
/// Inverse of store_state. Shapes must match; momentum is optional in the file
/// (missing means zero) unless `require_momentum`.
void restore_state(const Checkpoint& c, std::span<const ParamRef> params, std::span<const BufferRef> buffers,
                   const std::string& prefix = "", bool require_momentum = false);

}  // namespace deepctr
