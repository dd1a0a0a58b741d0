#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "uvdef/nn.hpp"

namespace uvdef {

// Raised on unreadable, truncated, or incompatible checkpoint files.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

struct CheckpointData {
  Model model;
  std::map<std::string, std::string> metadata;
};

// Binary little-endian container (magic "UVDM", format version 1): full layer
// stack, parameters, and a free-form string metadata map. See
// docs/formats.md for the byte layout.
void save_checkpoint(const std::string& path, const Model& m,
                     const std::map<std::string, std::string>& metadata = {});
CheckpointData load_checkpoint(const std::string& path);

}  // namespace uvdef
