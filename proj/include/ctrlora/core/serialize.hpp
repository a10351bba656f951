#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlora/core/tensor.hpp"

namespace ctrlora {

using json = nlohmann::json;

// Named-tensor archive: one file, little-endian.
//   u64 header length | UTF-8 JSON header | zero pad to 64 | tensor blobs
// The header carries arbitrary metadata plus a "tensors" table of
// {name, offset, shape, dtype} with offsets relative to the first blob byte.
// Tensors are stored name-sorted and 64-byte aligned, so identical content
// always produces identical bytes.

struct Archive {
    json meta;  // header without the "tensors" table
    std::map<std::string, Tensor> tensors;
};

void write_archive(const std::filesystem::path& path, const json& meta,
                   const std::map<std::string, Tensor>& tensors);

Archive read_archive(const std::filesystem::path& path);

}  // namespace ctrlora
