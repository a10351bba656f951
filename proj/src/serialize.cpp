#include "ctrlora/core/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "ctrlora/core/errors.hpp"

namespace ctrlora {

namespace {

constexpr uint64_t kAlign = 64;
constexpr int kFormatVersion = 1;

uint64_t align_up(uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void write_archive(const std::filesystem::path& path, const json& meta,
                   const std::map<std::string, Tensor>& tensors) {
    json header = meta;
    header["format_version"] = kFormatVersion;

    json table = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        offset = align_up(offset);
        table.push_back({{"name", name},
                         {"offset", offset},
                         {"shape", t.shape},
                         {"dtype", "f64"}});
        offset += sizeof(double) * static_cast<uint64_t>(t.numel());
    }
    header["tensors"] = std::move(table);

    const std::string hdr = header.dump();
    const uint64_t hdr_len = hdr.size();
    const uint64_t data_start = align_up(8 + hdr_len);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for write: " + path.string());
    out.write(reinterpret_cast<const char*>(&hdr_len), 8);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr_len));
    static const char zeros[kAlign] = {};
    out.write(zeros, static_cast<std::streamsize>(data_start - 8 - hdr_len));

    uint64_t pos = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t aligned = align_up(pos);
        out.write(zeros, static_cast<std::streamsize>(aligned - pos));
        out.write(reinterpret_cast<const char*>(t.ptr()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
        pos = aligned + sizeof(double) * static_cast<uint64_t>(t.numel());
    }
    if (!out) throw DataError("write failed: " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    uint64_t hdr_len = 0;
    in.read(reinterpret_cast<char*>(&hdr_len), 8);
    if (!in || hdr_len == 0 || hdr_len > (1ull << 31)) throw DataError("corrupt archive header: " + path.string());
    std::string hdr(hdr_len, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(hdr_len));
    if (!in) throw DataError("corrupt archive: " + path.string());

    json header;
    try {
        header = json::parse(hdr);
    } catch (const json::exception& e) {
        throw DataError("archive header is not valid JSON: " + std::string(e.what()));
    }
    if (!header.contains("format_version") || header["format_version"].get<int>() != kFormatVersion)
        throw CompatibilityError("unsupported archive format version in " + path.string());

    const uint64_t data_start = align_up(8 + hdr_len);
    Archive ar;
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        Tensor t(e.at("shape").get<std::vector<int64_t>>());
        in.seekg(static_cast<std::streamoff>(data_start + e.at("offset").get<uint64_t>()));
        in.read(reinterpret_cast<char*>(t.ptr()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
        if (!in) throw DataError("archive truncated at tensor " + name);
        ar.tensors.emplace(name, std::move(t));
    }
    header.erase("tensors");
    ar.meta = std::move(header);
    return ar;
}

}  // namespace ctrlora
