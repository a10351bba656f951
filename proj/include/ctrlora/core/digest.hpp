#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctrlora {

class ParamStore;

// Streaming SHA-256, hex-encoded output.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex();  // finalizes

private:
    void* ctx_;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

// Digest over parameter values: (name, shape, raw float64 bytes) in
// name-sorted order, restricted to names starting with `prefix`. Changes iff
// a value or the structure changes.
std::string value_digest(const ParamStore& ps, const std::string& prefix = {});

// Digest over structure only: (name, shape) in name-sorted order.
std::string topology_digest(const ParamStore& ps, const std::string& prefix = {});

}  // namespace ctrlora
