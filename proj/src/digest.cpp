#include "ctrlora/core/digest.hpp"

#include <openssl/evp.h>

#include "ctrlora/core/errors.hpp"
#include "ctrlora/core/nn.hpp"

namespace ctrlora {

Sha256::Sha256() {
    EVP_MD_CTX* c = EVP_MD_CTX_new();
    if (!c || EVP_DigestInit_ex(c, EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    ctx_ = c;
}

Sha256::~Sha256() {
    if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

void Sha256::update(const void* data, size_t len) {
    if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) != 1) throw Error("sha256 update failed");
}

std::string Sha256::hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &n) != 1) throw Error("sha256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(2 * n);
    for (unsigned int i = 0; i < n; ++i) {
        out.push_back(digits[md[i] >> 4]);
        out.push_back(digits[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_hex(const void* data, size_t len) {
    Sha256 h;
    h.update(data, len);
    return h.hex();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

namespace {

void update_with_entry(Sha256& h, const std::string& name, const std::vector<int64_t>& shape) {
    h.update(name);
    h.update("\0", 1);
    for (int64_t d : shape) {
        uint64_t le = static_cast<uint64_t>(d);
        h.update(&le, sizeof(le));
    }
}

}  // namespace

std::string value_digest(const ParamStore& ps, const std::string& prefix) {
    Sha256 h;
    for (const auto& [name, shape] : ps.shapes_sorted()) {
        if (name.rfind(prefix, 0) != 0) continue;
        update_with_entry(h, name, shape);
        const auto& t = ps.get(name)->value;
        h.update(t.ptr(), sizeof(double) * static_cast<size_t>(t.numel()));
    }
    return h.hex();
}

std::string topology_digest(const ParamStore& ps, const std::string& prefix) {
    Sha256 h;
    for (const auto& [name, shape] : ps.shapes_sorted()) {
        if (name.rfind(prefix, 0) != 0) continue;
        update_with_entry(h, name, shape);
    }
    return h.hex();
}

}  // namespace ctrlora
