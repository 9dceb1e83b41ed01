#include "sdg/serialize.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>

namespace sdg {

std::string sha256_hex(const void* data, size_t n) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, n, digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "sha256_file: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

namespace {
constexpr char kMagic[8] = {'S', 'D', 'G', 'C', 'K', 'P', 'T', '1'};

void append_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out += (char)((v >> (8 * i)) & 0xff);
}
uint64_t read_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)(uint8_t)p[i] << (8 * i);
    return v;
}
} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    require(ckpt.dtype == "f32" || ckpt.dtype == "f64", "checkpoint: bad dtype " + ckpt.dtype);
    size_t elem = ckpt.dtype == "f32" ? 4 : 8;

    nlohmann::json header;
    header["kind"] = ckpt.kind;
    header["dtype"] = ckpt.dtype;
    header["meta"] = ckpt.meta;
    nlohmann::json index = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, sv] : ckpt.tensors) {
        const auto& [shape, vals] = sv;
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = shape;
        e["offset"] = payload.size();
        e["nbytes"] = vals.size() * elem;
        index.push_back(e);
        size_t base = payload.size();
        payload.resize(base + vals.size() * elem);
        if (ckpt.dtype == "f32") {
            for (size_t i = 0; i < vals.size(); ++i) {
                float x = (float)vals[i];
                std::memcpy(payload.data() + base + i * 4, &x, 4);
            }
        } else {
            std::memcpy(payload.data() + base, vals.data(), vals.size() * 8);
        }
    }
    header["tensors"] = index;
    std::string hjson = header.dump();

    std::string bytes(kMagic, 8);
    append_u64(bytes, hjson.size());
    bytes += hjson;
    bytes += payload;

    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int dlen = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &dlen, EVP_sha256(), nullptr);
    bytes.append((const char*)digest, dlen);

    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        require(f.good(), "checkpoint: cannot write " + tmp);
        f.write(bytes.data(), (std::streamsize)bytes.size());
        require(f.good(), "checkpoint: short write to " + tmp);
    }
    // atomic publish: eval may read checkpoints while training continues
    require(std::rename(tmp.c_str(), path.c_str()) == 0, "checkpoint: rename failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(bytes.size() > 8 + 8 + 32, "checkpoint: truncated file " + path);
    require(std::memcmp(bytes.data(), kMagic, 8) == 0, "checkpoint: bad magic in " + path);

    size_t body_len = bytes.size() - 32;
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int dlen = 0;
    EVP_Digest(bytes.data(), body_len, digest, &dlen, EVP_sha256(), nullptr);
    require(dlen == 32 && std::memcmp(bytes.data() + body_len, digest, 32) == 0,
            "checkpoint: content hash mismatch in " + path);

    uint64_t hlen = read_u64(bytes.data() + 8);
    require(16 + hlen <= body_len, "checkpoint: corrupt header in " + path);
    nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));

    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.dtype = header.at("dtype").get<std::string>();
    ckpt.meta = header.at("meta");
    require(ckpt.kind == expected_kind,
            "checkpoint: kind mismatch in " + path + " (got '" + ckpt.kind + "', want '" + expected_kind + "')");

    size_t elem = ckpt.dtype == "f32" ? 4 : 8;
    const char* payload = bytes.data() + 16 + hlen;
    size_t payload_len = body_len - 16 - hlen;
    for (const auto& e : header.at("tensors")) {
        std::string name = e.at("name").get<std::string>();
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        size_t off = e.at("offset").get<size_t>();
        size_t nbytes = e.at("nbytes").get<size_t>();
        require(off + nbytes <= payload_len, "checkpoint: tensor '" + name + "' out of bounds");
        std::vector<double> vals(nbytes / elem);
        if (ckpt.dtype == "f32") {
            for (size_t i = 0; i < vals.size(); ++i) {
                float x;
                std::memcpy(&x, payload + off + i * 4, 4);
                vals[i] = x;
            }
        } else {
            std::memcpy(vals.data(), payload + off, nbytes);
        }
        ckpt.tensors[name] = {std::move(shape), std::move(vals)};
    }
    return ckpt;
}

} // namespace sdg
