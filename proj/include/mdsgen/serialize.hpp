#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsgen/tensor.hpp"

namespace mds {

// Single-file tensor container: 8-byte magic, u64 little-endian index length,
// JSON index {manifest, tensors:[{name,dtype,shape,offset,nbytes}]}, then the
// raw little-endian float32 payloads back to back. Round trips are bit exact.
class TensorContainer {
public:
    static constexpr char kMagic[8] = {'M', 'D', 'T', 'E', 'N', 'S', 'C', '1'};

    nlohmann::json manifest = nlohmann::json::object();

    void put(const std::string& name, const TensorPtr& t) { entries_[name] = t; }

    TensorPtr get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw IoError("container: missing tensor " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    const std::map<std::string, TensorPtr>& entries() const { return entries_; }

    void save(const std::string& path) const {
        nlohmann::json tensors = nlohmann::json::array();
        uint64_t offset = 0;
        for (const auto& [name, t] : entries_) {
            uint64_t nbytes = t->numel() * sizeof(float);
            tensors.push_back({{"name", name},
                               {"dtype", "f32"},
                               {"shape", t->shape},
                               {"offset", offset},
                               {"nbytes", nbytes}});
            offset += nbytes;
        }
        nlohmann::json index = {{"manifest", manifest}, {"tensors", tensors}};
        std::string idx = index.dump();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for write: " + path);
        f.write(kMagic, 8);
        uint64_t jlen = idx.size();
        f.write(reinterpret_cast<const char*>(&jlen), 8);
        f.write(idx.data(), (std::streamsize)idx.size());
        for (const auto& [name, t] : entries_)
            f.write(reinterpret_cast<const char*>(t->data.data()),
                    (std::streamsize)(t->numel() * sizeof(float)));
        if (!f) throw IoError("write failed: " + path);
    }

    static TensorContainer load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open: " + path);
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0) throw IoError("bad container magic: " + path);
        uint64_t jlen = 0;
        f.read(reinterpret_cast<char*>(&jlen), 8);
        std::string idx(jlen, '\0');
        f.read(idx.data(), (std::streamsize)jlen);
        if (!f) throw IoError("truncated container index: " + path);
        nlohmann::json index = nlohmann::json::parse(idx);
        TensorContainer c;
        c.manifest = index.value("manifest", nlohmann::json::object());
        std::streampos payload_start = f.tellg();
        for (const auto& e : index["tensors"]) {
            if (e["dtype"] != "f32") throw IoError("unsupported dtype in container");
            std::vector<int> shape = e["shape"].get<std::vector<int>>();
            uint64_t offset = e["offset"], nbytes = e["nbytes"];
            auto t = Tensor::create(shape);
            if (t->numel() * sizeof(float) != nbytes) throw IoError("container entry size mismatch");
            f.seekg(payload_start + (std::streampos)offset);
            f.read(reinterpret_cast<char*>(t->data.data()), (std::streamsize)nbytes);
            if (!f) throw IoError("truncated container payload: " + path);
            c.entries_[e["name"]] = t;
        }
        return c;
    }

private:
    std::map<std::string, TensorPtr> entries_;
};

}  // namespace mds
