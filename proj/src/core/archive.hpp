#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "tensor.hpp"

namespace dm {

// Simple named-tensor archive ("DMTA"): a JSON metadata blob followed by a
// list of (name, dtype, shape, data) records. Checkpoints store f64, dataset
// clips and control maps store f32.
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;
    std::map<std::string, int> dtypes;  // 0 = f32 (default), 1 = f64

    void put(const std::string& name, Tensor t, int dtype = 0) {
        tensors[name] = std::move(t);
        dtypes[name] = dtype;
    }
    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("archive: no tensor named " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    void save(const std::string& path) const;
    static Archive load(const std::string& path);
};

}  // namespace dm
