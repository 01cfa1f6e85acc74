#include "archive.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace dm {

namespace {
constexpr char kMagic[4] = {'D', 'M', 'T', 'A'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("archive: truncated file");
    return v;
}
}  // namespace

void Archive::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("archive: cannot write " + path);
    os.write(kMagic, 4);
    write_pod<uint8_t>(os, 1);  // version
    std::string meta_s = meta.dump();
    write_pod<uint32_t>(os, static_cast<uint32_t>(meta_s.size()));
    os.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        int dtype = 0;
        if (auto it = dtypes.find(name); it != dtypes.end()) dtype = it->second;
        write_pod<uint8_t>(os, static_cast<uint8_t>(dtype));
        write_pod<uint8_t>(os, static_cast<uint8_t>(t.ndim()));
        for (int d : t.shape) write_pod<uint32_t>(os, static_cast<uint32_t>(d));
        if (dtype == 0) {
            for (double x : t.v) write_pod<float>(os, static_cast<float>(x));
        } else {
            for (double x : t.v) write_pod<double>(os, x);
        }
    }
    if (!os) throw std::runtime_error("archive: write failed for " + path);
}

Archive Archive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("archive: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("archive: bad magic in " + path);
    uint8_t version = read_pod<uint8_t>(is);
    if (version != 1) throw std::runtime_error("archive: unsupported version in " + path);
    Archive a;
    uint32_t meta_len = read_pod<uint32_t>(is);
    std::string meta_s(meta_len, '\0');
    is.read(meta_s.data(), meta_len);
    a.meta = meta_len ? nlohmann::json::parse(meta_s) : nlohmann::json::object();
    uint32_t n = read_pod<uint32_t>(is);
    for (uint32_t i = 0; i < n; ++i) {
        uint16_t name_len = read_pod<uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint8_t dtype = read_pod<uint8_t>(is);
        uint8_t ndim = read_pod<uint8_t>(is);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_pod<uint32_t>(is));
        Tensor t(shape);
        for (double& x : t.v) x = dtype == 0 ? static_cast<double>(read_pod<float>(is)) : read_pod<double>(is);
        a.dtypes[name] = dtype;
        a.tensors.emplace(std::move(name), std::move(t));
    }
    return a;
}

}  // namespace dm
