#include "mism/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "mism/error.hpp"

namespace mism {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'S', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        throw DataError("truncated checkpoint: " + path);
    }
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParameters& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open checkpoint for writing: " + path);
    }
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    const std::string config_json = config.to_json().dump();
    write_pod(out, static_cast<uint64_t>(config_json.size()));
    out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    write_pod(out, static_cast<uint64_t>(params.named.size()));
    for (const auto& [name, tensor] : params.named) {
        write_pod(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<uint32_t>(tensor.rank()));
        for (int64_t e : tensor.shape()) {
            write_pod(out, static_cast<uint64_t>(e));
        }
        std::vector<float> payload(tensor.values().size());
        for (size_t i = 0; i < payload.size(); ++i) {
            payload[i] = static_cast<float>(tensor.values()[i]);
        }
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!out) {
        throw IoError("checkpoint write failed: " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint: " + path);
    }
    char magic[4];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    const uint32_t version = read_pod<uint32_t>(in, path);
    if (version != kVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const uint64_t config_len = read_pod<uint64_t>(in, path);
    std::string config_json(config_len, '\0');
    in.read(config_json.data(), static_cast<std::streamsize>(config_len));
    if (!in) {
        throw DataError("truncated checkpoint: " + path);
    }
    Checkpoint ckpt;
    try {
        ckpt.config = ModelConfig::from_json(nlohmann::json::parse(config_json));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad checkpoint config: " + std::string(e.what()));
    }
    const uint64_t n_params = read_pod<uint64_t>(in, path);
    for (uint64_t i = 0; i < n_params; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = read_pod<uint32_t>(in, path);
        Shape shape;
        for (uint32_t r = 0; r < rank; ++r) {
            shape.push_back(static_cast<int64_t>(read_pod<uint64_t>(in, path)));
        }
        std::vector<float> payload(static_cast<size_t>(shape_numel(shape)));
        in.read(reinterpret_cast<char*>(payload.data()),
                static_cast<std::streamsize>(payload.size() * sizeof(float)));
        if (!in) {
            throw DataError("truncated checkpoint: " + path);
        }
        std::vector<double> values(payload.begin(), payload.end());
        ckpt.params.named[name] = Tensor::from_values(shape, std::move(values), true);
    }
    return ckpt;
}

}  // namespace mism
