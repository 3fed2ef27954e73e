#include "minigpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace minigpt {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'G', 'P', 'T'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kMaxTensorElems = uint64_t(1) << 40;

void put_u16(std::string& out, uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

struct Reader {
    std::string_view bytes;
    size_t pos = 0;

    const char* take(size_t n, const char* what) {
        if (bytes.size() - pos < n) {
            fail(ErrorClass::format, std::string("truncated checkpoint: ran out of bytes reading ") + what);
        }
        const char* p = bytes.data() + pos;
        pos += n;
        return p;
    }
    uint16_t u16(const char* what) {
        uint16_t v;
        std::memcpy(&v, take(2, what), 2);
        return v;
    }
    uint32_t u32(const char* what) {
        uint32_t v;
        std::memcpy(&v, take(4, what), 4);
        return v;
    }
    uint64_t u64(const char* what) {
        uint64_t v;
        std::memcpy(&v, take(8, what), 8);
        return v;
    }
};

}  // namespace

std::string serialize_model(const ModelBundle& m) {
    m.validate();
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);

    const std::string config_json = m.config.to_json_string();
    put_u64(out, config_json.size());
    out += config_json;

    const std::string tokenizer_json = m.tokenizer.to_json_string();
    put_u64(out, tokenizer_json.size());
    out += tokenizer_json;

    uint32_t count = 0;
    for_each_tensor(m, [&count](const std::string&, const Tensor&) { ++count; });
    put_u32(out, count);

    for_each_tensor(m, [&out](const std::string& name, const Tensor& t) {
        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.ndim()));
        for (int64_t d : t.shape()) put_u64(out, static_cast<uint64_t>(d));
        out.append(reinterpret_cast<const char*>(t.data().data()), t.data().size() * sizeof(float));
    });
    return out;
}

ModelBundle deserialize_model(std::string_view bytes) {
    Reader r{bytes};
    const char* magic = r.take(4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        fail(ErrorClass::format, "bad checkpoint magic: not a model checkpoint");
    }
    const uint32_t version = r.u32("version");
    if (version != kVersion) {
        fail(ErrorClass::format, "unsupported checkpoint version " + std::to_string(version));
    }

    const uint64_t config_len = r.u64("config length");
    const std::string config_json(r.take(config_len, "config"), config_len);
    const ModelConfig config = ModelConfig::from_json_string(config_json);

    const uint64_t tok_len = r.u64("tokenizer length");
    const std::string tokenizer_json(r.take(tok_len, "tokenizer"), tok_len);
    BpeTokenizer tokenizer = BpeTokenizer::from_json_string(tokenizer_json);

    const uint32_t count = r.u32("tensor count");
    std::unordered_map<std::string, Tensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16("tensor name length");
        const std::string name(r.take(name_len, "tensor name"), name_len);
        const auto ndim = static_cast<uint8_t>(*r.take(1, "tensor rank"));
        std::vector<int64_t> shape;
        uint64_t numel = 1;
        for (uint8_t d = 0; d < ndim; ++d) {
            const uint64_t extent = r.u64("tensor shape");
            if (extent == 0 || extent > kMaxTensorElems || numel > kMaxTensorElems / extent) {
                fail(ErrorClass::format, "tensor " + name + " has an implausible shape");
            }
            numel *= extent;
            shape.push_back(static_cast<int64_t>(extent));
        }
        std::vector<float> data(numel);
        std::memcpy(data.data(), r.take(numel * sizeof(float), "tensor payload"), numel * sizeof(float));
        if (!tensors.emplace(name, Tensor::from(std::move(shape), std::move(data))).second) {
            fail(ErrorClass::format, "checkpoint lists tensor " + name + " twice");
        }
    }
    if (r.pos != bytes.size()) {
        fail(ErrorClass::format, "checkpoint has " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
    }

    ModelBundle m = allocate_bundle(config, std::move(tokenizer));
    for_each_tensor(m, [&tensors](const std::string& name, Tensor& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            fail(ErrorClass::dimension, "checkpoint is missing tensor " + name + " required by its config");
        }
        if (it->second.shape() != t.shape()) {
            fail(ErrorClass::dimension, "checkpoint tensor " + name + " has shape " + it->second.shape_str() +
                                            ", config requires " + t.shape_str());
        }
        t = std::move(it->second);
        tensors.erase(it);
    });
    if (!tensors.empty()) {
        fail(ErrorClass::dimension, "checkpoint carries tensor " + tensors.begin()->first +
                                        " that its config does not describe");
    }
    m.validate();
    return m;
}

void save_model(const ModelBundle& m, const std::string& path) {
    const std::string bytes = serialize_model(m);
    std::ofstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f.good()) fail(ErrorClass::io, "failed writing " + path);
}

ModelBundle load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for reading");
    std::ostringstream buf;
    buf << f.rdbuf();
    return deserialize_model(buf.str());
}

std::string model_fingerprint(const ModelBundle& m) {
    const std::string bytes = serialize_model(m);
    return hex64(fnv1a64(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size())));
}

}  // namespace minigpt
