#include "dsrpgo/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::ckpt {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits;
    std::memcpy(&bits, &value, sizeof bits);
    for (std::size_t b = 0; b < sizeof bits; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits = 0;
    for (std::size_t b = 0; b < sizeof bits; ++b)
        bits |= static_cast<U>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
    T value;
    std::memcpy(&value, &bits, sizeof value);
    return value;
}

}  // namespace

const Group* Checkpoint::find(const std::string& name) const {
    for (const auto& g : groups)
        if (g.name == name) return &g;
    return nullptr;
}

const Group& Checkpoint::at(const std::string& name) const {
    const Group* g = find(name);
    if (!g) throw ValidationError("checkpoint has no group '" + name + "'");
    return *g;
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
    add(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

void Checkpoint::add(const std::string& name, Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("checkpoint group '" + name + "': shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
    if (find(name)) throw ValidationError("checkpoint group '" + name + "' added twice");
    groups.push_back({name, std::move(shape), std::move(values)});
}

std::string serialize(const Checkpoint& c) {
    nlohmann::json header;
    header["version"] = kVersion;
    header["fingerprint"] = c.fingerprint;
    header["meta"] = c.meta;
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& g : c.groups) {
        dir.push_back({{"name", g.name}, {"shape", g.shape}, {"offset", offset}, {"count", g.values.size()}});
        offset += 8 * g.values.size();
    }
    header["groups"] = dir;
    std::string text = header.dump();

    std::string out(kMagic, kMagic + 8);
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& g : c.groups)
        for (double v : g.values) put_le<double>(out, v);
    return out;
}

Checkpoint deserialize(const std::string& bytes, const std::string& source) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw IoError(source + ": not a checkpoint (bad magic)");
    auto version = get_le<std::uint32_t>(bytes, 8);
    if (version != kVersion)
        throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
    auto header_len = get_le<std::uint64_t>(bytes, 12);
    if (20 + header_len > bytes.size()) throw IoError(source + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(20, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(source + ": corrupt header: " + e.what());
    }
    Checkpoint c;
    std::size_t payload = 20 + header_len;
    try {
        c.fingerprint = header.at("fingerprint").get<std::string>();
        c.meta = header.at("meta");
        for (const auto& e : header.at("groups")) {
            Group g;
            g.name = e.at("name").get<std::string>();
            g.shape = e.at("shape").get<Shape>();
            auto offset = e.at("offset").get<std::uint64_t>();
            auto count = e.at("count").get<std::uint64_t>();
            if (shape_numel(g.shape) != count) throw IoError(source + ": group '" + g.name + "' shape/count mismatch");
            if (payload + offset + 8 * count > bytes.size())
                throw IoError(source + ": group '" + g.name + "' runs past end of file");
            g.values.resize(count);
            for (std::size_t i = 0; i < count; ++i) g.values[i] = get_le<double>(bytes, payload + offset + 8 * i);
            c.groups.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(source + ": malformed header: " + e.what());
    }
    return c;
}

void save(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    std::string bytes = serialize(c);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize(buf.str(), path.string());
}

void add_params(Checkpoint& c, const nn::ParamList& params, const std::string& prefix) {
    for (const auto& p : params) c.add(prefix + p.name, p.tensor);
}

void restore_params(const Checkpoint& c, const nn::ParamList& params, const std::string& prefix) {
    std::string bad;
    for (const auto& p : params) {
        const Group* g = c.find(prefix + p.name);
        if (!g) {
            bad += " " + prefix + p.name + " (missing)";
            continue;
        }
        if (g->shape != p.tensor.shape()) {
            bad += " " + prefix + p.name + " (shape " + shape_str(g->shape) + " vs " + shape_str(p.tensor.shape()) + ")";
            continue;
        }
    }
    if (!bad.empty()) throw ValidationError("checkpoint incompatible with model:" + bad);
    for (const auto& p : params) {
        const Group& g = *c.find(prefix + p.name);
        auto dst = const_cast<Tensor&>(p.tensor).mutable_data();
        std::copy(g.values.begin(), g.values.end(), dst.begin());
    }
}

std::string fingerprint_of(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace dsrpgo::ckpt
