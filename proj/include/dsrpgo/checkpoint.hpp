#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsrpgo/nn.hpp"
#include "dsrpgo/tensor.hpp"
#include "json.hpp"

namespace dsrpgo::ckpt {

inline constexpr char kMagic[8] = {'D', 'S', 'R', 'P', 'G', 'O', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

struct Group {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// Self-describing container:
///   8 bytes  magic "DSRPGOCK"
///   u32 LE   format version
///   u64 LE   header length in bytes
///   header   JSON {version, fingerprint, meta, groups: [{name, shape, offset, count}]}
///   payload  float64 little-endian values, offsets in bytes from payload start
struct Checkpoint {
    std::string fingerprint;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Group> groups;

    const Group* find(const std::string& name) const;
    const Group& at(const std::string& name) const;
    void add(const std::string& name, const Tensor& t);
    void add(const std::string& name, Shape shape, std::vector<double> values);
};

std::string serialize(const Checkpoint& c);
Checkpoint deserialize(const std::string& bytes, const std::string& source = "checkpoint");

void save(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

/// Adds every parameter as a group named `prefix + name`.
void add_params(Checkpoint& c, const nn::ParamList& params, const std::string& prefix = "");

/// Copies groups named `prefix + name` into the parameters. A missing group or
/// a shape mismatch raises ValidationError listing every offending name.
void restore_params(const Checkpoint& c, const nn::ParamList& params, const std::string& prefix = "");

/// Hex FNV-1a 64 of arbitrary text, used for config fingerprints.
std::string fingerprint_of(const std::string& text);

}  // namespace dsrpgo::ckpt
