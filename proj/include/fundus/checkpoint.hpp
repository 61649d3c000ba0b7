#pragma once

// Tensor serialization and the checkpoint container.
//
// Byte layout, all integers little-endian:
//
//   magic      8 bytes  "FNDSCKPT"
//   version    u32      (1)
//   header     u32 length + UTF-8 text, key=value lines
//   count      u32      number of named arrays
//   array      u32 name length + name
//              u32 rank, rank x u64 extents
//              u8 scalar width (4 = float32, 8 = float64)
//              numel x scalar, IEEE-754 little-endian
//   checksum   u64      FNV-1a 64 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fundus/nn.hpp"
#include "fundus/optim.hpp"

namespace fundus::io {

inline constexpr char kMagic[8] = {'F', 'N', 'D', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedArray {
    std::string name;
    ad::Shape shape;
    std::uint8_t width = 4;
    std::vector<double> values;  // widened; narrowed on write when width == 4
};

struct Checkpoint {
    std::map<std::string, std::string> header;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    /// Header value; throws DataError when absent.
    const std::string& get(const std::string& key) const;
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string encode(const Checkpoint& ckpt);
/// Throws DataError on a bad magic, unknown version, truncation or checksum mismatch.
Checkpoint decode(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Trailing checksum of the encoded checkpoint.
std::uint64_t checksum(const Checkpoint& ckpt);

/// One tensor in the array layout (without name), for standalone use.
template <typename T>
void write_tensor(std::ostream& out, const ad::Tensor<T>& t);
template <typename T>
ad::Tensor<T> read_tensor(std::istream& in);

/// Adds every parameter as "<prefix><name>".
template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix, const nn::ParamList<T>& params);
/// Copies "<prefix><name>" into each parameter; throws DataError when one is
/// missing or has another shape.
template <typename T>
void load_params(const Checkpoint& ckpt, const std::string& prefix, nn::ParamList<T>& params);

/// Moments as "adam.<group>.m.<param>" / ".v." (float64) and the step count
/// in the header.
template <typename T>
void store_adam(Checkpoint& ckpt, const std::string& group, const optim::Adam<T>& adam,
                const nn::ParamList<T>& params);
template <typename T>
void load_adam(const Checkpoint& ckpt, const std::string& group, optim::Adam<T>& adam,
               const nn::ParamList<T>& params);

}  // namespace fundus::io
