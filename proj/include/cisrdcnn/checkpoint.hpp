#ifndef CISRDCNN_CHECKPOINT_HPP
#define CISRDCNN_CHECKPOINT_HPP

// Binary checkpoint, all integers little-endian:
//
//   "CISR" | u32 version | i32 qf | i32 scale | u32 k1 k2 k3 width
//   | str normalization | str stage | u32 record count
//   | records: str name | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//
// where str is a u32 byte length followed by the bytes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "image_io.hpp"
#include "network.hpp"

namespace cisr::net {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'C', 'I', 'S', 'R'};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

class Writer {
public:
    template <class T>
    void put(T v)
    {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_string(const std::string& s)
    {
        put(static_cast<std::uint32_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string()
    {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
            bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Rounds every parameter to the nearest 32-bit real, as a save/load would.
inline void round_to_float(Network& n)
{
    for (ParamView& p : parameters(n))
        for (double& v : p.values)
            v = static_cast<double>(static_cast<float>(v));
}

inline std::vector<std::uint8_t> serialize(const Network& src)
{
    Network n = src;
    detail::Writer w;
    w.bytes.insert(w.bytes.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    w.put(kCheckpointVersion);
    w.put(static_cast<std::int32_t>(n.meta.qf));
    w.put(static_cast<std::int32_t>(n.meta.scale));
    for (std::size_t v : {n.arch.k1, n.arch.k2, n.arch.k3, n.arch.width})
        w.put(static_cast<std::uint32_t>(v));
    w.put_string(kNormalization);
    w.put_string(n.meta.stage);
    const auto params = parameters(n);
    w.put(static_cast<std::uint32_t>(params.size()));
    for (const ParamView& p : params) {
        w.put_string(p.name);
        w.put(static_cast<std::uint32_t>(p.dims.size()));
        for (std::size_t d : p.dims)
            w.put(static_cast<std::uint32_t>(d));
        for (double v : p.values)
            w.put(static_cast<float>(v));
    }
    return w.bytes;
}

inline Network deserialize(const std::vector<std::uint8_t>& bytes)
{
    detail::Reader r(bytes);
    char magic[4];
    for (char& c : magic)
        c = static_cast<char>(r.get<std::uint8_t>());
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CheckpointError("not a CISR checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected "
            + std::to_string(kCheckpointVersion) + ")");
    Metadata meta;
    meta.qf = r.get<std::int32_t>();
    meta.scale = r.get<std::int32_t>();
    Architecture arch;
    arch.k1 = r.get<std::uint32_t>();
    arch.k2 = r.get<std::uint32_t>();
    arch.k3 = r.get<std::uint32_t>();
    arch.width = r.get<std::uint32_t>();
    if (meta.scale != 2)
        throw CheckpointError("checkpoint scale " + std::to_string(meta.scale) + " is not supported");
    const std::string norm = r.get_string();
    if (norm != kNormalization)
        throw CheckpointError("checkpoint normalization '" + norm + "' is not supported");
    meta.stage = r.get_string();

    Network n = make_network(arch, meta.qf, 0);
    n.meta = meta;
    auto params = parameters(n);
    const auto count = r.get<std::uint32_t>();
    if (count != params.size())
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " records, architecture needs "
            + std::to_string(params.size()));
    for (ParamView& p : params) {
        const std::string name = r.get_string();
        if (name != p.name)
            throw CheckpointError("unexpected record '" + name + "' where '" + p.name + "' was expected");
        const auto rank = r.get<std::uint32_t>();
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims)
            d = r.get<std::uint32_t>();
        if (dims != p.dims)
            throw CheckpointError("record '" + name + "' has the wrong shape");
        for (double& v : p.values)
            v = static_cast<double>(r.get<float>());
    }
    if (!r.done())
        throw CheckpointError("trailing bytes after the last record");
    return n;
}

inline void save_checkpoint(const std::filesystem::path& path, const Network& n)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    io::write_bytes(path, serialize(n));
}

inline Network load_checkpoint(const std::filesystem::path& path)
{
    try {
        return deserialize(io::read_bytes(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

/// 64-bit FNV-1a digest in hex.
inline std::string content_hash(const std::vector<std::uint8_t>& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string checkpoint_hash(const Network& n) { return content_hash(serialize(n)); }

}  // namespace cisr::net

#endif  // CISRDCNN_CHECKPOINT_HPP
