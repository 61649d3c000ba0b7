#include "fundus/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>

#include "fundus/error.hpp"

namespace fundus::io {

namespace {

class Writer {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_integral_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xff));
    }
    void put_string(const std::string& s) {
        put(std::uint32_t(s.size()));
        buf_ += s;
    }
    void put_scalar(double v, std::uint8_t width) {
        if (width == 4)
            put(std::bit_cast<std::uint32_t>(float(v)));
        else
            put(std::bit_cast<std::uint64_t>(v));
    }
    std::string& bytes() { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(std::uint8_t(p_[i])) << (8 * i);
        p_ += sizeof(U);
        return U(v);
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(p_, n);
        p_ += n;
        return s;
    }
    double get_scalar(std::uint8_t width) {
        if (width == 4) return double(std::bit_cast<float>(get<std::uint32_t>()));
        return std::bit_cast<double>(get<std::uint64_t>());
    }
    std::size_t remaining() const { return std::size_t(end_ - p_); }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw DataError("checkpoint truncated");
    }
    const char* p_;
    const char* end_;
};

void put_array_body(Writer& w, const ad::Shape& shape, std::uint8_t width, const std::vector<double>& values) {
    if (width != 4 && width != 8) throw DomainError("scalar width must be 4 or 8");
    if (ad::numel(shape) != values.size()) throw ShapeError("array values do not match its shape");
    w.put(std::uint32_t(shape.size()));
    for (auto e : shape) w.put(std::uint64_t(e));
    w.put(width);
    for (double v : values) w.put_scalar(v, width);
}

void get_array_body(Reader& r, NamedArray& a) {
    const auto rank = r.get<std::uint32_t>();
    if (rank > 16) throw DataError("implausible tensor rank " + std::to_string(rank));
    a.shape.resize(rank);
    for (auto& e : a.shape) e = std::size_t(r.get<std::uint64_t>());
    a.width = r.get<std::uint8_t>();
    if (a.width != 4 && a.width != 8) throw DataError("bad scalar width " + std::to_string(a.width));
    const std::size_t n = ad::numel(a.shape);
    if (n > r.remaining() / a.width) throw DataError("checkpoint truncated");
    a.values.resize(n);
    for (auto& v : a.values) v = r.get_scalar(a.width);
}

std::string format_header(const std::map<std::string, std::string>& header) {
    std::string s;
    for (const auto& [k, v] : header) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw DomainError("header entry '" + k + "' contains '=' or a newline");
        s += k + "=" + v + "\n";
    }
    return s;
}

std::map<std::string, std::string> parse_header(const std::string& text) {
    std::map<std::string, std::string> header;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("bad checkpoint header line '" + line + "'");
        header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return header;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const std::string& Checkpoint::get(const std::string& key) const {
    const auto it = header.find(key);
    if (it == header.end()) throw DataError("checkpoint header has no '" + key + "'");
    return it->second;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string encode(const Checkpoint& ckpt) {
    Writer w;
    w.bytes().append(kMagic, sizeof kMagic);
    w.put(kVersion);
    w.put_string(format_header(ckpt.header));
    w.put(std::uint32_t(ckpt.arrays.size()));
    for (const auto& a : ckpt.arrays) {
        w.put_string(a.name);
        put_array_body(w, a.shape, a.width, a.values);
    }
    const auto sum = fnv1a64(w.bytes().data(), w.bytes().size());
    w.put(sum);
    return std::move(w.bytes());
}

Checkpoint decode(const std::string& bytes) {
    if (bytes.size() < sizeof kMagic + 4 + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw DataError("not a checkpoint (bad magic)");
    const std::size_t body = bytes.size() - 8;
    Reader tail(bytes.data() + body, 8);
    if (tail.get<std::uint64_t>() != fnv1a64(bytes.data(), body)) throw DataError("checkpoint checksum mismatch");

    Reader r(bytes.data() + sizeof kMagic, body - sizeof kMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.header = parse_header(r.get_string());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.get_string();
        get_array_body(r, a);
        ckpt.arrays.push_back(std::move(a));
    }
    if (r.remaining() != 0) throw DataError("trailing bytes in checkpoint");
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), {}};
    return decode(bytes);
}

std::uint64_t checksum(const Checkpoint& ckpt) {
    const auto bytes = encode(ckpt);
    Reader r(bytes.data() + bytes.size() - 8, 8);
    return r.get<std::uint64_t>();
}

template <typename T>
void write_tensor(std::ostream& out, const ad::Tensor<T>& t) {
    Writer w;
    put_array_body(w, t.shape(), std::uint8_t(sizeof(T)), {t.data().begin(), t.data().end()});
    out.write(w.bytes().data(), std::streamsize(w.bytes().size()));
}

template <typename T>
ad::Tensor<T> read_tensor(std::istream& in) {
    char head[4];
    if (!in.read(head, 4)) throw DataError("tensor stream truncated");
    Reader rank_reader(head, 4);
    const auto rank = rank_reader.get<std::uint32_t>();
    if (rank > 16) throw DataError("implausible tensor rank " + std::to_string(rank));
    std::string buf(head, 4);
    std::string ext(rank * 8 + 1, '\0');
    if (!in.read(ext.data(), std::streamsize(ext.size()))) throw DataError("tensor stream truncated");
    buf += ext;
    Reader probe(buf.data(), buf.size());
    NamedArray a;
    probe.get<std::uint32_t>();
    a.shape.resize(rank);
    for (auto& e : a.shape) e = std::size_t(probe.get<std::uint64_t>());
    a.width = probe.get<std::uint8_t>();
    if (a.width != 4 && a.width != 8) throw DataError("bad scalar width " + std::to_string(a.width));
    std::string payload(ad::numel(a.shape) * a.width, '\0');
    if (!in.read(payload.data(), std::streamsize(payload.size()))) throw DataError("tensor stream truncated");
    Reader pr(payload.data(), payload.size());
    std::vector<T> values(ad::numel(a.shape));
    for (auto& v : values) v = T(pr.get_scalar(a.width));
    return ad::Tensor<T>::from(a.shape, std::move(values));
}

template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix, const nn::ParamList<T>& params) {
    for (const auto& p : params.items())
        ckpt.arrays.push_back({prefix + p.name, p.tensor.shape(), std::uint8_t(sizeof(T)),
                               {p.tensor.data().begin(), p.tensor.data().end()}});
}

template <typename T>
void load_params(const Checkpoint& ckpt, const std::string& prefix, nn::ParamList<T>& params) {
    for (auto& p : params.items()) {
        const auto* a = ckpt.find(prefix + p.name);
        if (!a) throw DataError("checkpoint lacks parameter " + prefix + p.name);
        if (a->shape != p.tensor.shape())
            throw DataError("parameter " + prefix + p.name + " has shape " + ad::shape_str(a->shape) +
                            ", model expects " + ad::shape_str(p.tensor.shape()));
        auto dst = p.tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(a->values[i]);
    }
}

template <typename T>
void store_adam(Checkpoint& ckpt, const std::string& group, const optim::Adam<T>& adam,
                const nn::ParamList<T>& params) {
    const auto& items = params.items();
    for (std::size_t i = 0; i < items.size(); ++i) {
        ckpt.arrays.push_back({"adam." + group + ".m." + items[i].name, items[i].tensor.shape(), 8,
                               adam.first_moments()[i]});
        ckpt.arrays.push_back({"adam." + group + ".v." + items[i].name, items[i].tensor.shape(), 8,
                               adam.second_moments()[i]});
    }
    ckpt.header["adam." + group + ".step"] = std::to_string(adam.step_count());
}

template <typename T>
void load_adam(const Checkpoint& ckpt, const std::string& group, optim::Adam<T>& adam,
               const nn::ParamList<T>& params) {
    const auto& items = params.items();
    for (std::size_t i = 0; i < items.size(); ++i)
        for (auto [tag, dst] : {std::pair{".m.", &adam.first_moments()[i]}, std::pair{".v.", &adam.second_moments()[i]}}) {
            const auto* a = ckpt.find("adam." + group + tag + items[i].name);
            if (!a || a->values.size() != dst->size())
                throw DataError("checkpoint lacks optimizer state for " + items[i].name);
            *dst = a->values;
        }
    adam.set_step_count(std::stoull(ckpt.get("adam." + group + ".step")));
}

#define FUNDUS_INSTANTIATE(T)                                                                                \
    template void write_tensor(std::ostream&, const ad::Tensor<T>&);                                        \
    template ad::Tensor<T> read_tensor(std::istream&);                                                      \
    template void store_params(Checkpoint&, const std::string&, const nn::ParamList<T>&);                   \
    template void load_params(const Checkpoint&, const std::string&, nn::ParamList<T>&);                    \
    template void store_adam(Checkpoint&, const std::string&, const optim::Adam<T>&, const nn::ParamList<T>&); \
    template void load_adam(const Checkpoint&, const std::string&, optim::Adam<T>&, const nn::ParamList<T>&);
FUNDUS_INSTANTIATE(float)
FUNDUS_INSTANTIATE(double)
#undef FUNDUS_INSTANTIATE

}  // namespace fundus::io
