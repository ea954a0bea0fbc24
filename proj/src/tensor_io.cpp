#include "mim/tensor_io.h"

#include <cstdint>
#include <cstring>
#include <vector>

#include "binary_io.h"
#include "mim/error.h"

namespace mim {
namespace {

constexpr char kMagic[8] = {'M', 'I', 'M', 'A', 'L', 'I', 'G', 'N'};
constexpr std::uint32_t kVersion = 1;

bool valid_utf8_no_nul(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        if (c == 0) return false;
        std::size_t extra;
        if (c < 0x80)
            extra = 0;
        else if ((c & 0xE0) == 0xC0)
            extra = 1;
        else if ((c & 0xF0) == 0xE0)
            extra = 2;
        else if ((c & 0xF8) == 0xF0)
            extra = 3;
        else
            return false;
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k)
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
        i += extra + 1;
    }
    return true;
}

}  // namespace

void tensor_save(const ParamStore& store, const std::string& path) {
    for (const auto& e : store.entries()) {
        if (!valid_utf8_no_nul(e.name))
            throw ContractError("tensor name is not NUL-free UTF-8: " + e.name);
        if (e.name.size() > 0xFFFFFFFFull) throw ContractError("tensor name too long");
    }
    io::Writer w(path);
    w.bytes(kMagic, 8);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(store.count()));
    for (const auto& e : store.entries()) {
        w.u32(static_cast<std::uint32_t>(e.name.size()));
        w.bytes(e.name.data(), e.name.size());
        w.u32(static_cast<std::uint32_t>(e.value.rank()));
        for (std::size_t d : e.value.shape()) w.u64(d);
        w.f32_payload(e.value.data(), e.value.size());
    }
    if (!w.good()) throw UserError("write failure on " + path);
}

ParamStore tensor_load(const std::string& path) {
    io::Reader r(path, "tensor");
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("bad magic in " + path, 0);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("unsupported tensor file version " + std::to_string(version) + " in " + path, 8);
    const std::uint32_t count = r.u32();
    ParamStore store;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        if (name_len) r.bytes(name.data(), name_len);
        if (!valid_utf8_no_nul(name))
            throw FormatError("entry name is not NUL-free UTF-8 in " + path,
                              r.offset() - name_len);
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const std::uint64_t d = r.u64();
            if (d == 0 || d > (1ull << 32))
                throw FormatError("invalid dimension in entry " + name, r.offset() - 8);
            shape[k] = static_cast<std::size_t>(d);
            n *= shape[k];
        }
        std::vector<float> data(n);
        r.f32_payload(data.data(), n);
        Tensor t = Tensor::from(std::move(shape), std::move(data));
        if (!t.all_finite())
            throw FormatError("non-finite value in entry " + name + " of " + path,
                              r.offset() - n * 4);
        store.add(name, std::move(t));
    }
    return store;
}

}  // namespace mim
