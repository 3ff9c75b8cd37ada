#include "protoseg/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace protoseg::io {

namespace {

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiDataOffset = 352;

[[noreturn]] void fail(const fs::path& path, const std::string& what)
{
    throw std::runtime_error(path.string() + ": " + what);
}

bool has_gz_suffix(const fs::path& p) { return p.extension() == ".gz"; }

std::vector<unsigned char> read_all_maybe_gz(const fs::path& path)
{
    if (!fs::exists(path)) fail(path, "file not found");
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) fail(path, "cannot open");
    std::vector<unsigned char> out;
    std::vector<unsigned char> buf(1 << 16);
    for (;;) {
        const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (n < 0) {
            gzclose(f);
            fail(path, "read error");
        }
        if (n == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    }
    gzclose(f);
    return out;
}

void write_all_maybe_gz(const fs::path& path, const std::vector<unsigned char>& bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f) fail(path, "cannot open for writing");
        const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        if (n != static_cast<int>(bytes.size())) fail(path, "write error");
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(path, "write error");
}

template <class T>
T load(const unsigned char* p, bool swap)
{
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, p, sizeof(T));
    if (swap) std::reverse(tmp, tmp + sizeof(T));
    T v;
    std::memcpy(&v, tmp, sizeof(T));
    return v;
}

template <class T>
void store(unsigned char* p, T v)
{
    std::memcpy(p, &v, sizeof(T));
}

int bits_for(NiftiType t)
{
    switch (t) {
    case NiftiType::uint8:
    case NiftiType::int8: return 8;
    case NiftiType::int16:
    case NiftiType::uint16: return 16;
    case NiftiType::int32:
    case NiftiType::uint32:
    case NiftiType::float32: return 32;
    case NiftiType::float64: return 64;
    }
    return 0;
}

template <class T>
void encode_values(const std::vector<Real>& values, unsigned char* out)
{
    for (std::size_t i = 0; i < values.size(); ++i) {
        T v;
        if constexpr (std::is_integral_v<T>) {
            v = static_cast<T>(std::llround(values[i]));
        } else {
            v = static_cast<T>(values[i]);
        }
        std::memcpy(out + i * sizeof(T), &v, sizeof(T));
    }
}

std::vector<unsigned char> nifti_bytes(int h, int w, int d, NiftiType type,
                                       const Spacing& spacing, const std::vector<Real>& values)
{
    const int bitpix = bits_for(type);
    std::vector<unsigned char> bytes(kNiftiDataOffset + values.size() * (bitpix / 8), 0);
    unsigned char* hdr = bytes.data();
    store<std::int32_t>(hdr + 0, kNiftiHeaderSize);
    const std::int16_t dims[8] = {3, static_cast<std::int16_t>(w), static_cast<std::int16_t>(h),
                                  static_cast<std::int16_t>(d), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store<std::int16_t>(hdr + 40 + 2 * i, dims[i]);
    store<std::int16_t>(hdr + 70, static_cast<std::int16_t>(type));
    store<std::int16_t>(hdr + 72, static_cast<std::int16_t>(bitpix));
    const float pix[8] = {1.f, spacing.mm[0], spacing.mm[1], spacing.mm[2], 1.f, 1.f, 1.f, 1.f};
    for (int i = 0; i < 8; ++i) store<float>(hdr + 76 + 4 * i, pix[i]);
    store<float>(hdr + 108, static_cast<float>(kNiftiDataOffset));
    store<float>(hdr + 112, 1.f);
    store<float>(hdr + 116, 0.f);
    hdr[123] = 2;  // mm
    store<std::int16_t>(hdr + 254, 1);  // sform: scanner
    const float srow[3][4] = {{spacing.mm[0], 0, 0, 0}, {0, spacing.mm[1], 0, 0},
                              {0, 0, spacing.mm[2], 0}};
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) store<float>(hdr + 280 + 16 * r + 4 * c, srow[r][c]);
    }
    std::memcpy(hdr + 344, "n+1\0", 4);
    unsigned char* data = bytes.data() + kNiftiDataOffset;
    switch (type) {
    case NiftiType::uint8: encode_values<std::uint8_t>(values, data); break;
    case NiftiType::int8: encode_values<std::int8_t>(values, data); break;
    case NiftiType::int16: encode_values<std::int16_t>(values, data); break;
    case NiftiType::uint16: encode_values<std::uint16_t>(values, data); break;
    case NiftiType::int32: encode_values<std::int32_t>(values, data); break;
    case NiftiType::uint32: encode_values<std::uint32_t>(values, data); break;
    case NiftiType::float32: encode_values<float>(values, data); break;
    case NiftiType::float64: encode_values<double>(values, data); break;
    }
    return bytes;
}

}  // namespace

Volume<Real> read_nifti(const fs::path& path, Spacing* spacing)
{
    const auto bytes = read_all_maybe_gz(path);
    if (bytes.size() < kNiftiHeaderSize) fail(path, "truncated NIfTI header");
    const unsigned char* hdr = bytes.data();
    bool swap = false;
    if (load<std::int32_t>(hdr, false) != kNiftiHeaderSize) {
        if (load<std::int32_t>(hdr, true) != kNiftiHeaderSize) fail(path, "not a NIfTI-1 file");
        swap = true;
    }
    if (std::memcmp(hdr + 344, "n+1", 3) != 0 && std::memcmp(hdr + 344, "ni1", 3) != 0) {
        fail(path, "bad NIfTI magic");
    }
    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = load<std::int16_t>(hdr + 40 + 2 * i, swap);
    if (dim[0] < 2 || dim[0] > 7) fail(path, "unsupported dimensionality");
    for (int i = 4; i <= dim[0]; ++i) {
        if (dim[i] > 1) fail(path, "only 2D/3D volumes are supported");
    }
    const int w = dim[1];
    const int h = dim[2];
    const int d = dim[0] >= 3 ? std::max<int>(1, dim[3]) : 1;
    if (w <= 0 || h <= 0) fail(path, "non-positive dimensions");
    const auto type = static_cast<NiftiType>(load<std::int16_t>(hdr + 70, swap));
    const int bitpix = bits_for(type);
    if (bitpix == 0) fail(path, "unsupported NIfTI datatype");
    const float vox_offset = load<float>(hdr + 108, swap);
    const float slope = load<float>(hdr + 112, swap);
    const float inter = load<float>(hdr + 116, swap);
    if (spacing) {
        for (int i = 0; i < 3; ++i) spacing->mm[i] = load<float>(hdr + 80 + 4 * i, swap);
    }

    const std::size_t n = static_cast<std::size_t>(w) * h * d;
    const std::size_t offset = static_cast<std::size_t>(vox_offset);
    const std::size_t elem = bitpix / 8;
    if (bytes.size() < offset + n * elem) fail(path, "truncated voxel data");
    Volume<Real> vol(h, w, d);
    const unsigned char* p = bytes.data() + offset;
    auto& out = vol.values();
    for (std::size_t i = 0; i < n; ++i, p += elem) {
        Real v = 0;
        switch (type) {
        case NiftiType::uint8: v = *p; break;
        case NiftiType::int8: v = static_cast<std::int8_t>(*p); break;
        case NiftiType::int16: v = load<std::int16_t>(p, swap); break;
        case NiftiType::uint16: v = load<std::uint16_t>(p, swap); break;
        case NiftiType::int32: v = load<std::int32_t>(p, swap); break;
        case NiftiType::uint32: v = load<std::uint32_t>(p, swap); break;
        case NiftiType::float32: v = load<float>(p, swap); break;
        case NiftiType::float64: v = load<double>(p, swap); break;
        }
        out[i] = v;
    }
    if (slope != 0.f && std::isfinite(slope) && !(slope == 1.f && inter == 0.f)) {
        for (auto& v : out) v = v * slope + inter;
    }
    return vol;
}

void write_nifti(const fs::path& path, const Volume<Real>& volume, NiftiType type,
                 const Spacing& spacing)
{
    write_all_maybe_gz(path, nifti_bytes(volume.height(), volume.width(), volume.depth(), type,
                                         spacing, volume.values()));
}

void write_nifti(const fs::path& path, const Volume<std::uint8_t>& volume, const Spacing& spacing)
{
    std::vector<Real> values(volume.values().begin(), volume.values().end());
    write_all_maybe_gz(path, nifti_bytes(volume.height(), volume.width(), volume.depth(),
                                         NiftiType::uint8, spacing, values));
}

// ------------------------------------------------------------------------ npy

namespace {

template <class T>
void write_npy_impl(const fs::path& path, const std::vector<int>& shape, const std::vector<T>& v,
                    const char* descr)
{
    if (Tensor::numel(shape) != v.size()) fail(path, "npy: shape does not match value count");
    std::string dict = std::string("{'descr': '") + descr + "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        dict += std::to_string(shape[i]);
        if (shape.size() == 1 || i + 1 < shape.size()) dict += ",";
        if (i + 1 < shape.size()) dict += " ";
    }
    dict += "), }";
    const std::size_t preamble = 10;
    std::size_t total = preamble + dict.size() + 1;
    const std::size_t padded = (total + 63) / 64 * 64;
    dict.append(padded - total, ' ');
    dict += '\n';
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out.write("\x93NUMPY\x01\x00", 8);
    const auto hlen = static_cast<std::uint16_t>(dict.size());
    out.write(reinterpret_cast<const char*>(&hlen), 2);
    out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!out) fail(path, "write error");
}

std::string dict_value(const std::string& header, const std::string& key)
{
    const auto k = header.find("'" + key + "'");
    if (k == std::string::npos) return {};
    auto colon = header.find(':', k);
    if (colon == std::string::npos) return {};
    auto start = header.find_first_not_of(' ', colon + 1);
    if (header[start] == '\'') {
        const auto end = header.find('\'', start + 1);
        return header.substr(start + 1, end - start - 1);
    }
    if (header[start] == '(') {
        const auto end = header.find(')', start);
        return header.substr(start + 1, end - start - 1);
    }
    const auto end = header.find_first_of(",}", start);
    return header.substr(start, end - start);
}

}  // namespace

void write_npy(const fs::path& path, const std::vector<int>& shape, const std::vector<float>& v)
{
    write_npy_impl(path, shape, v, "<f4");
}
void write_npy(const fs::path& path, const std::vector<int>& shape, const std::vector<double>& v)
{
    write_npy_impl(path, shape, v, "<f8");
}
void write_npy(const fs::path& path, const std::vector<int>& shape,
               const std::vector<std::int32_t>& v)
{
    write_npy_impl(path, shape, v, "<i4");
}
void write_npy(const fs::path& path, const std::vector<int>& shape,
               const std::vector<std::uint8_t>& v)
{
    write_npy_impl(path, shape, v, "|u1");
}

NpyArray read_npy(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "file not found");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0) fail(path, "not an npy file");
    const int major = static_cast<unsigned char>(bytes[6]);
    std::size_t hlen = 0;
    std::size_t start = 0;
    if (major == 1) {
        hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
        start = 10;
    } else {
        std::uint32_t l;
        std::memcpy(&l, bytes.data() + 8, 4);
        hlen = l;
        start = 12;
    }
    if (bytes.size() < start + hlen) fail(path, "truncated npy header");
    const std::string header(bytes.data() + start, hlen);
    const std::string descr = dict_value(header, "descr");
    if (dict_value(header, "fortran_order") == "True") fail(path, "fortran-order npy unsupported");
    NpyArray arr;
    std::stringstream ss(dict_value(header, "shape"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto b = tok.find_first_not_of(' ');
        if (b == std::string::npos) continue;
        arr.shape.push_back(std::stoi(tok.substr(b)));
    }
    const std::size_t n = Tensor::numel(arr.shape);
    const char* p = bytes.data() + start + hlen;
    const std::size_t avail = bytes.size() - start - hlen;
    arr.values.resize(n);
    auto read_as = [&](auto tag) {
        using T = decltype(tag);
        if (avail < n * sizeof(T)) fail(path, "truncated npy data");
        for (std::size_t i = 0; i < n; ++i) {
            T v;
            std::memcpy(&v, p + i * sizeof(T), sizeof(T));
            arr.values[i] = static_cast<Real>(v);
        }
    };
    if (descr == "<f4") read_as(float{});
    else if (descr == "<f8") read_as(double{});
    else if (descr == "<i4") read_as(std::int32_t{});
    else if (descr == "<i8") read_as(std::int64_t{});
    else if (descr == "|u1" || descr == "<u1") read_as(std::uint8_t{});
    else fail(path, "unsupported npy dtype " + descr);
    return arr;
}

// ---------------------------------------------------------------- safetensors

namespace {

float half_to_float(std::uint16_t h)
{
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1f;
    std::uint32_t mant = h & 0x3ff;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((mant & 0x400) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ff;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

void write_safetensors(const fs::path& path, const NamedTensors& tensors,
                       const std::map<std::string, std::string>& metadata)
{
    nlohmann::ordered_json header;
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        header[name] = {{"dtype", "F64"},
                        {"shape", t.shape()},
                        {"data_offsets", {offset, offset + t.size() * sizeof(double)}}};
        offset += t.size() * sizeof(double);
    }
    std::string h = header.dump();
    while (h.size() % 8 != 0) h += ' ';
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    const std::uint64_t hlen = h.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) fail(path, "write error");
}

NamedTensors read_safetensors(const fs::path& path, std::map<std::string, std::string>* metadata)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "file not found");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || hlen > (1ull << 30)) fail(path, "bad safetensors header");
    std::string h(hlen, '\0');
    in.read(h.data(), static_cast<std::streamsize>(hlen));
    if (!in) fail(path, "truncated safetensors header");
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto header = nlohmann::json::parse(h);
    NamedTensors out;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            if (metadata) {
                for (const auto& [k, v] : info.items()) (*metadata)[k] = v.get<std::string>();
            }
            continue;
        }
        const auto dtype = info.at("dtype").get<std::string>();
        const auto shape64 = info.at("shape").get<std::vector<std::int64_t>>();
        std::vector<int> shape(shape64.begin(), shape64.end());
        const auto offs = info.at("data_offsets").get<std::vector<std::size_t>>();
        if (offs.size() != 2 || offs[1] > data.size() || offs[0] > offs[1]) {
            fail(path, "bad data offsets for " + name);
        }
        const std::size_t n = Tensor::numel(shape);
        const char* p = data.data() + offs[0];
        const std::size_t span = offs[1] - offs[0];
        std::vector<Real> values(n);
        if (dtype == "F64") {
            if (span != n * 8) fail(path, "size mismatch for " + name);
            std::memcpy(values.data(), p, n * 8);
        } else if (dtype == "F32") {
            if (span != n * 4) fail(path, "size mismatch for " + name);
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, p + 4 * i, 4);
                values[i] = f;
            }
        } else if (dtype == "F16" || dtype == "BF16") {
            if (span != n * 2) fail(path, "size mismatch for " + name);
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t v;
                std::memcpy(&v, p + 2 * i, 2);
                if (dtype == "F16") {
                    values[i] = half_to_float(v);
                } else {
                    const std::uint32_t bits = static_cast<std::uint32_t>(v) << 16;
                    float f;
                    std::memcpy(&f, &bits, 4);
                    values[i] = f;
                }
            }
        } else {
            fail(path, "unsupported dtype " + dtype + " for " + name);
        }
        out.emplace(name, Tensor(std::move(shape), std::move(values)));
    }
    return out;
}

std::string read_text(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "file not found");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out << text;
    if (!out) fail(path, "write error");
}

}  // namespace protoseg::io
