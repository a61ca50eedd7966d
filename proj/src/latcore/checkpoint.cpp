#include "lpm/latcore/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lpm/latcore/errors.hpp"

namespace lpm {

namespace {

constexpr char kMagic[8] = {'L', 'P', 'M', 'C', 'K', 'P', 'T', '1'};

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint64_t read_u64_le(const std::string& bytes, std::size_t at) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + b])) << (8 * b);
    return v;
}

}  // namespace

void append_f32_le(std::string& out, std::span<const float> values) {
    out.reserve(out.size() + values.size() * 4);
    for (float v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
}

std::vector<float> read_f32_le(const std::string& bytes, std::size_t byte_offset, std::size_t count) {
    if (byte_offset + count * 4 > bytes.size()) throw FormatError("f32 payload truncated");
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[byte_offset + 4 * i + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

const Tensor2D& Checkpoint::at(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
    }
    throw FormatError("checkpoint: missing tensor '" + name + "'");
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header;
    header["format"] = "lpm-ckpt";
    header["version"] = 1;
    header["meta"] = ckpt.meta;
    header["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        header["tensors"].push_back({{"name", t.name}, {"shape", {t.tensor.rows(), t.tensor.cols()}}, {"offset", offset}});
        offset += t.tensor.size();
    }
    const std::string head = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    append_u64_le(out, head.size());
    out += head;
    for (const auto& t : ckpt.tensors) append_f32_le(out, t.tensor.values());
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint: bad magic");
    }
    const std::uint64_t head_len = read_u64_le(bytes, 8);
    if (16 + head_len > bytes.size()) throw FormatError("checkpoint: header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, head_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what());
    }
    if (header.value("format", "") != "lpm-ckpt") throw FormatError("checkpoint: unknown format tag");

    Checkpoint ckpt;
    ckpt.meta = header.value("meta", nlohmann::json::object());
    const std::size_t payload = 16 + head_len;
    for (const auto& entry : header.at("tensors")) {
        const auto rows = entry.at("shape").at(0).get<std::size_t>();
        const auto cols = entry.at("shape").at(1).get<std::size_t>();
        const auto offset = entry.at("offset").get<std::size_t>();
        auto data = read_f32_le(bytes, payload + offset * 4, rows * cols);
        ckpt.tensors.push_back({entry.at("name").get<std::string>(), Tensor2D(rows, cols, std::move(data))});
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot open " + path.string() + " for writing");
    const auto bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

}  // namespace lpm
