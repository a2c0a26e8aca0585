#include "immlab/checkpoint.hpp"

#include "immlab/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

namespace immlab {

using nlohmann::json;

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw DataError("checkpoint has no tensor named '" + name + "'");
    }
    return it->second;
}

Tensor& Checkpoint::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw DataError("checkpoint has no tensor named '" + name + "'");
    }
    return it->second;
}

std::size_t Checkpoint::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) {
        n += t.numel();
    }
    return n;
}

namespace {

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

void put_f32_le(char* dst, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) {
        dst[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    }
}

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
};

} // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
    if (c.tensors.empty()) {
        throw DataError("cannot save a checkpoint with no tensors");
    }
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        if (name.empty() || name == "__metadata__") {
            throw DataError("invalid tensor name '" + name + "'");
        }
        require_finite(t, "tensor '" + name + "'");
        const std::uint64_t bytes = 4ull * t.numel();
        header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    json meta = json::object();
    for (const auto& [k, v] : c.metadata) {
        meta[k] = v;
    }
    if (!meta.contains("format_version")) {
        meta["format_version"] = std::string(kFormatVersion);
    }
    header["__metadata__"] = meta;

    std::string text = header.dump();
    while (text.size() % 8 != 0) {
        text.push_back(' ');
    }

    std::string out;
    out.reserve(8 + text.size() + offset);
    put_u64_le(out, text.size());
    out += text;
    const std::size_t data_start = out.size();
    out.resize(data_start + offset);
    char* dst = out.data() + data_start;
    for (const auto& [_, t] : c.tensors) {
        for (float v : t.data()) {
            put_f32_le(dst, v);
            dst += 4;
        }
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    if (bytes.size() < 8) {
        throw FormatError("checkpoint truncated: missing header length");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t header_len = get_u64_le(raw);
    if (header_len > bytes.size() - 8) {
        throw FormatError("checkpoint truncated: header length " + std::to_string(header_len) +
                          " exceeds file size");
    }
    json header;
    try {
        header = json::parse(bytes.substr(8, header_len));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("malformed checkpoint header: not a JSON object");
    }

    Checkpoint c;
    std::vector<Entry> entries;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (!it->is_object()) {
                throw FormatError("__metadata__ must be an object");
            }
            for (auto m = it->begin(); m != it->end(); ++m) {
                if (!m->is_string()) {
                    throw FormatError("__metadata__ value for '" + m.key() + "' is not a string");
                }
                c.metadata[m.key()] = m->get<std::string>();
            }
            continue;
        }
        const json& info = *it;
        if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
            !info.contains("data_offsets")) {
            throw FormatError("malformed header entry for '" + it.key() + "'");
        }
        if (!info["dtype"].is_string() || info["dtype"].get<std::string>() != "F32") {
            throw FormatError("unsupported dtype for '" + it.key() + "': " + info["dtype"].dump());
        }
        Entry e;
        e.name = it.key();
        const json& shape = info["shape"];
        const json& offs = info["data_offsets"];
        if (!shape.is_array() || shape.empty() || shape.size() > 2) {
            throw FormatError("tensor '" + e.name + "' must have rank 1 or 2");
        }
        for (const auto& d : shape) {
            if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
                throw FormatError("tensor '" + e.name + "' has a non-positive dimension");
            }
            e.shape.push_back(d.get<std::size_t>());
        }
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned()) {
            throw FormatError("tensor '" + e.name + "' has malformed data_offsets");
        }
        e.begin = offs[0].get<std::uint64_t>();
        e.end = offs[1].get<std::uint64_t>();
        if (e.end < e.begin || e.end - e.begin != 4ull * shape_numel(e.shape)) {
            throw FormatError("tensor '" + e.name + "' data_offsets disagree with its shape");
        }
        entries.push_back(std::move(e));
    }
    if (entries.empty()) {
        throw FormatError("checkpoint contains no tensors");
    }

    const std::uint64_t data_size = bytes.size() - 8 - header_len;
    for (const auto& e : entries) {
        if (e.end > data_size) {
            throw FormatError("checkpoint truncated: tensor '" + e.name + "' ends at byte " +
                              std::to_string(e.end) + " of a " + std::to_string(data_size) +
                              "-byte data section");
        }
    }
    std::vector<const Entry*> by_offset;
    for (const auto& e : entries) {
        by_offset.push_back(&e);
    }
    std::sort(by_offset.begin(), by_offset.end(),
              [](const Entry* a, const Entry* b) { return a->begin < b->begin; });
    std::uint64_t cursor = 0;
    for (const Entry* e : by_offset) {
        if (e->begin != cursor) {
            throw FormatError("tensor '" + e->name + "' data_offsets " +
                              (e->begin < cursor ? "overlap" : "leave a gap") + " at byte " +
                              std::to_string(e->begin));
        }
        cursor = e->end;
    }
    if (cursor != data_size) {
        throw FormatError("checkpoint has " + std::to_string(data_size - cursor) +
                          " unaccounted trailing bytes");
    }

    const unsigned char* data = raw + 8 + header_len;
    for (const auto& e : entries) {
        std::vector<float> values(shape_numel(e.shape));
        const unsigned char* p = data + e.begin;
        for (auto& v : values) {
            v = get_f32_le(p);
            p += 4;
        }
        c.tensors.emplace(e.name, Tensor(e.shape, std::move(values)));
    }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(c);
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) {
        throw IoError("cannot open '" + path.string() + "' for writing: " + std::strerror(errno));
    }
    std::size_t written = 0;
    while (written < bytes.size()) {
        const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            const std::string err = std::strerror(errno);
            ::close(fd);
            throw IoError("write to '" + path.string() + "' failed: " + err);
        }
        written += static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0 || ::close(fd) != 0) {
        throw IoError("could not flush '" + path.string() + "': " + std::strerror(errno));
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path.string() + "'");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw IoError("read of '" + path.string() + "' failed");
    }
    return parse_checkpoint(bytes);
}

LayerKey parse_layer_key(std::string_view name) {
    constexpr std::string_view prefix = "layers.";
    if (!name.starts_with(prefix)) {
        return {std::nullopt, std::string(name)};
    }
    std::string_view rest = name.substr(prefix.size());
    const auto dot = rest.find('.');
    const std::string_view index = rest.substr(0, dot);
    std::size_t n = 0;
    auto [ptr, ec] = std::from_chars(index.data(), index.data() + index.size(), n);
    if (index.empty() || ec != std::errc() || ptr != index.data() + index.size()) {
        throw DataError("tensor name '" + std::string(name) + "' has a non-integer layer index");
    }
    if (dot == std::string_view::npos || dot + 1 >= rest.size()) {
        throw DataError("tensor name '" + std::string(name) + "' has no module after the layer index");
    }
    return {n, std::string(rest.substr(dot + 1))};
}

std::size_t layer_count(const Checkpoint& c) {
    std::size_t inferred = 0;
    for (const auto& [name, _] : c.tensors) {
        const LayerKey key = parse_layer_key(name);
        if (key.layer) {
            inferred = std::max(inferred, *key.layer + 1);
        }
    }
    auto it = c.metadata.find("model_config");
    if (it == c.metadata.end()) {
        return inferred;
    }
    std::size_t configured = 0;
    try {
        configured = json::parse(it->second).at("n_layers").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("model_config metadata is malformed: ") + e.what());
    }
    if (inferred > configured) {
        throw DataError("tensor layer index " + std::to_string(inferred - 1) +
                        " is out of range for n_layers = " + std::to_string(configured));
    }
    return configured;
}

void assert_congruent(const Checkpoint& a, const Checkpoint& b) {
    std::vector<std::string> only_a;
    std::vector<std::string> only_b;
    for (const auto& [name, _] : a.tensors) {
        if (!b.tensors.contains(name)) {
            only_a.push_back(name);
        }
    }
    for (const auto& [name, _] : b.tensors) {
        if (!a.tensors.contains(name)) {
            only_b.push_back(name);
        }
    }
    if (!only_a.empty() || !only_b.empty()) {
        std::string msg = "checkpoints have different tensor names;";
        auto list = [&msg](const char* label, const std::vector<std::string>& names) {
            if (names.empty()) {
                return;
            }
            msg += std::string(" only in ") + label + ":";
            for (const auto& n : names) {
                msg += " " + n;
            }
        };
        list("first", only_a);
        list("second", only_b);
        throw IncongruentError(msg);
    }
    for (const auto& [name, t] : a.tensors) {
        const Tensor& u = b.tensors.at(name);
        if (t.shape() != u.shape()) {
            throw IncongruentError("tensor '" + name + "' has shape " + t.shape_string() +
                                   " vs " + u.shape_string());
        }
    }
}

} // namespace immlab
