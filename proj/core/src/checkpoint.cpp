#include "dynshuffle/checkpoint.hpp"

#include "dynshuffle/error.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dynshuffle {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    float f32() { return std::bit_cast<float>(u32()); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t checksum(const std::vector<std::uint8_t>& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string shape_token(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape_token(const std::string& tok) {
    Shape s;
    std::stringstream ss(tok);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            s.push_back(std::stoul(part));
        } catch (const std::exception&) {
            throw FormatError("manifest: bad shape '" + tok + "'");
        }
    }
    if (s.empty()) throw FormatError("manifest: empty shape");
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<CheckpointRecord> gather_records(Model& model) {
    std::vector<CheckpointRecord> out;
    StateCollector st = model.state();
    for (const auto& p : st.params) {
        const auto v = p.tensor.values();
        out.push_back({p.name, p.tensor.shape(), std::vector<float>(v.begin(), v.end())});
    }
    for (const auto& b : st.buffers) out.push_back({b.name, Shape{b.values->size()}, *b.values});
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

std::vector<std::uint8_t> encode_records(const std::vector<CheckpointRecord>& records) {
    std::vector<std::uint8_t> out;
    for (const auto& r : records) {
        if (shape_numel(r.shape) != r.values.size()) throw UsageError("checkpoint record " + r.name + ": shape mismatch");
        put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        for (auto e : r.shape) put_u32(out, static_cast<std::uint32_t>(e));
        for (float v : r.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

std::vector<CheckpointRecord> decode_records(const std::vector<std::uint8_t>& bytes) {
    std::vector<CheckpointRecord> out;
    Reader in(bytes);
    while (!in.done()) {
        CheckpointRecord r;
        const std::uint32_t len = in.u32();
        if (len == 0 || len > 4096) throw FormatError("checkpoint: implausible name length " + std::to_string(len));
        r.name = in.str(len);
        const std::uint32_t rank = in.u32();
        if (rank == 0 || rank > 8) throw FormatError("checkpoint: record " + r.name + " has rank " + std::to_string(rank));
        for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(in.u32());
        const std::size_t n = shape_numel(r.shape);
        if (n > bytes.size()) throw FormatError("checkpoint: record " + r.name + " larger than the file");
        r.values.resize(n);
        for (auto& v : r.values) v = in.f32();
        out.push_back(std::move(r));
    }
    return out;
}

std::string format_manifest(const CheckpointManifest& m) {
    std::ostringstream os;
    os << "# dynshuffle checkpoint manifest v1\n";
    for (const auto& [k, v] : m.model) os << "model." << k << " = " << v << "\n";
    for (const auto& [k, v] : m.info) os << "info." << k << " = " << v << "\n";
    for (const auto& [name, shape] : m.records) os << "record " << name << " " << shape_token(shape) << "\n";
    os << "bytes = " << m.bytes << "\n";
    os << "crc32 = " << m.crc32 << "\n";
    return os.str();
}

CheckpointManifest parse_manifest(const std::string& text) {
    CheckpointManifest m;
    std::istringstream in(text);
    std::string line;
    bool have_crc = false, have_bytes = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("record ", 0) == 0) {
            std::istringstream ls(line.substr(7));
            std::string name, shape;
            if (!(ls >> name >> shape)) throw FormatError("manifest line " + std::to_string(lineno) + ": bad record");
            m.records.emplace_back(name, parse_shape_token(shape));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("manifest line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        try {
            if (key.rfind("model.", 0) == 0) {
                m.model[key.substr(6)] = value;
            } else if (key.rfind("info.", 0) == 0) {
                m.info[key.substr(5)] = value;
            } else if (key == "crc32") {
                m.crc32 = static_cast<std::uint32_t>(std::stoul(value));
                have_crc = true;
            } else if (key == "bytes") {
                m.bytes = std::stoull(value);
                have_bytes = true;
            } else {
                throw FormatError("manifest line " + std::to_string(lineno) + ": unknown key " + key);
            }
        } catch (const std::logic_error&) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": bad number");
        }
    }
    if (!have_crc || !have_bytes) throw FormatError("manifest: missing checksum or size");
    return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint_path) {
    auto p = checkpoint_path;
    return p.replace_extension(".manifest");
}

void save_checkpoint(Model& model, const std::filesystem::path& path, const std::map<std::string, std::string>& info) {
    const auto records = gather_records(model);
    const auto bytes = encode_records(records);
    CheckpointManifest m;
    m.model = model.config().entries();
    m.info = info;
    for (const auto& r : records) m.records.emplace_back(r.name, r.shape);
    m.crc32 = checksum(bytes);
    m.bytes = bytes.size();
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    std::ofstream man(manifest_path(path), std::ios::trunc);
    if (!man) throw FormatError("cannot write " + manifest_path(path).string());
    man << format_manifest(m);
}

CheckpointManifest read_manifest(const std::filesystem::path& checkpoint_path) {
    const auto bytes = read_file(manifest_path(checkpoint_path));
    return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

CheckpointManifest load_checkpoint(Model& model, const std::filesystem::path& path) {
    const CheckpointManifest m = read_manifest(path);
    const auto expected = model.config().entries();
    for (const auto& [k, v] : expected) {
        auto it = m.model.find(k);
        if (it == m.model.end() || it->second != v) {
            throw FormatError("manifest mismatch: model." + k + " is '" + (it == m.model.end() ? "<missing>" : it->second) +
                              "' in the checkpoint, '" + v + "' in the configuration");
        }
    }
    if (m.model.size() != expected.size()) throw FormatError("manifest mismatch: extra model keys");

    const auto bytes = read_file(path);
    if (bytes.size() != m.bytes || checksum(bytes) != m.crc32) {
        throw FormatError("checkpoint " + path.string() + " is corrupt (size or crc32 differs from its manifest)");
    }
    const auto records = decode_records(bytes);
    StateCollector st = model.state();
    std::map<std::string, const CheckpointRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    if (by_name.size() != st.params.size() + st.buffers.size()) {
        throw FormatError("checkpoint holds " + std::to_string(by_name.size()) + " records, model has " +
                          std::to_string(st.params.size() + st.buffers.size()));
    }
    auto find = [&](const std::string& name) -> const CheckpointRecord& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint lacks record " + name);
        return *it->second;
    };
    for (auto& p : st.params) {
        const auto& r = find(p.name);
        if (r.shape != p.tensor.shape()) {
            throw FormatError("checkpoint record " + p.name + " has shape " + shape_str(r.shape) + ", model expects " +
                              shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.mutable_values();
        std::copy(r.values.begin(), r.values.end(), dst.begin());
    }
    for (auto& b : st.buffers) {
        const auto& r = find(b.name);
        if (r.values.size() != b.values->size()) throw FormatError("checkpoint buffer " + b.name + " has the wrong size");
        *b.values = r.values;
    }
    return m;
}

}  // namespace dynshuffle
