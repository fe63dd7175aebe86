#pragma once

#include "dynshuffle/models.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dynshuffle {

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

// Flat little-endian records: u32 name length, name bytes, u32 rank, u32
// extents, f32 payload.
std::vector<std::uint8_t> encode_records(const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> decode_records(const std::vector<std::uint8_t>& bytes);

struct CheckpointManifest {
    std::map<std::string, std::string> model;  // ModelConfig::entries()
    std::map<std::string, std::string> info;   // free-form, e.g. epoch
    std::vector<std::pair<std::string, Shape>> records;
    std::uint32_t crc32 = 0;
    std::uint64_t bytes = 0;
};

std::string format_manifest(const CheckpointManifest& m);
CheckpointManifest parse_manifest(const std::string& text);

// Writes <path> and <path with extension .manifest>.
void save_checkpoint(Model& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& info = {});
// Restores parameters and BN statistics. Throws FormatError when the files
// are corrupt or the manifest does not describe this model.
CheckpointManifest load_checkpoint(Model& model, const std::filesystem::path& path);
CheckpointManifest read_manifest(const std::filesystem::path& checkpoint_path);
std::filesystem::path manifest_path(const std::filesystem::path& checkpoint_path);

}  // namespace dynshuffle
