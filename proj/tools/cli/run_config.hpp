#pragma once

#include <dynshuffle/data.hpp>
#include <dynshuffle/models.hpp>
#include <dynshuffle/trainer.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace dsh {

enum class DataSource { cifar10, mnist, synthetic };

std::string to_string(DataSource s);
DataSource parse_data_source(const std::string& s);

struct DataConfig {
    DataSource source = DataSource::mnist;
    std::filesystem::path root;       // empty: fall back to DYNSHUFFLE_DATA
    std::size_t train_limit = 0;      // 0 keeps every record
    std::size_t test_limit = 0;
    std::size_t synthetic_train = 2000;
    std::size_t synthetic_test = 500;
    std::uint64_t synthetic_seed = 7;

    std::map<std::string, std::string> entries() const;
    static DataConfig from_entries(const std::map<std::string, std::string>& kv);
};

// model.*, trainer.* and data.* keys. model.preset, when present, seeds the
// model section before the remaining model keys apply.
struct RunConfig {
    std::string preset = "v1-tiny";
    dynshuffle::ModelConfig model = dynshuffle::model_preset("v1-tiny");
    dynshuffle::TrainConfig trainer;
    DataConfig data;

    // Parses `section.key = value` lines; '#' starts a comment. Throws
    // ConfigError on unknown sections or keys and on malformed values.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    void validate() const;
    // Every resolved value, in the same syntax parse() reads.
    std::string snapshot() const;
};

// Command-line overrides, applied after the config file.
struct Overrides {
    std::optional<std::uint64_t> seed;  // model and trainer seeds
    std::optional<std::size_t> epochs;
    std::optional<float> lambda;
    std::optional<float> lr;
    std::optional<std::string> data_root;
    bool no_binarize = false;
    bool no_orth_reg = false;
    bool no_dynamic_input = false;  // dynamic shuffles become learned static ones
    std::optional<bool> sharing;
};

void apply_overrides(RunConfig& cfg, const Overrides& o);

// Keeps model shape and seeds consistent with a loaded dataset: channels and
// image size come from the data.
void fit_model_to_data(RunConfig& cfg, const dynshuffle::RawDataset& data);

struct LoadedData {
    dynshuffle::RawDataset train;
    dynshuffle::RawDataset test;
    dynshuffle::Normalization norm;
};

// Resolves the root (config, then DYNSHUFFLE_DATA) into cfg and reads both
// splits. Throws DataError when the root is missing or unreadable.
LoadedData load_data(DataConfig& cfg);

}  // namespace dsh
