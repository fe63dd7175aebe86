#include "run_config.hpp"

#include <dynshuffle/error.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dsh {

using dynshuffle::ConfigError;
using dynshuffle::DataError;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
        n = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || v.front() == '-') {
        throw ConfigError("data." + key + ": expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(n);
}

}  // namespace

std::string to_string(DataSource s) {
    switch (s) {
        case DataSource::cifar10: return "cifar10";
        case DataSource::mnist: return "mnist";
        case DataSource::synthetic: return "synthetic";
    }
    return "?";
}

DataSource parse_data_source(const std::string& s) {
    if (s == "cifar10") return DataSource::cifar10;
    if (s == "mnist") return DataSource::mnist;
    if (s == "synthetic") return DataSource::synthetic;
    throw ConfigError("data.format: unknown format '" + s + "' (cifar10, mnist, synthetic)");
}

std::map<std::string, std::string> DataConfig::entries() const {
    return {
        {"format", to_string(source)},
        {"root", root.string()},
        {"train_limit", std::to_string(train_limit)},
        {"test_limit", std::to_string(test_limit)},
        {"synthetic_train", std::to_string(synthetic_train)},
        {"synthetic_test", std::to_string(synthetic_test)},
        {"synthetic_seed", std::to_string(synthetic_seed)},
    };
}

DataConfig DataConfig::from_entries(const std::map<std::string, std::string>& kv) {
    DataConfig c;
    for (const auto& [k, v] : kv) {
        if (k == "format") c.source = parse_data_source(v);
        else if (k == "root") c.root = v;
        else if (k == "train_limit") c.train_limit = parse_count(k, v);
        else if (k == "test_limit") c.test_limit = parse_count(k, v);
        else if (k == "synthetic_train") c.synthetic_train = parse_count(k, v);
        else if (k == "synthetic_test") c.synthetic_test = parse_count(k, v);
        else if (k == "synthetic_seed") c.synthetic_seed = parse_count(k, v);
        else throw ConfigError("unknown key data." + k);
    }
    return c;
}

RunConfig RunConfig::parse(const std::string& text) {
    std::map<std::string, std::string> model, trainer, data;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto where = "config line " + std::to_string(lineno) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected section.key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto dot = key.find('.');
        if (dot == std::string::npos) throw ConfigError(where + "key '" + key + "' has no section");
        const std::string section = key.substr(0, dot), name = key.substr(dot + 1);
        std::map<std::string, std::string>* target = nullptr;
        if (section == "model") target = &model;
        else if (section == "trainer") target = &trainer;
        else if (section == "data") target = &data;
        else throw ConfigError(where + "unknown section '" + section + "' (model, trainer, data)");
        if (!target->emplace(name, value).second) throw ConfigError(where + "duplicate key " + key);
    }

    RunConfig cfg;
    if (auto it = model.find("preset"); it != model.end()) {
        cfg.preset = it->second;
        model.erase(it);
    }
    auto merged = dynshuffle::model_preset(cfg.preset).entries();
    for (const auto& [k, v] : model) {
        if (!merged.count(k)) throw ConfigError("unknown key model." + k);
        merged[k] = v;
    }
    cfg.model = dynshuffle::ModelConfig::from_entries(merged);
    cfg.trainer = dynshuffle::TrainConfig::from_entries(trainer);
    cfg.data = DataConfig::from_entries(data);
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void RunConfig::validate() const {
    model.validate();
    trainer.validate();
}

std::string RunConfig::snapshot() const {
    std::ostringstream os;
    os << "model.preset = " << preset << "\n";
    for (const auto& [k, v] : model.entries()) os << "model." << k << " = " << v << "\n";
    for (const auto& [k, v] : trainer.entries()) os << "trainer." << k << " = " << v << "\n";
    for (const auto& [k, v] : data.entries()) os << "data." << k << " = " << v << "\n";
    return os.str();
}

void apply_overrides(RunConfig& cfg, const Overrides& o) {
    if (o.seed) cfg.model.seed = cfg.trainer.seed = *o.seed;
    if (o.epochs) cfg.trainer.epochs = *o.epochs;
    if (o.lambda) cfg.trainer.lambda = *o.lambda;
    if (o.lr) cfg.trainer.lr0 = *o.lr;
    if (o.data_root) cfg.data.root = *o.data_root;
    if (o.no_binarize) cfg.model.binarize = false;
    if (o.no_orth_reg) cfg.trainer.orth_reg = false;
    if (o.no_dynamic_input) {
        if (cfg.model.shuffle != dynshuffle::ShuffleMode::dynamic) {
            throw ConfigError("--no-dynamic-input needs model.shuffle = dynamic");
        }
        cfg.model.shuffle = dynshuffle::ShuffleMode::static_learned;
    }
    if (o.sharing) cfg.model.sharing = *o.sharing;
}

void fit_model_to_data(RunConfig& cfg, const dynshuffle::RawDataset& data) {
    if (data.height != data.width) throw ConfigError("only square images are supported");
    cfg.model.in_channels = data.channels;
    cfg.model.input_size = data.height;
}

LoadedData load_data(DataConfig& cfg) {
    LoadedData out;
    if (cfg.source == DataSource::synthetic) {
        out.train = dynshuffle::synthetic_cifar_like(cfg.synthetic_train, cfg.synthetic_seed);
        out.test = dynshuffle::synthetic_cifar_like(cfg.synthetic_test, cfg.synthetic_seed + 1);
        out.norm = dynshuffle::Normalization::cifar10();
    } else {
        if (cfg.root.empty()) {
            if (const char* env = std::getenv("DYNSHUFFLE_DATA")) cfg.root = env;
        }
        const auto& root = cfg.root;
        if (root.empty()) throw DataError("no dataset root: pass --data-root or set DYNSHUFFLE_DATA");
        const auto format =
            cfg.source == DataSource::cifar10 ? dynshuffle::DatasetFormat::cifar10 : dynshuffle::DatasetFormat::mnist;
        out.train = dynshuffle::load_dataset(format, root, dynshuffle::Split::train);
        out.test = dynshuffle::load_dataset(format, root, dynshuffle::Split::test);
        out.norm = dynshuffle::Normalization::for_format(format);
    }
    out.train = out.train.head(cfg.train_limit);
    out.test = out.test.head(cfg.test_limit);
    if (out.train.size() == 0 || out.test.size() == 0) throw DataError("dataset split is empty");
    return out;
}

}  // namespace dsh
