#pragma once

#include "dynshuffle/aux_config.hpp"
#include "dynshuffle/dynshuffle.hpp"
#include "dynshuffle/module.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dynshuffle {

enum class Architecture { shufflenet_v1, shufflenet_v2, resnet };
enum class ShuffleMode { manual, dynamic, static_learned, off };
// How a ResNet bottleneck widens mid → 4·mid.
enum class ExpansionKind { conv, duplicate, static_select, dynamic, static_dynamic };

std::string to_string(Architecture a);
std::string to_string(ShuffleMode m);
std::string to_string(ExpansionKind k);
Architecture parse_architecture(const std::string& s);
ShuffleMode parse_shuffle_mode(const std::string& s);
ExpansionKind parse_expansion_kind(const std::string& s);

struct ModelConfig {
    Architecture arch = Architecture::shufflenet_v1;
    std::size_t in_channels = 3;
    std::size_t input_size = 32;
    std::size_t classes = 10;
    std::size_t stem_channels = 12;
    // ShuffleNet: unit output widths per stage. ResNet: bottleneck mid widths.
    std::vector<std::size_t> stage_widths{24, 48, 96};
    std::vector<std::size_t> repeats{2, 2, 2};
    std::size_t groups = 3;           // v1 group convolutions
    std::size_t final_channels = 0;   // v2 conv5 width, 0 to omit

    ShuffleMode shuffle = ShuffleMode::dynamic;
    bool binarize = true;
    bool sharing = true;
    // Use the full-size generator dimensions where the widths match.
    std::optional<GeneratorNet> aux_preset;

    ExpansionKind expansion = ExpansionKind::conv;
    std::size_t expansion_factor = 4;

    std::uint64_t seed = 1;

    // Throws ConfigError naming the first violated constraint.
    void validate() const;
    // Canonical key = value lines, stable across runs; used by manifests.
    std::map<std::string, std::string> entries() const;
    static ModelConfig from_entries(const std::map<std::string, std::string>& kv);
};

// Named configurations: v1-tiny, v2-tiny, resnet-tiny, v1-g3, v1-g8, v2-1x, v2-1.5x.
ModelConfig model_preset(const std::string& name);

class Block {
public:
    virtual ~Block() = default;
    virtual Tensor forward(const Tensor& x, ForwardContext& ctx) = 0;
    virtual void collect(const std::string& prefix, StateCollector& out) = 0;
    virtual void shuffles(std::vector<DynamicShuffle*>&) {}
};

class Model {
public:
    Model(ModelConfig cfg, std::vector<std::pair<std::string, std::unique_ptr<Block>>> blocks);

    // x [N×C×H×W] → logits [N×classes].
    Tensor forward(const Tensor& x, ForwardContext& ctx);
    StateCollector state();
    std::vector<DynamicShuffle*> dynamic_shuffles();
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    std::vector<std::pair<std::string, std::unique_ptr<Block>>> blocks_;
};

std::unique_ptr<Model> build_model(const ModelConfig& cfg);
std::unique_ptr<Model> build_shufflenet(int version, ModelConfig cfg, ShuffleMode mode);
std::unique_ptr<Model> build_resnet_bottleneck_variant(ExpansionKind kind, ModelConfig cfg);

// A standalone in → out channel-widening layer of the given kind. Throws
// ConfigError when a replacement kind is asked to reduce channels.
std::unique_ptr<Block> make_expansion(ExpansionKind kind, std::size_t in, std::size_t out, const ModelConfig& cfg);

// Per-sample multiply-accumulates and parameter counts, from one eval-mode
// pass over a single input of the configured size.
ModelStats count_flops_params(Model& model);

}  // namespace dynshuffle
