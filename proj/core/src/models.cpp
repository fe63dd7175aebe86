#include "dynshuffle/models.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/init.hpp"
#include "dynshuffle/ops.hpp"
#include "dynshuffle/permutation.hpp"

#include <sstream>

namespace dynshuffle {

// --- enum names -------------------------------------------------------------

std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::shufflenet_v1: return "shufflenet_v1";
        case Architecture::shufflenet_v2: return "shufflenet_v2";
        case Architecture::resnet: return "resnet";
    }
    return "?";
}

std::string to_string(ShuffleMode m) {
    switch (m) {
        case ShuffleMode::manual: return "manual";
        case ShuffleMode::dynamic: return "dynamic";
        case ShuffleMode::static_learned: return "static";
        case ShuffleMode::off: return "off";
    }
    return "?";
}

std::string to_string(ExpansionKind k) {
    switch (k) {
        case ExpansionKind::conv: return "conv";
        case ExpansionKind::duplicate: return "duplicate";
        case ExpansionKind::static_select: return "static";
        case ExpansionKind::dynamic: return "dynamic";
        case ExpansionKind::static_dynamic: return "static_dynamic";
    }
    return "?";
}

Architecture parse_architecture(const std::string& s) {
    for (auto a : {Architecture::shufflenet_v1, Architecture::shufflenet_v2, Architecture::resnet})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown architecture '" + s + "'");
}

ShuffleMode parse_shuffle_mode(const std::string& s) {
    for (auto m : {ShuffleMode::manual, ShuffleMode::dynamic, ShuffleMode::static_learned, ShuffleMode::off})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown shuffle mode '" + s + "' (manual, dynamic, static, off)");
}

ExpansionKind parse_expansion_kind(const std::string& s) {
    for (auto k : {ExpansionKind::conv, ExpansionKind::duplicate, ExpansionKind::static_select, ExpansionKind::dynamic,
                   ExpansionKind::static_dynamic})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown expansion kind '" + s + "'");
}

// --- config -----------------------------------------------------------------

namespace {

std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || s.front() == '-') {
        throw ConfigError("model." + key + ": expected a non-negative integer, got '" + s + "'");
    }
    return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
    if (out.empty()) throw ConfigError("model." + key + ": empty list");
    return out;
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("model." + key + ": expected true or false, got '" + s + "'");
}

std::optional<GeneratorNet> parse_preset(const std::string& s) {
    if (s == "none") return std::nullopt;
    for (auto n : {GeneratorNet::v1_g3, GeneratorNet::v1_g8, GeneratorNet::v2_1x, GeneratorNet::v2_1_5x})
        if (to_string(n) == s) return n;
    throw ConfigError("model.aux_preset: unknown preset '" + s + "'");
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& why) { throw ConfigError("model: " + why); };
    if (in_channels == 0 || input_size == 0 || classes < 2) fail("in_channels, input_size and classes must be positive");
    if (stem_channels == 0) fail("stem_channels must be positive");
    if (stage_widths.empty() || stage_widths.size() != repeats.size()) fail("stage_widths and repeats must align");
    for (auto r : repeats)
        if (r == 0) fail("every stage needs at least one unit");
    std::size_t in = stem_channels;
    switch (arch) {
        case Architecture::shufflenet_v1:
            if (groups == 0) fail("groups must be positive");
            for (std::size_t s = 0; s < stage_widths.size(); ++s) {
                const std::size_t w = stage_widths[s];
                if (w <= in) fail("stage width " + std::to_string(w) + " must exceed its input " + std::to_string(in));
                if (w % 4 != 0 || (w / 4) % groups != 0) {
                    fail("bottleneck " + std::to_string(w) + "/4 is not divisible by " + std::to_string(groups) +
                         " groups");
                }
                if ((w - in) % groups != 0 || w % groups != 0) {
                    fail("stage width " + std::to_string(w) + " is not divisible by " + std::to_string(groups) + " groups");
                }
                if (s > 0 && in % groups != 0) fail("stage input " + std::to_string(in) + " not divisible by groups");
                in = w;
            }
            break;
        case Architecture::shufflenet_v2:
            for (auto w : stage_widths)
                if (w < 2 || w % 2 != 0) fail("v2 stage widths must be even, got " + std::to_string(w));
            break;
        case Architecture::resnet:
            if (expansion_factor == 0) fail("expansion_factor must be positive");
            for (auto w : stage_widths)
                if (w == 0) fail("bottleneck widths must be positive");
            break;
    }
    if (input_size < (std::size_t{1} << stage_widths.size())) fail("input too small for the stage strides");
}

std::map<std::string, std::string> ModelConfig::entries() const {
    return {
        {"arch", to_string(arch)},
        {"in_channels", std::to_string(in_channels)},
        {"input_size", std::to_string(input_size)},
        {"classes", std::to_string(classes)},
        {"stem_channels", std::to_string(stem_channels)},
        {"stage_widths", join(stage_widths)},
        {"repeats", join(repeats)},
        {"groups", std::to_string(groups)},
        {"final_channels", std::to_string(final_channels)},
        {"shuffle", to_string(shuffle)},
        {"binarize", binarize ? "true" : "false"},
        {"sharing", sharing ? "true" : "false"},
        {"aux_preset", aux_preset ? to_string(*aux_preset) : "none"},
        {"expansion", to_string(expansion)},
        {"expansion_factor", std::to_string(expansion_factor)},
        {"seed", std::to_string(seed)},
    };
}

ModelConfig ModelConfig::from_entries(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    for (const auto& [k, v] : kv) {
        if (k == "arch") c.arch = parse_architecture(v);
        else if (k == "in_channels") c.in_channels = parse_size(k, v);
        else if (k == "input_size") c.input_size = parse_size(k, v);
        else if (k == "classes") c.classes = parse_size(k, v);
        else if (k == "stem_channels") c.stem_channels = parse_size(k, v);
        else if (k == "stage_widths") c.stage_widths = parse_list(k, v);
        else if (k == "repeats") c.repeats = parse_list(k, v);
        else if (k == "groups") c.groups = parse_size(k, v);
        else if (k == "final_channels") c.final_channels = parse_size(k, v);
        else if (k == "shuffle") c.shuffle = parse_shuffle_mode(v);
        else if (k == "binarize") c.binarize = parse_bool(k, v);
        else if (k == "sharing") c.sharing = parse_bool(k, v);
        else if (k == "aux_preset") c.aux_preset = parse_preset(v);
        else if (k == "expansion") c.expansion = parse_expansion_kind(v);
        else if (k == "expansion_factor") c.expansion_factor = parse_size(k, v);
        else if (k == "seed") c.seed = parse_size(k, v);
        else throw ConfigError("unknown key model." + k);
    }
    return c;
}

ModelConfig model_preset(const std::string& name) {
    ModelConfig c;
    if (name == "v1-tiny") return c;
    if (name == "v2-tiny") {
        c.arch = Architecture::shufflenet_v2;
        c.groups = 1;
        c.final_channels = 128;
        return c;
    }
    if (name == "resnet-tiny") {
        c.arch = Architecture::resnet;
        c.stem_channels = 16;
        c.stage_widths = {8, 16, 32};
        c.groups = 1;
        c.shuffle = ShuffleMode::off;
        return c;
    }
    c.classes = 100;
    c.stem_channels = 24;
    if (name == "v1-g3") {
        c.stage_widths = {240, 480, 960};
        c.repeats = {4, 8, 4};
        c.aux_preset = GeneratorNet::v1_g3;
        return c;
    }
    if (name == "v1-g8") {
        c.stage_widths = {384, 768, 1536};
        c.repeats = {4, 8, 4};
        c.groups = 8;
        c.aux_preset = GeneratorNet::v1_g8;
        return c;
    }
    if (name == "v2-1x" || name == "v2-1.5x") {
        c.arch = Architecture::shufflenet_v2;
        c.groups = 1;
        c.repeats = {4, 8, 4};
        c.final_channels = 1024;
        if (name == "v2-1x") {
            c.stage_widths = {116, 232, 464};
            c.aux_preset = GeneratorNet::v2_1x;
        } else {
            c.stage_widths = {176, 352, 704};
            c.aux_preset = GeneratorNet::v2_1_5x;
        }
        return c;
    }
    throw ConfigError("unknown model preset '" + name + "' (v1-tiny, v2-tiny, resnet-tiny, v1-g3, v1-g8, v2-1x, v2-1.5x)");
}

// --- layers -----------------------------------------------------------------

namespace {

struct Conv {
    Tensor w;
    std::size_t groups = 1, stride = 1, pad = 0;

    Conv() = default;
    Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad_, std::size_t groups_,
         Rng& rng)
        : groups(groups_), stride(stride_), pad(pad_) {
        if (groups == 0 || in % groups != 0 || out % groups != 0) {
            throw ConfigError("convolution " + std::to_string(in) + "->" + std::to_string(out) + " with " +
                              std::to_string(groups) + " groups");
        }
        w = kaiming_uniform({out, in / groups, k, k}, in / groups * k * k, rng);
    }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) const {
        Tensor y = conv2d_grouped(x, w, groups, stride, pad);
        if (ctx.stats) ctx.stats->macs += w.numel() * y.dim(2) * y.dim(3);
        return y;
    }
};

Tensor bn(const Tensor& x, BatchNormState& s, const ForwardContext& ctx) { return batchnorm(x, s, ctx.mode); }

struct Rngs {
    Rng main;
    Rng aux;  // separate stream so shuffle modes share backbone weights
};

class ShuffleSlot {
public:
    ShuffleSlot() = default;
    ShuffleSlot(const ModelConfig& cfg, ShuffleMode mode, std::size_t channels, std::size_t groups,
                std::size_t manual_groups, Rng& aux_rng, std::string name)
        : name_(std::move(name)) {
        if (mode == ShuffleMode::manual) {
            manual_ = build_manual_shuffle(manual_groups, channels);
        } else if (mode == ShuffleMode::dynamic || mode == ShuffleMode::static_learned) {
            AuxNetConfig aux;
            std::optional<AuxNetConfig> preset;
            if (cfg.aux_preset && cfg.sharing) preset = generator_lookup(*cfg.aux_preset, channels);
            aux = preset ? *preset : derive_aux_config(channels, groups, cfg.sharing);
            ShuffleOptions opts{cfg.binarize, mode == ShuffleMode::dynamic};
            dynamic_ = std::make_unique<DynamicShuffle>(aux, opts, aux_rng);
            dynamic_->set_reference(build_manual_shuffle(manual_groups, channels));
        }
    }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) {
        if (dynamic_) return dynamic_->forward(x, ctx, name_);
        if (manual_) {
            if (ctx.capture) {
                ctx.capture->push_back(
                    {name_, std::vector<SelectionMatrix>(x.dim(0), manual_->as_selection()), *manual_});
            }
            return apply_shift(*manual_, x);
        }
        return x;
    }

    void collect(const std::string& prefix, StateCollector& out) {
        if (dynamic_) dynamic_->collect(prefix + ".dynshuffle", out);
    }
    void shuffles(std::vector<DynamicShuffle*>& out) {
        if (dynamic_) out.push_back(dynamic_.get());
    }

private:
    std::string name_;
    std::optional<PermutationMatrix> manual_;
    std::unique_ptr<DynamicShuffle> dynamic_;
};

class Stem : public Block {
public:
    Stem(std::size_t in, std::size_t out, Rng& rng) : conv_(in, out, 3, 1, 1, 1, rng), bn_(out) {}
    Tensor forward(const Tensor& x, ForwardContext& ctx) override { return relu(bn(conv_(x, ctx), bn_, ctx)); }
    void collect(const std::string& prefix, StateCollector& out) override {
        out.param(prefix + ".conv.w", conv_.w);
        out.batchnorm(prefix + ".bn", bn_);
    }

private:
    Conv conv_;
    BatchNormState bn_;
};

class V1Unit : public Block {
public:
    V1Unit(const ModelConfig& cfg, std::size_t in, std::size_t out, std::size_t stride, bool first_stage_unit,
           Rngs& rng, const std::string& name)
        : stride_(stride) {
        const std::size_t g = cfg.groups, mid = out / 4;
        const std::size_t branch = stride == 1 ? out : out - in;
        if (stride == 1 && in != out) throw ConfigError("v1 unit: stride-1 units keep their width");
        c1_ = Conv(in, mid, 1, 1, 0, first_stage_unit ? 1 : g, rng.main);
        b1_ = BatchNormState(mid);
        dw_ = Conv(mid, mid, 3, stride, 1, mid, rng.main);
        b2_ = BatchNormState(mid);
        c3_ = Conv(mid, branch, 1, 1, 0, g, rng.main);
        b3_ = BatchNormState(branch);
        shuffle_ = ShuffleSlot(cfg, cfg.shuffle, mid, g, g, rng.aux, name + ".dynshuffle");
    }

    Tensor forward(const Tensor& x, ForwardContext& ctx) override {
        Tensor y = relu(bn(c1_(x, ctx), b1_, ctx));
        y = shuffle_(y, ctx);
        y = bn(dw_(y, ctx), b2_, ctx);
        y = bn(c3_(y, ctx), b3_, ctx);
        if (stride_ == 1) return relu(add(x, y));
        return relu(concat_channels(avg_pool2d(x, 3, 2, 1), y));
    }

    void collect(const std::string& prefix, StateCollector& out) override {
        out.param(prefix + ".conv1.w", c1_.w);
        out.batchnorm(prefix + ".bn1", b1_);
        shuffle_.collect(prefix, out);
        out.param(prefix + ".dwconv.w", dw_.w);
        out.batchnorm(prefix + ".bn2", b2_);
        out.param(prefix + ".conv3.w", c3_.w);
        out.batchnorm(prefix + ".bn3", b3_);
    }
    void shuffles(std::vector<DynamicShuffle*>& out) override { shuffle_.shuffles(out); }

private:
    std::size_t stride_;
    Conv c1_, dw_, c3_;
    BatchNormState b1_, b2_, b3_;
    ShuffleSlot shuffle_;
};

class V2Unit : public Block {
public:
    V2Unit(const ModelConfig& cfg, std::size_t in, std::size_t out, std::size_t stride, Rngs& rng,
           const std::string& name)
        : stride_(stride), out_shuffle_(build_manual_shuffle(2, out)), outer_(cfg.shuffle != ShuffleMode::off) {
        const std::size_t half = out / 2;
        if (stride == 1 && in != out) throw ConfigError("v2 unit: stride-1 units keep their width");
        const std::size_t branch_in = stride == 1 ? half : in;
        if (stride == 2) {
            ldw_ = Conv(in, in, 3, 2, 1, in, rng.main);
            lb1_ = BatchNormState(in);
            lc_ = Conv(in, half, 1, 1, 0, 1, rng.main);
            lb2_ = BatchNormState(half);
        }
        c1_ = Conv(branch_in, half, 1, 1, 0, 1, rng.main);
        b1_ = BatchNormState(half);
        dw_ = Conv(half, half, 3, stride, 1, half, rng.main);
        b2_ = BatchNormState(half);
        c3_ = Conv(half, half, 1, 1, 0, 1, rng.main);
        b3_ = BatchNormState(half);
        // The main pathway gets a dynamic shuffle with one group; manual mode
        // keeps only the unit's closing two-way shuffle.
        const ShuffleMode inner = cfg.shuffle == ShuffleMode::manual ? ShuffleMode::off : cfg.shuffle;
        shuffle_ = ShuffleSlot(cfg, inner, half, 1, 1, rng.aux, name + ".dynshuffle");
    }

    Tensor forward(const Tensor& x, ForwardContext& ctx) override {
        const std::size_t c = x.dim(1);
        Tensor left, right_in;
        if (stride_ == 1) {
            left = slice_channels(x, 0, c / 2);
            right_in = slice_channels(x, c / 2, c - c / 2);
        } else {
            left = relu(bn(lc_(bn(ldw_(x, ctx), lb1_, ctx), ctx), lb2_, ctx));
            right_in = x;
        }
        Tensor y = relu(bn(c1_(right_in, ctx), b1_, ctx));
        y = shuffle_(y, ctx);
        y = bn(dw_(y, ctx), b2_, ctx);
        y = relu(bn(c3_(y, ctx), b3_, ctx));
        Tensor out = concat_channels(left, y);
        return outer_ ? apply_shift(out_shuffle_, out) : out;
    }

    void collect(const std::string& prefix, StateCollector& out) override {
        if (stride_ == 2) {
            out.param(prefix + ".left.dwconv.w", ldw_.w);
            out.batchnorm(prefix + ".left.bn1", lb1_);
            out.param(prefix + ".left.conv.w", lc_.w);
            out.batchnorm(prefix + ".left.bn2", lb2_);
        }
        out.param(prefix + ".conv1.w", c1_.w);
        out.batchnorm(prefix + ".bn1", b1_);
        shuffle_.collect(prefix, out);
        out.param(prefix + ".dwconv.w", dw_.w);
        out.batchnorm(prefix + ".bn2", b2_);
        out.param(prefix + ".conv3.w", c3_.w);
        out.batchnorm(prefix + ".bn3", b3_);
    }
    void shuffles(std::vector<DynamicShuffle*>& out) override { shuffle_.shuffles(out); }

private:
    std::size_t stride_;
    PermutationMatrix out_shuffle_;
    bool outer_;
    Conv ldw_, lc_, c1_, dw_, c3_;
    BatchNormState lb1_, lb2_, b1_, b2_, b3_;
    ShuffleSlot shuffle_;
};

// mid → out widening of a bottleneck, in one of the replaceable forms.
class Expansion {
public:
    Expansion(ExpansionKind kind, std::size_t in, std::size_t out, bool binarize, Rngs& rng, const std::string& name)
        : kind_(kind), in_(in), out_(out), name_(name) {
        if (out < in && kind != ExpansionKind::conv) {
            throw ConfigError("expansion " + to_string(kind) + " cannot replace the reducing convolution " +
                              std::to_string(in) + "->" + std::to_string(out));
        }
        switch (kind) {
            case ExpansionKind::conv:
                conv_ = Conv(in, out, 1, 1, 0, 1, rng.main);
                break;
            case ExpansionKind::duplicate: {
                std::vector<std::size_t> map(out);
                for (std::size_t r = 0; r < out; ++r) map[r] = r % in;
                duplicate_ = SelectionMatrix(in, std::move(map));
                break;
            }
            case ExpansionKind::static_select:
                logits_ = normal_tensor({out, in}, 0.5f, rng.aux, true);
                break;
            case ExpansionKind::dynamic:
                dynamic_ = std::make_unique<DynamicShuffle>(derive_expansion_config(in, out),
                                                            ShuffleOptions{binarize, true}, rng.aux);
                break;
            case ExpansionKind::static_dynamic:
                aux_cfg_ = derive_expansion_config(in, out);
                aux_ = AuxNetState(aux_cfg_, rng.aux);
                static_m_ = stacked_identity(out, in, 0.5f);
                static_m_.set_requires_grad(true);
                break;
        }
    }

    Tensor operator()(const Tensor& x, ForwardContext& ctx) {
        const std::size_t hw = x.dim(2) * x.dim(3);
        switch (kind_) {
            case ExpansionKind::conv: return conv_(x, ctx);
            case ExpansionKind::duplicate: return apply_selection(duplicate_, x);
            case ExpansionKind::static_select: {
                Tensor soft = row_softmax(logits_);
                ctx.regs.push_back(rect_reg(soft));
                return apply_channel_matrix(binarize_ste(soft), x);
            }
            case ExpansionKind::dynamic: return dynamic_->forward(x, ctx, name_);
            case ExpansionKind::static_dynamic: {
                if (ctx.stats) {
                    ctx.stats->macs += out_ * in_ * hw + aux_cfg_.macs();
                    ctx.stats->aux_macs += aux_cfg_.macs();
                }
                ShuffleResult r = static_dynamic_forward(x, static_m_, aux_, aux_cfg_, ctx.mode);
                ctx.regs.push_back(r.reg);
                return r.output;
            }
        }
        return x;
    }

    void collect(const std::string& prefix, StateCollector& out) {
        switch (kind_) {
            case ExpansionKind::conv: out.param(prefix + ".w", conv_.w); break;
            case ExpansionKind::duplicate: break;
            case ExpansionKind::static_select: out.param(prefix + ".logits", logits_, false); break;
            case ExpansionKind::dynamic: dynamic_->collect(prefix + ".dynshuffle", out); break;
            case ExpansionKind::static_dynamic:
                out.param(prefix + ".static", static_m_, false);
                aux_.collect(prefix + ".dynshuffle", out);
                break;
        }
    }
    void shuffles(std::vector<DynamicShuffle*>& out) {
        if (dynamic_) out.push_back(dynamic_.get());
    }

private:
    ExpansionKind kind_;
    std::size_t in_, out_;
    std::string name_;
    Conv conv_;
    SelectionMatrix duplicate_;
    Tensor logits_;
    std::unique_ptr<DynamicShuffle> dynamic_;
    AuxNetConfig aux_cfg_;
    AuxNetState aux_;
    Tensor static_m_;
};

class ExpansionBlock : public Block {
public:
    ExpansionBlock(ExpansionKind kind, std::size_t in, std::size_t out, bool binarize, Rngs rng)
        : rng_(std::move(rng)), expand_(kind, in, out, binarize, rng_, "expand") {}
    Tensor forward(const Tensor& x, ForwardContext& ctx) override { return expand_(x, ctx); }
    void collect(const std::string& prefix, StateCollector& out) override { expand_.collect(prefix, out); }
    void shuffles(std::vector<DynamicShuffle*>& out) override { expand_.shuffles(out); }

private:
    Rngs rng_;
    Expansion expand_;
};

class Bottleneck : public Block {
public:
    Bottleneck(const ModelConfig& cfg, std::size_t in, std::size_t mid, std::size_t stride, Rngs& rng,
               const std::string& name)
        : out_(mid * cfg.expansion_factor),
          c1_(in, mid, 1, 1, 0, 1, rng.main),
          b1_(mid),
          c2_(mid, mid, 3, stride, 1, 1, rng.main),
          b2_(mid),
          expand_(cfg.expansion, mid, mid * cfg.expansion_factor, cfg.binarize, rng, name + ".expand"),
          b3_(mid * cfg.expansion_factor) {
        if (stride != 1 || in != out_) {
            shortcut_ = Conv(in, out_, 1, stride, 0, 1, rng.main);
            bs_ = BatchNormState(out_);
            projected_ = true;
        }
    }

    Tensor forward(const Tensor& x, ForwardContext& ctx) override {
        Tensor y = relu(bn(c1_(x, ctx), b1_, ctx));
        y = relu(bn(c2_(y, ctx), b2_, ctx));
        y = bn(expand_(y, ctx), b3_, ctx);
        Tensor sc = projected_ ? bn(shortcut_(x, ctx), bs_, ctx) : x;
        return relu(add(y, sc));
    }

    void collect(const std::string& prefix, StateCollector& out) override {
        out.param(prefix + ".conv1.w", c1_.w);
        out.batchnorm(prefix + ".bn1", b1_);
        out.param(prefix + ".conv2.w", c2_.w);
        out.batchnorm(prefix + ".bn2", b2_);
        expand_.collect(prefix + ".expand", out);
        out.batchnorm(prefix + ".bn3", b3_);
        if (projected_) {
            out.param(prefix + ".shortcut.w", shortcut_.w);
            out.batchnorm(prefix + ".shortcut.bn", bs_);
        }
    }
    void shuffles(std::vector<DynamicShuffle*>& out) override { expand_.shuffles(out); }

private:
    std::size_t out_;
    Conv c1_;
    BatchNormState b1_;
    Conv c2_;
    BatchNormState b2_;
    Expansion expand_;
    BatchNormState b3_;
    Conv shortcut_;
    BatchNormState bs_;
    bool projected_ = false;
};

class Head : public Block {
public:
    Head(std::size_t in, std::size_t final_channels, std::size_t classes, Rng& rng) {
        std::size_t width = in;
        if (final_channels > 0) {
            conv5_ = Conv(in, final_channels, 1, 1, 0, 1, rng);
            b5_ = BatchNormState(final_channels);
            has_conv5_ = true;
            width = final_channels;
        }
        fc_w_ = fan_in_uniform({width, classes}, width, rng);
        fc_b_ = fan_in_uniform({classes}, width, rng);
    }

    Tensor forward(const Tensor& x, ForwardContext& ctx) override {
        Tensor y = has_conv5_ ? relu(bn(conv5_(x, ctx), b5_, ctx)) : x;
        if (ctx.stats) ctx.stats->macs += fc_w_.numel();
        return affine(global_avg_pool(y), fc_w_, fc_b_);
    }

    void collect(const std::string& prefix, StateCollector& out) override {
        if (has_conv5_) {
            out.param(prefix + ".conv5.w", conv5_.w);
            out.batchnorm(prefix + ".bn5", b5_);
        }
        out.param(prefix + ".fc.w", fc_w_);
        out.param(prefix + ".fc.b", fc_b_);
    }

private:
    bool has_conv5_ = false;
    Conv conv5_;
    BatchNormState b5_;
    Tensor fc_w_, fc_b_;
};

std::string unit_name(std::size_t stage, std::size_t unit) {
    return "stage" + std::to_string(stage + 2) + ".unit" + std::to_string(unit);
}

}  // namespace

// --- model ------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::vector<std::pair<std::string, std::unique_ptr<Block>>> blocks)
    : cfg_(std::move(cfg)), blocks_(std::move(blocks)) {}

Tensor Model::forward(const Tensor& x, ForwardContext& ctx) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
        throw DimensionError("model expects [N x " + std::to_string(cfg_.in_channels) + " x H x W], got " +
                             shape_str(x.shape()));
    }
    Tensor y = x;
    for (auto& [name, block] : blocks_) y = block->forward(y, ctx);
    return y;
}

StateCollector Model::state() {
    StateCollector out;
    for (auto& [name, block] : blocks_) block->collect(name, out);
    return out;
}

std::vector<DynamicShuffle*> Model::dynamic_shuffles() {
    std::vector<DynamicShuffle*> out;
    for (auto& [name, block] : blocks_) block->shuffles(out);
    return out;
}

std::unique_ptr<Model> build_shufflenet(int version, ModelConfig cfg, ShuffleMode mode) {
    if (version != 1 && version != 2) throw ConfigError("ShuffleNet version must be 1 or 2");
    cfg.arch = version == 1 ? Architecture::shufflenet_v1 : Architecture::shufflenet_v2;
    cfg.shuffle = mode;
    cfg.validate();
    Rngs rng{Rng(cfg.seed), Rng(cfg.seed ^ 0x9E3779B97F4A7C15ull)};
    std::vector<std::pair<std::string, std::unique_ptr<Block>>> blocks;
    blocks.emplace_back("stem", std::make_unique<Stem>(cfg.in_channels, cfg.stem_channels, rng.main));
    std::size_t in = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
        const std::size_t w = cfg.stage_widths[s];
        for (std::size_t u = 0; u < cfg.repeats[s]; ++u) {
            const std::size_t stride = u == 0 ? 2 : 1;
            const std::string name = unit_name(s, u);
            if (version == 1) {
                blocks.emplace_back(name, std::make_unique<V1Unit>(cfg, in, w, stride, s == 0 && u == 0, rng, name));
            } else {
                blocks.emplace_back(name, std::make_unique<V2Unit>(cfg, in, w, stride, rng, name));
            }
            in = w;
        }
    }
    blocks.emplace_back("head", std::make_unique<Head>(in, cfg.final_channels, cfg.classes, rng.main));
    return std::make_unique<Model>(std::move(cfg), std::move(blocks));
}

std::unique_ptr<Model> build_resnet_bottleneck_variant(ExpansionKind kind, ModelConfig cfg) {
    cfg.arch = Architecture::resnet;
    cfg.expansion = kind;
    cfg.validate();
    Rngs rng{Rng(cfg.seed), Rng(cfg.seed ^ 0x9E3779B97F4A7C15ull)};
    std::vector<std::pair<std::string, std::unique_ptr<Block>>> blocks;
    blocks.emplace_back("stem", std::make_unique<Stem>(cfg.in_channels, cfg.stem_channels, rng.main));
    std::size_t in = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
        const std::size_t mid = cfg.stage_widths[s];
        for (std::size_t u = 0; u < cfg.repeats[s]; ++u) {
            const std::size_t stride = (u == 0 && s > 0) ? 2 : 1;
            const std::string name = unit_name(s, u);
            blocks.emplace_back(name, std::make_unique<Bottleneck>(cfg, in, mid, stride, rng, name));
            in = mid * cfg.expansion_factor;
        }
    }
    blocks.emplace_back("head", std::make_unique<Head>(in, 0, cfg.classes, rng.main));
    return std::make_unique<Model>(std::move(cfg), std::move(blocks));
}

std::unique_ptr<Block> make_expansion(ExpansionKind kind, std::size_t in, std::size_t out, const ModelConfig& cfg) {
    return std::make_unique<ExpansionBlock>(kind, in, out, cfg.binarize,
                                            Rngs{Rng(cfg.seed), Rng(cfg.seed ^ 0x9E3779B97F4A7C15ull)});
}

std::unique_ptr<Model> build_model(const ModelConfig& cfg) {
    switch (cfg.arch) {
        case Architecture::shufflenet_v1: return build_shufflenet(1, cfg, cfg.shuffle);
        case Architecture::shufflenet_v2: return build_shufflenet(2, cfg, cfg.shuffle);
        case Architecture::resnet: return build_resnet_bottleneck_variant(cfg.expansion, cfg);
    }
    throw ConfigError("unknown architecture");
}

ModelStats count_flops_params(Model& model) {
    const auto& cfg = model.config();
    ModelStats stats;
    ForwardContext ctx;
    ctx.mode = Mode::eval;
    ctx.force_binarize = true;
    ctx.stats = &stats;
    model.forward(Tensor::zeros({1, cfg.in_channels, cfg.input_size, cfg.input_size}), ctx);
    for (const auto& p : model.state().params) {
        stats.params += p.tensor.numel();
        if (p.name.find(".dynshuffle") != std::string::npos) stats.aux_params += p.tensor.numel();
    }
    return stats;
}

}  // namespace dynshuffle
