#include "dynshuffle/aux_config.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/ops.hpp"

#include <cmath>
#include <sstream>

namespace dynshuffle {

namespace {

struct GeneratorRow {
    std::size_t channels;
    std::size_t mlp1_hidden, mlp1_out;
    std::size_t mlp2_hidden, mlp2_out;
    Conv1dSpec conv;
    std::size_t groups;
};

// MLP1 "C×h1, h1×r1²", MLP2 "C×h2, h2×L", Conv1D "1×k, c, s, p".
const GeneratorRow* generator_rows(GeneratorNet net) {
    static const GeneratorRow v1_g3[] = {
        {60, 5, 16, 5, 20, {6, 5, 4, 1}, 3},
        {120, 10, 25, 10, 40, {13, 8, 5, 4}, 3},
        {240, 20, 16, 20, 80, {26, 20, 4, 11}, 3},
    };
    static const GeneratorRow v1_g8[] = {
        {96, 3, 16, 3, 12, {4, 3, 4, 0}, 8},
        {192, 6, 16, 6, 24, {8, 6, 4, 2}, 8},
        {384, 12, 16, 12, 48, {16, 12, 4, 6}, 8},
    };
    static const GeneratorRow v2_1x[] = {
        {58, 3, 36, 7, 60, {20, 10, 6, 7}, 1},
        {116, 7, 36, 15, 120, {40, 20, 6, 17}, 1},
        {232, 14, 36, 29, 234, {39, 40, 6, 36}, 1},
    };
    static const GeneratorRow v2_1_5x[] = {
        {88, 5, 81, 11, 90, {30, 10, 9, 11}, 1},
        {176, 11, 81, 22, 180, {60, 20, 9, 26}, 1},
        {352, 22, 81, 45, 360, {120, 40, 9, 56}, 1},
    };
    switch (net) {
        case GeneratorNet::v1_g3: return v1_g3;
        case GeneratorNet::v1_g8: return v1_g8;
        case GeneratorNet::v2_1x: return v2_1x;
        case GeneratorNet::v2_1_5x: return v2_1_5x;
    }
    return v1_g3;
}

std::size_t exact_sqrt(std::size_t n) {
    auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (r * r != n) throw ConfigError("MLP1 output " + std::to_string(n) + " is not a perfect square");
    return r;
}

AuxNetConfig from_row(const GeneratorRow& row) {
    AuxNetConfig cfg;
    cfg.input_channels = row.channels;
    cfg.groups = row.groups;
    cfg.mlp1_hidden = row.mlp1_hidden;
    cfg.m1_rows = cfg.m1_cols = exact_sqrt(row.mlp1_out);
    cfg.mlp2_hidden = row.mlp2_hidden;
    cfg.mlp2_out = row.mlp2_out;
    cfg.conv = row.conv;
    // M̂² rows are the Conv1D channels and its columns the output positions.
    cfg.m2_rows = row.conv.channels;
    cfg.m2_cols = conv_output_extent(row.mlp2_out, row.conv.kernel, row.conv.stride, row.conv.pad);
    cfg.clip_target = row.channels;
    cfg.input_width = row.channels;
    return cfg;
}

std::size_t ceil_sqrt_divisor(std::size_t n) {
    for (std::size_t d = 1; d <= n; ++d) {
        if (n % d == 0 && d * d >= n) return d;
    }
    return n;
}

std::size_t hidden_width(std::size_t channels) { return std::max<std::size_t>(4, channels / 12); }

Conv1dSpec derived_conv(std::size_t m1_rows, std::size_t m2_rows) {
    Conv1dSpec conv;
    conv.stride = std::max<std::size_t>(2, m1_rows);
    conv.pad = conv.stride / 2;
    conv.kernel = conv.stride + 2 * conv.pad;
    conv.channels = m2_rows;
    return conv;
}

}  // namespace

std::size_t AuxNetConfig::conv_length() const { return conv_output_extent(mlp2_out, conv.kernel, conv.stride, conv.pad); }

void AuxNetConfig::validate() const {
    auto fail = [this](const std::string& why) { throw ConfigError("aux network " + describe() + ": " + why); };
    if (input_channels == 0 || groups == 0 || clip_target == 0 || input_width == 0) fail("zero extent");
    if (m1_rows == 0 || m1_cols == 0 || m2_rows == 0 || m2_cols == 0) fail("zero matrix extent");
    if (mlp1_hidden == 0 || mlp2_hidden == 0 || mlp2_out == 0) fail("zero hidden width");
    if (conv.channels * conv_length() != m2_rows * m2_cols) {
        fail("Conv1D emits " + std::to_string(conv.channels) + "x" + std::to_string(conv_length()) +
             " values, M2 needs " + std::to_string(m2_rows) + "x" + std::to_string(m2_cols));
    }
    if (composed_rows() < clip_target) {
        fail("coverage shortfall: " + std::to_string(m1_rows) + "*" + std::to_string(m2_rows) + "*" +
             std::to_string(groups) + " < " + std::to_string(clip_target));
    }
    if (composed_cols() < input_width) fail("composed matrix has fewer columns than input channels");
    if (input_width > clip_target) fail("a shuffle matrix may not reduce channels");
}

std::size_t AuxNetConfig::param_count() const {
    const std::size_t mlp1 = input_channels * mlp1_hidden + mlp1_hidden + mlp1_hidden * mlp1_out() + mlp1_out();
    const std::size_t mlp2 = input_channels * mlp2_hidden + mlp2_hidden + mlp2_hidden * mlp2_out + mlp2_out;
    const std::size_t conv_w = conv.channels * conv.kernel;
    const std::size_t bn = 2 * conv.channels;
    return mlp1 + mlp2 + conv_w + bn;
}

std::size_t AuxNetConfig::macs() const {
    const std::size_t mlp1 = input_channels * mlp1_hidden + mlp1_hidden * mlp1_out();
    const std::size_t mlp2 = input_channels * mlp2_hidden + mlp2_hidden * mlp2_out;
    const std::size_t conv_macs = conv.channels * conv.kernel * conv_length();
    return mlp1 + mlp2 + conv_macs;
}

std::string AuxNetConfig::describe() const {
    std::ostringstream os;
    os << "C=" << input_channels << " g=" << groups << " M1=" << m1_rows << "x" << m1_cols << " M2=" << m2_rows << "x"
       << m2_cols << " mlp1=" << input_channels << "x" << mlp1_hidden << "x" << mlp1_out() << " mlp2=" << input_channels
       << "x" << mlp2_hidden << "x" << mlp2_out << " conv1d(k=" << conv.kernel << ",c=" << conv.channels
       << ",s=" << conv.stride << ",p=" << conv.pad << ") target=" << clip_target;
    return os.str();
}

std::string to_string(GeneratorNet net) {
    switch (net) {
        case GeneratorNet::v1_g3: return "shufflenet_v1_g3";
        case GeneratorNet::v1_g8: return "shufflenet_v1_g8";
        case GeneratorNet::v2_1x: return "shufflenet_v2_1x";
        case GeneratorNet::v2_1_5x: return "shufflenet_v2_1.5x";
    }
    return "unknown";
}

AuxNetConfig generator_config(GeneratorNet net, int stage) {
    if (stage < 2 || stage > 4) throw ConfigError("dynamic shuffle stages are 2, 3 and 4, got " + std::to_string(stage));
    return from_row(generator_rows(net)[stage - 2]);
}

std::optional<AuxNetConfig> generator_lookup(GeneratorNet net, std::size_t channels) {
    for (int i = 0; i < 3; ++i) {
        if (generator_rows(net)[i].channels == channels) return from_row(generator_rows(net)[i]);
    }
    return std::nullopt;
}

AuxNetConfig derive_aux_config(std::size_t channels, std::size_t groups, bool sharing) {
    if (groups == 0 || channels == 0 || channels % groups != 0) {
        throw ConfigError("dynamic shuffle: " + std::to_string(groups) + " groups do not divide " +
                          std::to_string(channels) + " channels");
    }
    const std::size_t g = sharing ? groups : 1;
    const std::size_t per_group = channels / g;
    AuxNetConfig cfg;
    cfg.input_channels = channels;
    cfg.groups = g;
    cfg.m1_rows = cfg.m1_cols = ceil_sqrt_divisor(per_group);
    cfg.m2_rows = cfg.m2_cols = per_group / cfg.m1_rows;
    cfg.mlp1_hidden = cfg.mlp2_hidden = hidden_width(channels);
    cfg.conv = derived_conv(cfg.m1_rows, cfg.m2_rows);
    cfg.mlp2_out = cfg.conv.stride * cfg.m2_cols;
    cfg.clip_target = channels;
    cfg.input_width = channels;
    cfg.validate();
    return cfg;
}

AuxNetConfig derive_expansion_config(std::size_t in_channels, std::size_t out_channels) {
    if (in_channels == 0 || out_channels < in_channels || out_channels % in_channels != 0) {
        throw ConfigError("expansion " + std::to_string(in_channels) + " -> " + std::to_string(out_channels) +
                          " must widen by an integer factor");
    }
    const std::size_t expand = out_channels / in_channels;
    AuxNetConfig cfg;
    cfg.input_channels = in_channels;
    cfg.groups = 1;
    cfg.m1_cols = ceil_sqrt_divisor(in_channels);
    cfg.m1_rows = cfg.m1_cols * expand;
    cfg.m2_rows = cfg.m2_cols = in_channels / cfg.m1_cols;
    cfg.mlp1_hidden = cfg.mlp2_hidden = hidden_width(in_channels);
    cfg.conv = derived_conv(cfg.m1_rows, cfg.m2_rows);
    cfg.mlp2_out = cfg.conv.stride * cfg.m2_cols;
    cfg.clip_target = out_channels;
    cfg.input_width = in_channels;
    cfg.validate();
    return cfg;
}

}  // namespace dynshuffle
