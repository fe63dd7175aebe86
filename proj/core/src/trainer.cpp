#include "dynshuffle/trainer.hpp"

#include "dynshuffle/checkpoint.hpp"
#include "dynshuffle/error.hpp"
#include "dynshuffle/ops.hpp"
#include "dynshuffle/tape.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace dynshuffle {

std::string to_string(LrSchedule s) { return s == LrSchedule::linear ? "linear" : "step"; }

LrSchedule parse_lr_schedule(const std::string& s) {
    if (s == "linear") return LrSchedule::linear;
    if (s == "step") return LrSchedule::step;
    throw ConfigError("unknown lr schedule '" + s + "' (linear, step)");
}

namespace {

// Shortest text that reads back to the same value.
template <typename T>
std::string fmt(T v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

float parse_float(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    float v = 0;
    try {
        v = std::stof(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || !std::isfinite(v)) {
        throw ConfigError("trainer." + key + ": expected a number, got '" + s + "'");
    }
    return v;
}

std::size_t parse_count(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || s.front() == '-') {
        throw ConfigError("trainer." + key + ": expected a non-negative integer, got '" + s + "'");
    }
    return static_cast<std::size_t>(v);
}

bool parse_flag(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("trainer." + key + ": expected true or false, got '" + s + "'");
}

std::size_t count_correct_top(const float* logits, std::size_t classes, std::int32_t label, std::size_t k) {
    const float target = logits[label];
    std::size_t above = 0;
    for (std::size_t c = 0; c < classes; ++c)
        if (logits[c] > target) ++above;
    return above < k ? 1 : 0;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr0 > 0.0f)) throw ConfigError("trainer.lr must be positive");
    if (lambda < 0.0f) throw ConfigError("trainer.lambda must be non-negative");
    if (momentum < 0.0f || momentum >= 1.0f) throw ConfigError("trainer.momentum must lie in [0, 1)");
    if (weight_decay < 0.0f) throw ConfigError("trainer.weight_decay must be non-negative");
    if (!(clip_norm > 0.0f)) throw ConfigError("trainer.clip_norm must be positive");
    if (epochs == 0) throw ConfigError("trainer.epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("trainer.batch_size must be at least 1");
}

std::map<std::string, std::string> TrainConfig::entries() const {
    return {
        {"lr", fmt(lr0)},
        {"momentum", fmt(momentum)},
        {"weight_decay", fmt(weight_decay)},
        {"clip_norm", fmt(clip_norm)},
        {"lambda", fmt(lambda)},
        {"warmup_epochs", std::to_string(warmup_epochs)},
        {"lr_warmup_epochs", std::to_string(lr_warmup_epochs)},
        {"epochs", std::to_string(epochs)},
        {"batch_size", std::to_string(batch_size)},
        {"schedule", to_string(schedule)},
        {"orth_reg", orth_reg ? "true" : "false"},
        {"augment", augment ? "true" : "false"},
        {"shuffle_data", shuffle_data ? "true" : "false"},
        {"prefetch", prefetch ? "true" : "false"},
        {"seed", std::to_string(seed)},
    };
}

TrainConfig TrainConfig::from_entries(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    for (const auto& [k, v] : kv) {
        if (k == "lr") c.lr0 = parse_float(k, v);
        else if (k == "momentum") c.momentum = parse_float(k, v);
        else if (k == "weight_decay") c.weight_decay = parse_float(k, v);
        else if (k == "clip_norm") c.clip_norm = parse_float(k, v);
        else if (k == "lambda") c.lambda = parse_float(k, v);
        else if (k == "warmup_epochs") c.warmup_epochs = parse_count(k, v);
        else if (k == "lr_warmup_epochs") c.lr_warmup_epochs = parse_count(k, v);
        else if (k == "epochs") c.epochs = parse_count(k, v);
        else if (k == "batch_size") c.batch_size = parse_count(k, v);
        else if (k == "schedule") c.schedule = parse_lr_schedule(v);
        else if (k == "orth_reg") c.orth_reg = parse_flag(k, v);
        else if (k == "augment") c.augment = parse_flag(k, v);
        else if (k == "shuffle_data") c.shuffle_data = parse_flag(k, v);
        else if (k == "prefetch") c.prefetch = parse_flag(k, v);
        else if (k == "seed") c.seed = parse_count(k, v);
        else throw ConfigError("unknown key trainer." + k);
    }
    return c;
}

Tensor total_loss(const Tensor& ce, const std::vector<Tensor>& regs, float lambda_eff) {
    if (lambda_eff < 0.0f) throw ConfigError("total_loss: negative trade-off weight");
    Tensor out = ce;
    for (const auto& r : regs) out = add(out, scale(r, lambda_eff));
    return out;
}

void sgd_step(std::span<const NamedParam> params, OptState& state, float lr, float momentum, float weight_decay) {
    if (state.velocity.empty()) {
        for (const auto& p : params) state.velocity.emplace_back(p.tensor.numel(), 0.0f);
    }
    if (state.velocity.size() != params.size()) throw UsageError("sgd_step: optimizer state built for other parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor w = params[i].tensor;
        auto& v = state.velocity[i];
        if (v.size() != w.numel()) throw UsageError("sgd_step: velocity shape mismatch for " + params[i].name);
        const auto g = w.grad();
        auto wv = w.mutable_values();
        const float wd = params[i].decay ? weight_decay : 0.0f;
        for (std::size_t j = 0; j < wv.size(); ++j) {
            const float grad = (g.empty() ? 0.0f : g[j]) + wd * wv[j];
            v[j] = momentum * v[j] + grad;
            wv[j] -= lr * v[j];
        }
    }
    ++state.step;
}

double global_grad_norm(std::span<const NamedParam> params) {
    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    return std::sqrt(sq);
}

double clip_global_norm(std::span<const NamedParam> params, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (norm <= max_norm) return 1.0;
    const double factor = max_norm / norm;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        Tensor t = p.tensor;
        for (float& g : t.mutable_grad()) g = static_cast<float>(g * factor);
    }
    return factor;
}

float lr_schedule(std::size_t step, std::size_t total_steps, float lr0, LrSchedule kind, std::size_t warmup_steps) {
    if (total_steps == 0 || step >= total_steps) {
        throw UsageError("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
    }
    if (step < warmup_steps) return lr0 * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    if (kind == LrSchedule::linear) return static_cast<float>(lr0 * (1.0 - t));
    if (t >= 0.75) return lr0 * 0.01f;
    if (t >= 0.5) return lr0 * 0.1f;
    return lr0;
}

float lambda_warmup(std::size_t epoch, std::size_t warmup_epochs, float lambda) {
    if (epoch < warmup_epochs) return lambda * static_cast<float>(epoch + 1) / static_cast<float>(warmup_epochs);
    return lambda;
}

std::string format_metrics_row(const MetricsRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.8g,%.8g,%.8f,%.8f,%.6f,%.6f,%.6f,%.3f", r.epoch, r.lr, r.lambda_eff, r.train_ce,
                  r.train_reg, r.train_acc, r.test_top1, r.test_top5, r.wall_seconds);
    return buf;
}

Trainer::Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) { cfg_.validate(); }

EpochStats Trainer::train_epoch(const RawDataset& data, const Normalization& norm, std::size_t epoch) {
    BatchPlan plan;
    plan.batch_size = cfg_.batch_size;
    plan.seed = cfg_.seed;
    plan.epoch = epoch;
    plan.shuffle = cfg_.shuffle_data;
    plan.augment.enabled = cfg_.augment;
    plan.augment.flip = data.channels == 3;
    plan.norm = norm;
    BatchStream stream(data, plan, cfg_.prefetch);

    const std::size_t per_epoch = stream.batch_count();
    const std::size_t total = per_epoch * cfg_.epochs;
    const float lambda_eff = lambda_warmup(epoch, cfg_.warmup_epochs, cfg_.lambda);
    StateCollector state = model_.state();

    EpochStats stats;
    std::size_t seen = 0, correct = 0;
    double ce_sum = 0.0, reg_sum = 0.0;
    std::size_t b = 0;
    while (auto batch = stream.next()) {
        const std::size_t step = epoch * per_epoch + b++;
        const float lr = lr_schedule(step, total, cfg_.lr0, cfg_.schedule, cfg_.lr_warmup_epochs * per_epoch);
        Tape tape;
        Tensor loss, ce, logits;
        double reg_value = 0.0;
        {
            Tape::Recording rec(tape);
            ForwardContext ctx;
            ctx.mode = Mode::train;
            logits = model_.forward(batch->images, ctx);
            ce = cross_entropy_mean(logits, batch->labels);
            for (const auto& r : ctx.regs) reg_value += r.item();
            loss = cfg_.orth_reg ? total_loss(ce, ctx.regs, lambda_eff) : ce;
        }
        if (!std::isfinite(loss.item())) throw NumericError("training loss diverged at step " + std::to_string(step));
        for (auto& p : state.params) p.tensor.clear_grad();
        tape.backward(loss);
        clip_global_norm(state.params, cfg_.clip_norm);
        sgd_step(state.params, opt_, lr, cfg_.momentum, cfg_.weight_decay);

        const std::size_t n = batch->labels.size(), classes = logits.dim(1);
        const auto lv = logits.values();
        for (std::size_t i = 0; i < n; ++i) correct += count_correct_top(lv.data() + i * classes, classes, batch->labels[i], 1);
        seen += n;
        ce_sum += ce.item() * static_cast<double>(n);
        reg_sum += reg_value * static_cast<double>(n);
        stats.step_ce.push_back(ce.item());
        stats.step_reg.push_back(reg_value);
        stats.lr_last = lr;
    }
    if (seen > 0) {
        stats.ce = ce_sum / static_cast<double>(seen);
        stats.reg = reg_sum / static_cast<double>(seen);
        stats.accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    }
    return stats;
}

EvalStats evaluate(Model& model, const RawDataset& data, const Normalization& norm, std::size_t batch_size) {
    BatchPlan plan;
    plan.batch_size = batch_size;
    plan.shuffle = false;
    plan.norm = norm;
    BatchStream stream(data, plan, false);
    EvalStats out;
    std::size_t top1 = 0, top5 = 0;
    double ce_sum = 0.0;
    while (auto batch = stream.next()) {
        ForwardContext ctx;
        ctx.mode = Mode::eval;
        ctx.force_binarize = true;
        const Tensor logits = model.forward(batch->images, ctx);
        const std::size_t n = batch->labels.size(), classes = logits.dim(1);
        const auto lv = logits.values();
        for (std::size_t i = 0; i < n; ++i) {
            top1 += count_correct_top(lv.data() + i * classes, classes, batch->labels[i], 1);
            top5 += count_correct_top(lv.data() + i * classes, classes, batch->labels[i], 5);
        }
        ce_sum += cross_entropy_mean(logits, batch->labels).item() * static_cast<double>(n);
        out.count += n;
    }
    if (out.count > 0) {
        out.top1 = static_cast<double>(top1) / static_cast<double>(out.count);
        out.top5 = static_cast<double>(top5) / static_cast<double>(out.count);
        out.ce = ce_sum / static_cast<double>(out.count);
    }
    return out;
}

RunResult run_training(Model& model, const TrainConfig& cfg, const RawDataset& train, const RawDataset& test,
                       const Normalization& norm, const std::filesystem::path& out,
                       const std::function<void(const MetricsRow&)>& on_epoch) {
    std::filesystem::create_directories(out);
    Trainer trainer(model, cfg);
    std::ofstream csv(out / "metrics.csv", std::ios::trunc);
    if (!csv) throw FormatError("cannot write " + (out / "metrics.csv").string());
    csv << kMetricsHeader << "\n";
    RunResult result;
    result.best_top1 = -1.0;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const EpochStats st = trainer.train_epoch(train, norm, epoch);
        const EvalStats ev = evaluate(model, test, norm);
        MetricsRow row;
        row.epoch = epoch + 1;
        row.lr = st.lr_last;
        row.lambda_eff = lambda_warmup(epoch, cfg.warmup_epochs, cfg.lambda);
        row.train_ce = st.ce;
        row.train_reg = st.reg;
        row.train_acc = st.accuracy;
        row.test_top1 = ev.top1;
        row.test_top5 = ev.top5;
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        csv << format_metrics_row(row) << "\n" << std::flush;
        result.rows.push_back(row);
        const std::map<std::string, std::string> info{{"epoch", std::to_string(epoch + 1)},
                                                      {"test_acc_top1", fmt(ev.top1)}};
        if (ev.top1 > result.best_top1) {
            result.best_top1 = ev.top1;
            save_checkpoint(model, out / "best.ckpt", info);
        }
        if (on_epoch) on_epoch(row);
    }
    save_checkpoint(model, out / "final.ckpt",
                    {{"epoch", std::to_string(cfg.epochs)}, {"test_acc_top1", fmt(result.rows.back().test_top1)}});
    return result;
}

}  // namespace dynshuffle
