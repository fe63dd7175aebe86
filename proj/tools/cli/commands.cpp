#include "commands.hpp"

#include <dynshuffle/checkpoint.hpp>
#include <dynshuffle/error.hpp>
#include <dynshuffle/matrix_io.hpp>
#include <dynshuffle/permutation.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

namespace dsh {

namespace fs = std::filesystem;
using namespace dynshuffle;

int run_guarded(const std::function<int()>& body, std::ostream& err) {
    try {
        return body();
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        err << "invalid config: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

}  // namespace

int cmd_train(RunConfig cfg, const fs::path& out, std::ostream& log) {
    cfg.validate();
    LoadedData data = load_data(cfg.data);
    fit_model_to_data(cfg, data.train);
    cfg.validate();
    fs::create_directories(out);
    write_text(out / kResolvedConfigName, cfg.snapshot());

    auto model = build_model(cfg.model);
    log << "training " << to_string(cfg.model.arch) << " (" << to_string(cfg.model.shuffle) << " shuffle) on "
        << data.train.size() << " images for " << cfg.trainer.epochs << " epoch(s)\n";
    log << kMetricsHeader << "\n";
    const RunResult r = run_training(*model, cfg.trainer, data.train, data.test, data.norm, out,
                                     [&log](const MetricsRow& row) { log << format_metrics_row(row) << "\n"; });
    log << "best test top1 " << fixed(r.best_top1, 4) << ", outputs in " << out.string() << "\n";
    return kExitOk;
}

int cmd_eval(RunConfig cfg, bool have_config, const fs::path& checkpoint, const fs::path& out, std::ostream& log) {
    if (!have_config) cfg.model = ModelConfig::from_entries(read_manifest(checkpoint).model);
    LoadedData data = load_data(cfg.data);
    if (have_config) fit_model_to_data(cfg, data.test);
    cfg.validate();
    auto model = build_model(cfg.model);
    load_checkpoint(*model, checkpoint);
    const EvalStats st = evaluate(*model, data.test, data.norm);
    const std::string header = "checkpoint,test_acc_top1,test_acc_top5,test_ce,count";
    const std::string row = checkpoint.string() + "," + fixed(st.top1, 6) + "," + fixed(st.top5, 6) + "," +
                            fixed(st.ce, 6) + "," + std::to_string(st.count);
    log << header << "\n" << row << "\n";
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(out / "eval.csv", header + "\n" + row + "\n");
    }
    return kExitOk;
}

int cmd_gradcheck(const GradCheckOptions& opts, std::ostream& log) {
    const auto entries = run_gradcheck_suite(opts);
    log << "op,method,max_rel_error,status\n";
    std::vector<std::string> failing;
    for (const auto& e : entries) {
        char err[32];
        std::snprintf(err, sizeof err, "%.3e", e.max_rel_error);
        log << e.op << "," << e.method << "," << (e.method == "mask" ? (e.passed ? "exact" : "mismatch") : err) << ","
            << (e.passed ? "pass" : "FAIL") << "\n";
        if (!e.passed) failing.push_back(e.op);
    }
    if (failing.empty()) {
        log << "all " << entries.size() << " checks passed (threshold " << opts.tolerance << ")\n";
        return kExitOk;
    }
    log << "failing ops:";
    for (const auto& f : failing) log << " " << f;
    log << "\n";
    return kExitFailure;
}

int cmd_export_matrices(RunConfig cfg, const fs::path& checkpoint, std::size_t samples, const fs::path& out,
                        std::ostream& log) {
    if (samples == 0) throw ConfigError("export needs at least one sample");
    if (!checkpoint.empty()) cfg.model = ModelConfig::from_entries(read_manifest(checkpoint).model);
    LoadedData data = load_data(cfg.data);
    if (checkpoint.empty()) fit_model_to_data(cfg, data.test);
    cfg.validate();
    auto model = build_model(cfg.model);
    if (!checkpoint.empty()) load_checkpoint(*model, checkpoint);

    const RawDataset subset = data.test.head(samples);
    std::vector<std::size_t> idx(subset.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Batch batch = make_batch(subset, idx, data.norm, {}, nullptr);
    std::vector<ShuffleCapture> captures;
    ForwardContext ctx;
    ctx.mode = Mode::eval;
    ctx.force_binarize = true;
    ctx.capture = &captures;
    model->forward(batch.images, ctx);

    fs::create_directories(out);
    log << "layer,sample,rows,cols,distinct_columns\n";
    for (const auto& cap : captures) {
        for (std::size_t k = 0; k < cap.samples.size(); ++k) {
            const auto& sel = cap.samples[k];
            const Tensor m = sel.dense();
            const std::string stem = cap.layer + ".sample" + std::to_string(k);
            write_matrix_pgm(out / (stem + ".pgm"), m);
            write_matrix_csv(out / (stem + ".csv"), m);
            log << cap.layer << "," << k << "," << sel.rows() << "," << sel.cols() << "," << sel.distinct_columns()
                << "\n";
        }
        const Tensor manual = cap.manual.dense();
        write_matrix_pgm(out / (cap.layer + ".manual.pgm"), manual);
        write_matrix_csv(out / (cap.layer + ".manual.csv"), manual);
    }
    log << captures.size() << " shuffle layer(s) exported to " << out.string() << "\n";
    return kExitOk;
}

std::vector<BenchRow> bench_shuffle(std::size_t reps, std::size_t spatial, std::uint64_t seed) {
    if (reps == 0) throw ConfigError("bench-shuffle: reps must be at least 1");
    if (spatial == 0) throw ConfigError("bench-shuffle: spatial size must be positive");
    Rng rng(seed);
    std::vector<BenchRow> rows;
    using clock = std::chrono::steady_clock;
    auto median_us = [](std::vector<double> t) {
        std::sort(t.begin(), t.end());
        const std::size_t n = t.size();
        return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
    };
    for (auto net : {GeneratorNet::v1_g3, GeneratorNet::v1_g8, GeneratorNet::v2_1x, GeneratorNet::v2_1_5x}) {
        for (int stage = 2; stage <= 4; ++stage) {
            const std::size_t c = generator_config(net, stage).clip_target;
            std::vector<std::size_t> map(c);
            std::iota(map.begin(), map.end(), 0);
            std::shuffle(map.begin(), map.end(), rng);
            const PermutationMatrix p(map);
            const Tensor dense = p.dense();
            const Tensor f = normal_tensor({1, c, spatial, spatial}, 1.0f, rng);

            const Tensor a = apply_channel_matrix(dense, f), b = apply_shift(p, f);
            if (!std::equal(a.values().begin(), a.values().end(), b.values().begin())) {
                throw NumericError("bench-shuffle: matmul and shift outputs differ at " + std::to_string(c) +
                                   " channels");
            }
            std::vector<double> tm, ts;
            for (std::size_t r = 0; r < reps; ++r) {
                auto t0 = clock::now();
                const Tensor y = apply_channel_matrix(dense, f);
                auto t1 = clock::now();
                const Tensor z = apply_shift(p, f);
                auto t2 = clock::now();
                tm.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
                ts.push_back(std::chrono::duration<double, std::micro>(t2 - t1).count());
            }
            rows.push_back({to_string(net), stage, c, spatial, reps, median_us(tm), median_us(ts)});
        }
    }
    return rows;
}

int cmd_bench_shuffle(std::size_t reps, std::size_t spatial, std::ostream& log) {
    log << kBenchHeader << "\n";
    for (const auto& r : bench_shuffle(reps, spatial)) {
        log << r.network << "," << r.stage << "," << r.channels << "," << r.spatial << "," << r.reps << ","
            << fixed(r.matmul_us, 2) << "," << fixed(r.shift_us, 2) << ","
            << fixed(r.shift_us > 0 ? r.matmul_us / r.shift_us : 0.0, 2) << "\n";
    }
    return kExitOk;
}

}  // namespace dsh
