#pragma once

#include "gradcheck_suite.hpp"
#include "run_config.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>

namespace dsh {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;  // bad config, manifest mismatch, corrupt checkpoint
inline constexpr int kExitData = 3;

// Runs body, mapping library exceptions onto exit codes with a one-line
// message on err.
int run_guarded(const std::function<int()>& body, std::ostream& err);

inline constexpr const char* kResolvedConfigName = "resolved_config.txt";

// Writes metrics.csv, final.ckpt, best.ckpt and resolved_config.txt to out.
int cmd_train(RunConfig cfg, const std::filesystem::path& out, std::ostream& log);

// Without a config the model comes from the checkpoint manifest. Prints a
// two-line CSV (header, row) and, with out set, writes it to out/eval.csv.
int cmd_eval(RunConfig cfg, bool have_config, const std::filesystem::path& checkpoint,
             const std::filesystem::path& out, std::ostream& log);

int cmd_gradcheck(const GradCheckOptions& opts, std::ostream& log);

// For each shuffle layer and each of the first `samples` test images writes
// <layer>.sample<k>.{pgm,csv}, plus <layer>.manual.{pgm,csv}. An empty
// checkpoint exports the freshly initialized model.
int cmd_export_matrices(RunConfig cfg, const std::filesystem::path& checkpoint, std::size_t samples,
                        const std::filesystem::path& out, std::ostream& log);

struct BenchRow {
    std::string network;
    int stage = 0;
    std::size_t channels = 0;
    std::size_t spatial = 0;
    std::size_t reps = 0;
    double matmul_us = 0.0;  // medians
    double shift_us = 0.0;
};

inline constexpr const char* kBenchHeader = "network,stage,channels,spatial,reps,matmul_median_us,shift_median_us,speedup";

// Times the dense channel-matrix product against the index gather for every
// generator shuffle width. Throws NumericError if the two disagree anywhere.
std::vector<BenchRow> bench_shuffle(std::size_t reps, std::size_t spatial, std::uint64_t seed = 1);
int cmd_bench_shuffle(std::size_t reps, std::size_t spatial, std::ostream& log);

}  // namespace dsh
