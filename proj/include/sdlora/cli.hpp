#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlora/engine.hpp"
#include "sdlora/taskgen.hpp"

namespace sdlora::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;       // config/file problems
inline constexpr int kExitDivergence = 3;  // training blew up

struct AnalysisConfig {
    bool snapshots = false;
    std::vector<std::pair<int, int>> interpolate;  // 1-based task snapshot pairs
    int points = 11;
};

struct ExperimentConfig {
    std::optional<GenParams> generator;
    std::optional<std::string> dataset_path;
    TrainerConfig trainer;
    AnalysisConfig analysis;
    std::string output_dir = "out";
    std::vector<std::uint64_t> seeds = {7};
    bool per_seed_datasets = true;  // derive a fresh benchmark seed per run seed
};

/// Strict parser: unknown keys are rejected with their JSON-pointer location.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::string& source);
GenParams generator_from_json(const nlohmann::json& j, const std::string& path);

struct CmdOptions {
    std::string config_path;
    std::optional<std::string> out_dir;          // --out / SDLORA_OUT
    std::optional<std::vector<std::uint64_t>> seeds;  // --seeds
    std::optional<int> threads;                  // --threads / SDLORA_THREADS
};

int cmd_run(const CmdOptions& opts, std::ostream& err = std::cerr);
int cmd_theory(const CmdOptions& opts, std::ostream& err = std::cerr);
int cmd_report(const std::string& run_dir, std::ostream& out = std::cout,
               std::ostream& err = std::cerr);

struct GenOptions {
    GenParams params;
    std::string out_path;
};
int cmd_gen(const GenOptions& opts, std::ostream& err = std::cerr);

struct InterpOptions {
    std::string record_path;   // record.json with snapshots
    std::string dataset_path;  // task container to evaluate on
    int from_task = 1;         // 1-based snapshot indices
    int to_task = 2;
    int points = 11;
    std::vector<int> eval_tasks;  // 1-based; empty = all tasks up to `to`
    std::string out_csv;
};
int cmd_interp(const InterpOptions& opts, std::ostream& err = std::cerr);

/// Zero-pads the head of whichever snapshot has fewer class rows so both
/// share the final architecture.
void pad_heads_to_match(StateSnapshot& a, StateSnapshot& b);

} // namespace sdlora::cli
