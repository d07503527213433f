#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "minstrel/corpus.hpp"
#include "minstrel/eval.hpp"
#include "minstrel/grpo.hpp"
#include "minstrel/policy.hpp"
#include "minstrel/rewards.hpp"
#include "minstrel/uq2i.hpp"
#include "minstrel/util.hpp"
#include "minstrel/world.hpp"

namespace minstrel {

// Declarative single-file pipeline configuration. Unknown keys anywhere in
// the document are rejected; the output directory is resolved against the
// environment output root (see kOutputRootEnvVar).
struct PipelineConfig {
    WorldConfig world;
    CorpusConfig corpus;
    PredictionMode corpus_mode = PredictionMode::next_behavior;
    int d_model = 32;
    int context_length = 128;
    double init_scale = 0.3;
    Schedule pretrain_schedule = Schedule::curriculum;
    TrainConfig pretrain_train;
    TrainConfig sft_train;
    UQ2IConfig uq2i;
    int n_sft_samples = 400;
    int n_rl_prompts = 120;
    int n_eval_prompts = 60;
    RewardWeights rewards;
    RLConfig rl;
    EvalConfig eval;
    std::vector<double> scaling_budgets = {0.0, 0.25, 0.5, 1.0};
    uint64_t seed = 7;
    std::string output_dir = "run";

    void validate() const;
    json to_json() const;
    static PipelineConfig from_json(const json& j);
    static PipelineConfig load(const std::filesystem::path& path);

    // Hash of the canonical JSON form; identifies a run for resume checks.
    std::string config_hash() const;
    // Root for all artifacts: $MINSTREL_OUT (default ".") / output_dir.
    std::filesystem::path resolve_output_dir() const;
};

inline constexpr const char* kOutputRootEnvVar = "MINSTREL_OUT";

// One pipeline stage's provenance record.
struct ManifestEntry {
    std::string stage;
    std::map<std::string, std::string> inputs;   // file name -> content hash
    std::map<std::string, std::string> outputs;  // file name -> content hash
    uint64_t seed = 0;
    double wall_time_s = 0.0;

    json to_json() const;
    static ManifestEntry from_json(const json& j);
};

struct Manifest {
    std::string config_hash;
    std::vector<ManifestEntry> entries;

    json to_json() const;
    static Manifest from_json(const json& j);
    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path);

    // Entry for a stage, or nullptr.
    const ManifestEntry* find(const std::string& stage) const;
    // Drops the entry for a stage (rerun replaces its record).
    void drop(const std::string& stage);
};

// Stage names in pipeline order.
const std::vector<std::string>& pipeline_stages();

// Runs the requested stages (empty = all) against config. With resume=true,
// stages whose manifest entry and output artifacts are intact are skipped;
// a manifest written under a different config hash is refused. Returns the
// updated manifest.
Manifest run_pipeline(const PipelineConfig& config, const std::vector<std::string>& stages,
                      bool resume);

// Every file under the output directory (manifest itself excluded) must be
// referenced by exactly one manifest entry. Throws ConfigError on violation.
void check_manifest_complete(const Manifest& manifest, const std::filesystem::path& dir);

// Ablation drivers. Each writes a CSV table (and its manifest entry) into
// the run directory and returns the CSV path.
std::filesystem::path ablate_pretrain(const PipelineConfig& config);
std::filesystem::path ablate_context(const PipelineConfig& config);
std::filesystem::path ablate_rewards(const PipelineConfig& config);
std::filesystem::path ablate_training_stage(const PipelineConfig& config);

// Offline report: gathers report.json plus any ablation/scaling tables into
// summary.md with embedded SVG plots. Returns the summary path.
std::filesystem::path write_report(const PipelineConfig& config);

// Entry point used by the binary; returns a process exit code.
int run_cli(int argc, char** argv);

}  // namespace minstrel
