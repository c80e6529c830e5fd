#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "xcot/config.hpp"
#include "xcot/eval.hpp"
#include "xcot/world.hpp"

namespace xcot::pipeline {

namespace fs = std::filesystem;

/// Progress lines for humans; never part of any artifact.
using Log = std::function<void(const std::string&)>;

/// Dataset files, split manifests and run.json under `out_dir`.
world::DatasetFiles gen_data(const config::RunConfig& cfg, const fs::path& out_dir,
                             const Log& log = {});

/// Loads and verifies a split of a generated dataset directory.
world::Dataset load_verified_split(const fs::path& data_dir, world::Split split);

struct SftOutputs {
  fs::path checkpoint;  // best held-out checkpoint
  fs::path final_checkpoint;
  fs::path metrics;
};

/// Cold-start training (X-CoT, or the direct-generation baseline).
SftOutputs train_sft(const config::RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                     bool baseline = false, const Log& log = {});

struct GrpoOutputs {
  fs::path checkpoint;
  fs::path metrics;
};

/// Reinforcement fine-tuning from a hash-pinned checkpoint.
GrpoOutputs train_grpo(const config::RunConfig& cfg, const fs::path& init_checkpoint,
                       const fs::path& out_dir, const fs::path& rollout_dump = {},
                       const Log& log = {});

/// Evaluates a hash-pinned checkpoint on the bench and writes the report.
/// With a data directory, the bench is first checked against its training
/// manifest and records.
eval::EvalReport evaluate(const config::RunConfig& cfg, const fs::path& checkpoint,
                          const fs::path& report_path, const fs::path& data_dir = {});

/// Loads a checkpoint after verifying it against its run manifest.
policy::Params<float> load_pinned_checkpoint(const fs::path& checkpoint);

}  // namespace xcot::pipeline
