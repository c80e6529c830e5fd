#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xcot/eval.hpp"
#include "xcot/grpo.hpp"
#include "xcot/policy.hpp"
#include "xcot/rewards.hpp"
#include "xcot/sft.hpp"

namespace xcot::config {

inline constexpr std::string_view kToolVersion = "0.1.0";

struct WorldSection {
  std::size_t n_train = 20000;
  std::size_t n_eval = 500;
  std::uint64_t seed = 1;
};

struct EvalSection {
  std::uint64_t bench_seed = 4242;
  eval::DecodeOptions decode;
};

/// Everything a pipeline run needs. Thread counts are runtime options and
/// are not part of the document because they never change results.
struct RunConfig {
  std::string profile = "quick";
  WorldSection world;
  policy::PolicyConfig policy;
  sft::SftConfig sft;
  grpo::GrpoConfig grpo;
  rewards::RewardWeights rewards;
  EvalSection eval;

  void check() const;
  void set_threads(unsigned threads);
};

/// Named presets: "quick" and "paper-analog".
RunConfig make_profile(std::string_view name);

nlohmann::json to_json(const RunConfig& c);

/// Expands the document's "profile" (default "quick") and overlays the
/// remaining keys. Unknown keys and type changes throw ConfigError.
RunConfig from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and as a bare string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Reads an optional config file, applies overrides, validates.
RunConfig resolve(const std::filesystem::path* file, std::span<const std::string> overrides,
                  std::string_view profile = {});

nlohmann::json read_json(const std::filesystem::path& path);
/// Writes `j` with a trailing newline; throws IoError.
void write_json(const std::filesystem::path& path, const nlohmann::json& j, int indent = 2);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Provenance record written next to every produced artifact set.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  nlohmann::json inputs = nlohmann::json::object();   // name -> {path, hash}
  nlohmann::json outputs = nlohmann::json::object();  // name -> {path, hash}
  nlohmann::json lineage = nlohmann::json::array();   // manifests this run depends on

  void add_input(const std::string& name, const std::filesystem::path& path);
  void add_output(const std::string& name, const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

inline constexpr std::string_view kManifestName = "run.json";

/// Checks `file` against the output entry recorded in the run manifest of
/// its directory. Throws HashMismatch or IoError. Returns that manifest.
nlohmann::json verify_pinned(const std::filesystem::path& file);

}  // namespace xcot::config
